//! `fcdrn` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure. Every run writes a reproducibility stanza (seed, config
//! hash, version) into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fcdrn_core::analysis;
use fcdrn_core::builder::{self, BuildConfig, ModelGraph, VariantFamily};
use fcdrn_core::data::{self, Dataset, SyntheticSpec, VOID_INDEX};
use fcdrn_core::error::{Error, Result};
use fcdrn_core::metrics::ConfusionMatrix;
use fcdrn_core::tensor::Scalar;
use fcdrn_core::train::{self, EpochRow, ResumeState, TrainConfig};

#[derive(Parser)]
#[command(name = "fcdrn", version, about = "Densely connected residual segmentation networks: train, inspect, compress")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (optionally resuming from a checkpoint).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and emit the per-class report.
    Eval(EvalArgs),
    /// Replace the last two downsampling transforms with dilated convs.
    Surgery(SurgeryArgs),
    /// Drop each stage in turn and report the mean-IoU deltas.
    Ablate(AblateArgs),
    /// Per-block weight-norm profile of a checkpoint.
    Norms(NormsArgs),
    /// Remove low-norm residual blocks and re-evaluate.
    Compress(CompressArgs),
    /// Train the reduced architecture from scratch (with/without weight decay).
    RetrainReduced(RetrainArgs),
    /// Count trainable parameters of a variant or checkpoint.
    CountParams(CountArgs),
    /// Receptive field and downsampling factor per stage.
    Rf(RfArgs),
    /// Generate a synthetic dataset on disk.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct BuildFlags {
    /// Variant family: P, S, D (P-D/S-D only via surgery or --from-scratch-finetuned).
    #[arg(long, default_value = "P")]
    variant: String,
    /// Width multiplier applied to the channel plan (min width 4).
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Residual blocks per stage.
    #[arg(long, default_value_t = 7)]
    blocks_per_stage: usize,
    /// Output classes (defaults to the dataset's class count).
    #[arg(long)]
    classes: Option<usize>,
    /// Kernel of the D family's upsampling-path conv (1 or 3).
    #[arg(long, default_value_t = 1)]
    d_up_kernel: usize,
    /// Realize D down slots as three-conv multi-grid stacks.
    #[arg(long, default_value_t = false)]
    d_multigrid: bool,
    /// Use (r,2r,4r) rates inside multi-grid stacks instead of (r,r,r).
    #[arg(long, default_value_t = false)]
    multigrid_expanding: bool,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.995)]
    lr_decay: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Square crop size; 0 trains on full images.
    #[arg(long, default_value_t = 324)]
    crop: usize,
    #[arg(long, default_value_t = 200)]
    patience: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = false)]
    soft_targets: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    build: BuildFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Dataset: `synth:<spec>` or `camvid:<root>`.
    #[arg(long)]
    data: String,
    /// Validation dataset override (same syntax as --data).
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Resume training from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Flat key=value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    /// Allow training a P-D / S-D architecture from scratch.
    #[arg(long, default_value_t = false)]
    from_scratch_finetuned: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct SurgeryArgs {
    #[arg(long)]
    from: PathBuf,
    /// Dilation rates for the two replaced slots.
    #[arg(long, default_value = "4,8")]
    rates: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct NormsArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    from: PathBuf,
    /// Norm threshold; blocks 2+ below it are removed.
    #[arg(long)]
    threshold: f64,
    /// Optional per-stage overrides, e.g. `3:0.02,5:0.1`.
    #[arg(long)]
    stage_thresholds: Option<String>,
    /// Re-evaluate before/after on this dataset.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct RetrainArgs {
    /// Compressed checkpoint providing the reduced architecture.
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    data: String,
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Validation mean IoU of the uncompressed reference model.
    #[arg(long)]
    reference_miou: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    build: BuildFlags,
    /// Count a checkpoint instead of a fresh build.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Also print the per-block listing.
    #[arg(long, default_value_t = false)]
    describe: bool,
    /// Count the post-surgery (P-D / S-D) version of the variant.
    #[arg(long, default_value_t = false)]
    surgered: bool,
}

#[derive(Args)]
struct RfArgs {
    #[command(flatten)]
    build: BuildFlags,
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec, e.g. `n=200,size=64,classes=5,seed=7`.
    #[arg(long, default_value = "")]
    spec: String,
    /// Comma-separated split sizes, e.g. `train:200,val:50,test:50`.
    #[arg(long, default_value = "train:200,val:50")]
    splits: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success codes
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => dispatch_train(a),
        Cmd::Eval(a) => dispatch_dtype!(a.dtype, run_eval, a),
        Cmd::Surgery(a) => dispatch_dtype!(a.dtype, run_surgery, a),
        Cmd::Ablate(a) => dispatch_dtype!(a.dtype, run_ablate, a),
        Cmd::Norms(a) => dispatch_dtype!(a.dtype, run_norms, a),
        Cmd::Compress(a) => dispatch_dtype!(a.dtype, run_compress, a),
        Cmd::RetrainReduced(a) => dispatch_dtype!(a.dtype, run_retrain, a),
        Cmd::CountParams(a) => run_count(a),
        Cmd::Rf(a) => run_rf(a),
        Cmd::Synth(a) => run_synth(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

macro_rules! dispatch_dtype {
    ($dtype:expr, $f:ident, $args:expr) => {
        match $dtype {
            Dtype::F32 => $f::<f32>($args),
            Dtype::F64 => $f::<f64>($args),
        }
    };
}
use dispatch_dtype;

fn dispatch_train(a: TrainArgs) -> Result<()> {
    match a.dtype {
        Dtype::F32 => run_train::<f32>(a),
        Dtype::F64 => run_train::<f64>(a),
    }
}

// ── shared helpers ──────────────────────────────────────────────────

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_run_info(out: &Path, seed: u64, config_desc: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    let stanza = format!(
        "version = {}\nseed = {}\nconfig_hash = {:016x}\n",
        env!("CARGO_PKG_VERSION"),
        seed,
        fnv1a64(config_desc.as_bytes())
    );
    fs::write(out.join("run_info.txt"), stanza)?;
    Ok(())
}

/// Dataset spec: `synth:<kvspec>` or `camvid:<root>[:split]`.
struct LoadedData {
    set: Dataset,
    classes: usize,
    void: Option<u32>,
}

fn load_data(spec: &str, default_split: &str) -> Result<LoadedData> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let s = SyntheticSpec::parse(rest)?;
        Ok(LoadedData { set: data::generate_synthetic(&s)?, classes: s.classes, void: None })
    } else if spec == "synth" {
        let s = SyntheticSpec::default();
        Ok(LoadedData { set: data::generate_synthetic(&s)?, classes: s.classes, void: None })
    } else if let Some(rest) = spec.strip_prefix("camvid:") {
        let (root, split) = match rest.rsplit_once(':') {
            Some((r, s)) if !s.contains(std::path::MAIN_SEPARATOR) && !s.is_empty() => (r, s),
            _ => (rest, default_split),
        };
        Ok(LoadedData {
            set: data::load_camvid_format(Path::new(root), split)?,
            classes: 11,
            void: Some(VOID_INDEX),
        })
    } else {
        Err(Error::invalid(format!("dataset spec {spec:?} must start with synth: or camvid:")))
    }
}

/// Train/val pair: synth specs derive the held-out split from the same
/// seed family (seed + 1) with a quarter of the samples.
fn load_train_val(spec: &str, val_spec: Option<&str>) -> Result<(LoadedData, LoadedData)> {
    let train = load_data(spec, "train")?;
    let val = match val_spec {
        Some(v) => load_data(v, "val")?,
        None => {
            if let Some(rest) = spec.strip_prefix("synth:") {
                let mut s = SyntheticSpec::parse(rest)?;
                s.seed += 1;
                s.count = (s.count / 4).max(1);
                LoadedData { set: data::generate_synthetic(&s)?, classes: s.classes, void: None }
            } else if spec == "synth" {
                let mut s = SyntheticSpec::default();
                s.seed += 1;
                s.count = (s.count / 4).max(1);
                LoadedData { set: data::generate_synthetic(&s)?, classes: s.classes, void: None }
            } else {
                load_data(spec, "val")?
            }
        }
    };
    Ok((train, val))
}

fn build_config_from_flags(b: &BuildFlags, classes: usize, dropout: f64) -> Result<BuildConfig> {
    let mut cfg = BuildConfig::with_family(VariantFamily::parse(&b.variant)?);
    cfg.scale = b.scale;
    cfg.set_blocks_per_stage(b.blocks_per_stage);
    cfg.classes = b.classes.unwrap_or(classes);
    cfg.dropout = dropout;
    cfg.d_up_kernel = b.d_up_kernel;
    cfg.d_multigrid = b.d_multigrid;
    Ok(cfg)
}

fn train_config_from_flags(t: &TrainFlags, seed: u64, void: Option<u32>) -> TrainConfig {
    TrainConfig {
        lr0: t.lr,
        lr_decay: t.lr_decay,
        weight_decay: t.weight_decay,
        dropout: t.dropout,
        crop: t.crop,
        patience: t.patience,
        soft_targets: t.soft_targets,
        batch_size: t.batch,
        max_epochs: t.epochs,
        seed,
        void_index: void,
        ..Default::default()
    }
}

fn parse_rates(s: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::invalid(format!("rates {s:?} must be two comma-separated integers")));
    }
    let a = parts[0].trim().parse().map_err(|e| Error::invalid(format!("rates: {e}")))?;
    let b = parts[1].trim().parse().map_err(|e| Error::invalid(format!("rates: {e}")))?;
    Ok([a, b])
}

fn write_metrics_report(out: &Path, name: &str, cm: &ConfusionMatrix, classes: usize) -> Result<()> {
    let class_names: Vec<String> = if classes == 11 {
        data::CAMVID_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|c| format!("class{c}")).collect()
    };
    fs::write(out.join(name), cm.report_csv(&class_names))?;
    Ok(())
}

// ── commands ────────────────────────────────────────────────────────

fn run_train<S: Scalar>(a: TrainArgs) -> Result<()> {
    let (train_data, val_data) = load_train_val(&a.data, a.val_data.as_deref())?;
    let mut tcfg = train_config_from_flags(&a.train, a.seed, train_data.void);
    let mut bcfg = build_config_from_flags(&a.build, train_data.classes, a.train.dropout)?;
    if let Some(cfg_path) = &a.config {
        let map = data::parse_kv(&fs::read_to_string(cfg_path)?)?;
        let left = bcfg.apply_kv(&map)?;
        let sub: std::collections::BTreeMap<String, String> =
            left.iter().map(|k| (k.clone(), map[k].clone())).collect();
        let unknown = tcfg.apply_kv(&sub)?;
        if !unknown.is_empty() {
            return Err(Error::invalid(format!("unknown config keys: {unknown:?}")));
        }
    }

    let (model, resume) = match &a.resume {
        Some(ckpt) => {
            let (m, meta) = data::load_checkpoint::<S>(ckpt)?;
            let resume = ResumeState { start_epoch: meta.epoch + 1, rng_state: meta.rng_state.clone() };
            (m, Some(resume))
        }
        None => {
            if bcfg.family.is_surgered() && !a.from_scratch_finetuned {
                return Err(Error::invalid(format!(
                    "variant {} is normally produced by `surgery` on a trained P or S model; \
                     pass --from-scratch-finetuned to train it from random init anyway",
                    bcfg.family
                )));
            }
            let m = if bcfg.family.is_surgered() {
                builder::build_raw::<S>(&bcfg, a.seed)?
            } else {
                builder::build::<S>(&bcfg, a.seed)?
            };
            (m, None)
        }
    };

    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, a.seed, &format!("{bcfg:?}|{tcfg:?}|{}", a.data))?;

    let mut rows: Vec<String> = vec![EpochRow::CSV_HEADER.to_string()];
    let outcome = train::train(
        &model,
        &train_data.set,
        &val_data.set,
        &tcfg,
        resume,
        Some(&mut |row: &EpochRow| {
            println!(
                "epoch {:>4}  lr {:.3e}  loss {:.4}  val mIoU {:.4}  acc {:.4}  ({:.1}s)",
                row.epoch, row.lr, row.train_loss, row.val_miou, row.val_acc, row.seconds
            );
            rows.push(row.csv());
            true
        }),
    )?;
    fs::write(a.out.join("train_log.csv"), rows.join("\n") + "\n")?;

    data::save_checkpoint(
        &model,
        outcome.best_epoch,
        outcome.best_val_miou,
        Some(outcome.rng_state.clone()),
        &a.out.join("best"),
    )?;
    let cm = train::evaluate(&model, &val_data.set, tcfg.void_index)?;
    write_metrics_report(&a.out, "val_metrics.csv", &cm, model.config.classes)?;
    println!(
        "best epoch {} val mIoU {:.4}{}",
        outcome.best_epoch,
        outcome.best_val_miou,
        outcome.aborted.as_deref().map(|m| format!("  [aborted: {m}]")).unwrap_or_default()
    );
    if let Some(msg) = outcome.aborted {
        return Err(Error::NonFinite(msg));
    }
    Ok(())
}

fn run_eval<S: Scalar>(a: EvalArgs) -> Result<()> {
    let (model, meta) = data::load_checkpoint::<S>(&a.from)?;
    let d = load_data(&a.data, "val")?;
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, 0, &format!("{:?}|{}", meta.arch, a.data))?;
    let cm = train::evaluate(&model, &d.set, d.void)?;
    write_metrics_report(&a.out, "metrics.csv", &cm, model.config.classes)?;
    println!("mIoU {:.4}  accuracy {:.4}", cm.miou()?, cm.global_accuracy()?);
    Ok(())
}

fn run_surgery<S: Scalar>(a: SurgeryArgs) -> Result<()> {
    let rates = parse_rates(&a.rates)?;
    let (model, meta) = data::load_checkpoint::<S>(&a.from)?;
    let surgered = model.surgery_to_dilated(rates)?;
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, 0, &format!("surgery {:?} rates {rates:?}", meta.arch.family))?;
    data::save_checkpoint(&surgered, meta.epoch, meta.val_miou, meta.rng_state.clone(), &a.out.join("best"))?;
    println!(
        "{} -> {}  params {}",
        meta.arch.family,
        surgered.config.family,
        surgered.count_parameters()
    );
    Ok(())
}

fn run_ablate<S: Scalar>(a: AblateArgs) -> Result<()> {
    let (model, _) = data::load_checkpoint::<S>(&a.from)?;
    let d = load_data(&a.data, "val")?;
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, 0, &format!("ablate {}", a.data))?;
    let report = analysis::ablation_sweep(&model, &d.set, d.void)?;
    fs::write(a.out.join("ablation.csv"), report.csv())?;
    fs::write(a.out.join("ablation.svg"), report.svg())?;
    for row in &report.rows {
        match row.dropped_stage {
            None => println!("baseline      mIoU {:.4}", row.val_miou),
            Some(s) => println!("drop R{s}: mIoU {:.4}  delta {:+.4}", row.val_miou, row.delta),
        }
    }
    Ok(())
}

fn run_norms<S: Scalar>(a: NormsArgs) -> Result<()> {
    let (model, _) = data::load_checkpoint::<S>(&a.from)?;
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, 0, "norms")?;
    let report = analysis::weight_norms(&model);
    fs::write(a.out.join("weight_norms.csv"), report.csv())?;
    fs::write(a.out.join("weight_norms.svg"), report.svg())?;
    println!("{} residual convs profiled", report.entries.len());
    Ok(())
}

fn parse_stage_thresholds(s: &str, default: f64) -> Result<[f64; builder::NUM_STAGES]> {
    let mut out = [default; builder::NUM_STAGES];
    for pair in s.split(',') {
        let (k, v) = pair
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("stage threshold {pair:?} wants stage:value")))?;
        let stage: usize = k.trim().parse().map_err(|e| Error::invalid(format!("stage: {e}")))?;
        if stage == 0 || stage > builder::NUM_STAGES {
            return Err(Error::invalid(format!("stage {stage} outside 1..={}", builder::NUM_STAGES)));
        }
        out[stage - 1] = v.trim().parse().map_err(|e| Error::invalid(format!("threshold: {e}")))?;
    }
    Ok(out)
}

fn run_compress<S: Scalar>(a: CompressArgs) -> Result<()> {
    let (model, meta) = data::load_checkpoint::<S>(&a.from)?;
    let per_stage = match &a.stage_thresholds {
        Some(s) => Some(parse_stage_thresholds(s, a.threshold)?),
        None => None,
    };
    let (compressed, mut result) = analysis::compress(&model, a.threshold, per_stage.as_ref())?;
    if let Some(dspec) = &a.data {
        let d = load_data(dspec, "val")?;
        result.val_miou_before = Some(train::evaluate(&model, &d.set, d.void)?.miou()?);
        result.val_miou_after = Some(train::evaluate(&compressed, &d.set, d.void)?.miou()?);
    }
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, 0, &format!("compress threshold {}", a.threshold))?;
    let label = format!("FC-DRN-{}", compressed.config.family);
    fs::write(a.out.join("compression.csv"), result.csv(&label))?;
    data::save_checkpoint(
        &compressed,
        meta.epoch,
        result.val_miou_after.unwrap_or(meta.val_miou),
        meta.rng_state.clone(),
        &a.out.join("best"),
    )?;
    println!(
        "removed {} blocks  rate {:.4}  params {} -> {}",
        result.removed.len(),
        result.rate,
        result.params_before,
        result.params_after
    );
    Ok(())
}

fn run_retrain<S: Scalar>(a: RetrainArgs) -> Result<()> {
    let (compressed, meta) = data::load_checkpoint::<S>(&a.from)?;
    let (train_data, val_data) = load_train_val(&a.data, a.val_data.as_deref())?;
    let tcfg = train_config_from_flags(&a.train, a.seed, train_data.void);
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, a.seed, &format!("retrain-reduced {:?}", meta.arch))?;

    let compressed_miou = train::evaluate(&compressed, &val_data.set, train_data.void)?.miou()?;
    let reference = a.reference_miou.unwrap_or(meta.val_miou);
    // rate vs the uncompressed layout of the same family
    let mut full_arch = meta.arch.clone();
    full_arch.set_blocks_per_stage(*full_arch.blocks_per_stage.iter().max().unwrap_or(&7));
    let full_params = builder::build_raw::<S>(&full_arch, 0)?.count_parameters();
    let rate = full_params as f64 / compressed.count_parameters() as f64;

    let (comparison, retrained) = analysis::retrain_reduced::<S>(
        &meta.arch,
        &train_data.set,
        &val_data.set,
        &tcfg,
        compressed_miou,
        rate,
        reference,
    )?;
    fs::write(a.out.join("retrain_comparison.csv"), comparison.csv())?;
    data::save_checkpoint(&retrained, tcfg.max_epochs, comparison.rows[1].val_miou, None, &a.out.join("best"))?;
    for r in &comparison.rows {
        println!("{:<28} mIoU {:.4}  delta {:+.4}  rate {:.3}", r.label, r.val_miou, r.delta_vs_reference, r.compression_rate);
    }
    Ok(())
}

fn run_count(a: CountArgs) -> Result<()> {
    let (model, label): (ModelGraph<f32>, String) = match &a.from {
        Some(ckpt) => {
            let (m, meta) = data::load_checkpoint::<f32>(ckpt)?;
            (m, format!("FC-DRN-{}", meta.arch.family))
        }
        None => {
            let cfg = build_config_from_flags(&a.build, 11, 0.2)?;
            let m = builder::build::<f32>(&cfg, 0)?;
            let m = if a.surgered { m.surgery_to_dilated(cfg.surgery_rates)? } else { m };
            let label = format!("FC-DRN-{}", m.config.family);
            (m, label)
        }
    };
    println!("{label}  scale {}  params {}", model.config.scale, model.count_parameters());
    if a.describe {
        print!("{}", model.describe());
    }
    Ok(())
}

fn run_rf(a: RfArgs) -> Result<()> {
    let model: ModelGraph<f32> = match &a.from {
        Some(ckpt) => data::load_checkpoint::<f32>(ckpt)?.0,
        None => {
            let cfg = build_config_from_flags(&a.build, 11, 0.2)?;
            builder::build::<f32>(&cfg, 0)?
        }
    };
    let profile = model.receptive_field_profile();
    let mut csv = String::from("stage,receptive_field,downsample\n");
    for row in &profile {
        println!("R{}: rf {:>6}  downsample {:.3}", row.stage, row.rf, row.downsample);
        csv.push_str(&format!("{},{},{}\n", row.stage, row.rf, row.downsample));
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_run_info(out, 0, "rf")?;
        fs::write(out.join("receptive_field.csv"), csv)?;
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let base = SyntheticSpec::parse(&a.spec)?;
    fs::create_dir_all(&a.out)?;
    write_run_info(&a.out, base.seed, &format!("synth {:?} splits {}", base, a.splits))?;
    for (i, part) in a.splits.split(',').enumerate() {
        let (name, count) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("split {part:?} wants name:count")))?;
        let mut spec = base.clone();
        spec.count = count.trim().parse().map_err(|e| Error::invalid(format!("split count: {e}")))?;
        spec.seed = base.seed + i as u64;
        let set = data::generate_synthetic(&spec)?;
        data::save_camvid_format(&set, &a.out, name.trim())?;
        println!("{}: {} samples at {}x{}", name.trim(), set.len(), spec.canvas, spec.canvas);
    }
    Ok(())
}
