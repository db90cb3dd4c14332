//! Model graph construction for every variant, forward inference over
//! the dense skip topology, dilation surgery, parameter accounting, and
//! the receptive-field calculator.
//!
//! Nine residual stages sit between an initial downsampling block and a
//! final upsampling block. The input to each stage is a 1x1-mixed
//! channel concatenation of transformed outputs of every earlier stage
//! and the IDB; each concatenation input owns an independent cascade of
//! transformation steps, one step per resolution level crossed (plus a
//! 1x1 adapter when no level is crossed).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ConvLayer, Fub, Fwd, Idb, MixingBlock, MultigridBlock, ParamFn, ParamKind, ResNetStage, Slot,
    TransformStep,
};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, DropoutKind};
use crate::tensor::{Scalar, Tensor};

/// Transformation family occupying the downsampling slots.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum VariantFamily {
    /// Max pooling down, upsample+conv up.
    P,
    /// Strided convolution down, upsample+conv up.
    S,
    /// Dilated convolutions everywhere; resolution never drops below
    /// the post-IDB level.
    D,
    /// P finetuned with dilations in the last two down slots.
    PD,
    /// S finetuned with dilations in the last two down slots.
    SD,
}

impl VariantFamily {
    pub fn is_surgered(self) -> bool {
        matches!(self, VariantFamily::PD | VariantFamily::SD)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantFamily::P => "P",
            VariantFamily::S => "S",
            VariantFamily::D => "D",
            VariantFamily::PD => "P-D",
            VariantFamily::SD => "S-D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_uppercase().as_str() {
            "P" => Ok(VariantFamily::P),
            "S" => Ok(VariantFamily::S),
            "D" => Ok(VariantFamily::D),
            "P-D" | "PD" => Ok(VariantFamily::PD),
            "S-D" | "SD" => Ok(VariantFamily::SD),
            other => Err(Error::invalid(format!("unknown variant family {other:?}"))),
        }
    }
}

impl std::fmt::Display for VariantFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const NUM_STAGES: usize = 9;
/// Destination id of the final concatenation before the FUB.
pub const FINAL_DEST: usize = NUM_STAGES + 1;

const IDB_WIDTH: usize = 50;
const FUB_WIDTH: usize = 50;
const STAGE_WIDTHS: [usize; NUM_STAGES] = [30, 40, 40, 40, 50, 40, 40, 40, 30];
/// Output width of the mixing block feeding stage `dest` (and the FUB).
const MIXING_WIDTHS: [(usize, usize); 9] = [
    (2, 80),
    (3, 120),
    (4, 160),
    (5, 200),
    (6, 200),
    (7, 240),
    (8, 280),
    (9, 320),
    (10, 350),
];

/// Resolution level of each feature source (0 = IDB, 1..=9 = stages).
/// Level 0 is the input, level 1 the post-IDB resolution.
const SOURCE_LEVELS: [usize; 10] = [1, 1, 2, 3, 4, 5, 4, 3, 2, 1];

/// Skip topology: for each destination, the ordered concatenation
/// sources with their cascade lengths. Length 0 entries still receive a
/// same-resolution 1x1 adapter so every variant applies the same number
/// of transformations.
pub const TOPOLOGY: [(usize, &[(usize, usize)]); 9] = [
    (2, &[(0, 1), (1, 1)]),
    (3, &[(0, 2), (1, 2), (2, 1)]),
    (4, &[(0, 3), (1, 3), (2, 2), (3, 1)]),
    (5, &[(0, 4), (1, 4), (2, 3), (3, 2), (4, 1)]),
    (6, &[(0, 3), (1, 3), (2, 2), (3, 1), (4, 0), (5, 1)]),
    (7, &[(0, 2), (1, 2), (2, 1), (3, 0), (4, 1), (5, 2), (6, 1)]),
    (8, &[(0, 1), (1, 1), (2, 0), (3, 1), (4, 2), (5, 3), (6, 2), (7, 1)]),
    (9, &[(0, 0), (1, 0), (2, 1), (3, 2), (4, 3), (5, 4), (6, 3), (7, 2), (8, 1)]),
    (10, &[(0, 0), (1, 0), (2, 1), (3, 2), (4, 3), (5, 4), (6, 3), (7, 2), (8, 1), (9, 0)]),
];

pub fn dest_level(dest: usize) -> usize {
    if dest == FINAL_DEST {
        1
    } else {
        SOURCE_LEVELS[dest]
    }
}

/// Channel widths of the plan, scaled by a positive multiplier with a
/// floor of four channels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub scale: f64,
    pub classes: usize,
}

impl ChannelPlan {
    pub fn new(scale: f64, classes: usize) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("scale {scale} must be positive")));
        }
        if classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        Ok(ChannelPlan { scale, classes })
    }

    fn scaled(&self, w: usize) -> usize {
        ((w as f64 * self.scale).round() as usize).max(4)
    }

    pub fn idb_width(&self) -> usize {
        self.scaled(IDB_WIDTH)
    }

    pub fn fub_width(&self) -> usize {
        self.scaled(FUB_WIDTH)
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.scaled(STAGE_WIDTHS[stage - 1])
    }

    /// Width of a concatenation source (0 = IDB).
    pub fn source_width(&self, source: usize) -> usize {
        if source == 0 {
            self.idb_width()
        } else {
            self.stage_width(source)
        }
    }

    pub fn mixing_width(&self, dest: usize) -> usize {
        let w = MIXING_WIDTHS.iter().find(|(d, _)| *d == dest).expect("mixing dest").1;
        self.scaled(w)
    }

    pub fn concat_width(&self, dest: usize) -> usize {
        let row = TOPOLOGY.iter().find(|(d, _)| *d == dest).expect("topology dest").1;
        row.iter().map(|&(src, _)| self.source_width(src)).sum()
    }
}

/// Complete architecture descriptor; sufficient to rebuild an identical
/// graph structure (checkpoints serialize it).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildConfig {
    pub family: VariantFamily,
    pub scale: f64,
    pub classes: usize,
    pub in_channels: usize,
    /// Retained block count per stage (compression shrinks entries).
    pub blocks_per_stage: Vec<usize>,
    pub dropout: f64,
    pub dropout_kind: DropoutKind,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Dilation rate ladder of the D family's four down slots.
    pub d_rates: [usize; 4],
    /// Rates installed by surgery in down slots 3 and 4.
    pub surgery_rates: [usize; 2],
    /// Kernel of the D family's upsampling-path convolution (1 or 3).
    pub d_up_kernel: usize,
    /// Realize each D down step as a three-conv multi-grid stack instead
    /// of a single dilated conv (heavier; off by default).
    pub d_multigrid: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            family: VariantFamily::P,
            scale: 1.0,
            classes: 11,
            in_channels: 3,
            blocks_per_stage: vec![7; NUM_STAGES],
            dropout: 0.2,
            dropout_kind: DropoutKind::Element,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            d_rates: [2, 4, 16, 32],
            surgery_rates: [4, 8],
            d_up_kernel: 1,
            d_multigrid: false,
        }
    }
}

impl BuildConfig {
    pub fn with_family(family: VariantFamily) -> Self {
        BuildConfig { family, ..Default::default() }
    }

    pub fn plan(&self) -> Result<ChannelPlan> {
        ChannelPlan::new(self.scale, self.classes)
    }

    pub fn set_blocks_per_stage(&mut self, n: usize) {
        self.blocks_per_stage = vec![n; NUM_STAGES];
    }

    fn down_kind(&self, slot: u8) -> DownKind {
        match self.family {
            VariantFamily::P => DownKind::Pool,
            VariantFamily::S => DownKind::Strided,
            VariantFamily::D => DownKind::Dilated { rate: self.d_rates[slot as usize - 1] },
            VariantFamily::PD => match slot {
                1 | 2 => DownKind::Pool,
                _ => DownKind::Dilated { rate: self.surgery_rates[slot as usize - 3] },
            },
            VariantFamily::SD => match slot {
                1 | 2 => DownKind::Strided,
                _ => DownKind::Dilated { rate: self.surgery_rates[slot as usize - 3] },
            },
        }
    }

    fn up_kind(&self, slot: u8) -> UpKind {
        match self.family {
            VariantFamily::P | VariantFamily::S => UpKind::UpsampleConv,
            VariantFamily::D => UpKind::SameConv { kernel: self.d_up_kernel },
            VariantFamily::PD | VariantFamily::SD => match slot {
                1 | 2 => UpKind::SameConv { kernel: 3 },
                _ => UpKind::UpsampleConv,
            },
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum DownKind {
    Pool,
    Strided,
    Dilated { rate: usize },
}

impl DownKind {
    fn apply_size(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            DownKind::Pool => (h / 2, w / 2),
            // 3x3, stride 2, pad 1
            DownKind::Strided => ((h - 1) / 2 + 1, (w - 1) / 2 + 1),
            DownKind::Dilated { .. } => (h, w),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum UpKind {
    UpsampleConv,
    SameConv { kernel: usize },
}

/// One concatenation input: a source feature map and the transformation
/// cascade bringing it to the destination's resolution.
#[derive(Clone)]
pub struct SkipEdge<S: Scalar> {
    pub dest: usize,
    pub source: usize,
    pub cascade_len: usize,
    pub steps: Vec<TransformStep<S>>,
}

/// A built model: blocks plus the dense skip topology.
#[derive(Clone)]
pub struct ModelGraph<S: Scalar> {
    pub config: BuildConfig,
    pub idb: Idb<S>,
    pub stages: Vec<ResNetStage<S>>,
    pub edges: Vec<SkipEdge<S>>,
    pub mixings: Vec<(usize, MixingBlock<S>)>,
    pub fub: Fub<S>,
    pub classifier: ConvLayer<S>,
}

/// Build a fresh HeUniform-initialized P, S or D model. The finetuned
/// families are reachable only through [`ModelGraph::surgery_to_dilated`].
pub fn build<S: Scalar>(config: &BuildConfig, seed: u64) -> Result<ModelGraph<S>> {
    if config.family.is_surgered() {
        return Err(Error::invalid(format!(
            "variant {} is obtained by surgery on a trained P or S model",
            config.family
        )));
    }
    build_raw(config, seed)
}

/// Build any family directly (checkpoint restore path).
pub fn build_raw<S: Scalar>(config: &BuildConfig, seed: u64) -> Result<ModelGraph<S>> {
    let plan = config.plan()?;
    if config.blocks_per_stage.len() != NUM_STAGES {
        return Err(Error::invalid(format!(
            "blocks_per_stage needs {NUM_STAGES} entries, got {}",
            config.blocks_per_stage.len()
        )));
    }
    if config.d_up_kernel != 1 && config.d_up_kernel != 3 {
        return Err(Error::invalid("d_up_kernel must be 1 or 3"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let idb = Idb::new(config.in_channels, plan.idb_width(), &mut rng)?;

    let mut stages = Vec::with_capacity(NUM_STAGES);
    for k in 1..=NUM_STAGES {
        let in_c = if k == 1 { plan.idb_width() } else { plan.mixing_width(k) };
        stages.push(ResNetStage::new(
            in_c,
            plan.stage_width(k),
            config.blocks_per_stage[k - 1],
            config.dropout,
            config.dropout_kind,
            config.bn_momentum,
            config.bn_eps,
            &mut rng,
        )?);
    }

    let mut edges = Vec::new();
    for &(dest, row) in TOPOLOGY.iter() {
        for &(source, cascade_len) in row {
            let width = plan.source_width(source);
            let steps = build_cascade(config, source, dest, width, &mut rng)?;
            edges.push(SkipEdge { dest, source, cascade_len, steps });
        }
    }

    let mut mixings = Vec::new();
    for &(dest, _) in TOPOLOGY.iter() {
        mixings.push((dest, MixingBlock::new(plan.concat_width(dest), plan.mixing_width(dest), &mut rng)?));
    }

    let fub = Fub::new(plan.mixing_width(FINAL_DEST), plan.fub_width(), &mut rng)?;
    let classifier = ConvLayer::new(plan.fub_width(), plan.classes, 1, 1, 1, 0, &mut rng)?;

    Ok(ModelGraph { config: config.clone(), idb, stages, edges, mixings, fub, classifier })
}

fn build_cascade<S: Scalar>(
    config: &BuildConfig,
    source: usize,
    dest: usize,
    width: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<TransformStep<S>>> {
    let a = SOURCE_LEVELS[source];
    let b = dest_level(dest);
    let mut steps = Vec::new();
    if a == b {
        // Resolution already matches; a convolution is applied anyway so
        // every variant carries the same number of transformations.
        steps.push(TransformStep::Conv {
            layer: ConvLayer::new(width, width, 1, 1, 1, 0, rng)?,
            upsample: false,
            slot: Slot::Same,
            to_level: b,
        });
    } else if a < b {
        for l in a..b {
            let slot = l as u8;
            steps.push(make_down_step(config, slot, width, l + 1, rng)?);
        }
    } else {
        for l in ((b + 1)..=a).rev() {
            let slot = (6 - l) as u8;
            steps.push(make_up_step(config, slot, width, l - 1, rng)?);
        }
    }
    Ok(steps)
}

fn make_down_step<S: Scalar>(
    config: &BuildConfig,
    slot: u8,
    width: usize,
    to_level: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TransformStep<S>> {
    Ok(match config.down_kind(slot) {
        DownKind::Pool => TransformStep::MaxPool { slot, to_level },
        DownKind::Strided => TransformStep::Conv {
            layer: ConvLayer::new(width, width, 3, 2, 1, 1, rng)?,
            upsample: false,
            slot: Slot::Down(slot),
            to_level,
        },
        DownKind::Dilated { rate } => {
            if config.d_multigrid && config.family == VariantFamily::D {
                TransformStep::Multigrid {
                    block: MultigridBlock::new(width, width, MultigridBlock::<S>::rates_for(rate, false)?, rng)?,
                    slot,
                    to_level,
                }
            } else {
                TransformStep::Conv {
                    layer: ConvLayer::new(width, width, 3, 1, rate, ops::same_padding(3, rate), rng)?,
                    upsample: false,
                    slot: Slot::Down(slot),
                    to_level,
                }
            }
        }
    })
}

fn make_up_step<S: Scalar>(
    config: &BuildConfig,
    slot: u8,
    width: usize,
    to_level: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TransformStep<S>> {
    Ok(match config.up_kind(slot) {
        UpKind::UpsampleConv => TransformStep::Conv {
            layer: ConvLayer::new(width, width, 3, 1, 1, 1, rng)?,
            upsample: true,
            slot: Slot::Up(slot),
            to_level,
        },
        UpKind::SameConv { kernel } => TransformStep::Conv {
            layer: ConvLayer::new(width, width, kernel, 1, 1, ops::same_padding(kernel, 1), rng)?,
            upsample: false,
            slot: Slot::Up(slot),
            to_level,
        },
    })
}

impl<S: Scalar> ModelGraph<S> {
    /// Spatial size at each resolution level for a given input size.
    /// Level 0 is the input; level 1 follows the IDB pooling; levels 2-5
    /// follow the four downsampling slots (identity for dilated slots).
    pub fn level_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        if h < 32 || w < 32 {
            return Err(Error::shape(format!("input {h}x{w} below the 32x32 minimum")));
        }
        let mut sizes = vec![(h, w)];
        sizes.push((h / 2, w / 2));
        for slot in 1..=4u8 {
            let (ph, pw) = *sizes.last().unwrap();
            if ph < 2 || pw < 2 {
                return Err(Error::shape(format!("input {h}x{w} too small for the downsampling path")));
            }
            sizes.push(self.config.down_kind(slot).apply_size(ph, pw));
        }
        Ok(sizes)
    }

    pub fn forward(&self, cx: &mut Fwd<'_, '_, S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_inner(cx, x, None)
    }

    /// Deterministic eval-mode forward.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut cx = Fwd::new(None, false, &mut rng);
        self.forward_inner(&mut cx, x, None)
    }

    /// Forward with one stage reduced to its channel-adjusting first block.
    pub fn forward_dropped(&self, cx: &mut Fwd<'_, '_, S>, x: &Tensor<S>, dropped: Option<usize>) -> Result<Tensor<S>> {
        self.forward_inner(cx, x, dropped)
    }

    fn forward_inner(&self, cx: &mut Fwd<'_, '_, S>, x: &Tensor<S>, dropped: Option<usize>) -> Result<Tensor<S>> {
        let xs = x.shape();
        if xs.c != self.config.in_channels {
            return Err(Error::ChannelMismatch { expected: self.config.in_channels, got: xs.c });
        }
        if let Some(d) = dropped {
            if d == 0 || d > NUM_STAGES {
                return Err(Error::invalid(format!("stage id {d} outside 1..={NUM_STAGES}")));
            }
        }
        let sizes = self.level_sizes(xs.h, xs.w)?;
        let mut outs: Vec<Tensor<S>> = Vec::with_capacity(NUM_STAGES + 1);
        outs.push(self.idb.forward(cx.tape, x)?);
        for k in 1..=NUM_STAGES {
            let input = if k == 1 { outs[0].clone() } else { self.mixed_input(cx, k, &outs, &sizes)? };
            let stage = &self.stages[k - 1];
            let out = if dropped == Some(k) {
                stage.forward_prefix(cx, &input, 1)?
            } else {
                stage.forward(cx, &input)?
            };
            outs.push(out);
        }
        let fused = self.mixed_input(cx, FINAL_DEST, &outs, &sizes)?;
        let h = self.fub.forward(cx.tape, &fused, sizes[0])?;
        self.classifier.forward(cx.tape, &h)
    }

    fn mixed_input(
        &self,
        cx: &mut Fwd<'_, '_, S>,
        dest: usize,
        outs: &[Tensor<S>],
        sizes: &[(usize, usize)],
    ) -> Result<Tensor<S>> {
        let mut parts = Vec::new();
        for e in self.edges.iter().filter(|e| e.dest == dest) {
            let mut h = outs[e.source].clone();
            for step in &e.steps {
                let target = if step.needs_target() { Some(sizes[step.to_level()]) } else { None };
                h = step.forward(cx.tape, &h, target)?;
            }
            parts.push(h);
        }
        let cat = ops::concat_channels(cx.tape, &parts)?;
        self.mixing_for(dest).forward(cx.tape, &cat)
    }

    pub fn mixing_for(&self, dest: usize) -> &MixingBlock<S> {
        &self.mixings.iter().find(|(d, _)| *d == dest).expect("mixing for dest").1
    }

    /// The (source, cascade length) rows actually wired into the graph.
    pub fn skip_registry(&self) -> Vec<(usize, Vec<(usize, usize)>)> {
        let mut rows: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
        for &(dest, _) in TOPOLOGY.iter() {
            let row: Vec<(usize, usize)> = self
                .edges
                .iter()
                .filter(|e| e.dest == dest)
                .map(|e| (e.source, e.cascade_len))
                .collect();
            rows.push((dest, row));
        }
        rows
    }

    pub fn visit_params(&self, f: ParamFn<'_, S>) {
        self.idb.visit("idb", f);
        for (k, stage) in self.stages.iter().enumerate() {
            stage.visit(&format!("stages.{}", k + 1), f);
        }
        for e in &self.edges {
            for (j, step) in e.steps.iter().enumerate() {
                step.visit(&format!("edges.{}_{}.steps.{}", e.dest, e.source, j), f);
            }
        }
        for (dest, m) in &self.mixings {
            m.visit(&format!("mixings.{dest}"), f);
        }
        self.fub.visit("fub", f);
        self.classifier.visit("classifier", f);
    }

    /// Total trainable scalars: conv weights and biases plus BN affine
    /// parameters. Running statistics are excluded.
    pub fn count_parameters(&self) -> usize {
        let mut total = 0usize;
        self.visit_params(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                total += t.numel();
            }
        });
        total
    }

    /// All trainable parameters in stable visiting order.
    pub fn trainable_params(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                out.push(t.clone());
            }
        });
        out
    }

    pub fn zero_grads(&self) {
        self.visit_params(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                t.zero_grad();
            }
        });
    }

    /// Replace the last two downsampling transformations with dilated
    /// convolutions and drop the upsampling of the first two upsampling
    /// transformations, across the main path and every skip cascade.
    ///
    /// Pool steps are replaced by identity-initialized dilated convs;
    /// strided-conv steps donate their kernel weights, reinterpreted at
    /// stride 1. Consumes the source model; untouched layers carry over.
    pub fn surgery_to_dilated(mut self, rates: [usize; 2]) -> Result<ModelGraph<S>> {
        let new_family = match self.config.family {
            VariantFamily::P => VariantFamily::PD,
            VariantFamily::S => VariantFamily::SD,
            other => {
                return Err(Error::invalid(format!(
                    "surgery applies to P or S models, this one is {other}"
                )))
            }
        };
        let plan = self.config.plan()?;
        for e in &mut self.edges {
            for step in &mut e.steps {
                match step.slot() {
                    Slot::Down(slot @ (3 | 4)) => {
                        let rate = rates[slot as usize - 3];
                        let to_level = step.to_level();
                        let replacement = match step {
                            TransformStep::MaxPool { .. } => {
                                // Pool has no channel count of its own.
                                ConvLayer::identity(plan.source_width(e.source), 3, rate)?
                            }
                            TransformStep::Conv { layer, .. } => ConvLayer {
                                weight: Tensor::param(layer.weight.shape(), layer.weight.to_vec())?,
                                bias: Tensor::param(layer.bias.shape(), layer.bias.to_vec())?,
                                stride: 1,
                                dilation: rate,
                                padding: ops::same_padding(3, rate),
                            },
                            TransformStep::Multigrid { .. } => {
                                return Err(Error::invalid("surgery on a multigrid down slot"))
                            }
                        };
                        *step = TransformStep::Conv {
                            layer: replacement,
                            upsample: false,
                            slot: Slot::Down(slot),
                            to_level,
                        };
                    }
                    Slot::Up(1 | 2) => {
                        if let TransformStep::Conv { upsample, .. } = step {
                            *upsample = false;
                        }
                    }
                    _ => {}
                }
            }
        }
        self.config.family = new_family;
        self.config.surgery_rates = rates;
        Ok(self)
    }

    /// One line per block: name, kind, channels, stride/dilation, params.
    pub fn describe(&self) -> String {
        fn line(out: &mut String, name: &str, kind: &str, io: &str, sd: &str, params: usize) {
            out.push_str(&format!("{name:<28} {kind:<26} {io:<12} {sd:<8} {params}\n"));
        }
        fn conv_line<S: Scalar>(out: &mut String, name: &str, c: &ConvLayer<S>) {
            let k = c.kernel();
            line(
                out,
                name,
                &format!("conv{k}x{k}"),
                &format!("{}->{}", c.in_channels(), c.out_channels()),
                &format!("s{} d{}", c.stride, c.dilation),
                c.param_count(),
            );
        }
        let mut out = String::new();
        conv_line(&mut out, "idb.conv1", &self.idb.conv1);
        conv_line(&mut out, "idb.conv2", &self.idb.conv2);
        conv_line(&mut out, "idb.conv3", &self.idb.conv3);
        for (k, stage) in self.stages.iter().enumerate() {
            for (i, b) in stage.blocks.iter().enumerate() {
                line(
                    &mut out,
                    &format!("stages.{}.blocks.{}", k + 1, i),
                    "residual",
                    &format!("{}->{}", b.in_channels(), b.out_channels()),
                    "s1 d1",
                    b.param_count(),
                );
            }
        }
        for e in &self.edges {
            for (j, step) in e.steps.iter().enumerate() {
                line(
                    &mut out,
                    &format!("edges.{}_{}.steps.{}", e.dest, e.source, j),
                    &step.describe(),
                    "",
                    "",
                    step.param_count(),
                );
            }
        }
        for (dest, m) in &self.mixings {
            conv_line(&mut out, &format!("mixings.{dest}"), &m.conv);
        }
        conv_line(&mut out, "fub.conv", &self.fub.conv);
        conv_line(&mut out, "classifier", &self.classifier);
        out
    }

    /// Receptive field and downsampling factor after each stage, along
    /// the main path (stage k to stage k+1 through its length-1 cascade).
    pub fn receptive_field_profile(&self) -> Vec<StageRf> {
        let mut ops_list = vec![
            RfOp { kernel: 3, stride: 1.0, dilation: 1 },
            RfOp { kernel: 2, stride: 2.0, dilation: 1 },
            RfOp { kernel: 3, stride: 1.0, dilation: 1 },
            RfOp { kernel: 3, stride: 1.0, dilation: 1 },
        ];
        let mut profile = Vec::new();
        for k in 1..=NUM_STAGES {
            for _ in 0..2 * self.config.blocks_per_stage[k - 1] {
                ops_list.push(RfOp { kernel: 3, stride: 1.0, dilation: 1 });
            }
            let (rf, jump) = rf_chain(&ops_list);
            profile.push(StageRf { stage: k, rf: rf.round() as usize, downsample: jump });
            if k < NUM_STAGES {
                // main-path transform between stage k and k+1
                let edge = self
                    .edges
                    .iter()
                    .find(|e| e.dest == k + 1 && e.source == k)
                    .expect("main path edge");
                for step in &edge.steps {
                    match step {
                        TransformStep::MaxPool { .. } => {
                            ops_list.push(RfOp { kernel: 2, stride: 2.0, dilation: 1 })
                        }
                        TransformStep::Conv { layer, upsample, .. } => {
                            if *upsample {
                                ops_list.push(RfOp { kernel: 1, stride: 0.5, dilation: 1 });
                            }
                            ops_list.push(RfOp {
                                kernel: layer.kernel(),
                                stride: layer.stride as f64,
                                dilation: layer.dilation,
                            });
                        }
                        TransformStep::Multigrid { block, .. } => {
                            for conv in &block.convs {
                                ops_list.push(RfOp {
                                    kernel: conv.kernel(),
                                    stride: 1.0,
                                    dilation: conv.dilation,
                                });
                            }
                        }
                    }
                }
            }
        }
        profile
    }
}

/// A primitive along a receptive-field chain. Upsampling enters as a
/// kernel-1 op with stride 1/2.
#[derive(Clone, Copy, Debug)]
pub struct RfOp {
    pub kernel: usize,
    pub stride: f64,
    pub dilation: usize,
}

/// Receptive field recurrence: rf += (k-1) * dilation * jump, then
/// jump *= stride. Returns (rf, cumulative downsampling factor).
pub fn rf_chain(ops: &[RfOp]) -> (f64, f64) {
    let mut rf = 1.0f64;
    let mut jump = 1.0f64;
    for op in ops {
        rf += (op.kernel as f64 - 1.0) * op.dilation as f64 * jump;
        jump *= op.stride;
    }
    (rf, jump)
}

#[derive(Clone, Copy, Debug)]
pub struct StageRf {
    pub stage: usize,
    pub rf: usize,
    /// Cumulative downsampling factor at the stage output.
    pub downsample: f64,
}


impl<S: Scalar> std::fmt::Debug for ModelGraph<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ModelGraph(family={}, scale={}, params={})",
            self.config.family,
            self.config.scale,
            self.count_parameters()
        )
    }
}

impl BuildConfig {
    /// Apply `key = value` overrides; returns unrecognized keys.
    pub fn apply_kv(
        &mut self,
        map: &std::collections::BTreeMap<String, String>,
    ) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, v) in map {
            let e = |err: String| Error::invalid(format!("config {k}: {err}"));
            match k.as_str() {
                "variant" | "family" => self.family = VariantFamily::parse(v)?,
                "scale" => self.scale = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "classes" => self.classes = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "blocks_per_stage" => {
                    let n = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?;
                    self.set_blocks_per_stage(n);
                }
                "dropout" => self.dropout = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "dropout_kind" => {
                    self.dropout_kind = match v.as_str() {
                        "element" => DropoutKind::Element,
                        "channel" => DropoutKind::Channel,
                        other => return Err(e(format!("unknown dropout kind {other:?}"))),
                    }
                }
                "bn_momentum" => self.bn_momentum = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "bn_eps" => self.bn_eps = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "d_up_kernel" => self.d_up_kernel = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "d_multigrid" => self.d_multigrid = v.parse().map_err(|x: std::str::ParseBoolError| e(x.to_string()))?,
                _ => unknown.push(k.clone()),
            }
        }
        Ok(unknown)
    }
}
