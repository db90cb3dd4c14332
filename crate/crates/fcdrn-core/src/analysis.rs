//! Inspection suite for trained models: per-block weight-norm profiles,
//! stage-dropping ablation, norm-thresholded block removal, and the
//! retrain-from-scratch comparison driver.

use serde::Serialize;

use crate::builder::{build_raw, BuildConfig, ModelGraph, NUM_STAGES};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::train::{self, TrainConfig};

/// Input-channel-averaged L1 mass of a conv weight `[N, M, K, K]`:
/// total absolute value divided by M.
pub fn weight_norm_of<S: Scalar>(w: &Tensor<S>) -> f64 {
    let m = w.shape().c as f64;
    let mut total = 0.0f64;
    for v in w.data().iter() {
        total += v.to_f64x().abs();
    }
    total / m
}

#[derive(Clone, Debug, Serialize)]
pub struct NormEntry {
    pub stage: usize,
    pub block: usize,
    /// Which residual-branch conv (1 or 2).
    pub conv: usize,
    pub norm: f64,
}

/// One entry per 3x3 convolution in every residual branch, grouped by
/// stage for plotting.
#[derive(Clone, Debug, Serialize)]
pub struct WeightNormReport {
    pub entries: Vec<NormEntry>,
}

impl WeightNormReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("stage,block,conv,norm\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{:.8}\n", e.stage, e.block, e.conv, e.norm));
        }
        out
    }

    /// Bar profile with stages separated by vertical lines.
    pub fn svg(&self) -> String {
        let groups: Vec<(String, Vec<f64>)> = (1..=NUM_STAGES)
            .map(|s| {
                (
                    format!("R{s}"),
                    self.entries.iter().filter(|e| e.stage == s).map(|e| e.norm).collect(),
                )
            })
            .collect();
        bar_chart_svg("residual conv weight norms", &groups)
    }
}

pub fn weight_norms<S: Scalar>(model: &ModelGraph<S>) -> WeightNormReport {
    let mut entries = Vec::new();
    for (si, stage) in model.stages.iter().enumerate() {
        for (bi, block) in stage.blocks.iter().enumerate() {
            entries.push(NormEntry { stage: si + 1, block: bi, conv: 1, norm: weight_norm_of(&block.conv1.weight) });
            entries.push(NormEntry { stage: si + 1, block: bi, conv: 2, norm: weight_norm_of(&block.conv2.weight) });
        }
    }
    WeightNormReport { entries }
}

/// A view of the model with one stage reduced to its first block; the
/// original is untouched (parameter storage is shared).
pub fn drop_resnet<S: Scalar>(model: &ModelGraph<S>, stage_id: usize) -> Result<ModelGraph<S>> {
    if stage_id == 0 || stage_id > NUM_STAGES {
        return Err(Error::invalid(format!("stage id {stage_id} outside 1..={NUM_STAGES}")));
    }
    let mut view = model.clone();
    view.stages[stage_id - 1].blocks.truncate(1);
    view.config.blocks_per_stage[stage_id - 1] = 1;
    Ok(view)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    /// None is the all-stages baseline.
    pub dropped_stage: Option<usize>,
    pub val_miou: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("dropped_stage,val_miou,delta\n");
        for r in &self.rows {
            let s = r.dropped_stage.map(|v| v.to_string()).unwrap_or_else(|| "baseline".into());
            out.push_str(&format!("{s},{:.6},{:.6}\n", r.val_miou, r.delta));
        }
        out
    }

    pub fn svg(&self) -> String {
        let groups: Vec<(String, Vec<f64>)> = self
            .rows
            .iter()
            .filter_map(|r| r.dropped_stage.map(|s| (format!("R{s}"), vec![r.delta])))
            .collect();
        bar_chart_svg("mean-IoU delta when dropping each stage", &groups)
    }
}

/// Evaluate the full model, then each single-stage-dropped view.
pub fn ablation_sweep<S: Scalar>(
    model: &ModelGraph<S>,
    val_set: &Dataset,
    void: Option<u32>,
) -> Result<AblationReport> {
    if val_set.is_empty() {
        return Err(Error::data("ablation needs a non-empty validation set"));
    }
    let baseline = train::evaluate(model, val_set, void)?.miou()?;
    let mut rows = vec![AblationRow { dropped_stage: None, val_miou: baseline, delta: 0.0 }];
    for stage in 1..=NUM_STAGES {
        let miou = train::evaluate_dropped(model, val_set, void, Some(stage))?.miou()?;
        rows.push(AblationRow { dropped_stage: Some(stage), val_miou: miou, delta: miou - baseline });
    }
    Ok(AblationReport { rows })
}

#[derive(Clone, Debug, Serialize)]
pub struct CompressionResult {
    /// (stage, block index) pairs removed.
    pub removed: Vec<(usize, usize)>,
    pub params_before: usize,
    pub params_after: usize,
    /// params_before / params_after.
    pub rate: f64,
    pub val_miou_before: Option<f64>,
    pub val_miou_after: Option<f64>,
}

impl CompressionResult {
    pub fn csv(&self, label: &str) -> String {
        let removed = self
            .removed
            .iter()
            .map(|(s, b)| format!("R{s}b{b}"))
            .collect::<Vec<_>>()
            .join(";");
        let miou_loss = match (self.val_miou_before, self.val_miou_after) {
            (Some(a), Some(b)) => format!("{:.6}", b - a),
            _ => String::new(),
        };
        format!(
            "architecture,miou_loss,compression_rate,params_before,params_after,removed_blocks\n{label},{miou_loss},{:.4},{},{},{removed}\n",
            self.rate, self.params_before, self.params_after
        )
    }
}

/// Remove every residual block (never a stage's first) whose final-conv
/// norm falls below the threshold; identity bypass is exact for blocks
/// with a zero residual branch. Returns the compressed model and the
/// bookkeeping; the input model is untouched.
pub fn compress<S: Scalar>(
    model: &ModelGraph<S>,
    threshold: f64,
    per_stage: Option<&[f64; NUM_STAGES]>,
) -> Result<(ModelGraph<S>, CompressionResult)> {
    if threshold < 0.0 || !threshold.is_finite() {
        return Err(Error::invalid(format!("threshold {threshold} must be non-negative")));
    }
    let params_before = model.count_parameters();
    let mut out = model.clone();
    let mut removed = Vec::new();
    for (si, stage) in out.stages.iter_mut().enumerate() {
        let eps = per_stage.map(|p| p[si]).unwrap_or(threshold);
        let mut kept = Vec::with_capacity(stage.blocks.len());
        for (bi, block) in stage.blocks.drain(..).enumerate() {
            if bi > 0 && weight_norm_of(&block.conv2.weight) < eps {
                removed.push((si + 1, bi));
            } else {
                kept.push(block);
            }
        }
        stage.blocks = kept;
        out.config.blocks_per_stage[si] = stage.blocks.len();
    }
    let params_after = out.count_parameters();
    let result = CompressionResult {
        removed,
        params_before,
        params_after,
        rate: params_before as f64 / params_after as f64,
        val_miou_before: None,
        val_miou_after: None,
    };
    Ok((out, result))
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrainArm {
    pub label: String,
    pub val_miou: f64,
    pub delta_vs_reference: f64,
    pub compression_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrainComparison {
    pub rows: Vec<RetrainArm>,
}

impl RetrainComparison {
    pub fn csv(&self) -> String {
        let mut out = String::from("architecture,val_miou,delta_vs_reference,compression_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.4}\n",
                r.label, r.val_miou, r.delta_vs_reference, r.compression_rate
            ));
        }
        out
    }
}

/// Train the reduced-capacity architecture from scratch, with and
/// without weight decay, against the compressed-from-trained reference.
pub fn retrain_reduced<S: Scalar>(
    arch: &BuildConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    compressed_miou: f64,
    compression_rate: f64,
    reference_miou: f64,
) -> Result<(RetrainComparison, ModelGraph<S>)> {
    let mut rows = vec![RetrainArm {
        label: "compressed-from-trained".into(),
        val_miou: compressed_miou,
        delta_vs_reference: compressed_miou - reference_miou,
        compression_rate,
    }];

    let retrained = build_raw::<S>(arch, cfg.seed)?;
    let outcome = train::train(&retrained, train_set, val_set, cfg, None, None)?;
    rows.push(RetrainArm {
        label: "retrained".into(),
        val_miou: outcome.best_val_miou,
        delta_vs_reference: outcome.best_val_miou - reference_miou,
        compression_rate,
    });

    let no_wd_model = build_raw::<S>(arch, cfg.seed)?;
    let mut no_wd_cfg = cfg.clone();
    no_wd_cfg.weight_decay = 0.0;
    let outcome_no_wd = train::train(&no_wd_model, train_set, val_set, &no_wd_cfg, None, None)?;
    rows.push(RetrainArm {
        label: "retrained-no-weight-decay".into(),
        val_miou: outcome_no_wd.best_val_miou,
        delta_vs_reference: outcome_no_wd.best_val_miou - reference_miou,
        compression_rate,
    });

    Ok((RetrainComparison { rows }, retrained))
}

/// Minimal standalone SVG: grouped bars with vertical separators.
/// Handles negative values around a zero baseline.
pub fn bar_chart_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let bar_w = 6.0;
    let gap = 10.0;
    let margin = 34.0;
    let plot_h = 160.0;
    let total_bars: usize = groups.iter().map(|(_, v)| v.len()).sum();
    let width = margin * 2.0 + total_bars as f64 * bar_w + groups.len() as f64 * gap;
    let height = plot_h + 60.0;
    let max_abs = groups
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold(1e-12f64, |m, &v| m.max(v.abs()));
    let has_negative = groups.iter().flat_map(|(_, v)| v.iter()).any(|&v| v < 0.0);
    let zero_y = if has_negative { 20.0 + plot_h / 2.0 } else { 20.0 + plot_h };
    let scale = if has_negative { plot_h / 2.0 / max_abs } else { plot_h / max_abs };

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.0}\" y=\"14\" font-size=\"11\" font-family=\"sans-serif\">{}</text>\n",
        margin, title
    ));
    s.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{zero_y}\" x2=\"{:.1}\" y2=\"{zero_y}\" stroke=\"#888\" stroke-width=\"1\"/>\n",
        width - margin
    ));
    let mut x = margin + gap / 2.0;
    for (gi, (label, values)) in groups.iter().enumerate() {
        let group_start = x;
        for &v in values {
            let h = (v.abs() * scale).min(plot_h);
            let y = if v >= 0.0 { zero_y - h } else { zero_y };
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>\n"
            ));
            x += bar_w;
        }
        let mid = (group_start + x) / 2.0;
        s.push_str(&format!(
            "<text x=\"{mid:.1}\" y=\"{:.0}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"middle\">{label}</text>\n",
            plot_h + 36.0
        ));
        if gi + 1 < groups.len() {
            let sep = x + gap / 2.0;
            s.push_str(&format!(
                "<line x1=\"{sep:.1}\" y1=\"20\" x2=\"{sep:.1}\" y2=\"{:.0}\" stroke=\"#bbb\" stroke-width=\"1\" stroke-dasharray=\"3,3\"/>\n",
                20.0 + plot_h
            ));
        }
        x += gap;
    }
    s.push_str("</svg>\n");
    s
}
