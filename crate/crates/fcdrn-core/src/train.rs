//! Training protocol: RMSProp with exponentially decayed learning rate,
//! flip/crop augmentation, soft targets, and mean-IoU early stopping.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Fwd;
use crate::builder::ModelGraph;
use crate::data::{Dataset, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::tensor::ops::{self, Target};
use crate::tensor::{Scalar, Shape, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied after each epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Square crop size; 0 trains on full images.
    pub crop: usize,
    pub hflip_prob: f64,
    pub patience: usize,
    pub soft_targets: bool,
    pub soft_on: f64,
    pub soft_off: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// RMSProp smoothing constant and epsilon.
    pub rho: f64,
    pub eps: f64,
    pub min_delta: f64,
    pub void_index: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_decay: 0.995,
            weight_decay: 1e-4,
            dropout: 0.2,
            crop: 324,
            hflip_prob: 0.5,
            patience: 200,
            soft_targets: false,
            soft_on: 0.9,
            soft_off: 0.01,
            batch_size: 3,
            max_epochs: 1000,
            seed: 0,
            rho: 0.9,
            eps: 1e-8,
            min_delta: 0.0,
            void_index: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, lo, hi) in [
            ("lr0", self.lr0, 0.0, 1.0),
            ("lr_decay", self.lr_decay, 0.0, 1.0),
            ("weight_decay", self.weight_decay, 0.0, 1.0),
            ("dropout", self.dropout, 0.0, 0.999),
            ("hflip_prob", self.hflip_prob, 0.0, 1.0),
            ("soft_on", self.soft_on, 0.0, 1.0),
            ("soft_off", self.soft_off, 0.0, 1.0),
            ("rho", self.rho, 0.0, 1.0),
        ] {
            if !(lo..=hi).contains(&v) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }

    /// Apply `key = value` overrides parsed from a config file;
    /// returns the keys this config does not recognize.
    pub fn apply_kv(&mut self, map: &std::collections::BTreeMap<String, String>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, v) in map {
            let e = |err: String| Error::invalid(format!("config {k}: {err}"));
            match k.as_str() {
                "lr0" => self.lr0 = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "lr_decay" => self.lr_decay = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "weight_decay" => self.weight_decay = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "dropout" => self.dropout = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "crop" => self.crop = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "hflip_prob" => self.hflip_prob = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "patience" => self.patience = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "soft_targets" => self.soft_targets = v.parse().map_err(|x: std::str::ParseBoolError| e(x.to_string()))?,
                "soft_on" => self.soft_on = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "soft_off" => self.soft_off = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "batch_size" => self.batch_size = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "max_epochs" => self.max_epochs = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "seed" => self.seed = v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                "rho" => self.rho = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "eps" => self.eps = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "min_delta" => self.min_delta = v.parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                "void_index" => {
                    self.void_index = if v.is_empty() || v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?)
                    }
                }
                _ => unknown.push(k.clone()),
            }
        }
        Ok(unknown)
    }
}

/// lr0 decayed exponentially per epoch (epoch 0 = lr0).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// RMSProp with coupled weight decay: the decay term joins the gradient
/// before the squared-average update.
pub struct RmsProp<S: Scalar> {
    v: Vec<Vec<S>>,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(rho: f64, eps: f64, weight_decay: f64) -> Self {
        RmsProp { v: Vec::new(), rho, eps, weight_decay }
    }

    /// v <- rho*v + (1-rho)*g^2; p <- p - lr*g/(sqrt(v)+eps).
    pub fn step(&mut self, params: &[Tensor<S>], lr: f64) -> Result<()> {
        if self.v.len() != params.len() {
            self.v = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        }
        let rho = S::cast(self.rho);
        let one_minus = S::cast(1.0 - self.rho);
        let eps = S::cast(self.eps);
        let lrv = S::cast(lr);
        let wd = S::cast(self.weight_decay);
        for (p, v) in params.iter().zip(self.v.iter_mut()) {
            let grad = p.grad();
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let mut g = match &grad {
                    Some(g) => g[i],
                    None => S::zero(),
                };
                if !g.is_finite() {
                    return Err(Error::NonFinite("gradient".to_string()));
                }
                g += wd * data[i];
                v[i] = rho * v[i] + one_minus * g * g;
                data[i] = data[i] - lrv * g / (v[i].sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.v.clear();
    }
}

/// Early stopping on strict improvement of the monitored value.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper { patience, min_delta, best: f64::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Returns (improved, stop_now).
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value > self.best + self.min_delta {
            self.best = value;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

/// Random crop plus horizontal flip, applied identically to image and
/// labels. A crop of 0 keeps the full image.
pub fn augment(
    sample: &SegmentationSample,
    crop: usize,
    hflip_prob: f64,
    rng: &mut ChaCha20Rng,
) -> Result<SegmentationSample> {
    let (h, w) = (sample.h, sample.w);
    let (ch, cw) = if crop == 0 { (h, w) } else { (crop, crop) };
    if ch > h || cw > w {
        return Err(Error::invalid(format!("crop {ch}x{cw} larger than image {h}x{w}")));
    }
    let oy = if h == ch { 0 } else { rng.gen_range(0..=h - ch) };
    let ox = if w == cw { 0 } else { rng.gen_range(0..=w - cw) };
    let flip = rng.gen::<f64>() < hflip_prob;

    let mut image = vec![0.0f32; 3 * ch * cw];
    let mut labels = vec![0u32; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let sx = if flip { ox + cw - 1 - x } else { ox + x };
            let sy = oy + y;
            for c in 0..3 {
                image[c * ch * cw + y * cw + x] = sample.image[c * h * w + sy * w + sx];
            }
            labels[y * cw + x] = sample.labels[sy * w + sx];
        }
    }
    Ok(SegmentationSample { image, labels, h: ch, w: cw })
}

/// One-hot targets smoothed to (on, off); void pixels are masked.
/// Returns the target distribution and the per-pixel validity mask.
pub fn soften<S: Scalar>(
    labels: &[u32],
    shape: Shape,
    on: f64,
    off: f64,
    void: Option<u32>,
) -> Result<(Tensor<S>, Vec<bool>)> {
    let k = shape.c;
    let npix = shape.n * shape.h * shape.w;
    if labels.len() != npix {
        return Err(Error::shape(format!("{} labels for {npix} pixels", labels.len())));
    }
    let hw = shape.h * shape.w;
    let mut probs = vec![S::cast(off); shape.numel()];
    let mut valid = vec![true; npix];
    for n in 0..shape.n {
        for p in 0..hw {
            let l = labels[n * hw + p];
            if void == Some(l) {
                valid[n * hw + p] = false;
                continue;
            }
            if l as usize >= k {
                return Err(Error::data(format!("label {l} out of range for {k} classes")));
            }
            probs[(n * k + l as usize) * hw + p] = S::cast(on);
        }
    }
    Ok((Tensor::from_vec(shape, probs)?, valid))
}

/// Stack samples (all the same size) into an input tensor + label map.
pub fn assemble_batch<S: Scalar>(samples: &[&SegmentationSample]) -> Result<(Tensor<S>, Vec<u32>)> {
    let n = samples.len();
    let (h, w) = (samples[0].h, samples[0].w);
    let shape = Shape::new(n, 3, h, w);
    let mut data = vec![S::zero(); shape.numel()];
    let mut labels = vec![0u32; n * h * w];
    for (i, s) in samples.iter().enumerate() {
        if s.h != h || s.w != w {
            return Err(Error::shape("batch mixes image sizes".to_string()));
        }
        for (j, &v) in s.image.iter().enumerate() {
            data[i * 3 * h * w + j] = S::cast(v as f64);
        }
        labels[i * h * w..(i + 1) * h * w].copy_from_slice(&s.labels);
    }
    Ok((Tensor::from_vec(shape, data)?, labels))
}

/// Eval-mode confusion matrix over a dataset.
pub fn evaluate<S: Scalar>(
    model: &ModelGraph<S>,
    set: &Dataset,
    void: Option<u32>,
) -> Result<ConfusionMatrix> {
    evaluate_dropped(model, set, void, None)
}

pub fn evaluate_dropped<S: Scalar>(
    model: &ModelGraph<S>,
    set: &Dataset,
    void: Option<u32>,
    dropped: Option<usize>,
) -> Result<ConfusionMatrix> {
    if set.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let mut cm = ConfusionMatrix::new(model.config.classes);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    for s in set {
        let (x, labels) = assemble_batch::<S>(&[s])?;
        let mut cx = Fwd::new(None, false, &mut rng);
        let logits = model.forward_dropped(&mut cx, &x, dropped)?;
        cm.accumulate(&argmax_labels(&logits), &labels, void)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_miou,val_acc,seconds";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.8e},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.lr, self.train_loss, self.val_miou, self.val_acc, self.seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient aborted training; the
    /// model is left at the last good (best-validation) state.
    pub aborted: Option<String>,
    /// Training RNG state after the last completed epoch.
    pub rng_state: serde_json::Value,
}

/// Resume point restored from a checkpoint manifest.
pub struct ResumeState {
    pub start_epoch: usize,
    pub rng_state: Option<serde_json::Value>,
}

type Snapshot<S> = Vec<Vec<S>>;

fn snapshot<S: Scalar>(model: &ModelGraph<S>) -> Snapshot<S> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, _, t| out.push(t.to_vec()));
    out
}

fn restore<S: Scalar>(model: &ModelGraph<S>, snap: &Snapshot<S>) {
    let mut idx = 0;
    model.visit_params(&mut |_, _, t| {
        t.data_mut().copy_from_slice(&snap[idx]);
        idx += 1;
    });
}

/// Run the training protocol. The model is updated in place and left at
/// the best-validation parameters; per-epoch rows are returned and also
/// streamed to `on_epoch`, which may end training early by returning
/// false.
pub fn train<S: Scalar>(
    model: &ModelGraph<S>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRow) -> bool>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::data("training needs non-empty train and validation sets"));
    }
    let params = model.trainable_params();
    let mut opt = RmsProp::<S>::new(cfg.rho, cfg.eps, cfg.weight_decay);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut best: Snapshot<S> = snapshot(model);
    let mut best_miou = f64::NEG_INFINITY;

    let (start_epoch, mut rng) = match resume {
        Some(r) => {
            let rng = match r.rng_state {
                Some(v) => serde_json::from_value(v)?,
                None => ChaCha20Rng::seed_from_u64(cfg.seed),
            };
            (r.start_epoch, rng)
        }
        None => (0, ChaCha20Rng::seed_from_u64(cfg.seed)),
    };

    let mut history = Vec::new();
    let mut aborted = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in start_epoch..cfg.max_epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);

        // Fisher-Yates shuffle from the loop RNG.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut crops = Vec::with_capacity(chunk.len());
            for &i in chunk {
                crops.push(augment(&train_set[i], cfg.crop, cfg.hflip_prob, &mut rng)?);
            }
            let refs: Vec<&SegmentationSample> = crops.iter().collect();
            let (x, labels) = assemble_batch::<S>(&refs)?;

            let tape = Tape::new();
            let step_result = (|| -> Result<f64> {
                let mut cx = Fwd::new(Some(&tape), true, &mut rng);
                let logits = model.forward(&mut cx, &x)?;
                let loss = if cfg.soft_targets {
                    let (probs, valid) =
                        soften::<S>(&labels, logits.shape(), cfg.soft_on, cfg.soft_off, cfg.void_index)?;
                    ops::softmax_cross_entropy(Some(&tape), &logits, Target::Soft { probs: &probs, valid: Some(&valid) })?
                } else {
                    ops::softmax_cross_entropy(
                        Some(&tape),
                        &logits,
                        Target::Hard { labels: &labels, void: cfg.void_index },
                    )?
                };
                let loss_v = loss.item().to_f64x();
                model.zero_grads();
                tape.backward(&loss)?;
                opt.step(&params, lr)?;
                Ok(loss_v)
            })();
            match step_result {
                Ok(v) => {
                    loss_sum += v;
                    batches += 1;
                }
                Err(Error::NonFinite(what)) => {
                    restore(model, &best);
                    aborted = Some(format!("non-finite {what} at epoch {epoch}; restored best checkpoint"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let cm = evaluate(model, val_set, cfg.void_index)?;
        let val_miou = cm.miou()?;
        let val_acc = cm.global_accuracy()?;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_miou,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        let keep_going = match on_epoch.as_deref_mut() {
            Some(cb) => cb(&row),
            None => true,
        };
        history.push(row);

        let (improved, stop) = stopper.observe(epoch, val_miou);
        if improved {
            best = snapshot(model);
            best_miou = val_miou;
        }
        if stop || !keep_going {
            stopped_early = true;
            break;
        }
    }

    restore(model, &best);
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_miou: if best_miou.is_finite() { best_miou } else { 0.0 },
        stopped_early,
        aborted,
        rng_state: serde_json::to_value(&rng)?,
    })
}
