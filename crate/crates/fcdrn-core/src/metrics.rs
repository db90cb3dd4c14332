//! Per-class IoU, mean IoU, global accuracy and the confusion matrix
//! they derive from. Void pixels never enter the counts.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// K x K integer counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction/ground-truth pair of label maps.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32], void: Option<u32>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes as u32;
        for (&p, &g) in pred.iter().zip(gt) {
            if void == Some(g) {
                continue;
            }
            if g >= k {
                return Err(Error::data(format!("ground-truth label {g} outside 0..{k}")));
            }
            if p >= k {
                return Err(Error::data(format!("prediction {p} outside 0..{k}")));
            }
            self.counts[(g * k + p) as usize] += 1;
        }
        Ok(())
    }

    /// Merge a shard (associative, commutative).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU; classes absent from both ground truth and
    /// prediction are None (0/0) and excluded from the mean.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::data("empty confusion matrix"));
        }
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn global_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::data("empty confusion matrix"));
        }
        let trace: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// CSV mirroring the per-class results table: one row per class plus
    /// a summary row.
    pub fn report_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class_iou().iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            match iou {
                Some(v) => out.push_str(&format!("{name},{v:.6}\n")),
                None => out.push_str(&format!("{name},\n")),
            }
        }
        let miou = self.miou().unwrap_or(f64::NAN);
        let acc = self.global_accuracy().unwrap_or(f64::NAN);
        out.push_str(&format!("mean_iou,{miou:.6}\n"));
        out.push_str(&format!("global_accuracy,{acc:.6}\n"));
        out
    }
}

/// Per-pixel argmax over the channel axis of a logit tensor.
pub fn argmax_labels<S: Scalar>(logits: &Tensor<S>) -> Vec<u32> {
    let ls = logits.shape();
    let hw = ls.h * ls.w;
    let ld = logits.data();
    let mut out = vec![0u32; ls.n * hw];
    for n in 0..ls.n {
        for p in 0..hw {
            let mut best = 0u32;
            let mut best_v = ld[n * ls.c * hw + p];
            for c in 1..ls.c {
                let v = ld[(n * ls.c + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c as u32;
                }
            }
            out[n * hw + p] = best;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2], None).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.global_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn hand_tallied_example() {
        // gt = (0,0,1,1), pred = (0,1,1,1): IoU0 = 1/2, IoU1 = 2/3
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], None).unwrap();
        let iou = cm.per_class_iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(cm.global_accuracy().unwrap(), 0.75);
    }

    #[test]
    fn disjoint_prediction_is_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1], &[0, 0], None).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);
    }

    #[test]
    fn void_pixels_do_not_count() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[5, 5], Some(5)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
    }

    #[test]
    fn out_of_range_labels_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0], &[3], None).is_err());
        assert!(cm.accumulate(&[3], &[0], None).is_err());
    }

    #[test]
    fn matches_brute_force_tally() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 64;
            let k = 4u32;
            let gt: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k + 1)).collect(); // 4 = void
            let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pred, &gt, Some(4)).unwrap();
            // brute force
            for g in 0..4u32 {
                for p in 0..4u32 {
                    let expect =
                        gt.iter().zip(&pred).filter(|&(&gg, &pp)| gg == g && pp == p).count() as u64;
                    assert_eq!(cm.count(g as usize, p as usize), expect);
                }
            }
        }
    }

    #[test]
    fn permutation_invariance_and_sharding() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 256;
        let gt: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();

        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&pred, &gt, None).unwrap();

        // shard accumulation equals single pass
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        a.accumulate(&pred[..100], &gt[..100], None).unwrap();
        b.accumulate(&pred[100..], &gt[100..], None).unwrap();
        a.merge(&b);
        assert_eq!(a, whole);

        // consistent class permutation leaves the metrics unchanged
        let perm = [2u32, 0, 1];
        let gt_p: Vec<u32> = gt.iter().map(|&g| perm[g as usize]).collect();
        let pred_p: Vec<u32> = pred.iter().map(|&p| perm[p as usize]).collect();
        let mut pm = ConfusionMatrix::new(3);
        pm.accumulate(&pred_p, &gt_p, None).unwrap();
        assert!((pm.miou().unwrap() - whole.miou().unwrap()).abs() < 1e-12);
        assert!((pm.global_accuracy().unwrap() - whole.global_accuracy().unwrap()).abs() < 1e-12);
    }
}
