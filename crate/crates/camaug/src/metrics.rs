//! Segmentation evaluation: confusion counts, Dice / recall / accuracy,
//! per-set aggregation, and report rendering.

use std::collections::BTreeMap;

use crate::data::Mask;
use crate::{Error, Result};

/// Pixel-level confusion counts for one (prediction, ground-truth) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Binarizes a probability map at 0.5: values >= 0.5 become foreground.
pub fn binarize_pred(pred: &Mask) -> Mask {
    pred.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Counts TP/FP/FN/TN over two binary masks of equal shape.
pub fn confusion_counts(pred_bin: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred_bin.raw_dim() != gt.raw_dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred_bin.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &g) in pred_bin.iter().zip(gt.iter()) {
        assert!(p == 0.0 || p == 1.0, "prediction must be binary, found {p}");
        assert!(g == 0.0 || g == 1.0, "ground truth must be binary, found {g}");
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice coefficient `2TP / (2TP + FP + FN)`. Both masks empty -> 1
/// (a correct all-negative prediction is not penalized).
pub fn dice_score(c: ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    2.0 * c.tp as f64 / denom as f64
}

/// Recall `TP / (TP + FN)`; empty ground truth -> 1.
pub fn recall(c: ConfusionCounts) -> f64 {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

/// Pixel accuracy `(TP + TN) / total`.
pub fn accuracy(c: ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        return 1.0;
    }
    (c.tp + c.tn) as f64 / total as f64
}

/// The three reported metrics for one sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleMetrics {
    pub dice: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Binarizes the prediction at 0.5 and scores it against the ground truth.
pub fn evaluate_pair(pred: &Mask, gt: &Mask) -> Result<SampleMetrics> {
    let counts = confusion_counts(&binarize_pred(pred), gt)?;
    Ok(SampleMetrics {
        dice: dice_score(counts),
        recall: recall(counts),
        accuracy: accuracy(counts),
    })
}

/// Unweighted per-sample means over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SetMetrics {
    pub dice: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Mean of per-sample metrics (each sample weighs the same regardless of
/// its pixel count).
pub fn aggregate(samples: &[SampleMetrics]) -> Result<SetMetrics> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot aggregate metrics over an empty evaluation set".into()));
    }
    let n = samples.len() as f64;
    Ok(SetMetrics {
        dice: samples.iter().map(|m| m.dice).sum::<f64>() / n,
        recall: samples.iter().map(|m| m.recall).sum::<f64>() / n,
        accuracy: samples.iter().map(|m| m.accuracy).sum::<f64>() / n,
        samples: samples.len(),
    })
}

/// Evaluation-set order used when rendering reports.
pub const SET_ORDER: [&str; 3] = ["val", "test_in", "test_out"];

/// Metrics for every evaluation set of one trained model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    /// Architecture name ("unet", "deeplab", "sdnet").
    pub model: String,
    pub held_out_centre: u32,
    /// Masking probability when augmentation was on; `None` for baselines.
    pub p: Option<f64>,
    /// Fingerprint of the experiment configuration that produced this.
    pub fingerprint: String,
    pub per_set: BTreeMap<String, SetMetrics>,
}

impl MetricsReport {
    /// One aligned text row per evaluation set.
    pub fn render_rows(&self) -> String {
        let mut out = String::from(
            "model     centre  p     set       samples  dice    recall  accuracy\n",
        );
        let p = match self.p {
            Some(p) => format!("{p:.2}"),
            None => "-".into(),
        };
        let mut names: Vec<&str> = SET_ORDER
            .iter()
            .copied()
            .filter(|s| self.per_set.contains_key(*s))
            .collect();
        names.extend(self.per_set.keys().map(String::as_str).filter(|k| !SET_ORDER.contains(k)));
        for name in names {
            let m = &self.per_set[name];
            out.push_str(&format!(
                "{:<9} {:<7} {:<5} {:<9} {:<8} {:.4}  {:.4}  {:.4}\n",
                self.model, self.held_out_centre, p, name, m.samples, m.dice, m.recall, m.accuracy
            ));
        }
        out
    }
}

/// Formats a Dice value with the masking probability that produced it,
/// e.g. `0.6062 (60%)`.
pub fn dice_with_p(dice: f64, p: f64) -> String {
    format!("{:.4} ({}%)", dice, (p * 100.0).round() as u32)
}
