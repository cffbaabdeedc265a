//! Class-activation saliency from the frozen centre classifier.
//!
//! For one Sobel-filtered image: pick a target logit, backpropagate it to
//! the last convolutional layer, pool the gradient per channel into
//! importance weights, take the importance-weighted sum of the feature
//! maps, rectify, min-max normalize, and upsample to the input size. The
//! resulting map is thresholded into a binary keep-mask that later blanks
//! the centre-revealing pixels during segmentation training.

pub mod cache;

use ndarray::{Array1, Axis};

use crate::classifier::{predict_centre, Classifier, ForwardCache};
use crate::data::preprocess::resize_bilinear;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::filters::EdgeImage;
use crate::nn::Fm;

pub use cache::CamCache;

/// One sample's saliency products.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRecord {
    /// Normalized class-activation map in [0,1] at full input resolution.
    pub cam: Mask,
    /// 1 = keep pixel, 0 = block pixel; `indicator(cam < threshold)`.
    pub keep_mask: Mask,
    pub threshold: f64,
    /// Centre id whose logit was explained.
    pub target_centre: u32,
    pub sample_id: String,
}

/// Which logit the activation map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamTarget {
    /// The classifier's own argmax — the default; the frozen classifier is
    /// run as-is and its prediction is explained.
    Predicted,
    /// A fixed centre id (true-label targeting, for ablations).
    Centre(u32),
}

impl Default for CamTarget {
    fn default() -> Self {
        CamTarget::Predicted
    }
}

/// Intermediate maps in pipeline order, for order-of-operations checks and
/// previews.
#[derive(Debug, Clone)]
pub struct CamTrace {
    /// Per-channel importance: gradient of the target logit w.r.t. each
    /// feature map, globally averaged.
    pub channel_importance: Array1<f64>,
    /// Importance-weighted sum of the feature maps, before rectification.
    pub weighted: Mask,
    /// After ReLU, before normalization.
    pub rectified: Mask,
    /// After min-max normalization, before upsampling.
    pub normalized: Mask,
    /// Final map at input resolution.
    pub cam: Mask,
    /// Centre id that was explained.
    pub target_centre: u32,
}

/// Computes the class-activation map for `edge`, explained at `target`,
/// upsampled to the input size. Returns the map and the centre id used.
pub fn gradcam(model: &Classifier, edge: &EdgeImage, target: CamTarget) -> Result<(Mask, u32)> {
    let trace = gradcam_with_trace(model, edge, target)?;
    Ok((trace.cam, trace.target_centre))
}

/// As [`gradcam`], but keeps every intermediate stage.
pub fn gradcam_with_trace(
    model: &Classifier,
    edge: &EdgeImage,
    target: CamTarget,
) -> Result<CamTrace> {
    let (h, w) = (edge.data.shape()[1], edge.data.shape()[2]);
    if h != model.config.input_size || w != model.config.input_size {
        return Err(Error::Shape(format!(
            "classifier expects {0}x{0} input, got {h}x{w}",
            model.config.input_size
        )));
    }
    let (_, fwd) = model.forward_full(&edge.data);
    let (target_idx, target_centre) = match target {
        CamTarget::Predicted => {
            let (_, centre) = predict_centre(model, edge)?;
            let idx = model.centres.iter().position(|&c| c == centre).expect("predicted centre");
            (idx, centre)
        }
        CamTarget::Centre(id) => match model.centres.iter().position(|&c| c == id) {
            Some(idx) => (idx, id),
            None => {
                return Err(Error::Model(format!(
                    "centre {id} is not one of the classifier's classes {:?}",
                    model.centres
                )))
            }
        },
    };

    let grad = model.grad_logit_wrt_features(&fwd, target_idx);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!(
            "non-finite gradient while explaining centre {target_centre}"
        )));
    }
    let channel_importance = crate::nn::pool::global_avg_pool(&grad);
    let weighted = weighted_sum(&fwd, &channel_importance);
    let rectified = weighted.mapv(|v| v.max(0.0));
    let normalized = normalize_cam(&rectified);
    let cam = upsample_cam(&normalized, (h, w))?;
    if cam.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!(
            "non-finite activation map while explaining centre {target_centre}"
        )));
    }
    Ok(CamTrace { channel_importance, weighted, rectified, normalized, cam, target_centre })
}

fn weighted_sum(fwd: &ForwardCache, importance: &Array1<f64>) -> Mask {
    let (fh, fw) = (fwd.features.shape()[1], fwd.features.shape()[2]);
    let mut acc = Mask::zeros((fh, fw));
    for (plane, &iw) in fwd.features.axis_iter(Axis(0)).zip(importance.iter()) {
        acc.scaled_add(iw, &plane);
    }
    acc
}

/// Min-max normalization to [0,1]; a flat map (max = min) collapses to all
/// zeros so that downstream thresholding blocks nothing.
pub fn normalize_cam(raw: &Mask) -> Mask {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Mask::zeros(raw.raw_dim());
    }
    raw.mapv(|v| (v - lo) / (hi - lo))
}

/// Bilinear upsampling of a saliency plane to `size`.
pub fn upsample_cam(cam: &Mask, size: (usize, usize)) -> Result<Mask> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Shape(format!("cannot upsample to {}x{}", size.0, size.1)));
    }
    let as_fm: Fm = cam
        .clone()
        .insert_axis(Axis(0))
        .into_dimensionality()
        .expect("plane with a leading channel axis");
    Ok(resize_bilinear(&as_fm, size.0, size.1).index_axis(Axis(0), 0).to_owned())
}

/// Thresholds a normalized map into the keep-mask: 1 (keep) where the map
/// is below `th`, 0 (block) where saliency reaches it. A pixel at exactly
/// `th` is blocked.
pub fn binarize(cam: &Mask, th: f64) -> Result<Mask> {
    if !(th > 0.0 && th < 1.0) {
        return Err(Error::Config(format!("threshold must lie strictly in (0,1), got {th}")));
    }
    Ok(cam.mapv(|v| if v < th { 1.0 } else { 0.0 }))
}

/// Full per-sample saliency product: activation map plus keep-mask.
pub fn make_record(
    model: &Classifier,
    edge: &EdgeImage,
    sample_id: &str,
    threshold: f64,
    target: CamTarget,
) -> Result<SaliencyRecord> {
    let (cam, target_centre) = gradcam(model, edge, target)?;
    let keep_mask = binarize(&cam, threshold)?;
    Ok(SaliencyRecord {
        cam,
        keep_mask,
        threshold,
        target_centre,
        sample_id: sample_id.to_string(),
    })
}
