//! Detection loss head, computed on a float64 path.
//!
//! The total objective is `L_total = L_box + L_genus + lambda * L_cls`,
//! where `L_box` folds together the proposal-stage objectness and box
//! regression with the region-stage box regression, and the two
//! classification terms are mean cross-entropies of the genus head and the
//! biological-class head over the same sampled regions.

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Scalar weight on the biological-class loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a finite non-negative scalar, got {lambda}")));
        }
        Ok(LossWeights { lambda })
    }
}

/// The three loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_genus: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Combine components into the weighted total, rejecting non-finite
    /// inputs with a diagnostic.
    pub fn compose(l_box: f64, l_genus: f64, l_cls: f64, weights: &LossWeights) -> Result<Self> {
        let l_total = l_box + l_genus + weights.lambda * l_cls;
        let out = LossBreakdown { l_box, l_genus, l_cls, l_total };
        if !(l_box.is_finite() && l_genus.is_finite() && l_cls.is_finite() && l_total.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss: box={l_box} genus={l_genus} cls={l_cls} lambda={}",
                weights.lambda
            )));
        }
        Ok(out)
    }

    /// Relative gap of the composition identity; should be ~0 always.
    pub fn identity_gap(&self, weights: &LossWeights) -> f64 {
        let expect = self.l_box + self.l_genus + weights.lambda * self.l_cls;
        (self.l_total - expect).abs() / self.l_total.abs().max(1.0)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Cross-entropy of a single logit vector against a target index:
/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Validation(format!(
            "cross_entropy target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Mean cross-entropy over rows plus the gradient with respect to the
/// logits: `(softmax - onehot) / rows`.
pub fn cross_entropy_batch(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (rows, _cols) = logits.dim();
    if rows != targets.len() {
        return Err(Error::Validation(format!(
            "cross_entropy_batch: {rows} logit rows vs {} targets",
            targets.len()
        )));
    }
    if rows == 0 {
        return Ok((0.0, Array2::zeros(logits.dim())));
    }
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    for (i, (row, &t)) in logits.outer_iter().zip(targets.iter()).enumerate() {
        let slice = row.as_slice().unwrap();
        total += cross_entropy(slice, t)?;
        let p = softmax(slice);
        for (j, &pj) in p.iter().enumerate() {
            grad[[i, j]] = (pj - if j == t { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    Ok((total / rows as f64, grad))
}

/// Huber / smooth-L1 on one scalar with transition point `beta` = 1.
fn smooth_l1_scalar(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Sum of element-wise smooth-L1 over delta vectors divided by
/// `normalizer`, plus gradient with respect to the predictions.
pub fn smooth_l1_loss(
    pred: &[[f64; 4]],
    target: &[[f64; 4]],
    normalizer: usize,
) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != target.len() {
        return Err(Error::Validation(format!(
            "smooth_l1_loss: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let norm = normalizer.max(1) as f64;
    let mut total = 0.0;
    let mut grads = vec![[0.0f64; 4]; pred.len()];
    for (i, (p, t)) in pred.iter().zip(target.iter()).enumerate() {
        for k in 0..4 {
            let (l, g) = smooth_l1_scalar(p[k] - t[k]);
            total += l;
            grads[i][k] = g / norm;
        }
    }
    Ok((total / norm, grads))
}

/// Mean binary cross-entropy with logits, plus gradient w.r.t. the logits:
/// `(sigmoid(x) - y) / n`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::Validation(format!(
            "bce_with_logits: {} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0f64; logits.len()];
    for (i, (&x, &y)) in logits.iter().zip(targets.iter()).enumerate() {
        // log(1 + e^{-|x|}) + max(x, 0) - x*y  (stable form)
        total += (-x.abs()).exp().ln_1p() + x.max(0.0) - x * y;
        let s = 1.0 / (1.0 + (-x).exp());
        grad[i] = (s - y) / n;
    }
    Ok((total / n, grad))
}

/// Raw per-region and per-anchor outputs with their assigned targets, all
/// on the f64 path. Box-delta vectors are listed for positives only.
#[derive(Debug, Clone, Default)]
pub struct DetectionLossInputs {
    pub rpn_obj_logits: Vec<f64>,
    pub rpn_obj_targets: Vec<f64>,
    pub rpn_box_deltas: Vec<[f64; 4]>,
    pub rpn_box_targets: Vec<[f64; 4]>,
    /// Count of sampled anchors normalizing the proposal-stage box term.
    pub rpn_normalizer: usize,
    pub genus_logits: Array2<f64>,
    pub genus_targets: Vec<usize>,
    pub class_logits: Array2<f64>,
    pub class_targets: Vec<usize>,
    pub roi_box_deltas: Vec<[f64; 4]>,
    pub roi_box_targets: Vec<[f64; 4]>,
    /// Count of sampled regions normalizing the region-stage box term.
    pub roi_normalizer: usize,
}

/// Gradients of `L_total` with respect to every raw output in
/// [`DetectionLossInputs`].
#[derive(Debug, Clone, Default)]
pub struct DetectionLossGrads {
    pub rpn_obj: Vec<f64>,
    pub rpn_box: Vec<[f64; 4]>,
    pub genus: Array2<f64>,
    pub class: Array2<f64>,
    pub roi_box: Vec<[f64; 4]>,
}

/// Evaluate the full objective and its gradients.
///
/// `L_box` = objectness BCE + proposal box smooth-L1 + region box smooth-L1;
/// `L_genus` / `L_cls` = mean cross-entropy of the two heads. The class-head
/// gradient is scaled by lambda, so lambda = 0 yields exactly zero gradient
/// there.
pub fn compute_loss(inputs: &DetectionLossInputs, weights: &LossWeights) -> Result<(LossBreakdown, DetectionLossGrads)> {
    let (l_obj, g_obj) = bce_with_logits(&inputs.rpn_obj_logits, &inputs.rpn_obj_targets)?;
    let (l_rpn_box, g_rpn_box) = smooth_l1_loss(&inputs.rpn_box_deltas, &inputs.rpn_box_targets, inputs.rpn_normalizer)?;
    let (l_roi_box, g_roi_box) = smooth_l1_loss(&inputs.roi_box_deltas, &inputs.roi_box_targets, inputs.roi_normalizer)?;
    let (l_genus, g_genus) = cross_entropy_batch(&inputs.genus_logits, &inputs.genus_targets)?;
    let (l_cls, g_class_raw) = if inputs.class_logits.nrows() > 0 {
        cross_entropy_batch(&inputs.class_logits, &inputs.class_targets)?
    } else {
        (0.0, Array2::zeros((0, 0)))
    };
    let breakdown = LossBreakdown::compose(l_obj + l_rpn_box + l_roi_box, l_genus, l_cls, weights)?;
    let grads = DetectionLossGrads {
        rpn_obj: g_obj,
        rpn_box: g_rpn_box,
        genus: g_genus,
        class: g_class_raw.mapv(|g| g * weights.lambda),
        roi_box: g_roi_box,
    };
    Ok((breakdown, grads))
}
