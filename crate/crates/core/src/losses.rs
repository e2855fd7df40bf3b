//! Per-sample losses and their analytic gradients.
//!
//! Every loss sees the network prediction `f = softmax(logits)` and/or the
//! label distribution `y^d`, and reports gradients with respect to the logits
//! (the network path) and with respect to `y^d` (the label path). Terms that
//! do not depend on one of the two report an all-zero vector there.
//!
//! Logarithms in loss *values* are clamped at [`crate::math::LOG_EPS`]. Gradients use the
//! unclamped closed forms, which are finite because softmax outputs are
//! bounded away from zero.

use crate::error::{Error, Result};
use crate::math::{ln_clamped, softmax_backward};

/// Value and gradients of one loss term for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad_wrt_logits: Vec<f64>,
    pub grad_wrt_yd: Vec<f64>,
}

/// The weighted objective `L_c / c + α·L_o + (β / c)·L_e` for one sample,
/// together with its components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub lc: f64,
    pub lo: f64,
    pub le: f64,
    pub total: f64,
    pub grad_wrt_logits: Vec<f64>,
    pub grad_wrt_yd: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PencilWeights {
    /// Weight on the compatibility term.
    pub alpha: f64,
    /// Weight on the entropy term (scaled by `1/c` like the classification term).
    pub beta: f64,
}

fn check_label(label: usize, c: usize) -> Result<()> {
    if label >= c {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    Ok(())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "distribution lengths differ or are empty: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `−ln f_label`; logit gradient `f − onehot(label)`.
pub fn cross_entropy(f: &[f64], label: usize) -> Result<LossTerm> {
    let c = f.len();
    check_label(label, c)?;
    let mut grad = f.to_vec();
    grad[label] -= 1.0;
    Ok(LossTerm {
        value: -ln_clamped(f[label]),
        grad_wrt_logits: grad,
        grad_wrt_yd: vec![0.0; c],
    })
}

/// Forward KL `KL(y^d ‖ f) = Σ y^d_j ln(y^d_j / f_j)`.
///
/// `∂/∂y^d_j = ln(y^d_j / f_j) + 1`, logit gradient `f − y^d`.
pub fn kl_label_to_pred(yd: &[f64], f: &[f64]) -> Result<LossTerm> {
    check_pair(yd, f)?;
    let log_ratio: Vec<f64> = yd
        .iter()
        .zip(f)
        .map(|(&y, &p)| ln_clamped(y) - ln_clamped(p))
        .collect();
    let value = yd.iter().zip(&log_ratio).map(|(y, r)| y * r).sum();
    Ok(LossTerm {
        value,
        grad_wrt_logits: f.iter().zip(yd).map(|(p, y)| p - y).collect(),
        grad_wrt_yd: log_ratio.iter().map(|r| r + 1.0).collect(),
    })
}

/// Reversed KL `KL(f ‖ y^d) = Σ f_j ln(f_j / y^d_j)`, the classification loss.
///
/// `∂/∂y^d_j = −f_j / y^d_j`; the logit gradient chains `ln(f_j / y^d_j) + 1`
/// through the softmax Jacobian.
pub fn kl_pred_to_label(f: &[f64], yd: &[f64]) -> Result<LossTerm> {
    check_pair(f, yd)?;
    let log_ratio: Vec<f64> = f
        .iter()
        .zip(yd)
        .map(|(&p, &y)| ln_clamped(p) - ln_clamped(y))
        .collect();
    let value = f.iter().zip(&log_ratio).map(|(p, r)| p * r).sum();
    let d_f: Vec<f64> = log_ratio.iter().map(|r| r + 1.0).collect();
    Ok(LossTerm {
        value,
        grad_wrt_logits: softmax_backward(f, &d_f),
        grad_wrt_yd: f.iter().zip(yd).map(|(p, y)| -p / y).collect(),
    })
}

/// Compatibility loss `−ln y^d_label`, anchoring the distribution to the
/// observed label. Does not touch the network.
pub fn compatibility(noisy_label: usize, yd: &[f64]) -> Result<LossTerm> {
    let c = yd.len();
    check_label(noisy_label, c)?;
    let mut grad = vec![0.0; c];
    grad[noisy_label] = -1.0 / yd[noisy_label];
    Ok(LossTerm {
        value: -ln_clamped(yd[noisy_label]),
        grad_wrt_logits: vec![0.0; c],
        grad_wrt_yd: grad,
    })
}

/// Prediction entropy `−Σ f_j ln f_j`. Does not touch the label distribution.
pub fn entropy(f: &[f64]) -> Result<LossTerm> {
    if f.is_empty() {
        return Err(Error::InvalidArgument("entropy of an empty distribution".into()));
    }
    let logs: Vec<f64> = f.iter().map(|&p| ln_clamped(p)).collect();
    let value = -f.iter().zip(&logs).map(|(p, l)| p * l).sum::<f64>();
    let d_f: Vec<f64> = logs.iter().map(|l| -(l + 1.0)).collect();
    Ok(LossTerm {
        value,
        grad_wrt_logits: softmax_backward(f, &d_f),
        grad_wrt_yd: vec![0.0; f.len()],
    })
}

/// Weighted sum of the three terms for one sample.
pub fn pencil_total(
    f: &[f64],
    yd: &[f64],
    noisy_label: usize,
    weights: PencilWeights,
) -> Result<LossBundle> {
    let PencilWeights { alpha, beta } = weights;
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got alpha={alpha} beta={beta}"
        )));
    }
    let lc = kl_pred_to_label(f, yd)?;
    let lo = compatibility(noisy_label, yd)?;
    let le = entropy(f)?;
    let inv_c = 1.0 / f.len() as f64;
    let wc = inv_c;
    let wo = alpha;
    let we = beta * inv_c;

    let grad_wrt_logits = (0..f.len())
        .map(|j| wc * lc.grad_wrt_logits[j] + we * le.grad_wrt_logits[j])
        .collect();
    let grad_wrt_yd = (0..f.len())
        .map(|j| wc * lc.grad_wrt_yd[j] + wo * lo.grad_wrt_yd[j])
        .collect();
    Ok(LossBundle {
        lc: lc.value,
        lo: lo.value,
        le: le.value,
        total: combine(lc.value, lo.value, le.value, f.len(), weights),
        grad_wrt_logits,
        grad_wrt_yd,
    })
}

/// `lc / c + α·lo + (β / c)·le`
pub fn combine(lc: f64, lo: f64, le: f64, c: usize, weights: PencilWeights) -> f64 {
    let c = c as f64;
    lc / c + weights.alpha * lo + weights.beta / c * le
}
