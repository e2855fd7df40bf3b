//! Finite-difference verification of every analytic gradient.
//!
//! For each loss, random instances are drawn on a small network: a feature
//! vector, a label-variable row and a noisy label. The analytic gradients
//! with respect to the logits, every network parameter, and the label
//! variables are compared with central differences of the loss value. The
//! numeric side only ever evaluates loss values through `forward`, `softmax`
//! and the loss function, never the backward code.

use std::fmt;
use std::time::{Duration, Instant};

use crate::backbone::MlpParams;
use crate::error::Result;
use crate::labels::LabelStore;
use crate::losses::{
    compatibility, cross_entropy, entropy, kl_label_to_pred, kl_pred_to_label, pencil_total,
    LossTerm, PencilWeights,
};
use crate::math::{softmax_unchecked, Matrix, SeededRng};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Differences below this are treated as exact agreement; both sides are
/// then pure rounding noise.
const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    ForwardKl,
    ReverseKl,
    Compatibility,
    Entropy,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::CrossEntropy,
        LossKind::ForwardKl,
        LossKind::ReverseKl,
        LossKind::Compatibility,
        LossKind::Entropy,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::ForwardKl => "kl_label_to_pred",
            LossKind::ReverseKl => "kl_pred_to_label",
            LossKind::Compatibility => "compatibility",
            LossKind::Entropy => "entropy",
            LossKind::Total => "pencil_total",
        }
    }

    fn eval(self, f: &[f64], yd: &[f64], label: usize, w: PencilWeights) -> Result<LossTerm> {
        match self {
            LossKind::CrossEntropy => cross_entropy(f, label),
            LossKind::ForwardKl => kl_label_to_pred(yd, f),
            LossKind::ReverseKl => kl_pred_to_label(f, yd),
            LossKind::Compatibility => compatibility(label, yd),
            LossKind::Entropy => entropy(f),
            LossKind::Total => pencil_total(f, yd, label, w).map(|b| LossTerm {
                value: b.total,
                grad_wrt_logits: b.grad_wrt_logits,
                grad_wrt_yd: b.grad_wrt_yd,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub layer_sizes: [usize; 3],
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            instances: 100,
            step: DEFAULT_STEP,
            layer_sizes: [2, 8, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: LossKind,
    pub instances: usize,
    pub max_rel_logits: f64,
    pub max_rel_params: f64,
    pub max_rel_labels: f64,
}

impl GradcheckRow {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_logits
            .max(self.max_rel_params)
            .max(self.max_rel_labels)
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.rows.iter().map(GradcheckRow::max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel() <= tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>9} {:>12} {:>12} {:>12}",
            "loss", "instances", "logits", "params", "labels"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>9} {:>12.3e} {:>12.3e} {:>12.3e}",
                r.loss.name(),
                r.instances,
                r.max_rel_logits,
                r.max_rel_params,
                r.max_rel_labels
            )?;
        }
        write!(f, "max relative error {:.3e}", self.max_rel())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

struct Instance {
    params: MlpParams,
    x: Vec<f64>,
    label_row: Vec<f64>,
    label: usize,
    weights: PencilWeights,
}

fn draw_instance(rng: &mut SeededRng, sizes: &[usize; 3], step: f64) -> Result<Instance> {
    let c = sizes[2];
    let params = MlpParams::init(sizes, rng.next_u64())?;
    // Keep away from ReLU kinks, where central differences are meaningless.
    let x = loop {
        let x: Vec<f64> = (0..sizes[0]).map(|_| 1.5 * rng.normal()).collect();
        let (_, cache) = params.forward(&x)?;
        if cache.min_abs_preactivation() > 1e3 * step {
            break x;
        }
    };
    Ok(Instance {
        params,
        x,
        label_row: (0..c).map(|_| 2.0 * rng.normal()).collect(),
        label: rng.below(c),
        weights: PencilWeights {
            alpha: rng.uniform(),
            beta: rng.uniform(),
        },
    })
}

fn check_one(kind: LossKind, inst: &Instance, h: f64, row: &mut GradcheckRow) -> Result<()> {
    let yd = softmax_unchecked(&inst.label_row);
    let (logits, cache) = inst.params.forward(&inst.x)?;
    let f = softmax_unchecked(&logits);
    let term = kind.eval(&f, &yd, inst.label, inst.weights)?;

    let value_at = |logits: &[f64], label_row: &[f64]| -> Result<f64> {
        let f = softmax_unchecked(logits);
        let yd = softmax_unchecked(label_row);
        Ok(kind.eval(&f, &yd, inst.label, inst.weights)?.value)
    };
    let central = |up: f64, dn: f64| (up - dn) / (2.0 * h);

    for k in 0..logits.len() {
        let mut up = logits.clone();
        let mut dn = logits.clone();
        up[k] += h;
        dn[k] -= h;
        let numeric = central(value_at(&up, &inst.label_row)?, value_at(&dn, &inst.label_row)?);
        row.max_rel_logits = row
            .max_rel_logits
            .max(relative_error(term.grad_wrt_logits[k], numeric));
    }

    let analytic = inst.params.backward(&cache, &term.grad_wrt_logits)?.flatten();
    let mut probe = inst.params.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.param(i);
        probe.set_param(i, orig + h);
        let up = value_at(&probe.logits(&inst.x)?, &inst.label_row)?;
        probe.set_param(i, orig - h);
        let dn = value_at(&probe.logits(&inst.x)?, &inst.label_row)?;
        probe.set_param(i, orig);
        row.max_rel_params = row.max_rel_params.max(relative_error(a, central(up, dn)));
    }

    let store = LabelStore::from_raw(Matrix::from_vec(1, yd.len(), inst.label_row.clone())?)?;
    let analytic = store.label_gradient(0, &term.grad_wrt_yd)?;
    for k in 0..yd.len() {
        let mut up = inst.label_row.clone();
        let mut dn = inst.label_row.clone();
        up[k] += h;
        dn[k] -= h;
        let numeric = central(value_at(&logits, &up)?, value_at(&logits, &dn)?);
        row.max_rel_labels = row.max_rel_labels.max(relative_error(analytic[k], numeric));
    }
    Ok(())
}

/// Runs every loss over `options.instances` random instances.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let clock = Instant::now();
    let mut rows = Vec::new();
    for (n, kind) in LossKind::ALL.into_iter().enumerate() {
        let mut rng = SeededRng::derived(options.seed, n as u64);
        let mut row = GradcheckRow {
            loss: kind,
            instances: options.instances,
            max_rel_logits: 0.0,
            max_rel_params: 0.0,
            max_rel_labels: 0.0,
        };
        for _ in 0..options.instances {
            let inst = draw_instance(&mut rng, &options.layer_sizes, options.step)?;
            check_one(kind, &inst, options.step, &mut row)?;
        }
        rows.push(row);
    }
    Ok(GradcheckReport {
        rows,
        elapsed: clock.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-12), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_at_default_tolerance() {
        let report = run_gradcheck(&GradcheckOptions {
            instances: 20,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.passed(DEFAULT_TOLERANCE), "{report}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Hand the checker a label gradient for the wrong loss.
        let mut rng = SeededRng::new(3);
        let inst = draw_instance(&mut rng, &[2, 8, 3], DEFAULT_STEP).unwrap();
        let yd = softmax_unchecked(&inst.label_row);
        let f = inst.params.predict(&inst.x).unwrap();
        let wrong = kl_label_to_pred(&yd, &f).unwrap().grad_wrt_yd;
        let store = LabelStore::from_raw(Matrix::from_vec(1, 3, inst.label_row.clone()).unwrap()).unwrap();
        let analytic = store.label_gradient(0, &wrong).unwrap();
        let right = store
            .label_gradient(0, &kl_pred_to_label(&f, &yd).unwrap().grad_wrt_yd)
            .unwrap();
        let worst = analytic
            .iter()
            .zip(&right)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0, f64::max);
        assert!(worst > 1e-2);
    }
}
