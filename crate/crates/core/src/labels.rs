//! Learnable per-sample label distributions.
//!
//! Each sample owns an unconstrained row `ỹ_i`; its label distribution is
//! `softmax(ỹ_i)`, so it stays on the simplex however `ỹ_i` moves. Losses
//! hand back gradients in distribution coordinates and this module chains
//! them through the softmax Jacobian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{argmax_unchecked, softmax_backward, softmax_unchecked, Matrix};

/// Default initialization scale for `ỹ = K · onehot(label)`.
pub const DEFAULT_K: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelStore {
    y_tilde: Matrix,
    /// Scale used at initialization; unknown for stores read back from a snapshot.
    init_scale: Option<f64>,
}

impl LabelStore {
    /// Row `i` becomes `k · onehot(labels[i])`.
    pub fn init_from_labels(labels: &[usize], class_count: usize, k: f64) -> Result<Self> {
        if class_count < 1 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if !k.is_finite() || k < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "initialization scale K must be finite and non-negative, got {k}"
            )));
        }
        let mut y_tilde = Matrix::zeros(labels.len(), class_count);
        for (i, &l) in labels.iter().enumerate() {
            if l >= class_count {
                return Err(Error::Validation(format!(
                    "label {l} at sample {i} is out of range for {class_count} classes"
                )));
            }
            y_tilde.set(i, l, k);
        }
        Ok(LabelStore {
            y_tilde,
            init_scale: Some(k),
        })
    }

    pub fn from_raw(y_tilde: Matrix) -> Result<Self> {
        if !y_tilde.is_finite() {
            return Err(Error::Validation("label variables must be finite".into()));
        }
        Ok(LabelStore {
            y_tilde,
            init_scale: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y_tilde.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y_tilde.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.y_tilde.cols()
    }

    pub fn init_scale(&self) -> Option<f64> {
        self.init_scale
    }

    pub fn raw(&self) -> &Matrix {
        &self.y_tilde
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        self.y_tilde.row(i)
    }

    /// `softmax(ỹ_i)`
    pub fn distribution(&self, i: usize) -> Vec<f64> {
        softmax_unchecked(self.y_tilde.row(i))
    }

    pub fn distributions(&self) -> Matrix {
        let mut out = Matrix::zeros(self.len(), self.class_count());
        for i in 0..self.len() {
            out.row_mut(i).copy_from_slice(&self.distribution(i));
        }
        out
    }

    /// `ỹ_i ← ỹ_i − λ · Jᵀ g` where `g` is the gradient with respect to the
    /// distribution and `J` the softmax Jacobian at the current row. Plain
    /// gradient descent: no momentum, no weight decay.
    pub fn apply_label_gradient(&mut self, i: usize, grad_wrt_yd: &[f64], lambda: f64) -> Result<()> {
        let step = self.label_gradient(i, grad_wrt_yd)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "label step size must be finite and non-negative, got {lambda}"
            )));
        }
        if lambda == 0.0 {
            return Ok(());
        }
        for (y, g) in self.y_tilde.row_mut(i).iter_mut().zip(step) {
            *y -= lambda * g;
        }
        Ok(())
    }

    /// Gradient with respect to `ỹ_i` of a loss whose gradient with respect to
    /// the distribution is `grad_wrt_yd`.
    pub fn label_gradient(&self, i: usize, grad_wrt_yd: &[f64]) -> Result<Vec<f64>> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "sample index {i} out of range for {} rows",
                self.len()
            )));
        }
        if grad_wrt_yd.len() != self.class_count() {
            return Err(Error::InvalidArgument(format!(
                "gradient has {} entries, expected {}",
                grad_wrt_yd.len(),
                self.class_count()
            )));
        }
        Ok(softmax_backward(&self.distribution(i), grad_wrt_yd))
    }

    /// Per-row argmax of the distributions, ties to the smallest class.
    pub fn hard_labels(&self) -> Vec<usize> {
        // softmax is monotone, so the argmax of ỹ is the argmax of y^d;
        // going through the distribution keeps ties that only appear after
        // rounding consistent with what is reported.
        (0..self.len())
            .map(|i| argmax_unchecked(&self.distribution(i)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let c = self.class_count();
        let mut out = String::from("idx");
        for j in 0..c {
            let _ = write!(out, ",yt{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{i}");
            for &v in self.y_tilde.row(i) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty label snapshot".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "idx" {
            return Err(Error::Parse {
                line: 1,
                message: "header must be idx,yt0,...,yt{c-1}".into(),
            });
        }
        for (j, name) in cols[1..].iter().enumerate() {
            if *name != format!("yt{j}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected column yt{j}, found `{name}`"),
                });
            }
        }
        let c = cols.len() - 1;
        let mut data = Vec::new();
        let mut n = 0;
        for (line_no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != c + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", c + 1, fields.len()),
                });
            }
            if fields[0].parse::<usize>().ok() != Some(n) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected idx {n}, found `{}`", fields[0]),
                });
            }
            for f in &fields[1..] {
                data.push(f.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad value `{f}`"),
                })?);
            }
            n += 1;
        }
        LabelStore::from_raw(Matrix::from_vec(n, c, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
