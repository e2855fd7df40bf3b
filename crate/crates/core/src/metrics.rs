//! Accuracy, corrected-label counting, and the per-epoch metrics CSV.

use std::fs;
use std::path::Path;

use crate::backbone::MlpParams;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelStore;
use crate::math::argmax_unchecked;

pub const METRICS_HEADER: &str = "epoch,phase,lr,lambda,loss_total,loss_lc,loss_lo,loss_le,train_acc,test_acc,correct_labels,recovery_rate";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Global epoch index across all phases, starting at 1.
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    /// Label step size at the end of the epoch (0 outside phase 2).
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_lc: f64,
    pub loss_lo: f64,
    pub loss_le: f64,
    /// Against the training labels the network was fit to (noisy).
    pub train_acc: f64,
    /// Against the clean test labels.
    pub test_acc: f64,
    pub correct_labels: usize,
    pub recovery_rate: f64,
}

/// Percentage of samples whose predicted class equals `labels[i]`.
pub fn accuracy(params: &MlpParams, ds: &Dataset, labels: &[usize]) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    if labels.len() != ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} samples",
            labels.len(),
            ds.len()
        )));
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let f = params.predict(ds.feature(i))?;
        if argmax_unchecked(&f) == y {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / ds.len() as f64)
}

/// Accuracy against true labels when the dataset has them.
pub fn eval_accuracy(params: &MlpParams, ds: &Dataset) -> Result<f64> {
    accuracy(params, ds, ds.eval_labels())
}

/// Number and fraction of rows whose hard label equals the true label.
pub fn corrected_count(store: &LabelStore, true_labels: &[usize]) -> Result<(usize, f64)> {
    if true_labels.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels for {} label rows",
            true_labels.len(),
            store.len()
        )));
    }
    let count = store
        .hard_labels()
        .iter()
        .zip(true_labels)
        .filter(|(a, b)| a == b)
        .count();
    let rate = if true_labels.is_empty() {
        0.0
    } else {
        count as f64 / true_labels.len() as f64
    };
    Ok((count, rate))
}

/// `%.6g`-style formatting: six significant digits, trailing zeros trimmed.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    // Exponent after rounding to 6 significant digits.
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

/// One CSV line for `r`, without the trailing newline.
pub fn metrics_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.phase,
        fmt_sig6(r.lr),
        fmt_sig6(r.lambda),
        fmt_sig6(r.loss_total),
        fmt_sig6(r.loss_lc),
        fmt_sig6(r.loss_lo),
        fmt_sig6(r.loss_le),
        fmt_sig6(r.train_acc),
        fmt_sig6(r.test_acc),
        r.correct_labels,
        fmt_sig6(r.recovery_rate),
    )
}

pub fn metrics_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing metrics header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(line, l)| {
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("bad {what}"),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(bad("field count"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(f[i]));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("epoch"))?,
                phase: f[1].parse().map_err(|_| bad("phase"))?,
                lr: num(2)?,
                lambda: num(3)?,
                loss_total: num(4)?,
                loss_lc: num(5)?,
                loss_lo: num(6)?,
                loss_le: num(7)?,
                train_acc: num(8)?,
                test_acc: num(9)?,
                correct_labels: f[10].parse().map_err(|_| bad("correct_labels"))?,
                recovery_rate: num(11)?,
            })
        })
        .collect()
}
