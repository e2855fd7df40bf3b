//! Datasets: synthetic Gaussian blobs, CSV persistence, train/test splits and
//! label-noise injection.
//!
//! Noise injectors always draw from the *true* labels, so they never compound:
//! re-injecting into an already noisy dataset replaces the previous noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    noisy_labels: Vec<usize>,
    true_labels: Option<Vec<usize>>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        noisy_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Validation(format!(
                "class count must be at least 2, got {class_count}"
            )));
        }
        if features.rows() != noisy_labels.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                noisy_labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain non-finite values".into()));
        }
        check_labels(&noisy_labels, class_count, "noisy")?;
        if let Some(t) = &true_labels {
            if t.len() != noisy_labels.len() {
                return Err(Error::Validation(format!(
                    "{} true labels for {} samples",
                    t.len(),
                    noisy_labels.len()
                )));
            }
            check_labels(t, class_count, "true")?;
        }
        Ok(Dataset {
            features,
            noisy_labels,
            true_labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    /// True labels when known, otherwise the observed ones.
    pub fn eval_labels(&self) -> &[usize] {
        self.true_labels().unwrap_or(&self.noisy_labels)
    }

    /// Fraction of samples whose observed label differs from the true label.
    pub fn corruption_rate(&self) -> Option<f64> {
        let t = self.true_labels.as_ref()?;
        if t.is_empty() {
            return Some(0.0);
        }
        let wrong = t
            .iter()
            .zip(&self.noisy_labels)
            .filter(|(a, b)| a != b)
            .count();
        Some(wrong as f64 / t.len() as f64)
    }

    pub fn with_noisy_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(
            self.features.clone(),
            labels,
            self.true_labels.clone(),
            self.class_count,
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            noisy_labels: idx.iter().map(|&i| self.noisy_labels[i]).collect(),
            true_labels: self
                .true_labels
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
            class_count: self.class_count,
        }
    }
}

fn check_labels(labels: &[usize], c: usize, what: &str) -> Result<()> {
    match labels.iter().position(|&l| l >= c) {
        Some(i) => Err(Error::Validation(format!(
            "{what} label {} at sample {i} is out of range for {c} classes",
            labels[i]
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub samples: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub sigma: f64,
}

const CENTER_ATTEMPTS: usize = 10_000;

/// `c` isotropic Gaussian clusters, one per class, with centers drawn
/// uniformly from a cube and rejected until every pair is at least
/// `separation` apart. Sample `i` belongs to class `i mod c`.
pub fn make_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    make_blobs_with_centers(spec, seed).map(|(ds, _)| ds)
}

/// [`make_blobs`], also returning the cluster centers (one row per class).
pub fn make_blobs_with_centers(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Matrix)> {
    let BlobSpec {
        samples: n,
        classes: c,
        dims: d,
        separation,
        sigma,
    } = *spec;
    if c < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {c}")));
    }
    if n < c {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot cover {c} classes"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "separation must be non-negative, got {separation}"
        )));
    }

    let mut rng = SeededRng::derived(seed, 0xB10B);
    // Cube large enough that c well-separated points fit comfortably.
    let half_width = separation.max(sigma) * (c as f64).powf(1.0 / d as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while centers.len() < c {
        if attempts == CENTER_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {c} centers {separation} apart in {d} dimensions"
            )));
        }
        attempts += 1;
        let cand: Vec<f64> = (0..d)
            .map(|_| rng.uniform_range(-half_width, half_width))
            .collect();
        let ok = centers.iter().all(|other| {
            let dist2: f64 = other.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum();
            dist2.sqrt() >= separation
        });
        if ok {
            centers.push(cand);
        }
    }

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        labels.push(k);
        for &m in &centers[k] {
            data.push(m + sigma * rng.normal());
        }
    }
    let features = Matrix::from_vec(n, d, data)?;
    let ds = Dataset::new(features, labels.clone(), Some(labels), c)?;
    Ok((ds, Matrix::from_rows(&centers)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Kept with probability `1 - r`, otherwise redrawn uniformly over all classes
    /// (the redraw may land on the true class).
    Symmetric,
    /// Flipped to `(label + 1) mod c` with probability `r`.
    AsymmetricCircular,
    /// Listed source classes flip to their target with probability `r`.
    AsymmetricPairs,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
            "asymmetric-circular" | "circular" => Ok(NoiseKind::AsymmetricCircular),
            "asymmetric-pairs" | "pairs" => Ok(NoiseKind::AsymmetricPairs),
            other => Err(Error::InvalidArgument(format!("unknown noise kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::AsymmetricCircular => "asymmetric-circular",
            NoiseKind::AsymmetricPairs => "asymmetric-pairs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// `(source, target)` pairs; only used by [`NoiseKind::AsymmetricPairs`].
    pub pair_map: Option<Vec<(usize, usize)>>,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            pair_map: None,
        }
    }

    pub fn circular(rate: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::AsymmetricCircular,
            rate,
            pair_map: None,
        }
    }

    pub fn pairs(rate: f64, pairs: Vec<(usize, usize)>) -> Self {
        NoiseSpec {
            kind: NoiseKind::AsymmetricPairs,
            rate,
            pair_map: Some(pairs),
        }
    }

    /// CIFAR-10 confusions: truck→automobile, bird→airplane, deer→horse, cat↔dog.
    pub fn cifar10_pairs(rate: f64) -> Self {
        Self::pairs(rate, vec![(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)])
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        check_rate(self.rate)?;
        if self.kind == NoiseKind::AsymmetricPairs {
            let pairs = self.pair_map.as_ref().ok_or_else(|| {
                Error::InvalidArgument("asymmetric-pairs noise requires a pair map".into())
            })?;
            let mut seen = vec![false; class_count];
            for &(s, t) in pairs {
                if s >= class_count || t >= class_count {
                    return Err(Error::InvalidArgument(format!(
                        "pair {s}->{t} references a class outside [0, {class_count})"
                    )));
                }
                if std::mem::replace(&mut seen[s], true) {
                    return Err(Error::InvalidArgument(format!(
                        "class {s} listed as a source more than once"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, ds: &Dataset, seed: u64) -> Result<Dataset> {
        match self.kind {
            NoiseKind::Symmetric => inject_symmetric(ds, self.rate, seed),
            _ => inject_asymmetric(ds, self, seed),
        }
    }
}

/// Parses `src:dst,src:dst,...`.
pub fn parse_pair_map(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("pair `{p}` is not src:dst")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad class index in pair `{p}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

fn check_rate(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "noise rate must lie in [0, 1], got {r}"
        )));
    }
    Ok(())
}

fn require_true_labels(ds: &Dataset) -> Result<&[usize]> {
    ds.true_labels().ok_or_else(|| {
        Error::InvalidInput("noise injection needs a dataset with true labels".into())
    })
}

pub fn inject_symmetric(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let truth = require_true_labels(ds)?;
    let c = ds.class_count();
    let mut rng = SeededRng::derived(seed, 0x5E11);
    let labels = truth
        .iter()
        .map(|&y| if rng.bernoulli(rate) { rng.below(c) } else { y })
        .collect();
    ds.with_noisy_labels(labels)
}

pub fn inject_asymmetric(ds: &Dataset, spec: &NoiseSpec, seed: u64) -> Result<Dataset> {
    let c = ds.class_count();
    spec.validate(c)?;
    let truth = require_true_labels(ds)?;
    let target: Vec<Option<usize>> = match spec.kind {
        NoiseKind::Symmetric => {
            return Err(Error::InvalidArgument(
                "inject_asymmetric called with symmetric noise".into(),
            ))
        }
        NoiseKind::AsymmetricCircular => (0..c).map(|k| Some((k + 1) % c)).collect(),
        NoiseKind::AsymmetricPairs => {
            let map: BTreeMap<usize, usize> =
                spec.pair_map.iter().flatten().copied().collect();
            (0..c).map(|k| map.get(&k).copied()).collect()
        }
    };
    let mut rng = SeededRng::derived(seed, 0xA5A5);
    let labels = truth
        .iter()
        .map(|&y| {
            // One draw per sample regardless of class keeps streams aligned.
            let flip = rng.bernoulli(spec.rate);
            match target[y] {
                Some(t) if flip => t,
                _ => y,
            }
        })
        .collect();
    ds.with_noisy_labels(labels)
}

/// Seeded disjoint partition. Each part keeps the original sample order.
pub fn split(ds: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = fractions;
    if !(tr > 0.0 && te > 0.0) || ((tr + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got ({tr}, {te})"
        )));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::derived(seed, 0x5717).shuffle(&mut idx);
    let n_train = (n as f64 * tr).round() as usize;
    let (a, b) = idx.split_at(n_train.min(n));
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.subset(&a), ds.subset(&b)))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_csv(ds)).map_err(|e| Error::io(path, e))
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let d = ds.dims();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "f{j},");
    }
    out.push_str("noisy_label");
    if ds.true_labels().is_some() {
        out.push_str(",true_label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        for &x in ds.feature(i) {
            let _ = write!(out, "{x:.16e},");
        }
        let _ = write!(out, "{}", ds.noisy_labels()[i]);
        if let Some(t) = ds.true_labels() {
            let _ = write!(out, ",{}", t[i]);
        }
        out.push('\n');
    }
    out
}

/// Loads a dataset CSV. With `classes == None` the class count is inferred as
/// `max label + 1` (at least 2).
pub fn load_dataset(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_csv(&text, classes)
}

pub fn dataset_from_csv(text: &str, classes: Option<usize>) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_true = cols.last() == Some(&"true_label");
    let label_cols = if has_true { 2 } else { 1 };
    if cols.len() < label_cols + 1 || cols[cols.len() - label_cols] != "noisy_label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must be f0,...,f{d-1},noisy_label[,true_label]".into(),
        });
    }
    let d = cols.len() - label_cols;
    for (j, name) in cols[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column f{j}, found `{name}`"),
            });
        }
    }

    let mut data = Vec::new();
    let mut noisy = Vec::new();
    let mut truth = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        for f in &fields[..d] {
            let x: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature value `{f}`"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite feature `{f}`"),
                });
            }
            data.push(x);
        }
        let parse_label = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad label `{s}`"),
            })
        };
        noisy.push(parse_label(fields[d])?);
        if has_true {
            truth.push(parse_label(fields[d + 1])?);
        }
    }
    if noisy.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no samples".into(),
        });
    }
    let c = classes.unwrap_or_else(|| {
        let max = noisy.iter().chain(&truth).copied().max().unwrap_or(0);
        (max + 1).max(2)
    });
    let n = noisy.len();
    Dataset::new(
        Matrix::from_vec(n, d, data)?,
        noisy,
        has_true.then_some(truth),
        c,
    )
}
