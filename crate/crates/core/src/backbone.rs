//! Multilayer perceptron classifier with hand-written backpropagation and
//! momentum SGD.
//!
//! Hidden layers use ReLU; the output layer is affine and produces logits.
//! Weights are initialized He-uniform, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
//! biases start at zero.
//!
//! Inputs pass through a fixed per-feature standardization `(x - mean) / std`
//! before the first layer. It is the identity unless set, is not trained, and
//! is stored in the parameter snapshot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{softmax_unchecked, Matrix, SeededRng};

#[derive(Debug, Clone)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    /// `weights[l]` maps layer `l` to layer `l + 1`, shape `(out, in)`.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    /// Bumped on every mutation so stale forward caches are detected.
    version: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.weights == other.weights
            && self.biases == other.biases
            && self.input_mean == other.input_mean
            && self.input_std == other.input_std
    }
}

/// Activations saved by [`MlpParams::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    layer_sizes: Vec<usize>,
    /// `activations[0]` is the input, `activations[l]` the post-ReLU output of layer `l`.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Smallest |pre-activation| over the hidden units; zero means the
    /// sample sits on a ReLU kink. Infinite for networks without hidden layers.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .map(|z| z.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gradients (or any other tensor set) shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// All entries, layer by layer: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    fn same_shape(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

impl MlpParams {
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = SeededRng::derived(seed, 0x1417);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpParams {
            input_mean: vec![0.0; layer_sizes[0]],
            input_std: vec![1.0; layer_sizes[0]],
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            version: 0,
        })
    }

    /// Builds parameters from explicit tensors; shapes must chain.
    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArgument(
                "need one bias vector per weight matrix".into(),
            ));
        }
        let mut sizes = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *sizes.last().unwrap() || b.len() != w.rows() {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} shapes do not chain"
                )));
            }
            sizes.push(w.rows());
        }
        validate_sizes(&sizes)?;
        if weights.iter().any(|w| !w.is_finite())
            || biases.iter().flatten().any(|x| !x.is_finite())
        {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(MlpParams {
            input_mean: vec![0.0; sizes[0]],
            input_std: vec![1.0; sizes[0]],
            layer_sizes: sizes,
            weights,
            biases,
            version: 0,
        })
    }

    /// Sets the input standardization; every `std` entry must be positive.
    pub fn set_input_standardization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let d = self.input_dim();
        if mean.len() != d || std.len() != d {
            return Err(Error::InvalidArgument(format!(
                "standardization needs {d} means and deviations"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(
                "standardization must be finite with positive deviations".into(),
            ));
        }
        self.input_mean = mean;
        self.input_std = std;
        self.version += 1;
        Ok(())
    }

    /// `(mean, std)` applied to inputs before the first layer.
    pub fn input_standardization(&self) -> (&[f64], &[f64]) {
        (&self.input_mean, &self.input_std)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// Flat parameter access in [`MlpGrads::flatten`] order.
    pub fn param(&self, idx: usize) -> f64 {
        let (l, off) = self.locate(idx);
        let w = self.weights[l].as_slice();
        if off < w.len() {
            w[off]
        } else {
            self.biases[l][off - w.len()]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (l, off) = self.locate(idx);
        let n_w = self.weights[l].as_slice().len();
        if off < n_w {
            self.weights[l].as_mut_slice()[off] = value;
        } else {
            self.biases[l][off - n_w] = value;
        }
        self.version += 1;
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let n = w.as_slice().len() + b.len();
            if idx < n {
                return (l, idx);
            }
            idx -= n;
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut h: Vec<f64> = x
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            activations.push(h);
            if l == last {
                h = z;
            } else {
                h = z.iter().map(|&v| v.max(0.0)).collect();
                pre.push(z);
            }
        }
        Ok((
            h,
            ForwardCache {
                version: self.version,
                layer_sizes: self.layer_sizes.clone(),
                activations,
                pre,
            },
        ))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    /// Class probabilities `softmax(logits)`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax_unchecked(&self.logits(x)?))
    }

    /// Gradients of a scalar loss with respect to every weight and bias,
    /// given the loss gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<MlpGrads> {
        if cache.version != self.version || cache.layer_sizes != self.layer_sizes {
            return Err(Error::Contract(
                "forward cache does not belong to these parameters".into(),
            ));
        }
        if grad_logits.len() != self.output_dim() {
            return Err(Error::InvalidArgument(format!(
                "logit gradient has {} entries, expected {}",
                grad_logits.len(),
                self.output_dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = grad_logits.to_vec();
        for l in (0..self.weights.len()).rev() {
            let input = &cache.activations[l];
            let gw = &mut grads.weights[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &a) in gw.row_mut(r).iter_mut().zip(input) {
                    *g = d * a;
                }
            }
            grads.biases[l].copy_from_slice(&delta);
            if l > 0 {
                let mut back = self.weights[l].matvec_transposed(&delta);
                for (b, &z) in back.iter_mut().zip(&cache.pre[l - 1]) {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(grads)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("pencil-mlp v1\nlayers ");
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        out.push_str(&sizes.join(","));
        out.push('\n');
        let _ = writeln!(out, "input_mean {}", self.input_dim());
        push_row(&mut out, &self.input_mean);
        let _ = writeln!(out, "input_std {}", self.input_dim());
        push_row(&mut out, &self.input_std);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let _ = writeln!(out, "weight {l} {} {}", w.rows(), w.cols());
            for r in 0..w.rows() {
                push_row(&mut out, w.row(r));
            }
            let _ = writeln!(out, "bias {l} {}", b.len());
            push_row(&mut out, b);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of snapshot, expected {what}"),
            })
        };
        let (ln, magic) = next("header")?;
        if magic != "pencil-mlp v1" {
            return Err(Error::Parse {
                line: ln,
                message: format!("unknown snapshot header `{magic}`"),
            });
        }
        let (ln, layers) = next("layer sizes")?;
        let sizes = layers
            .strip_prefix("layers ")
            .and_then(|s| {
                s.split(',')
                    .map(|x| x.trim().parse::<usize>().ok())
                    .collect::<Option<Vec<_>>>()
            })
            .ok_or_else(|| Error::Parse {
                line: ln,
                message: "expected `layers d,h1,...,c`".into(),
            })?;
        validate_sizes(&sizes).map_err(|e| Error::Parse {
            line: ln,
            message: e.to_string(),
        })?;
        let mut standardization = Vec::new();
        for name in ["input_mean", "input_std"] {
            let (ln, head) = next(name)?;
            let expected = format!("{name} {}", sizes[0]);
            if head != expected {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected `{expected}`, found `{head}`"),
                });
            }
            let (ln, row) = next(name)?;
            standardization.push((ln, parse_row(row, sizes[0], ln)?));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (ln, head) = next("weight header")?;
            let expected = format!("weight {l} {} {}", pair[1], pair[0]);
            if head != expected {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected `{expected}`, found `{head}`"),
                });
            }
            let mut data = Vec::with_capacity(pair[0] * pair[1]);
            for _ in 0..pair[1] {
                let (ln, row) = next("weight row")?;
                data.extend(parse_row(row, pair[0], ln)?);
            }
            weights.push(Matrix::from_vec(pair[1], pair[0], data)?);
            let (ln, head) = next("bias header")?;
            let expected = format!("bias {l} {}", pair[1]);
            if head != expected {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected `{expected}`, found `{head}`"),
                });
            }
            let (ln, row) = next("bias row")?;
            biases.push(parse_row(row, pair[1], ln)?);
        }
        let mut params = MlpParams::from_parts(weights, biases)?;
        let (_, mean) = standardization.remove(0);
        let (ln, std) = standardization.remove(0);
        params
            .set_input_standardization(mean, std)
            .map_err(|e| Error::Parse {
                line: ln,
                message: e.to_string(),
            })?;
        params.version = 0;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument(
            "layer sizes need at least an input and an output".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must be positive, got {sizes:?}"
        )));
    }
    Ok(())
}

fn push_row(out: &mut String, values: &[f64]) {
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    out.push_str(&cells.join(" "));
    out.push('\n');
}

fn parse_row(row: &str, expected: usize, line: usize) -> Result<Vec<f64>> {
    let vals = row
        .split_whitespace()
        .map(|x| x.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
    if vals.len() != expected {
        return Err(Error::Parse {
            line,
            message: format!("expected {expected} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Momentum SGD with weight decay coupled into the velocity:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: MlpGrads,
}

impl SgdState {
    pub fn new(params: &MlpParams, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            velocity: MlpGrads::zeros_like(params),
        }
    }

    pub fn velocity(&self) -> &MlpGrads {
        &self.velocity
    }
}

pub fn sgd_step(params: &mut MlpParams, grads: &MlpGrads, lr: f64, state: &mut SgdState) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !grads.same_shape(params) || !state.velocity.same_shape(params) {
        return Err(Error::InvalidArgument(
            "gradient or optimizer state shape does not match parameters".into(),
        ));
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    let update = |p: &mut [f64], g: &[f64], v: &mut [f64]| {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    };
    for l in 0..params.weights.len() {
        update(
            params.weights[l].as_mut_slice(),
            grads.weights[l].as_slice(),
            state.velocity.weights[l].as_mut_slice(),
        );
        update(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.velocity.biases[l],
        );
    }
    params.version += 1;
    Ok(())
}
