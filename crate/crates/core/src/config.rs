//! Experiment configuration: a flat `key = value` file format with `#`
//! comments, documented defaults, and the shipped hyperparameter presets.
//!
//! Every key accepted in a file is also accepted as a `--key value` flag by
//! the CLI; both paths go through [`ExperimentConfig::set`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{parse_pair_map, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::labels::DEFAULT_K;
use crate::losses::PencilWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Label step size at the first phase-2 batch.
    pub lambda_start: f64,
    /// Label step size at the last phase-2 batch; linear in between.
    pub lambda_end: f64,
    pub k: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub lr_phase3: f64,
    /// Phase-3 epochs (0-based, counted within phase 3) at which the
    /// learning rate is divided by 10.
    pub lr3_decay_epochs: Vec<usize>,
    pub epochs: (usize, usize, usize),
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    /// Hidden layer widths; input and output sizes come from the dataset.
    pub hidden_layers: Vec<usize>,
    /// Fraction of the dataset held out as the clean test split.
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.1,
            beta: 0.4,
            lambda_start: 300.0,
            lambda_end: 300.0,
            k: DEFAULT_K,
            lr_phase1: 0.03,
            lr_phase2: 0.03,
            lr_phase3: 0.02,
            lr3_decay_epochs: vec![13, 26],
            epochs: (20, 40, 40),
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            noise: NoiseSpec::symmetric(0.0),
            hidden_layers: vec![32, 32],
            test_fraction: 0.2,
        }
    }
}

/// Keys understood by [`ExperimentConfig::set`], with one-line help.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("alpha", "weight of the compatibility loss"),
    ("beta", "weight of the entropy loss"),
    ("lambda", "label step size (sets lambda_start and lambda_end)"),
    ("lambda_start", "label step size at the start of phase 2"),
    ("lambda_end", "label step size at the end of phase 2"),
    ("k", "label initialization scale"),
    ("lr", "learning rate for phases 1 and 2"),
    ("lr_phase1", "phase-1 learning rate"),
    ("lr_phase2", "phase-2 learning rate"),
    ("lr_phase3", "initial phase-3 learning rate"),
    ("lr3_decay_epochs", "phase-3 epochs where the learning rate drops 10x"),
    ("epochs", "epochs per phase as T1,T2,T3"),
    ("epochs_phase1", "phase-1 epochs"),
    ("epochs_phase2", "phase-2 epochs"),
    ("epochs_phase3", "phase-3 epochs"),
    ("batch_size", "mini-batch size"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "SGD weight decay"),
    ("seed", "master random seed"),
    ("noise_kind", "symmetric | asymmetric-circular | asymmetric-pairs"),
    ("noise_rate", "label noise rate injected into the training split"),
    ("noise_pairs", "src:dst,... class pairs for asymmetric-pairs noise"),
    ("hidden_layers", "hidden layer widths, comma separated (empty for none)"),
    ("test_fraction", "fraction held out as the test split"),
];

/// Shipped presets: symmetric noise at 10-90%, asymmetric at 10-50%.
pub const PRESETS: &[(&str, &str)] = &[
    ("sym10", include_str!("../presets/sym10.cfg")),
    ("sym30", include_str!("../presets/sym30.cfg")),
    ("sym50", include_str!("../presets/sym50.cfg")),
    ("sym70", include_str!("../presets/sym70.cfg")),
    ("sym90", include_str!("../presets/sym90.cfg")),
    ("asym10", include_str!("../presets/asym10.cfg")),
    ("asym20", include_str!("../presets/asym20.cfg")),
    ("asym30", include_str!("../presets/asym30.cfg")),
    ("asym40", include_str!("../presets/asym40.cfg")),
    ("asym50", include_str!("../presets/asym50.cfg")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config {
            key: "preset".into(),
            line: 0,
            message: format!("unknown preset `{name}`"),
        })?;
    ExperimentConfig::from_str_with_base(text, ExperimentConfig::default())
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_str_with_base(&text, ExperimentConfig::default())
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if !x.is_finite() {
        return Err(format!("`{v}` is not finite"));
    }
    Ok(x)
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(v)?;
    if x < 0.0 {
        return Err(format!("must be >= 0, got {x}"));
    }
    Ok(x)
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x = parse_f64(v)?;
    if x <= 0.0 {
        return Err(format!("must be > 0, got {x}"));
    }
    Ok(x)
}

fn parse_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_usize)
        .collect()
}

impl ExperimentConfig {
    /// Applies `text` on top of `base`. Later lines win.
    pub fn from_str_with_base(text: &str, base: ExperimentConfig) -> Result<Self> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|message| Error::Config {
                key: key.to_string(),
                line: line_no,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value. Range checks happen here;
    /// cross-key consistency is checked by [`ExperimentConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "alpha" => self.alpha = non_negative(value)?,
            "beta" => self.beta = non_negative(value)?,
            "lambda" => {
                let l = non_negative(value)?;
                self.lambda_start = l;
                self.lambda_end = l;
            }
            "lambda_start" => self.lambda_start = non_negative(value)?,
            "lambda_end" => self.lambda_end = non_negative(value)?,
            "k" => self.k = non_negative(value)?,
            "lr" => {
                let lr = positive(value)?;
                self.lr_phase1 = lr;
                self.lr_phase2 = lr;
            }
            "lr_phase1" => self.lr_phase1 = positive(value)?,
            "lr_phase2" => self.lr_phase2 = positive(value)?,
            "lr_phase3" => self.lr_phase3 = positive(value)?,
            "lr3_decay_epochs" => self.lr3_decay_epochs = parse_list(value)?,
            "epochs" => {
                let e = parse_list(value)?;
                if e.len() != 3 {
                    return Err(format!("expected three values T1,T2,T3, got {}", e.len()));
                }
                self.epochs = (e[0], e[1], e[2]);
            }
            "epochs_phase1" => self.epochs.0 = parse_usize(value)?,
            "epochs_phase2" => self.epochs.1 = parse_usize(value)?,
            "epochs_phase3" => self.epochs.2 = parse_usize(value)?,
            "batch_size" => {
                let b = parse_usize(value)?;
                if b == 0 {
                    return Err("must be >= 1".into());
                }
                self.batch_size = b;
            }
            "momentum" => {
                let m = non_negative(value)?;
                if m >= 1.0 {
                    return Err(format!("must be < 1, got {m}"));
                }
                self.momentum = m;
            }
            "weight_decay" => self.weight_decay = non_negative(value)?,
            "seed" => self.seed = value.parse().map_err(|_| format!("`{value}` is not a u64"))?,
            "noise_kind" => self.noise.kind = value.parse().map_err(|e: Error| e.to_string())?,
            "noise_rate" => {
                let r = parse_f64(value)?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(format!("must lie in [0, 1], got {r}"));
                }
                self.noise.rate = r;
            }
            "noise_pairs" => {
                self.noise.pair_map = Some(parse_pair_map(value).map_err(|e| e.to_string())?)
            }
            "hidden_layers" => {
                let h = parse_list(value)?;
                if h.contains(&0) {
                    return Err("layer widths must be positive".into());
                }
                self.hidden_layers = h;
            }
            "test_fraction" => {
                let f = parse_f64(value)?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(format!("must lie in (0, 1), got {f}"));
                }
                self.test_fraction = f;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise.kind == NoiseKind::AsymmetricPairs && self.noise.pair_map.is_none() {
            return Err(Error::Config {
                key: "noise_pairs".into(),
                line: 0,
                message: "asymmetric-pairs noise requires noise_pairs".into(),
            });
        }
        Ok(())
    }

    pub fn weights(&self) -> PencilWeights {
        PencilWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Full layer sizes for a dataset with `dims` features and `classes` classes.
    pub fn layer_sizes(&self, dims: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![dims];
        sizes.extend(&self.hidden_layers);
        sizes.push(classes);
        sizes
    }

    /// Label step size for phase-2 batch `step` of `total_steps`, linear from
    /// `lambda_start` (first batch) to `lambda_end` (last batch).
    pub fn lambda_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.lambda_start;
        }
        let t = step as f64 / (total_steps - 1) as f64;
        self.lambda_start + (self.lambda_end - self.lambda_start) * t
    }

    /// Phase-3 learning rate during phase-3 epoch `epoch` (0-based).
    pub fn lr_phase3_at(&self, epoch: usize) -> f64 {
        let drops = self.lr3_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr_phase3 / 10f64.powi(drops as i32)
    }

    /// Renders every key; parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "lambda_start = {}", self.lambda_start);
        let _ = writeln!(s, "lambda_end = {}", self.lambda_end);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "lr_phase1 = {}", self.lr_phase1);
        let _ = writeln!(s, "lr_phase2 = {}", self.lr_phase2);
        let _ = writeln!(s, "lr_phase3 = {}", self.lr_phase3);
        let _ = writeln!(s, "lr3_decay_epochs = {}", join(&self.lr3_decay_epochs));
        let _ = writeln!(
            s,
            "epochs = {},{},{}",
            self.epochs.0, self.epochs.1, self.epochs.2
        );
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "noise_kind = {}", self.noise.kind);
        let _ = writeln!(s, "noise_rate = {}", self.noise.rate);
        if let Some(pairs) = &self.noise.pair_map {
            let p: Vec<String> = pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect();
            let _ = writeln!(s, "noise_pairs = {}", p.join(","));
        }
        let _ = writeln!(s, "hidden_layers = {}", join(&self.hidden_layers));
        let _ = writeln!(s, "test_fraction = {}", self.test_fraction);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_str_with_base(text, ExperimentConfig::default())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.alpha, cfg.beta, cfg.lambda_start), (0.1, 0.4, 300.0));
        assert_eq!(cfg.k, 10.0);
        assert_eq!(cfg.epochs, (20, 40, 40));
        assert_eq!((cfg.momentum, cfg.weight_decay), (0.9, 1e-4));
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = parse("# header\nalpha = 0.5 # trailing\n\nepochs = 1,2,3\nalpha=0.25\n").unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.epochs, (1, 2, 3));
    }

    #[test]
    fn negative_alpha_is_rejected_with_line() {
        let err = parse("beta = 0.3\nalpha = -1\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "alpha");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_type_mismatch() {
        assert!(matches!(parse("gamma = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse("batch_size = many"), Err(Error::Config { .. })));
        assert!(matches!(parse("noise_rate = 1.5"), Err(Error::Config { .. })));
        assert!(matches!(parse("just words"), Err(Error::Config { .. })));
        assert!(matches!(parse("epochs = 1,2"), Err(Error::Config { .. })));
    }

    #[test]
    fn pairs_kind_needs_pairs() {
        assert!(parse("noise_kind = asymmetric-pairs").is_err());
        let cfg = parse("noise_kind = asymmetric-pairs\nnoise_pairs = 2:0").unwrap();
        assert_eq!(cfg.noise.pair_map, Some(vec![(2, 0)]));
    }

    #[test]
    fn presets_match_table() {
        let sym30 = preset("sym30").unwrap();
        assert_eq!(
            (sym30.lr_phase2, sym30.alpha, sym30.beta, sym30.lambda_start),
            (0.03, 0.1, 0.8, 300.0)
        );
        assert_eq!(sym30.lambda_end, 300.0);
        assert_eq!(sym30.noise, NoiseSpec::symmetric(0.3));

        let asym40 = preset("asym40").unwrap();
        assert_eq!(
            (asym40.lr_phase2, asym40.alpha, asym40.beta),
            (0.03, 0.0, 0.4)
        );
        assert_eq!((asym40.lambda_start, asym40.lambda_end), (3000.0, 0.0));
        assert_eq!(asym40.noise.kind, NoiseKind::AsymmetricCircular);

        for (name, _) in PRESETS {
            preset(name).unwrap();
        }
        assert!(preset("sym31").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("alpha", "0.2"),
            ("beta", "0.2"),
            ("lambda", "5"),
            ("lambda_start", "5"),
            ("lambda_end", "1"),
            ("k", "3"),
            ("lr", "0.1"),
            ("lr_phase1", "0.1"),
            ("lr_phase2", "0.1"),
            ("lr_phase3", "0.1"),
            ("lr3_decay_epochs", "1,2"),
            ("epochs", "1,1,1"),
            ("epochs_phase1", "2"),
            ("epochs_phase2", "2"),
            ("epochs_phase3", "2"),
            ("batch_size", "16"),
            ("momentum", "0.5"),
            ("weight_decay", "0"),
            ("seed", "9"),
            ("noise_kind", "symmetric"),
            ("noise_rate", "0.1"),
            ("noise_pairs", "1:0"),
            ("hidden_layers", "4,4"),
            ("test_fraction", "0.3"),
        ];
        assert_eq!(samples.len(), CONFIG_KEYS.len());
        for ((key, value), (listed, _)) in samples.iter().zip(CONFIG_KEYS) {
            assert_eq!(key, listed);
            let mut cfg = ExperimentConfig::default();
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = preset("asym40").unwrap();
        cfg.noise = NoiseSpec::cifar10_pairs(0.2);
        cfg.hidden_layers = vec![];
        let back = parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lambda_schedule_is_linear() {
        let cfg = preset("asym40").unwrap();
        assert_eq!(cfg.lambda_at(0, 11), 3000.0);
        assert_eq!(cfg.lambda_at(10, 11), 0.0);
        assert!((cfg.lambda_at(5, 11) - 1500.0).abs() < 1e-9);
        assert_eq!(cfg.lambda_at(0, 1), 3000.0);
    }

    #[test]
    fn phase3_lr_drops() {
        let cfg = ExperimentConfig {
            lr_phase3: 0.2,
            lr3_decay_epochs: vec![40, 80],
            ..Default::default()
        };
        assert_eq!(cfg.lr_phase3_at(0), 0.2);
        assert_eq!(cfg.lr_phase3_at(39), 0.2);
        assert!((cfg.lr_phase3_at(40) - 0.02).abs() < 1e-15);
        assert!((cfg.lr_phase3_at(41) - 0.02).abs() < 1e-15);
        assert!((cfg.lr_phase3_at(80) - 0.002).abs() < 1e-15);
    }
}
