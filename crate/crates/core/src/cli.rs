//! Command-line front end: argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! failures while running.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, FromArgMatches, Parser, Subcommand};

use crate::backbone::MlpParams;
use crate::config::{self, ExperimentConfig, CONFIG_KEYS};
use crate::data::{load_dataset, make_blobs, parse_pair_map, save_dataset, BlobSpec, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::labels::LabelStore;
use crate::metrics::{accuracy, metrics_row, write_metrics_csv, EpochRecord, METRICS_HEADER};
use crate::trainer::{run_ce_baseline, run_experiment_with, RunOptions, StartPoint, TrainObserver, TrainReport};

pub const THREADS_ENV: &str = "PENCIL_LAB_THREADS";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const CORRECTED_FILE: &str = "corrected_labels.csv";
pub const DISTRIBUTIONS_FILE: &str = "distributions.csv";
pub const PARAMS_PHASE1_FILE: &str = "params_phase1.txt";
pub const PARAMS_PHASE2_FILE: &str = "params_phase2.txt";
pub const LABELS_PHASE2_FILE: &str = "labels_phase2.csv";
pub const PARAMS_FINAL_FILE: &str = "params_final.txt";

#[derive(Debug, Parser)]
#[command(name = "pencil-lab", version, about = "Noisy-label training with learnable label distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Write a Gaussian-blobs dataset CSV.
    Generate(GenerateArgs),
    /// Rewrite the noisy labels of a dataset from its true labels.
    InjectNoise(InjectNoiseArgs),
    /// Run the three training phases, or the cross-entropy baseline.
    Train(TrainArgs),
    /// Accuracy of a parameter snapshot on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InjectNoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub rate: f64,
    /// symmetric | asymmetric-circular | asymmetric-pairs
    #[arg(long, default_value = "symmetric")]
    pub kind: NoiseKind,
    /// src:dst,... class pairs for asymmetric-pairs noise
    #[arg(long)]
    pub pairs: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class count; inferred from the labels when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metrics, snapshots and corrected labels.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Shipped preset name, e.g. sym30 or asym40.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Phase to start from: 2 needs --params, 3 needs --params and --labels.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub start_phase: u8,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Also write the full final label distributions.
    #[arg(long)]
    pub dump_distributions: bool,
    /// Train the plain cross-entropy baseline instead.
    #[arg(long, conflicts_with_all = ["params", "labels"])]
    pub baseline: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = crate::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

/// `--key value` for every configuration key, in [`CONFIG_KEYS`] order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides(pub Vec<(String, String)>);

impl ConfigOverrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        for (key, value) in &self.0 {
            config.set(key, value).map_err(|message| Error::Config {
                key: key.clone(),
                line: 0,
                message: format!("--{key}: {message}"),
            })?;
        }
        Ok(())
    }
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(matches: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let pairs = CONFIG_KEYS
            .iter()
            .filter_map(|(key, _)| {
                matches
                    .get_one::<String>(key)
                    .map(|v| (key.to_string(), v.clone()))
            })
            .collect();
        Ok(ConfigOverrides(pairs))
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        CONFIG_KEYS.iter().fold(cmd, |cmd, &(key, help)| {
            cmd.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help(help)
                    .allow_hyphen_values(true)
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

/// Parses `args` (program name first), dispatches, and maps the outcome to
/// an exit code, printing any error to stderr.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is_usage() { "usage error" } else { "error" };
            eprintln!("{kind}: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Commands::Generate(a) => generate(a),
        Commands::InjectNoise(a) => inject_noise(a),
        Commands::Train(a) => train(a),
        Commands::Eval(a) => eval(a),
        Commands::Gradcheck(a) => gradcheck(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("no such file: {}", path.display())))
    }
}

/// Worker threads from the environment, 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidArgument(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let spec = BlobSpec {
        samples: a.samples,
        classes: a.classes,
        dims: a.dims,
        separation: a.separation,
        sigma: a.sigma,
    };
    let ds = make_blobs(&spec, a.seed)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn inject_noise(a: &InjectNoiseArgs) -> Result<()> {
    let pair_map = a.pairs.as_deref().map(parse_pair_map).transpose()?;
    let spec = NoiseSpec {
        kind: a.kind,
        rate: a.rate,
        pair_map,
    };
    if let Some(c) = a.classes {
        spec.validate(c)?;
    } else if !(0.0..=1.0).contains(&a.rate) {
        // Reject before touching the input so a bad rate is always a usage error.
        return Err(Error::InvalidArgument(format!("noise rate must lie in [0, 1], got {}", a.rate)));
    }
    require_file(&a.input)?;
    let ds = load_dataset(&a.input, a.classes)?;
    spec.validate(ds.class_count())?;
    let noisy = spec.apply(&ds, a.seed)?;
    save_dataset(&noisy, &a.out)?;
    let corrupted = noisy.corruption_rate().unwrap_or(0.0);
    println!(
        "wrote {} samples to {} (corrupted fraction {:.4})",
        noisy.len(),
        a.out.display(),
        corrupted
    );
    Ok(())
}

/// Config from the file or preset, then the flag overrides.
pub fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut config = match (&a.config, &a.preset) {
        (Some(path), _) => {
            require_file(path)?;
            config::parse_config(path)?
        }
        (None, Some(name)) => config::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    a.overrides.apply(&mut config)?;
    config.validate()?;
    Ok(config)
}

/// Streams metrics rows and writes phase snapshots into the output directory.
struct OutputWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl OutputWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut metrics = BufWriter::new(file);
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(OutputWriter {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn finish(mut self) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        self.metrics.flush().map_err(|e| Error::io(path, e))
    }
}

impl TrainObserver for OutputWriter {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        writeln!(self.metrics, "{}", metrics_row(record))
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn on_phase_end(&mut self, phase: u8, params: &MlpParams, labels: &LabelStore) -> Result<()> {
        match phase {
            1 => params.save(self.dir.join(PARAMS_PHASE1_FILE)),
            2 => {
                params.save(self.dir.join(PARAMS_PHASE2_FILE))?;
                labels.save(self.dir.join(LABELS_PHASE2_FILE))
            }
            _ => params.save(self.dir.join(PARAMS_FINAL_FILE)),
        }
    }
}

/// `idx,hard_label,peak_prob` for every training sample.
pub fn corrected_labels_csv(labels: &LabelStore) -> String {
    let mut out = String::from("idx,hard_label,peak_prob\n");
    for (i, hard) in labels.hard_labels().into_iter().enumerate() {
        let _ = writeln!(out, "{i},{hard},{:.16e}", labels.distribution(i)[hard]);
    }
    out
}

pub fn distributions_csv(labels: &LabelStore) -> String {
    let mut out = String::from("idx");
    for k in 0..labels.class_count() {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for i in 0..labels.len() {
        out.push_str(&i.to_string());
        for p in labels.distribution(i) {
            let _ = write!(out, ",{p:.16e}");
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(a)?;
    let start = match a.start_phase {
        1 => StartPoint::Fresh,
        2 => {
            let p = a.params.as_deref().ok_or_else(|| {
                Error::InvalidArgument("--start-phase 2 requires --params".into())
            })?;
            require_file(p)?;
            StartPoint::Phase2(MlpParams::load(p)?)
        }
        _ => {
            let (p, l) = a.params.as_deref().zip(a.labels.as_deref()).ok_or_else(|| {
                Error::InvalidArgument("--start-phase 3 requires --params and --labels".into())
            })?;
            require_file(p)?;
            require_file(l)?;
            StartPoint::Phase3(MlpParams::load(p)?, LabelStore::load(l)?)
        }
    };
    if a.baseline && a.start_phase != 1 {
        return Err(Error::InvalidArgument("--baseline always starts from scratch".into()));
    }
    require_file(&a.data)?;
    let ds = load_dataset(&a.data, a.classes)?;
    let options = RunOptions {
        threads: threads_from_env()?,
    };

    let mut writer = OutputWriter::create(&a.out)?;
    write_text(&a.out.join(CONFIG_FILE), &config.to_text())?;
    let report = if a.baseline {
        let report = run_ce_baseline(&config, &ds, options)?;
        report.params.save(a.out.join(PARAMS_FINAL_FILE))?;
        drop(writer);
        write_metrics_csv(&report.records, a.out.join(METRICS_FILE))?;
        report
    } else {
        let report = run_experiment_with(&config, &ds, start, options, &mut writer)?;
        writer.finish()?;
        write_text(&a.out.join(CORRECTED_FILE), &corrected_labels_csv(&report.labels))?;
        if a.dump_distributions {
            write_text(&a.out.join(DISTRIBUTIONS_FILE), &distributions_csv(&report.labels))?;
        }
        report
    };
    print_summary(&report, a.baseline);
    Ok(())
}

fn print_summary(report: &TrainReport, baseline: bool) {
    println!("epochs          {}", report.records.len());
    println!("best_test_acc   {:.4}", report.best_test_acc);
    println!("last_test_acc   {:.4}", report.last_test_acc);
    if !baseline {
        if let Some(r) = report.records.last() {
            println!("correct_labels  {} ({:.4})", r.correct_labels, r.recovery_rate);
        }
    }
    println!("wall_time_s     {:.3}", report.wall_time.as_secs_f64());
}

fn eval(a: &EvalArgs) -> Result<()> {
    require_file(&a.params)?;
    require_file(&a.data)?;
    let params = MlpParams::load(&a.params)?;
    let ds = load_dataset(&a.data, a.classes.or(Some(params.output_dim())))?;
    if params.input_dim() != ds.dims() {
        return Err(Error::InvalidArgument(format!(
            "snapshot expects {} features, dataset has {}",
            params.input_dim(),
            ds.dims()
        )));
    }
    println!("samples         {}", ds.len());
    println!("acc_noisy       {:.4}", accuracy(&params, &ds, ds.noisy_labels())?);
    if let Some(truth) = ds.true_labels() {
        println!("acc_true        {:.4}", accuracy(&params, &ds, truth)?);
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        instances: a.instances,
        ..Default::default()
    })?;
    println!("{report}");
    println!("elapsed {:.3}s", report.elapsed.as_secs_f64());
    if report.passed(a.tolerance) {
        println!("PASS (tolerance {:e})", a.tolerance);
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "max relative error {:.3e} exceeds {:e}",
            report.max_rel(),
            a.tolerance
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("pencil-lab").chain(args.iter().copied()))
    }

    #[test]
    fn every_config_key_is_a_flag() {
        for (key, _) in CONFIG_KEYS {
            let flag = format!("--{key}");
            let cli = parse(&["train", "--data", "d.csv", "--out", "o", &flag, "1"]).unwrap();
            let Commands::Train(t) = cli.command else { panic!() };
            assert_eq!(t.overrides.0, vec![(key.to_string(), "1".to_string())]);
        }
    }

    #[test]
    fn overrides_win_over_preset() {
        let cli = parse(&[
            "train", "--data", "d.csv", "--out", "o", "--preset", "sym30", "--alpha", "0.25", "--seed", "9",
        ])
        .unwrap();
        let Commands::Train(t) = cli.command else { panic!() };
        let config = resolve_config(&t).unwrap();
        assert_eq!(config.alpha, 0.25);
        assert_eq!(config.seed, 9);
        assert_eq!(config.beta, 0.8);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let cli = parse(&["train", "--data", "d.csv", "--out", "o", "--alpha", "-1"]).unwrap();
        let Commands::Train(t) = cli.command else { panic!() };
        let err = resolve_config(&t).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "alpha"));
        assert!(err.is_usage());
    }

    #[test]
    fn unknown_flag_rejected() {
        assert!(parse(&["train", "--data", "d", "--out", "o", "--gamma", "1"]).is_err());
        assert!(parse(&["gradcheck", "--bogus"]).is_err());
    }

    #[test]
    fn start_phase_range() {
        assert!(parse(&["train", "--data", "d", "--out", "o", "--start-phase", "4"]).is_err());
        assert!(parse(&["train", "--data", "d", "--out", "o", "--start-phase", "3"]).is_ok());
    }

    #[test]
    fn corrected_csv_layout() {
        let store = LabelStore::init_from_labels(&[1, 0], 2, 10.0).unwrap();
        let text = corrected_labels_csv(&store);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "idx,hard_label,peak_prob");
        assert!(lines[1].starts_with("0,1,"));
        assert!(lines[2].starts_with("1,0,"));
        let peak: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        let e = 10f64.exp();
        assert!((peak - e / (e + 1.0)).abs() < 1e-15);
        assert_eq!(distributions_csv(&store).lines().next(), Some("idx,p0,p1"));
    }
}
