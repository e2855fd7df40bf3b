//! The three-phase training procedure.
//!
//! 1. Backbone learning: cross-entropy against the noisy labels at a fixed
//!    learning rate.
//! 2. Label correction: the network and the per-sample label variables are
//!    updated together on the weighted objective. Only the rows of the
//!    current mini-batch move, once per batch, with a step size that runs
//!    linearly from `lambda_start` to `lambda_end` over all phase-2 batches.
//! 3. Fine-tuning: the classification term alone against the frozen label
//!    distributions, with a step-decayed learning rate.
//!
//! Optimizer momentum is reset at every phase boundary. Per-sample losses are
//! averaged over the mini-batch, so the label variables see `1/B` of their
//! per-sample gradient, exactly as if the batch loss were differentiated.
//!
//! Within a batch, samples may be evaluated on several threads; results are
//! always reduced in batch order, so the output does not depend on the
//! thread count.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::backbone::{sgd_step, MlpGrads, MlpParams, SgdState};
use crate::config::ExperimentConfig;
use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::labels::LabelStore;
use crate::losses::{cross_entropy, pencil_total, PencilWeights};
use crate::math::{softmax_unchecked, SeededRng};
use crate::metrics::{accuracy, corrected_count, eval_accuracy, EpochRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_test_acc: f64,
    pub last_test_acc: f64,
    pub params: MlpParams,
    pub labels: LabelStore,
    /// Hard labels of the final label distributions.
    pub corrected_labels: Vec<usize>,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn best_last_gap(&self) -> f64 {
        self.best_test_acc - self.last_test_acc
    }

    pub fn final_recovery_rate(&self) -> Option<f64> {
        self.records.last().map(|r| r.recovery_rate)
    }
}

/// Hooks invoked while training; the CLI uses them to stream metrics and to
/// write phase snapshots.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_phase_end(&mut self, _phase: u8, _params: &MlpParams, _labels: &LabelStore) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Where a run begins.
#[derive(Debug, Clone)]
pub enum StartPoint {
    Fresh,
    /// Skip phase 1 and start label correction from these parameters.
    Phase2(MlpParams),
    /// Skip to fine-tuning with these parameters and label variables.
    Phase3(MlpParams, LabelStore),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for within-batch evaluation; 1 runs inline.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { threads: 1 }
    }
}

/// Train/test datasets for a configuration: a seeded split of `ds`, then the
/// configured noise injected into the training part only. With a zero noise
/// rate the training labels are kept as loaded.
pub fn prepare_data(config: &ExperimentConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(
        ds,
        (1.0 - config.test_fraction, config.test_fraction),
        config.seed,
    )?;
    let train = if config.noise.rate > 0.0 {
        config.noise.apply(&train, config.seed)?
    } else {
        train
    };
    Ok((train, test))
}

/// Fresh parameters whose input standardization is fit to `ds`.
pub fn init_params(config: &ExperimentConfig, ds: &Dataset) -> Result<MlpParams> {
    let mut params = MlpParams::init(
        &config.layer_sizes(ds.dims(), ds.class_count()),
        config.seed,
    )?;
    let (mean, std) = feature_moments(ds);
    params.set_input_standardization(mean, std)?;
    Ok(params)
}

/// Per-feature mean and standard deviation; constant features get 1.
pub fn feature_moments(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (ds.len(), ds.dims());
    if n == 0 {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(ds.feature(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((v, x), m) in var.iter_mut().zip(ds.feature(i)).zip(&mean) {
            *v += (x - m).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        })
        .collect();
    (mean, std)
}

/// Phase 1 from freshly initialized parameters.
pub fn phase1_backbone(ds: &Dataset, config: &ExperimentConfig) -> Result<MlpParams> {
    let params = init_params(config, ds)?;
    Session::new(config, ds, None, RunOptions::default(), &mut ()).phase1(params)
}

/// Phase 2: returns the updated parameters and the label variables, freshly
/// initialized from the noisy labels and then trained.
pub fn phase2_pencil(
    ds: &Dataset,
    params: MlpParams,
    config: &ExperimentConfig,
) -> Result<(MlpParams, LabelStore)> {
    Session::new(config, ds, None, RunOptions::default(), &mut ()).phase2(params)
}

/// Phase 3 against frozen label distributions.
pub fn phase3_finetune(
    ds: &Dataset,
    params: MlpParams,
    labels: &LabelStore,
    config: &ExperimentConfig,
) -> Result<MlpParams> {
    Session::new(config, ds, None, RunOptions::default(), &mut ()).phase3(params, labels)
}

pub fn run_experiment(config: &ExperimentConfig, ds: &Dataset) -> Result<TrainReport> {
    run_experiment_with(config, ds, StartPoint::Fresh, RunOptions::default(), &mut ())
}

/// Splits and corrupts `ds` per the config, then runs the phases from `start`.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    ds: &Dataset,
    start: StartPoint,
    options: RunOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    config.validate()?;
    let clock = Instant::now();
    let (train, test) = prepare_data(config, ds)?;
    let mut session = Session::new(config, &train, Some(&test), options, observer);

    let (params, labels) = match start {
        StartPoint::Fresh => {
            let params = session.phase1(init_params(config, &train)?)?;
            let (params, labels) = session.phase2(params)?;
            (session.phase3(params, &labels)?, labels)
        }
        StartPoint::Phase2(params) => {
            check_params(&params, &train)?;
            session.epoch = config.epochs.0;
            let (params, labels) = session.phase2(params)?;
            (session.phase3(params, &labels)?, labels)
        }
        StartPoint::Phase3(params, labels) => {
            check_params(&params, &train)?;
            if labels.len() != train.len() || labels.class_count() != train.class_count() {
                return Err(Error::InvalidArgument(format!(
                    "label snapshot is {}x{}, training split is {}x{}",
                    labels.len(),
                    labels.class_count(),
                    train.len(),
                    train.class_count()
                )));
            }
            session.epoch = config.epochs.0 + config.epochs.1;
            (session.phase3(params, &labels)?, labels)
        }
    };
    let records = std::mem::take(&mut session.records);
    finish_report(records, params, labels, &test, clock)
}

/// Plain cross-entropy training on the same split and noise, for contrast:
/// `T1 + T2 + T3` epochs starting at `lr_phase1`, divided by 10 at 50% and
/// 75% of training.
pub fn run_ce_baseline(
    config: &ExperimentConfig,
    ds: &Dataset,
    options: RunOptions,
) -> Result<TrainReport> {
    let clock = Instant::now();
    let (train, test) = prepare_data(config, ds)?;
    let total = config.epochs.0 + config.epochs.1 + config.epochs.2;
    let schedule = ExperimentConfig {
        epochs: (total, 0, 0),
        ..config.clone()
    };
    let lr = config.lr_phase1;
    let mut observer = ();
    let mut session = Session::new(&schedule, &train, Some(&test), options, &mut observer);
    session.phase1_lr = Box::new(move |epoch| {
        let drops = [total / 2, total * 3 / 4]
            .iter()
            .filter(|&&d| d > 0 && epoch >= d)
            .count();
        lr / 10f64.powi(drops as i32)
    });
    let params = session.phase1(init_params(config, &train)?)?;
    let labels = LabelStore::init_from_labels(train.noisy_labels(), train.class_count(), config.k)?;
    let records = std::mem::take(&mut session.records);
    finish_report(records, params, labels, &test, clock)
}

fn check_params(params: &MlpParams, ds: &Dataset) -> Result<()> {
    if params.input_dim() != ds.dims() || params.output_dim() != ds.class_count() {
        return Err(Error::InvalidArgument(format!(
            "network maps {} -> {}, dataset has {} features and {} classes",
            params.input_dim(),
            params.output_dim(),
            ds.dims(),
            ds.class_count()
        )));
    }
    Ok(())
}

fn finish_report(
    records: Vec<EpochRecord>,
    params: MlpParams,
    labels: LabelStore,
    test: &Dataset,
    clock: Instant,
) -> Result<TrainReport> {
    let (best, last) = match records.last() {
        Some(last) => (
            records.iter().map(|r| r.test_acc).fold(f64::MIN, f64::max),
            last.test_acc,
        ),
        None => {
            let acc = if test.is_empty() {
                0.0
            } else {
                eval_accuracy(&params, test)?
            };
            (acc, acc)
        }
    };
    Ok(TrainReport {
        records,
        best_test_acc: best,
        last_test_acc: last,
        corrected_labels: labels.hard_labels(),
        params,
        labels,
        wall_time: clock.elapsed(),
    })
}

/// Per-sample outcome of one forward/backward pass.
struct SampleResult {
    grads: MlpGrads,
    grad_wrt_yd: Vec<f64>,
    losses: [f64; 4],
}

#[derive(Default)]
struct LossSums {
    total: f64,
    lc: f64,
    lo: f64,
    le: f64,
    count: usize,
}

impl LossSums {
    fn add(&mut self, l: &[f64; 4]) {
        self.total += l[0];
        self.lc += l[1];
        self.lo += l[2];
        self.le += l[3];
        self.count += 1;
    }

    fn mean(&self) -> [f64; 4] {
        let n = self.count.max(1) as f64;
        [self.total / n, self.lc / n, self.lo / n, self.le / n]
    }
}

struct Session<'a> {
    config: &'a ExperimentConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    pool: Option<rayon::ThreadPool>,
    observer: &'a mut dyn TrainObserver,
    records: Vec<EpochRecord>,
    /// Global epoch counter across phases.
    epoch: usize,
    phase1_lr: Box<dyn Fn(usize) -> f64 + 'a>,
}

impl<'a> Session<'a> {
    fn new(
        config: &'a ExperimentConfig,
        train: &'a Dataset,
        test: Option<&'a Dataset>,
        options: RunOptions,
        observer: &'a mut dyn TrainObserver,
    ) -> Self {
        let pool = (options.threads > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.threads)
                .build()
                .expect("thread pool")
        });
        let lr1 = config.lr_phase1;
        Session {
            config,
            train,
            test,
            pool,
            observer,
            records: Vec::new(),
            epoch: 0,
            phase1_lr: Box::new(move |_| lr1),
        }
    }

    /// Seeded mini-batch partition for one epoch of one phase.
    fn batches(&self, phase: u8, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        let tag = ((phase as u64) << 32) | epoch as u64;
        SeededRng::derived(self.config.seed, tag).shuffle(&mut idx);
        idx.chunks(self.config.batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Evaluates `per_sample` on every batch member, in batch order.
    fn map_batch<F>(&self, batch: &[usize], per_sample: F) -> Result<Vec<SampleResult>>
    where
        F: Fn(usize) -> Result<SampleResult> + Sync,
    {
        match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(|&i| per_sample(i)).collect()),
            None => batch.iter().map(|&i| per_sample(i)).collect(),
        }
    }

    fn reduce(&self, params: &MlpParams, results: &[SampleResult], sums: &mut LossSums) -> MlpGrads {
        let mut grads = MlpGrads::zeros_like(params);
        for r in results {
            grads.add_assign(&r.grads);
            sums.add(&r.losses);
        }
        grads.scale(1.0 / results.len() as f64);
        grads
    }

    fn phase1(&mut self, mut params: MlpParams) -> Result<MlpParams> {
        let cfg = self.config;
        let train = self.train;
        let mut opt = SgdState::new(&params, cfg.momentum, cfg.weight_decay);
        for e in 0..cfg.epochs.0 {
            let lr = (self.phase1_lr)(e);
            let mut sums = LossSums::default();
            for batch in self.batches(1, e) {
                let p = &params;
                let results = self.map_batch(&batch, |i| {
                    let (z, cache) = p.forward(train.feature(i))?;
                    let f = softmax_unchecked(&z);
                    let ce = cross_entropy(&f, train.noisy_labels()[i])?;
                    Ok(SampleResult {
                        grads: p.backward(&cache, &ce.grad_wrt_logits)?,
                        grad_wrt_yd: Vec::new(),
                        losses: [ce.value, 0.0, 0.0, 0.0],
                    })
                })?;
                let grads = self.reduce(&params, &results, &mut sums);
                sgd_step(&mut params, &grads, lr, &mut opt)?;
            }
            self.record(1, lr, 0.0, sums.mean(), &params, None)?;
        }
        let fresh = LabelStore::init_from_labels(train.noisy_labels(), train.class_count(), cfg.k)?;
        self.observer.on_phase_end(1, &params, &fresh)?;
        Ok(params)
    }

    fn phase2(&mut self, mut params: MlpParams) -> Result<(MlpParams, LabelStore)> {
        let cfg = self.config;
        let train = self.train;
        let weights = cfg.weights();
        let mut labels =
            LabelStore::init_from_labels(train.noisy_labels(), train.class_count(), cfg.k)?;
        let mut opt = SgdState::new(&params, cfg.momentum, cfg.weight_decay);
        let per_epoch = self.batches(2, 0).len();
        let total_steps = per_epoch * cfg.epochs.1;
        let mut step = 0;
        for e in 0..cfg.epochs.1 {
            let mut sums = LossSums::default();
            let mut lambda = cfg.lambda_at(step, total_steps);
            for batch in self.batches(2, e) {
                lambda = cfg.lambda_at(step, total_steps);
                let (p, store) = (&params, &labels);
                let results = self.map_batch(&batch, |i| {
                    pencil_sample(p, store, train, i, weights)
                })?;
                let grads = self.reduce(&params, &results, &mut sums);
                let inv_b = 1.0 / batch.len() as f64;
                for (&i, r) in batch.iter().zip(&results) {
                    let g: Vec<f64> = r.grad_wrt_yd.iter().map(|x| x * inv_b).collect();
                    labels.apply_label_gradient(i, &g, lambda)?;
                }
                sgd_step(&mut params, &grads, cfg.lr_phase2, &mut opt)?;
                step += 1;
            }
            self.record(2, cfg.lr_phase2, lambda, sums.mean(), &params, Some(&labels))?;
        }
        self.observer.on_phase_end(2, &params, &labels)?;
        Ok((params, labels))
    }

    fn phase3(&mut self, mut params: MlpParams, labels: &LabelStore) -> Result<MlpParams> {
        let cfg = self.config;
        let train = self.train;
        let weights = PencilWeights {
            alpha: 0.0,
            beta: 0.0,
        };
        let mut opt = SgdState::new(&params, cfg.momentum, cfg.weight_decay);
        for e in 0..cfg.epochs.2 {
            let lr = cfg.lr_phase3_at(e);
            let mut sums = LossSums::default();
            for batch in self.batches(3, e) {
                let p = &params;
                let results = self.map_batch(&batch, |i| {
                    pencil_sample(p, labels, train, i, weights)
                })?;
                let grads = self.reduce(&params, &results, &mut sums);
                sgd_step(&mut params, &grads, lr, &mut opt)?;
            }
            self.record(3, lr, 0.0, sums.mean(), &params, Some(labels))?;
        }
        self.observer.on_phase_end(3, &params, labels)?;
        Ok(params)
    }

    fn record(
        &mut self,
        phase: u8,
        lr: f64,
        lambda: f64,
        losses: [f64; 4],
        params: &MlpParams,
        labels: Option<&LabelStore>,
    ) -> Result<()> {
        self.epoch += 1;
        let train = self.train;
        let truth = train.eval_labels();
        let (correct_labels, recovery_rate) = match labels {
            Some(store) => corrected_count(store, truth)?,
            None => {
                let n = truth.len();
                let c = truth.iter().zip(train.noisy_labels()).filter(|(a, b)| a == b).count();
                (c, if n == 0 { 0.0 } else { c as f64 / n as f64 })
            }
        };
        let test_acc = match self.test {
            Some(t) if !t.is_empty() => eval_accuracy(params, t)?,
            _ => 0.0,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            phase,
            lr,
            lambda,
            loss_total: losses[0],
            loss_lc: losses[1],
            loss_lo: losses[2],
            loss_le: losses[3],
            train_acc: accuracy(params, train, train.noisy_labels())?,
            test_acc,
            correct_labels,
            recovery_rate,
        };
        self.observer.on_epoch(&record)?;
        self.records.push(record);
        Ok(())
    }
}

fn pencil_sample(
    params: &MlpParams,
    labels: &LabelStore,
    train: &Dataset,
    i: usize,
    weights: PencilWeights,
) -> Result<SampleResult> {
    let (z, cache) = params.forward(train.feature(i))?;
    let f = softmax_unchecked(&z);
    let yd = labels.distribution(i);
    let b = pencil_total(&f, &yd, train.noisy_labels()[i], weights)?;
    Ok(SampleResult {
        grads: params.backward(&cache, &b.grad_wrt_logits)?,
        grad_wrt_yd: b.grad_wrt_yd,
        losses: [b.total, b.lc, b.lo, b.le],
    })
}
