//! Seeded training runs, shuffled-cycle batching, Adam, and grid sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{training_pair, PaddedInput, Split, UserSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricReport};
use crate::groups::{Axis, GroupAssignment, ItemFrequencyTable, Tier};
use crate::model::{Denominator, Matrix, ModelConfig, ModelState};
use crate::objectives::{ItemWeightTable, Objective, ObjectiveConfig, ObjectiveKind, NUM_GROUPS};
use crate::rng::{stream_rng, Stream};

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batches() -> usize {
    128
}
fn default_k() -> usize {
    20
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_batches")]
    pub batches_per_epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub denominator: Denominator,
    /// Cutoff for per-epoch validation NDCG.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            batch_size,
            epochs,
            batches_per_epoch: default_batches(),
            seed,
            denominator: Denominator::default(),
            k: default_k(),
            eval_batch_size: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("epochs, batch_size and batches_per_epoch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.k == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("k and eval_batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `seed` is overwritten by `train.seed`.
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.train.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.train.seed, ..self.model.clone() }
    }
}

/// Inputs a run reads but never modifies.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub sequences: &'a [UserSequence],
    pub groups: Option<&'a GroupAssignment>,
    pub item_frequencies: &'a ItemFrequencyTable,
}

/// Shuffles users once per pass and deals consecutive batches from the
/// shuffled order, reshuffling whenever it is exhausted.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<u32>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(users: Vec<u32>, rng: ChaCha8Rng) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::Data("no users to sample".into()));
        }
        let len = users.len();
        Ok(BatchSampler { order: users, cursor: len, rng })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// `B` user ids drawn by a [`BatchSampler`] seeded from `seed`'s sampling stream.
pub fn sample_batches(users: &[u32], batch_size: usize, count: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut s = BatchSampler::new(users.to_vec(), stream_rng(seed, Stream::Sampling))?;
    Ok((0..count).map(|_| s.next_batch(batch_size)).collect())
}

/// Sequence-to-sequence inputs and targets drawn from training prefixes only.
pub fn training_batch(sequences: &[UserSequence], users: &[u32], max_len: usize) -> (Vec<PaddedInput>, Vec<Vec<u32>>) {
    users.iter().map(|&u| training_pair(sequences[u as usize].train_prefix(), max_len)).unzip()
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, shapes: &ModelState) -> Self {
        let zeros: Vec<Matrix> = shapes.params.iter().map(|p| Matrix::zeros(p.value.rows, p.value.cols)).collect();
        Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in state.params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub group_losses: Option<[Option<f64>; NUM_GROUPS]>,
    pub omega: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation NDCG (earliest on ties).
    pub best: ModelState,
    pub best_epoch: usize,
    pub val_ndcg: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn best_val_ndcg(&self) -> f64 {
        self.val_ndcg[self.best_epoch - 1]
    }

    /// Mean objective value per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.val_ndcg.len();
        let mut sum = vec![0.0; epochs];
        let mut n = vec![0usize; epochs];
        for r in &self.trace {
            sum[r.epoch - 1] += r.loss;
            n[r.epoch - 1] += 1;
        }
        sum.iter().zip(&n).map(|(s, n)| s / *n as f64).collect()
    }
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,loss,loss_g0,loss_g1,loss_g2,omega_g0,omega_g1,omega_g2\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    for r in trace {
        let g = r.group_losses.unwrap_or([None; NUM_GROUPS]);
        let w = |i: usize| r.omega.as_ref().map(|o| o[i]);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.loss,
            cell(g[0]),
            cell(g[1]),
            cell(g[2]),
            cell(w(0)),
            cell(w(1)),
            cell(w(2))
        );
    }
    out
}

/// Resolves which axis a group-dependent objective trains on.
pub fn objective_axis(objective: &ObjectiveConfig, groups: Option<&GroupAssignment>) -> Result<Option<Axis>> {
    if !objective.kind.needs_groups() {
        return Ok(None);
    }
    let groups = groups.ok_or_else(|| Error::Config(format!("{} needs a group assignment", objective.kind.name())))?;
    let axes = groups.axes();
    match objective.group_axis {
        Some(axis) if axes.contains(&axis) => Ok(Some(axis)),
        Some(axis) => Err(Error::Config(format!("group file has no `{}` labels", axis.name()))),
        None if axes.len() == 1 => Ok(Some(axes[0])),
        None => Err(Error::Config(format!(
            "{} under intersecting groups needs `group_axis`",
            objective.kind.name()
        ))),
    }
}

fn build_objective(config: &RunConfig, data: &TrainData) -> Result<Objective> {
    let axis = objective_axis(&config.objective, data.groups)?;
    let labels: Option<Vec<Tier>> = axis.map(|a| data.groups.unwrap().labels(a).unwrap().to_vec());
    if let Some(l) = &labels {
        if l.len() != data.sequences.len() {
            return Err(Error::Config("group labels do not cover every user".into()));
        }
    }
    let items = match config.objective.kind {
        ObjectiveKind::Cb | ObjectiveKind::CbLog => Some(ItemWeightTable::from_frequencies(data.item_frequencies)),
        _ => None,
    };
    let mut objective_config = config.objective.clone();
    objective_config.group_axis = axis;
    Objective::new(objective_config, items, labels)
}

/// Runs `epochs x batches_per_epoch` optimiser steps and keeps the
/// checkpoint with the best validation NDCG@K.
pub fn train_run(config: &RunConfig, data: &TrainData) -> Result<TrainOutcome> {
    let objective = build_objective(config, data)?;
    train_with_objective(config, data, objective)
}

/// [`train_run`] with a caller-supplied objective (tables already built).
pub fn train_with_objective(config: &RunConfig, data: &TrainData, mut objective: Objective) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = &config.train;
    if data.sequences.iter().enumerate().any(|(i, s)| s.user as usize != i) {
        return Err(Error::Data("sequences must be indexed by dense user id".into()));
    }
    let mut state = ModelState::new(config.model_config())?;
    let mut adam = Adam::new(cfg, &state);
    let users: Vec<u32> = (0..data.sequences.len() as u32).collect();
    let mut sampler = BatchSampler::new(users, stream_rng(cfg.seed, Stream::Sampling))?;
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let use_dropout = state.config.dropout > 0.0;
    let eval_opts = EvalOptions { k: cfg.k, split: Split::Val, exclude_seen: false, batch_size: cfg.eval_batch_size };

    let mut trace = Vec::with_capacity(cfg.total_steps());
    let mut val_ndcg = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelState, usize, f64)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.batches_per_epoch {
            step += 1;
            let batch = sampler.next_batch(cfg.batch_size);
            let (inputs, targets) = training_batch(data.sequences, &batch, state.config.max_len);
            let rng = if use_dropout { Some(&mut dropout_rng) } else { None };
            let graph = state.batch_losses(&batch, &inputs, &targets, cfg.denominator, rng)?;
            let out = objective.step(&graph.batch)?;
            let row = TraceRow {
                step,
                epoch,
                loss: out.aggregate.value,
                group_losses: out.group_losses,
                omega: out.omega,
            };
            let finite = row.loss.is_finite();
            trace.push(row);
            if !finite {
                return Err(Error::Numeric(format!(
                    "non-finite objective at step {step} (epoch {epoch}); last trace rows:\n{}",
                    trace_csv(&trace[trace.len().saturating_sub(5)..])
                )));
            }
            let grads = graph.backward(&out.aggregate.position_weights);
            adam.step(&mut state, &grads);
            if !state.is_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after step {step}")));
            }
        }
        state.epoch = epoch;
        let report = evaluate(&state, data.sequences, None, &eval_opts)?;
        log::debug!("epoch {epoch}: val ndcg@{} = {:.5}", cfg.k, report.overall);
        val_ndcg.push(report.overall);
        if best.as_ref().is_none_or(|(_, _, b)| report.overall > *b) {
            best = Some((state.clone(), epoch, report.overall));
        }
    }
    let (best, best_epoch, _) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, val_ndcg, trace, steps: step })
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Eta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl SweepGrid {
    pub fn default_for(kind: ObjectiveKind) -> Option<Self> {
        match kind {
            ObjectiveKind::Gdro | ObjectiveKind::Sdro => {
                Some(SweepGrid { param: SweepParam::Eta, values: vec![1e-3, 5e-3, 1e-2, 5e-2, 0.1] })
            }
            ObjectiveKind::Cvar => Some(SweepGrid {
                param: SweepParam::Alpha,
                values: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            }),
            _ => None,
        }
    }

    pub fn validate(&self, kind: ObjectiveKind) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        let ok = match self.param {
            SweepParam::Alpha => kind == ObjectiveKind::Cvar,
            SweepParam::Eta => kind.is_dro(),
        };
        if !ok {
            return Err(Error::Config(format!("cannot sweep {:?} for {}", self.param, kind.name())));
        }
        Ok(())
    }

    pub fn apply(&self, base: &RunConfig, value: f64) -> RunConfig {
        let mut c = base.clone();
        match self.param {
            SweepParam::Alpha => c.objective.alpha = value,
            SweepParam::Eta => c.objective.eta = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub val_ndcg: f64,
    pub best_epoch: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    pub best_index: usize,
}

impl SweepResult {
    pub fn best(&self) -> &SweepPoint {
        &self.points[self.best_index]
    }
}

/// Highest score wins; equal scores go to the smaller value.
pub fn select_best(points: &[(f64, f64)]) -> Option<usize> {
    (0..points.len()).reduce(|b, i| {
        let (bv, bs) = points[b];
        let (v, s) = points[i];
        if s > bs || (s == bs && v < bv) {
            i
        } else {
            b
        }
    })
}

/// Writes a finished run's artifacts into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, outcome: &TrainOutcome, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    let trace = dir.join("trace.csv");
    fs::write(&trace, trace_csv(&outcome.trace)).map_err(|e| Error::io(&trace, e))?;
    let manifest = serde_json::json!({
        "config": config,
        "method": config.objective.method_name(),
        "steps": outcome.steps,
        "val_ndcg": outcome.val_ndcg,
        "best_epoch": outcome.best_epoch,
        "checkpoint": "best.ckpt",
        "inputs": extra,
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Trains every grid point (up to `jobs` concurrently), each into its own
/// subdirectory of `out`, and selects by validation NDCG.
pub fn sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    data: &TrainData,
    out: &Path,
    jobs: usize,
    extra: serde_json::Value,
) -> Result<SweepResult> {
    grid.validate(base.objective.kind)?;
    let jobs = jobs.max(1);
    let configs: Vec<RunConfig> = grid.values.iter().map(|&v| grid.apply(base, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let dirs: Vec<PathBuf> = grid.values.iter().enumerate().map(|(i, v)| out.join(format!("point-{i:02}-{v}"))).collect();
    let mut results: Vec<Option<Result<(f64, usize)>>> = (0..configs.len()).map(|_| None).collect();
    for start in (0..configs.len()).step_by(jobs) {
        let end = (start + jobs).min(configs.len());
        let finished: Vec<Result<(f64, usize)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (start..end)
                .map(|i| {
                    let (config, dir, extra) = (&configs[i], &dirs[i], extra.clone());
                    s.spawn(move || -> Result<(f64, usize)> {
                        let outcome = train_run(config, data)?;
                        write_run(dir, config, &outcome, extra)?;
                        Ok((outcome.best_val_ndcg(), outcome.best_epoch))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("sweep worker panicked".into())))).collect()
        });
        for (i, r) in (start..end).zip(finished) {
            results[i] = Some(r);
        }
    }
    let mut points = Vec::with_capacity(configs.len());
    for (i, r) in results.into_iter().enumerate() {
        let (val_ndcg, best_epoch) = r.expect("every point ran").map_err(|e| Error::Stage {
            stage: format!("sweep point {}={}", serde_json::to_string(&grid.param).unwrap_or_default(), grid.values[i]),
            source: Box::new(e),
        })?;
        points.push(SweepPoint { value: grid.values[i], val_ndcg, best_epoch, dir: dirs[i].clone() });
    }
    let scored: Vec<(f64, f64)> = points.iter().map(|p| (p.value, p.val_ndcg)).collect();
    let best_index = select_best(&scored).expect("non-empty grid");
    let result = SweepResult { param: grid.param, points, best_index };
    let path = out.join("sweep.json");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(&path, serde_json::to_vec_pretty(&result)?).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

/// Test-split report for a trained model.
pub fn evaluate_split(
    state: &ModelState,
    data: &TrainData,
    split: Split,
    k: usize,
) -> Result<MetricReport> {
    evaluate(state, data.sequences, data.groups, &EvalOptions { k, split, ..EvalOptions::default() })
}
