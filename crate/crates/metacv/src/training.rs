//! Optimizers and the two training procedures for control variates:
//! meta-training of a shared initialization across tasks, and the
//! per-task routines (full neural-CV training from scratch, and few-step
//! adaptation of the meta-parameter).
//!
//! Meta-training alternates an inner loop — `L` update steps on each sampled
//! task's support loss `J_S`, starting from the current meta-parameter —
//! with an outer step on the batch-averaged gradient of the query loss
//! `J_Q` at the adapted parameters. Two meta-gradient modes are supported:
//!
//! * `exact` — differentiates through the unrolled inner loop (second-order
//!   terms included); requires plain gradient-descent inner updates.
//! * `first_order` — plain gradient of `J_Q` at the adapted parameters;
//!   works with any inner rule, including Adam.
//!
//! Everything is deterministic given the config seed: per-iteration task
//! sampling and per-task initializations come from counter-derived RNG
//! streams, never from execution order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AdError, Scalar, ScalarProgram};
use crate::estimators::{DataSlice, TaskDataset, TaskLoss};
use crate::network::{init_params, CVParameters, NetworkSpec};
use crate::stein::SteinCV;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gradient length {got} does not match parameter length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("support set is empty")]
    EmptySupport,
    #[error("query set is empty")]
    EmptyQuery,
    #[error("no tasks supplied")]
    NoTasks,
    #[error("task list and control-variate list have different lengths")]
    TaskCvMismatch,
    #[error("exact meta-gradients require the gd inner rule")]
    ExactNeedsGd,
    #[error("step size must be positive, got {0}")]
    BadStepSize(f64),
    #[error("non-finite loss or gradient at meta-iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
}

// ─── Update rules ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Gd,
    Adam,
}

/// A gradient-based update rule: plain descent or bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: RuleKind,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl UpdateRule {
    pub fn gd(alpha: f64) -> Self {
        UpdateRule { kind: RuleKind::Gd, alpha, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam(alpha: f64) -> Self {
        UpdateRule { kind: RuleKind::Adam, alpha, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_kind(kind: RuleKind, alpha: f64) -> Self {
        match kind {
            RuleKind::Gd => Self::gd(alpha),
            RuleKind::Adam => Self::adam(alpha),
        }
    }
}

/// An update rule plus its mutable state (Adam moments, step counter).
#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: UpdateRule,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, dim: usize) -> Result<Self, TrainError> {
        if !(rule.alpha > 0.0) {
            return Err(TrainError::BadStepSize(rule.alpha));
        }
        let state_dim = match rule.kind {
            RuleKind::Gd => 0,
            RuleKind::Adam => dim,
        };
        Ok(Optimizer { rule, m: vec![0.0; state_dim], v: vec![0.0; state_dim], t: 0 })
    }

    /// One in-place update with the rule's configured step size.
    pub fn step(&mut self, gamma: &mut [f64], grad: &[f64]) -> Result<(), TrainError> {
        self.step_with_alpha(gamma, grad, self.rule.alpha)
    }

    /// One in-place update with an explicit step size (for schedules).
    pub fn step_with_alpha(
        &mut self,
        gamma: &mut [f64],
        grad: &[f64],
        alpha: f64,
    ) -> Result<(), TrainError> {
        if grad.len() != gamma.len() {
            return Err(TrainError::LengthMismatch { expected: gamma.len(), got: grad.len() });
        }
        match self.rule.kind {
            RuleKind::Gd => {
                for (p, g) in gamma.iter_mut().zip(grad) {
                    *p -= alpha * g;
                }
            }
            RuleKind::Adam => {
                if self.m.len() != gamma.len() {
                    return Err(TrainError::LengthMismatch {
                        expected: self.m.len(),
                        got: gamma.len(),
                    });
                }
                self.t += 1;
                let (b1, b2, eps) = (self.rule.beta1, self.rule.beta2, self.rule.eps);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for i in 0..gamma.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    gamma[i] -= alpha * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Functional form of one update: returns the new parameters, leaving the
/// inputs untouched. State lives in the passed-in optimizer.
pub fn update_step(
    opt: &mut Optimizer,
    gamma: &[f64],
    grad: &[f64],
) -> Result<Vec<f64>, TrainError> {
    let mut out = gamma.to_vec();
    opt.step(&mut out, grad)?;
    Ok(out)
}

// ─── Mini-batch descent loop ────────────────────────────────────────────────

/// A loss over indexed rows that can be evaluated on any subset of them.
/// The epoch loop below shuffles row indices and walks them in chunks.
pub trait BatchLoss {
    fn rows(&self) -> usize;
    fn param_len(&self) -> usize;
    fn eval_batch<S: Scalar>(&self, gamma: &[S], batch: &[usize]) -> S;
}

impl BatchLoss for TaskLoss<'_> {
    fn rows(&self) -> usize {
        self.data.len()
    }
    fn param_len(&self) -> usize {
        ScalarProgram::param_len(self)
    }
    fn eval_batch<S: Scalar>(&self, gamma: &[S], batch: &[usize]) -> S {
        let bound = TaskLoss { cv: self.cv, data: self.data, batch: Some(batch), lambda: self.lambda };
        bound.eval(gamma)
    }
}

struct BoundBatch<'a, L: BatchLoss> {
    loss: &'a L,
    batch: &'a [usize],
}

impl<L: BatchLoss> ScalarProgram for BoundBatch<'_, L> {
    fn param_len(&self) -> usize {
        self.loss.param_len()
    }
    fn eval<S: Scalar>(&self, gamma: &[S]) -> S {
        self.loss.eval_batch(gamma, self.batch)
    }
}

/// Epoch/mini-batch descent on a batchable loss: each epoch shuffles the
/// row indices with the supplied RNG and takes one update per chunk of
/// `batch_size` rows. Returns the final parameters.
pub fn minimize_batches<L: BatchLoss>(
    loss: &L,
    init: Vec<f64>,
    epochs: usize,
    batch_size: usize,
    rule: UpdateRule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    let n = loss.rows();
    if n == 0 {
        return Err(TrainError::EmptySupport);
    }
    let batch_size = batch_size.max(1);
    let mut opt = Optimizer::new(rule, init.len())?;
    let mut gamma = init;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let bound = BoundBatch { loss, batch: chunk };
            let (_, g) = autodiff::value_and_grad(&bound, &gamma)?;
            opt.step(&mut gamma, &g)?;
        }
    }
    Ok(gamma)
}

/// Per-task neural control variate configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralCvConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rule: UpdateRule,
    pub lambda: f64,
    pub sigma_init: f64,
}

/// Train a control variate from scratch on one task's support set.
///
/// Initialization: network weights `N(0, sigma_init²)` from `seed`, and
/// `γ₀` at the plain MC estimate of the support values (the natural scale
/// for the offset). With `epochs = 0` that initialization is returned
/// unchanged. The query set is never read.
pub fn train_neural_cv(
    cv: &SteinCV,
    data: &TaskDataset,
    cfg: &NeuralCvConfig,
    seed: u64,
) -> Result<CVParameters, TrainError> {
    let support = data.support();
    if support.is_empty() {
        return Err(TrainError::EmptySupport);
    }
    let gamma0 = support.values.iter().sum::<f64>() / support.len() as f64;
    let init = init_params(&cv.spec, cfg.sigma_init, gamma0, seed);
    if cfg.epochs == 0 {
        return Ok(init);
    }
    let loss = TaskLoss::new(cv, support, cfg.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, crate::seeds::STREAM_SHUFFLE, 0));
    let flat = minimize_batches(&loss, init.to_flat(), cfg.epochs, cfg.batch_size, cfg.rule, &mut rng)?;
    Ok(CVParameters::from_flat(&flat))
}

/// Adapt a meta-parameter to one task: `steps` full-support gradient updates
/// starting from `gamma_meta`, with fresh optimizer state.
pub fn adapt(
    cv: &SteinCV,
    gamma_meta: &CVParameters,
    support: DataSlice<'_>,
    steps: usize,
    rule: UpdateRule,
    lambda: f64,
) -> Result<CVParameters, TrainError> {
    if support.is_empty() {
        return Err(TrainError::EmptySupport);
    }
    let loss = TaskLoss::new(cv, support, lambda);
    let mut opt = Optimizer::new(rule, gamma_meta.weights.len() + 1)?;
    let mut gamma = gamma_meta.to_flat();
    for _ in 0..steps {
        let (_, g) = autodiff::value_and_grad(&loss, &gamma)?;
        opt.step(&mut gamma, &g)?;
    }
    Ok(CVParameters::from_flat(&gamma))
}

// ─── Meta-training ──────────────────────────────────────────────────────────

/// Outer step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    Constant(f64),
    /// `η` multiplied by `factor` once every `every` iterations.
    Decay { initial: f64, factor: f64, every: usize },
}

impl EtaSchedule {
    /// Step size at 1-based iteration `i`.
    pub fn at(&self, i: usize) -> f64 {
        match *self {
            EtaSchedule::Constant(eta) => eta,
            EtaSchedule::Decay { initial, factor, every } => {
                initial * factor.powi(((i - 1) / every.max(1)) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Exact,
    FirstOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner steps L per sampled task.
    pub inner_steps: usize,
    /// Inner step size α.
    pub inner_alpha: f64,
    pub eta: EtaSchedule,
    /// Tasks sampled per meta-iteration (uniform, with replacement).
    pub batch: usize,
    /// Meta-iterations I_tr.
    pub iterations: usize,
    pub lambda: f64,
    pub grad_mode: GradMode,
    pub inner_rule: RuleKind,
    pub outer_rule: RuleKind,
    pub sigma_init: f64,
    pub seed: u64,
}

/// One row of the training trace, recorded every meta-iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub mean_outer_loss: f64,
    pub grad_norm_estimate: f64,
    pub wall_ms: f64,
}

/// Meta-training output: the final meta-parameter and the full trace.
#[derive(Debug, Clone)]
pub struct MetaParameter {
    pub params: CVParameters,
    pub trace: Vec<TraceRow>,
}

/// The meta-gradient contribution of one sampled task: the query loss at
/// the adapted parameters and its gradient with respect to the meta
/// parameters (per the configured mode).
fn task_meta_grad(
    cv: &SteinCV,
    task: &TaskDataset,
    gamma: &[f64],
    config: &MetaConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let inner = TaskLoss::new(cv, task.support(), config.lambda);
    let outer = TaskLoss::new(cv, task.query(), config.lambda);
    match config.grad_mode {
        GradMode::Exact => {
            let (value, grad) = autodiff::meta_value_and_grad_exact(
                &inner,
                &outer,
                gamma,
                config.inner_alpha,
                config.inner_steps,
            )?;
            Ok((value, grad))
        }
        GradMode::FirstOrder => {
            // Adapt without recording, then take the plain outer gradient.
            let rule = UpdateRule::with_kind(config.inner_rule, config.inner_alpha);
            let mut opt = Optimizer::new(rule, gamma.len())?;
            let mut cur = gamma.to_vec();
            for _ in 0..config.inner_steps {
                let (_, g) = autodiff::value_and_grad(&inner, &cur)?;
                opt.step(&mut cur, &g)?;
            }
            let (value, grad) = autodiff::value_and_grad(&outer, &cur)?;
            Ok((value, grad))
        }
    }
}

/// Algorithm: iterate `I_tr` times; per iteration sample `B` task indices,
/// adapt each on its support loss for `L` inner steps from the current
/// meta-parameter, average the query-loss meta-gradients, and take one
/// outer update. Outer optimizer state persists across iterations.
///
/// `on_iteration` fires after every outer step with the 1-based iteration
/// index and the current meta-parameter (for periodic checkpointing).
pub fn meta_train<F>(
    cvs: &[SteinCV],
    tasks: &[TaskDataset],
    spec: &NetworkSpec,
    config: &MetaConfig,
    mut on_iteration: F,
) -> Result<MetaParameter, TrainError>
where
    F: FnMut(usize, &CVParameters),
{
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    if cvs.len() != tasks.len() {
        return Err(TrainError::TaskCvMismatch);
    }
    if config.grad_mode == GradMode::Exact && config.inner_rule != RuleKind::Gd {
        return Err(TrainError::ExactNeedsGd);
    }
    for t in tasks {
        if t.support().is_empty() {
            return Err(TrainError::EmptySupport);
        }
        if t.query().is_empty() {
            return Err(TrainError::EmptyQuery);
        }
    }

    // Meta-parameter: γ₀ starts at 0, weights at the seeded Gaussian init.
    let init = init_params(spec, config.sigma_init, 0.0, crate::seeds::derive(config.seed, crate::seeds::STREAM_META_INIT, 0));
    let mut gamma = init.to_flat();
    let outer_rule = UpdateRule::with_kind(config.outer_rule, config.eta.at(1));
    let mut outer_opt = Optimizer::new(outer_rule, gamma.len())?;
    let mut sampler = ChaCha8Rng::seed_from_u64(crate::seeds::derive(config.seed, crate::seeds::STREAM_META_BATCH, 0));
    let mut trace = Vec::with_capacity(config.iterations);

    for i in 1..=config.iterations {
        let started = Instant::now();
        let batch: Vec<usize> =
            (0..config.batch.max(1)).map(|_| sampler.gen_range(0..tasks.len())).collect();

        // The B task contributions are independent; compute them in
        // parallel but reduce in batch order, so the result is identical
        // however they are scheduled.
        let contributions: Result<Vec<(f64, Vec<f64>)>, TrainError> = batch
            .par_iter()
            .map(|&t| task_meta_grad(&cvs[t], &tasks[t], &gamma, config))
            .collect();
        let contributions = contributions.map_err(|e| match e {
            TrainError::Ad(AdError::NonFinite { .. }) => TrainError::NonFinite { iteration: i },
            other => other,
        })?;

        let b = contributions.len() as f64;
        let mut mean_loss = 0.0;
        let mut mean_grad = vec![0.0; gamma.len()];
        for (value, grad) in &contributions {
            mean_loss += value / b;
            for (acc, g) in mean_grad.iter_mut().zip(grad) {
                *acc += g / b;
            }
        }
        if !mean_loss.is_finite() || !mean_grad.iter().all(|g| g.is_finite()) {
            return Err(TrainError::NonFinite { iteration: i });
        }

        outer_opt.step_with_alpha(&mut gamma, &mean_grad, config.eta.at(i))?;

        let grad_norm = mean_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.push(TraceRow {
            iteration: i,
            mean_outer_loss: mean_loss,
            grad_norm_estimate: grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        on_iteration(i, &CVParameters::from_flat(&gamma));
    }

    Ok(MetaParameter { params: CVParameters::from_flat(&gamma), trace })
}
