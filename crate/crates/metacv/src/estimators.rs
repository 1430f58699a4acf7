//! Monte Carlo and control-variate estimators over task datasets.
//!
//! A task dataset holds `N` triples `(x_i, ∇log π(x_i), f(x_i))` split into
//! a support set `S` (the first `m` entries, used for fitting) and a query
//! set `Q` (the rest, used for estimation). The control-variate estimator
//!
//! `Ê = (1/|Q|) Σ_{Q} (f(x) − g_{γ1:p}(x))`
//!
//! averages query residuals; since the Stein part `g_{γ1:p}` has zero
//! π-mean, the offset γ₀ cancels between `E_π[g]` and the residuals and the
//! estimator depends only on the network parameters. The empirical training
//! loss `J(γ) = mean (f − γ₀ − g_{γ1:p})² + λ‖γ1:p‖²` is exposed both as a
//! plain number and as a differentiable program for the optimizers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, ScalarProgram};
use crate::network::CVParameters;
use crate::stein::SteinCV;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("{0} must be non-empty")]
    Empty(&'static str),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("support size {m} exceeds dataset size {n}")]
    BadSupportSize { m: usize, n: usize },
}

/// Immutable per-task data: sample points, their scores, function values,
/// and the support/query split point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    points: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    values: Vec<f64>,
    support_size: usize,
}

/// Borrowed view of a run of (point, score, value) triples.
#[derive(Debug, Clone, Copy)]
pub struct DataSlice<'a> {
    pub points: &'a [Vec<f64>],
    pub scores: &'a [Vec<f64>],
    pub values: &'a [f64],
}

impl<'a> DataSlice<'a> {
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl TaskDataset {
    /// Default split point: `m = ⌊N/2⌋`.
    pub fn default_support_size(n: usize) -> usize {
        n / 2
    }

    pub fn new(
        points: Vec<Vec<f64>>,
        scores: Vec<Vec<f64>>,
        values: Vec<f64>,
        support_size: usize,
    ) -> Result<Self, EstimatorError> {
        let n = points.len();
        if scores.len() != n {
            return Err(EstimatorError::LengthMismatch { what: "scores", expected: n, got: scores.len() });
        }
        if values.len() != n {
            return Err(EstimatorError::LengthMismatch { what: "values", expected: n, got: values.len() });
        }
        if support_size > n {
            return Err(EstimatorError::BadSupportSize { m: support_size, n });
        }
        Ok(TaskDataset { points, scores, values, support_size })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// The first `m` triples: the fitting set.
    pub fn support(&self) -> DataSlice<'_> {
        DataSlice {
            points: &self.points[..self.support_size],
            scores: &self.scores[..self.support_size],
            values: &self.values[..self.support_size],
        }
    }

    /// The remaining `N − m` triples: the estimation set.
    pub fn query(&self) -> DataSlice<'_> {
        DataSlice {
            points: &self.points[self.support_size..],
            scores: &self.scores[self.support_size..],
            values: &self.values[self.support_size..],
        }
    }

    pub fn all(&self) -> DataSlice<'_> {
        DataSlice { points: &self.points, scores: &self.scores, values: &self.values }
    }
}

/// A point estimate with its CLT uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub ci95_halfwidth: f64,
}

impl Estimate {
    /// Sample mean with standard error `sd/√n` (0 when `n ≤ 1`) and a
    /// 1.96·se normal-quantile 95% halfwidth.
    pub fn from_samples(samples: &[f64]) -> Result<Self, EstimatorError> {
        if samples.is_empty() {
            return Err(EstimatorError::Empty("sample list"));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n <= 1 {
            0.0
        } else {
            let ss: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        Ok(Estimate { value: mean, std_error, n, ci95_halfwidth: 1.96 * std_error })
    }
}

/// Plain Monte Carlo: the sample mean of `f` values.
pub fn mc_estimate(values: &[f64]) -> Result<Estimate, EstimatorError> {
    Estimate::from_samples(values)
}

/// Control-variate estimator over the query set: the mean query residual
/// `f − g_{γ1:p}`. Invariant to γ₀ by construction. The parameters must
/// have been fitted on the support set only; this reads only `Q`.
pub fn cv_estimate(
    cv: &SteinCV,
    gamma: &CVParameters,
    data: &TaskDataset,
) -> Result<Estimate, EstimatorError> {
    let q = data.query();
    if q.is_empty() {
        return Err(EstimatorError::Empty("query set"));
    }
    let residuals: Vec<f64> = (0..q.len())
        .map(|i| q.values[i] - cv.apply_at(&gamma.weights, &q.points[i], &q.scores[i]))
        .collect();
    Estimate::from_samples(&residuals)
}

/// The empirical loss `J(γ)` over a data slice, as a differentiable program
/// in the flat parameter vector `(γ₀, γ_{1:p})`. An optional index list
/// restricts it to a mini-batch of the slice.
pub struct TaskLoss<'a> {
    pub cv: &'a SteinCV,
    pub data: DataSlice<'a>,
    /// Rows of `data` to include; `None` means all of them.
    pub batch: Option<&'a [usize]>,
    pub lambda: f64,
}

impl<'a> TaskLoss<'a> {
    pub fn new(cv: &'a SteinCV, data: DataSlice<'a>, lambda: f64) -> Self {
        TaskLoss { cv, data, batch: None, lambda }
    }

    fn rows(&self) -> usize {
        self.batch.map_or(self.data.len(), |b| b.len())
    }

    fn row(&self, k: usize) -> usize {
        self.batch.map_or(k, |b| b[k])
    }
}

impl ScalarProgram for TaskLoss<'_> {
    fn param_len(&self) -> usize {
        self.cv.spec.param_count() + 1
    }

    fn eval<S: Scalar>(&self, gamma: &[S]) -> S {
        let g0 = gamma[0];
        let w = &gamma[1..];
        let k = self.rows();
        debug_assert!(k > 0, "loss over an empty subset");
        let mut acc = S::zero();
        for i in 0..k {
            let r = self.row(i);
            let g = self.cv.apply_at(w, &self.data.points[r], &self.data.scores[r]);
            let resid = S::from_f64(self.data.values[r]) - g0 - g;
            acc = acc + resid * resid;
        }
        let mut loss = acc * S::from_f64(1.0 / k as f64);
        if self.lambda != 0.0 {
            let mut pen = S::zero();
            for &wi in w {
                pen = pen + wi * wi;
            }
            loss = loss + S::from_f64(self.lambda) * pen;
        }
        loss
    }
}

/// `J(γ)` as a plain number: mean squared residual over the subset plus
/// `λ‖γ_{1:p}‖²` (γ₀ is never penalized).
pub fn empirical_loss(
    cv: &SteinCV,
    gamma: &CVParameters,
    subset: DataSlice<'_>,
    lambda: f64,
) -> Result<f64, EstimatorError> {
    if subset.is_empty() {
        return Err(EstimatorError::Empty("loss subset"));
    }
    let loss = TaskLoss::new(cv, subset, lambda);
    Ok(loss.eval::<f64>(&gamma.to_flat()))
}

/// Cross-task error summary: mean absolute error with a CLT 95% halfwidth
/// over tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mae: f64,
    pub mae_ci95: f64,
    pub per_task: Vec<f64>,
}

pub fn task_errors(estimates: &[Estimate], truths: &[f64]) -> Result<ErrorSummary, EstimatorError> {
    if estimates.len() != truths.len() {
        return Err(EstimatorError::LengthMismatch {
            what: "truths",
            expected: estimates.len(),
            got: truths.len(),
        });
    }
    let per_task: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| (e.value - t).abs()).collect();
    let agg = Estimate::from_samples(&per_task)?;
    Ok(ErrorSummary { mae: agg.value, mae_ci95: agg.ci95_halfwidth, per_task })
}
