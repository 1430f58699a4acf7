//! Kernel control functionals: the classical, optimization-free baseline.
//!
//! A Stein-kernel interpolant `ĝ(x) = β₀ + Σᵢ cᵢ k₀(x, xᵢ)` is fitted on the
//! support set by solving `(K₀ + τI)c = y − β₀·1` with the offset `β₀`
//! estimated by generalized least squares. Because every kernel term is
//! zero-mean under the target, `E_π[ĝ] = β₀`, and the unbiased estimate on
//! the query set is `β₀ + mean(f − ĝ)`. The kernel lengthscale is tuned by
//! maximizing the Gaussian-process log marginal likelihood over a
//! deterministic grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{DataSlice, Estimate, TaskDataset};
use crate::stein::{stein_kernel, SteinError};

#[derive(Debug, Error)]
pub enum CfError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("query set is empty")]
    EmptyQuery,
    #[error("lengthscale must be positive and finite, got {0}")]
    BadLengthscale(f64),
    #[error("nugget must be non-negative and finite, got {0}")]
    BadNugget(f64),
    #[error("lengthscale grid is empty")]
    EmptyGrid,
    #[error("kernel system is numerically singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("every candidate lengthscale gave a singular kernel system")]
    AllCandidatesSingular,
    #[error(transparent)]
    Stein(#[from] SteinError),
}

/// A fitted control-functional interpolant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfModel {
    pub lengthscale: f64,
    pub nugget: f64,
    /// Fitted offset; the model's estimate of the integral.
    pub beta0: f64,
    /// Dual coefficients, one per support point.
    pub coefficients: Vec<f64>,
    pub support_points: Vec<Vec<f64>>,
    pub support_scores: Vec<Vec<f64>>,
}

impl CfModel {
    /// The interpolant `ĝ(x) = β₀ + Σᵢ cᵢ k₀(x, xᵢ)`.
    pub fn predict(&self, x: &[f64], score: &[f64]) -> Result<f64, CfError> {
        let mut acc = self.beta0;
        for (i, c) in self.coefficients.iter().enumerate() {
            acc += c
                * stein_kernel(
                    self.lengthscale,
                    x,
                    score,
                    &self.support_points[i],
                    &self.support_scores[i],
                )?;
        }
        Ok(acc)
    }
}

/// Stein Gram matrix `K₀[i,j] = k₀(xᵢ, xⱼ)` for one lengthscale.
fn stein_gram(v: f64, points: &[Vec<f64>], scores: &[Vec<f64>]) -> Result<DMatrix<f64>, CfError> {
    let m = points.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let k = stein_kernel(v, &points[i], &scores[i], &points[j], &scores[j])?;
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
    }
    Ok(gram)
}

/// Default jitter: `1e-8 · tr(K₀)/m`, proportional to the kernel's own scale.
pub fn default_nugget(gram: &DMatrix<f64>) -> f64 {
    1e-8 * gram.trace() / gram.nrows() as f64
}

/// A factorization of `K₀ + τI` that can solve and report its determinant.
/// Cholesky is attempted first (the matrix is PSD plus a jitter); LU covers
/// matrices that are only just indefinite from rounding.
enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn new(a: DMatrix<f64>) -> Result<Self, CfError> {
        match a.clone().cholesky() {
            Some(chol) => Ok(Factor::Chol(chol)),
            None => {
                let lu = a.lu();
                let diag: Vec<f64> = lu.u().diagonal().iter().map(|d| d.abs()).collect();
                let hi = diag.iter().cloned().fold(0.0, f64::max);
                let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                if !lu.is_invertible() {
                    return Err(CfError::Singular {
                        condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
                    });
                }
                Ok(Factor::Lu(lu))
            }
        }
    }

    fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, CfError> {
        let sol = match self {
            Factor::Chol(c) => Some(c.solve(b)),
            Factor::Lu(lu) => lu.solve(b),
        };
        sol.filter(|s| s.iter().all(|x| x.is_finite()))
            .ok_or(CfError::Singular { condition: f64::INFINITY })
    }

    fn log_det(&self) -> f64 {
        match self {
            Factor::Chol(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            Factor::Lu(lu) => lu.u().diagonal().iter().map(|d| d.abs().ln()).sum::<f64>(),
        }
    }
}

/// Offset and dual coefficients given a factorized system:
/// `β₀ = (1ᵀA⁻¹y)/(1ᵀA⁻¹1)`, `c = A⁻¹(y − β₀·1)`.
fn solve_offset_and_coefficients(
    factor: &Factor,
    y: &DVector<f64>,
) -> Result<(f64, DVector<f64>), CfError> {
    let ones = DVector::from_element(y.len(), 1.0);
    let ainv_y = factor.solve(y)?;
    let ainv_1 = factor.solve(&ones)?;
    let denom = ones.dot(&ainv_1);
    if denom == 0.0 || !denom.is_finite() {
        return Err(CfError::Singular { condition: f64::INFINITY });
    }
    let beta0 = ones.dot(&ainv_y) / denom;
    let coef = ainv_y - ainv_1 * beta0;
    Ok((beta0, coef))
}

/// Fit a control functional on the support triples. `nugget = None` uses
/// [`default_nugget`]; pass `Some(0.0)` for exact interpolation.
pub fn cf_fit(support: DataSlice<'_>, v: f64, nugget: Option<f64>) -> Result<CfModel, CfError> {
    if support.is_empty() {
        return Err(CfError::EmptySupport);
    }
    if !(v > 0.0 && v.is_finite()) {
        return Err(CfError::BadLengthscale(v));
    }
    let gram = stein_gram(v, support.points, support.scores)?;
    let tau = nugget.unwrap_or_else(|| default_nugget(&gram));
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(CfError::BadNugget(tau));
    }
    let m = support.len();
    let a = gram + DMatrix::identity(m, m) * tau;
    let factor = Factor::new(a)?;
    let y = DVector::from_column_slice(support.values);
    let (beta0, coef) = solve_offset_and_coefficients(&factor, &y)?;
    Ok(CfModel {
        lengthscale: v,
        nugget: tau,
        beta0,
        coefficients: coef.iter().copied().collect(),
        support_points: support.points.to_vec(),
        support_scores: support.scores.to_vec(),
    })
}

/// Unbiased estimate on the query set: `β₀ + mean(f(x) − ĝ(x))`, with the
/// standard error taken over the query residuals.
pub fn cf_estimate(model: &CfModel, query: DataSlice<'_>) -> Result<Estimate, CfError> {
    if query.is_empty() {
        return Err(CfError::EmptyQuery);
    }
    let mut residuals = Vec::with_capacity(query.len());
    for i in 0..query.len() {
        let g = model.predict(&query.points[i], &query.scores[i])?;
        residuals.push(query.values[i] - g);
    }
    let mut est = Estimate::from_samples(&residuals).expect("query checked non-empty");
    est.value += model.beta0;
    Ok(est)
}

/// Log-spaced lengthscale grid: 20 candidates spanning
/// `[1e-2, 1e2] ×` the median pairwise squared distance of the points.
pub fn default_lengthscale_grid(points: &[Vec<f64>]) -> Vec<f64> {
    let mut sq = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d2: f64 =
                points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            sq.push(d2);
        }
    }
    sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sq.is_empty() {
        1.0
    } else if sq.len() % 2 == 1 {
        sq[sq.len() / 2]
    } else {
        0.5 * (sq[sq.len() / 2 - 1] + sq[sq.len() / 2])
    };
    let median = if median > 0.0 { median } else { 1.0 };
    (0..20).map(|k| median * 10f64.powf(-2.0 + 4.0 * k as f64 / 19.0)).collect()
}

/// Gaussian-process log marginal likelihood of the centered support values
/// under `K₀(v) + τI`.
fn log_marginal(support: DataSlice<'_>, v: f64, nugget: Option<f64>) -> Result<f64, CfError> {
    let gram = stein_gram(v, support.points, support.scores)?;
    let tau = nugget.unwrap_or_else(|| default_nugget(&gram));
    let m = support.len();
    let a = gram + DMatrix::identity(m, m) * tau;
    let factor = Factor::new(a)?;
    let y = DVector::from_column_slice(support.values);
    let (beta0, _) = solve_offset_and_coefficients(&factor, &y)?;
    let centered = y.map(|yi| yi - beta0);
    let alpha = factor.solve(&centered)?;
    let fit = centered.dot(&alpha);
    Ok(-0.5 * fit - 0.5 * factor.log_det() - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Grid-search lengthscale tuning: the candidate maximizing the log marginal
/// likelihood on the support set, first maximizer winning ties. Candidates
/// whose systems are singular are skipped; if all are, an error is returned.
pub fn tune_lengthscale(
    support: DataSlice<'_>,
    grid: &[f64],
    nugget: Option<f64>,
) -> Result<f64, CfError> {
    if support.is_empty() {
        return Err(CfError::EmptySupport);
    }
    if grid.is_empty() {
        return Err(CfError::EmptyGrid);
    }
    let mut best: Option<(f64, f64)> = None;
    for &v in grid {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CfError::BadLengthscale(v));
        }
        let lml = match log_marginal(support, v, nugget) {
            Ok(l) if l.is_finite() => l,
            _ => continue,
        };
        if best.map_or(true, |(_, b)| lml > b) {
            best = Some((v, lml));
        }
    }
    best.map(|(v, _)| v).ok_or(CfError::AllCandidatesSingular)
}

/// Full baseline for one task: tune on the support set (unless a lengthscale
/// is pinned), fit, and estimate on the query set.
pub fn cf_run(
    data: &TaskDataset,
    lengthscale: Option<f64>,
    nugget: Option<f64>,
) -> Result<(CfModel, Estimate), CfError> {
    let support = data.support();
    let v = match lengthscale {
        Some(v) => v,
        None => {
            let grid = default_lengthscale_grid(support.points);
            tune_lengthscale(support, &grid, nugget)?
        }
    };
    let model = cf_fit(support, v, nugget)?;
    let estimate = cf_estimate(&model, data.query())?;
    Ok((model, estimate))
}
