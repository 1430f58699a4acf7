//! Families of related integration tasks with ground-truth oracles.
//!
//! Two benchmark families are provided. The *oscillatory* family integrates
//! `f(x; a) = cos(2π a₁ + Σⱼ a_{j+1} xⱼ)` over the unit cube under the
//! uniform density (score ≡ 0, with the product boundary correction keeping
//! the Stein identity valid on the cube); its integral has a closed form.
//! The *ODE* family integrates the deflection functional of a two-point
//! boundary value problem `d/ds(c(s)·u′(s)) = −50x²`, `u(0) = u(1) = 0`,
//! `c(s) = 1 + a·s`, over `x ~ N(0,1)`: the solution is linear in the
//! forcing, so `f(x; a) = x²·C(a)` and the truth is `C(a)` itself,
//! computed by a high-resolution solve. (Here `s` is the spatial coordinate
//! of the rod and `x` the random load parameter.)
//!
//! Task generation is deterministic per (master seed, stream, task index),
//! so train and test collections are disjoint and reproducible regardless
//! of how generation is scheduled.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::TaskDataset;
use crate::network::BoundaryCorrection;
use crate::seeds;
use crate::stein::{GaussianScore, ScoreFunction, ZeroScore};

/// Task bundle schema version; bump on any field change.
pub const TASK_BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("task count and samples per task must be at least 1")]
    BadCount,
    #[error("the solver grid needs at least 2 cells, got {0}")]
    BadGrid(usize),
    #[error("unsupported task bundle version {got} (expected {TASK_BUNDLE_VERSION})")]
    Version { got: u32 },
    #[error("malformed task bundle: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ─── Oscillatory family ─────────────────────────────────────────────────────

/// One oscillatory task: `f(x; a) = cos(2π a₁ + Σⱼ a_{j+1} xⱼ)` on `[0,1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillatoryTask {
    /// `d + 1` parameters: phase-like `a₁`, then the `d` frequencies.
    pub a: Vec<f64>,
    pub d: usize,
}

impl OscillatoryTask {
    pub fn value(&self, x: &[f64]) -> f64 {
        let phase: f64 = 2.0 * std::f64::consts::PI * self.a[0]
            + self.a[1..].iter().zip(x).map(|(b, xi)| b * xi).sum::<f64>();
        phase.cos()
    }
}

/// Distribution over oscillatory tasks: `a₁ ~ U(0.4, 0.6)` and each
/// frequency `~ U(4, 6)`, independently across tasks and coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OscillatoryEnvironment {
    pub d: usize,
}

impl OscillatoryEnvironment {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> OscillatoryTask {
        let mut a = Vec::with_capacity(self.d + 1);
        a.push(rng.gen_range(0.4..0.6));
        for _ in 0..self.d {
            a.push(rng.gen_range(4.0..6.0));
        }
        OscillatoryTask { a, d: self.d }
    }
}

/// Closed-form integral of the oscillatory task over the unit cube:
///
/// `∫ cos(2πa₁ + Σ bⱼxⱼ) dx = Re[ e^{i2πa₁} ∏ⱼ (e^{i bⱼ} − 1)/(i bⱼ) ]`
///
/// with the factor for `bⱼ = 0` equal to 1 (the zero-frequency limit).
pub fn oscillatory_truth(a: &[f64], d: usize) -> GroundTruth {
    debug_assert_eq!(a.len(), d + 1);
    let mut prod = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * a[0]);
    for &b in &a[1..=d] {
        if b == 0.0 {
            continue;
        }
        prod *= (Complex64::new(0.0, b).exp() - 1.0) / Complex64::new(0.0, b);
    }
    GroundTruth { value: prod.re, method: TruthMethod::Analytic }
}

// ─── ODE family ─────────────────────────────────────────────────────────────

/// One ODE task: the stiffness slope `a` in `c(s) = 1 + a·s` and the solver
/// grid used when generating data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeTask {
    pub a: f64,
    pub n_s: usize,
}

/// Deflection integral `C_n(a) = ∫₀¹ u ds` for the unit load `x = 1`:
/// solves `d/ds((1 + a·s)·u′) = −50` with `u(0) = u(1) = 0` on `n_s` cells
/// by the conservative face-centered scheme, then applies the trapezoid
/// rule. Second-order accurate in `1/n_s`.
pub fn ode_profile_integral(a: f64, n_s: usize) -> Result<f64, TaskGenError> {
    if n_s < 2 {
        return Err(TaskGenError::BadGrid(n_s));
    }
    let h = 1.0 / n_s as f64;
    let interior = n_s - 1;
    // Tridiagonal rows for u_k, k = 1..n_s−1:
    //   c_{k−1/2}·u_{k−1} − (c_{k−1/2}+c_{k+1/2})·u_k + c_{k+1/2}·u_{k+1} = −50 h²
    let face = |k: f64| 1.0 + a * (k * h);
    let mut lower = vec![0.0; interior];
    let mut diag = vec![0.0; interior];
    let mut upper = vec![0.0; interior];
    let mut rhs = vec![-50.0 * h * h; interior];
    for k in 0..interior {
        let c_lo = face(k as f64 + 0.5);
        let c_hi = face(k as f64 + 1.5);
        lower[k] = c_lo;
        diag[k] = -(c_lo + c_hi);
        upper[k] = c_hi;
    }
    // Thomas sweep (the matrix is diagonally dominant, no pivoting needed).
    for k in 1..interior {
        let w = lower[k] / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    let mut u = vec![0.0; interior];
    u[interior - 1] = rhs[interior - 1] / diag[interior - 1];
    for k in (0..interior - 1).rev() {
        u[k] = (rhs[k] - upper[k] * u[k + 1]) / diag[k];
    }
    // Trapezoid over the full grid; both boundary values are zero.
    Ok(h * u.iter().sum::<f64>())
}

/// Finite-difference value of `f(x; a) = x²·C_{n_s}(a)`.
pub fn ode_solve(a: f64, x: f64, n_s: usize) -> Result<f64, TaskGenError> {
    Ok(x * x * ode_profile_integral(a, n_s)?)
}

/// Ground truth `E_{X~N(0,1)}[f(X; a)] = C(a)` (since `E[X²] = 1`),
/// computed at high resolution with a Richardson error estimate
/// `|C_n − C_{n/2}|/3` from the solver's second-order convergence.
pub fn ode_truth(a: f64, n_s_truth: usize) -> Result<GroundTruth, TaskGenError> {
    let fine = ode_profile_integral(a, n_s_truth)?;
    let coarse = ode_profile_integral(a, (n_s_truth / 2).max(2))?;
    Ok(GroundTruth {
        value: fine,
        method: TruthMethod::QuadratureOracle {
            resolution: n_s_truth,
            error_estimate: (fine - coarse).abs() / 3.0,
        },
    })
}

/// Standard normal score `∇ log π(x) = −x`.
pub fn gaussian_score(x: &[f64]) -> Vec<f64> {
    x.iter().map(|xi| -xi).collect()
}

// ─── Generated tasks and bundles ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Oscillatory,
    Ode,
}

impl TaskKind {
    /// Boundary correction the family's Stein operator requires.
    pub fn boundary(self) -> BoundaryCorrection {
        match self {
            // Uniform on the cube: the field must vanish on the boundary.
            TaskKind::Oscillatory => BoundaryCorrection::UnitCubeProduct,
            TaskKind::Ode => BoundaryCorrection::None,
        }
    }

    /// The family's target score function in `d` dimensions.
    pub fn score(self, d: usize) -> Arc<dyn ScoreFunction> {
        match self {
            TaskKind::Oscillatory => Arc::new(ZeroScore { dim: d }),
            TaskKind::Ode => Arc::new(GaussianScore { dim: d }),
        }
    }
}

/// How a ground-truth value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum TruthMethod {
    Analytic,
    QuadratureOracle { resolution: usize, error_estimate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub value: f64,
    #[serde(flatten)]
    pub method: TruthMethod,
}

/// One sampled task: parameters, dataset, cached truth, and the exact seed
/// its RNG stream was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub kind: TaskKind,
    pub index: usize,
    /// Family parameters: `a` (length d+1) for oscillatory, `[a]` for ODE.
    pub params: Vec<f64>,
    pub seed: u64,
    pub dataset: TaskDataset,
    pub truth: GroundTruth,
}

/// Draw `t_count` oscillatory tasks of `n_per_task` uniform cube samples
/// each. `stream` separates collections (use [`seeds::STREAM_TRAIN_TASKS`]
/// and [`seeds::STREAM_TEST_TASKS`]); task `i` depends only on
/// `(master_seed, stream, i)`.
pub fn sample_oscillatory_tasks(
    env: OscillatoryEnvironment,
    t_count: usize,
    n_per_task: usize,
    master_seed: u64,
    stream: u64,
) -> Result<Vec<GeneratedTask>, TaskGenError> {
    if t_count == 0 || n_per_task == 0 {
        return Err(TaskGenError::BadCount);
    }
    let mut tasks = Vec::with_capacity(t_count);
    for index in 0..t_count {
        let seed = seeds::derive(master_seed, stream, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = env.draw(&mut rng);
        let points: Vec<Vec<f64>> = (0..n_per_task)
            .map(|_| (0..env.d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let scores = vec![vec![0.0; env.d]; n_per_task];
        let values: Vec<f64> = points.iter().map(|x| task.value(x)).collect();
        let dataset = TaskDataset::new(
            points,
            scores,
            values,
            TaskDataset::default_support_size(n_per_task),
        )
        .expect("generated columns have equal lengths");
        let truth = oscillatory_truth(&task.a, env.d);
        tasks.push(GeneratedTask {
            kind: TaskKind::Oscillatory,
            index,
            params: task.a,
            seed,
            dataset,
            truth,
        });
    }
    Ok(tasks)
}

/// Draw `t_count` ODE tasks of `n_per_task` standard normal samples each,
/// with data from an `n_s`-cell solve and truth from an `n_s_truth`-cell
/// solve. Seeding matches [`sample_oscillatory_tasks`].
pub fn sample_ode_tasks(
    t_count: usize,
    n_per_task: usize,
    n_s: usize,
    n_s_truth: usize,
    master_seed: u64,
    stream: u64,
) -> Result<Vec<GeneratedTask>, TaskGenError> {
    if t_count == 0 || n_per_task == 0 {
        return Err(TaskGenError::BadCount);
    }
    let mut tasks = Vec::with_capacity(t_count);
    for index in 0..t_count {
        let seed = seeds::derive(master_seed, stream, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rng.gen_range(0.0..1.0);
        // One profile solve per task; every value is x²·C_{n_s}(a).
        let c_data = ode_profile_integral(a, n_s)?;
        let points: Vec<Vec<f64>> =
            (0..n_per_task).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let scores: Vec<Vec<f64>> = points.iter().map(|p| gaussian_score(p)).collect();
        let values: Vec<f64> = points.iter().map(|p| p[0] * p[0] * c_data).collect();
        let dataset = TaskDataset::new(
            points,
            scores,
            values,
            TaskDataset::default_support_size(n_per_task),
        )
        .expect("generated columns have equal lengths");
        let truth = ode_truth(a, n_s_truth)?;
        tasks.push(GeneratedTask { kind: TaskKind::Ode, index, params: vec![a], seed, dataset, truth });
    }
    Ok(tasks)
}

/// One line of a task bundle file.
#[derive(Debug, Serialize, Deserialize)]
struct BundleRecord {
    version: u32,
    #[serde(flatten)]
    task: GeneratedTask,
}

/// Write tasks as line-delimited JSON records, one task per line, each
/// carrying the schema version.
pub fn write_task_bundle(path: &Path, tasks: &[GeneratedTask]) -> Result<(), TaskGenError> {
    let mut out = BufWriter::new(File::create(path)?);
    for task in tasks {
        let record = BundleRecord { version: TASK_BUNDLE_VERSION, task: task.clone() };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a bundle written by [`write_task_bundle`], rejecting unknown
/// schema versions.
pub fn read_task_bundle(path: &Path) -> Result<Vec<GeneratedTask>, TaskGenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BundleRecord = serde_json::from_str(&line)?;
        if record.version != TASK_BUNDLE_VERSION {
            return Err(TaskGenError::Version { got: record.version });
        }
        tasks.push(record.task);
    }
    Ok(tasks)
}
