//! Reproducible experiment driver: strict TOML configuration, seeded task
//! generation, the four estimators (MC, Neural-CV, CF, Meta-CV) over a
//! shared test set, and CSV emission.
//!
//! Every run writes one directory named by a config-hash prefix plus a
//! timestamp, containing the effective config, the meta-training trace and
//! checkpoint (when a Meta-CV is trained), a per-task CSV, and a summary
//! CSV. Wall-time columns always come last so that reruns can be compared
//! byte-for-byte after stripping them. Estimators are isolated per task: a
//! failure (for example a singular CF system) is recorded as a failed row
//! and the remaining estimators continue.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control_functionals::{cf_run, CfError};
use crate::estimators::{cv_estimate, mc_estimate, task_errors, TaskDataset};
use crate::network::{
    Activation, Checkpoint, CheckpointMeta, CVParameters, NetworkSpec, OutputMode,
};
use crate::seeds;
use crate::stein::SteinCV;
use crate::task_environments::{
    sample_ode_tasks, sample_oscillatory_tasks, write_task_bundle, GeneratedTask,
    OscillatoryEnvironment, TaskKind,
};
use crate::training::{
    adapt, meta_train, train_neural_cv, EtaSchedule, GradMode, MetaConfig, MetaParameter,
    NeuralCvConfig, RuleKind, TraceRow, TrainError, UpdateRule,
};

/// Artifact version stamped into every output row and checkpoint.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration or malformed inputs (CLI exit code 1).
    #[error("config error: {0}")]
    Config(String),
    /// Numerical abort, e.g. meta-training hit a non-finite loss (exit 2).
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Process exit code for the CLI: 1 config, 2 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 1,
            HarnessError::Numerical(_) => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ─── Configuration schema ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Mc,
    Ncv,
    Cf,
    Mcv,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::Mc, EstimatorKind::Ncv, EstimatorKind::Cf, EstimatorKind::Mcv];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mc => "mc",
            EstimatorKind::Ncv => "ncv",
            EstimatorKind::Cf => "cf",
            EstimatorKind::Mcv => "mcv",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mc" => Ok(EstimatorKind::Mc),
            "ncv" => Ok(EstimatorKind::Ncv),
            "cf" => Ok(EstimatorKind::Cf),
            "mcv" => Ok(EstimatorKind::Mcv),
            other => Err(format!("unknown estimator {other:?} (expected mc, ncv, cf, mcv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: TaskKind,
    pub d: usize,
    pub t_train: usize,
    pub t_test: usize,
    pub n_per_task: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Also write the test tasks as a JSONL bundle into the run directory.
    #[serde(default)]
    pub write_task_bundles: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_output_mode")]
    pub output_mode: OutputMode,
}

fn default_output_mode() -> OutputMode {
    OutputMode::Direct
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySection {
    pub factor: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub iterations: usize,
    pub batch: usize,
    pub inner_steps: usize,
    pub inner_alpha: f64,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_decay: Option<DecaySection>,
    #[serde(default)]
    pub lambda: f64,
    pub grad_mode: GradMode,
    pub inner_rule: RuleKind,
    pub outer_rule: RuleKind,
    pub sigma_init: f64,
    /// Write an intermediate checkpoint every this many iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Adaptation steps at test time; defaults to `inner_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt_steps: Option<usize>,
    /// Adaptation step size at test time; defaults to `inner_alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapt_alpha: Option<f64>,
}

impl MetaSection {
    fn eta_schedule(&self) -> EtaSchedule {
        match self.eta_decay {
            None => EtaSchedule::Constant(self.eta),
            Some(DecaySection { factor, every }) => {
                EtaSchedule::Decay { initial: self.eta, factor, every }
            }
        }
    }

    fn meta_config(&self, master_seed: u64) -> MetaConfig {
        MetaConfig {
            inner_steps: self.inner_steps,
            inner_alpha: self.inner_alpha,
            eta: self.eta_schedule(),
            batch: self.batch,
            iterations: self.iterations,
            lambda: self.lambda,
            grad_mode: self.grad_mode,
            inner_rule: self.inner_rule,
            outer_rule: self.outer_rule,
            sigma_init: self.sigma_init,
            seed: master_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralCvSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    #[serde(default = "default_adam")]
    pub rule: RuleKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
}

fn default_adam() -> RuleKind {
    RuleKind::Adam
}

fn default_sigma_init() -> f64 {
    0.01
}

impl NeuralCvSection {
    fn neural_cv_config(&self) -> NeuralCvConfig {
        NeuralCvConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            rule: UpdateRule::with_kind(self.rule, self.alpha),
            lambda: self.lambda,
            sigma_init: self.sigma_init,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfSection {
    /// Fixed kernel lengthscale; omitted means marginal-likelihood tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    /// Fixed nugget; omitted means the trace-scaled default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nugget: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSection {
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default = "default_n_s_truth")]
    pub n_s_truth: usize,
}

fn default_n_s() -> usize {
    256
}

fn default_n_s_truth() -> usize {
    8192
}

impl Default for OdeSection {
    fn default() -> Self {
        OdeSection { n_s: default_n_s(), n_s_truth: default_n_s_truth() }
    }
}

/// The full, schema-validated experiment description. Unknown keys anywhere
/// are rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub network: NetworkSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neural_cv: Option<NeuralCvSection>,
    #[serde(default)]
    pub control_functionals: CfSection,
    #[serde(default)]
    pub ode: OdeSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn enabled(&self, e: EstimatorKind) -> bool {
        self.experiment.estimators.contains(&e)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let exp = &self.experiment;
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if exp.d == 0 {
            return fail("experiment.d must be at least 1".into());
        }
        if exp.kind == TaskKind::Ode && exp.d != 1 {
            return fail(format!("the ode family is one-dimensional, got d = {}", exp.d));
        }
        if exp.t_test == 0 {
            return fail("experiment.t_test must be at least 1".into());
        }
        if exp.n_per_task < 2 {
            return fail("experiment.n_per_task must be at least 2 (support and query)".into());
        }
        if exp.estimators.is_empty() {
            return fail("experiment.estimators must name at least one estimator".into());
        }
        let mut seen = HashSet::new();
        for e in &exp.estimators {
            if !seen.insert(*e) {
                return fail(format!("estimator {e} listed twice"));
            }
        }
        if self.enabled(EstimatorKind::Mcv) {
            let meta = self
                .meta
                .as_ref()
                .ok_or_else(|| HarnessError::Config("mcv needs a [meta] section".into()))?;
            if exp.t_train == 0 {
                return fail("meta-training needs experiment.t_train ≥ 1".into());
            }
            if meta.iterations == 0 || meta.batch == 0 {
                return fail("meta.iterations and meta.batch must be at least 1".into());
            }
            if meta.grad_mode == GradMode::Exact && meta.inner_rule != RuleKind::Gd {
                return fail("meta.grad_mode = \"exact\" requires meta.inner_rule = \"gd\"".into());
            }
        }
        if self.enabled(EstimatorKind::Ncv) && self.neural_cv.is_none() {
            return fail("ncv needs a [neural_cv] section".into());
        }
        if self.experiment.kind == TaskKind::Ode && self.ode.n_s < 2 {
            return fail("ode.n_s must be at least 2".into());
        }
        self.network_spec().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// The network spec implied by the config: input width follows the
    /// experiment dimension.
    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.experiment.d,
            hidden: self.network.hidden.clone(),
            activation: self.network.activation,
            output_mode: self.network.output_mode,
        }
    }

    /// The Stein control variate shared by every task of the family.
    pub fn stein_cv(&self) -> Result<SteinCV, HarnessError> {
        let kind = self.experiment.kind;
        SteinCV::new(self.network_spec(), kind.boundary(), kind.score(self.experiment.d))
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form: identifies the effective run
    /// configuration in every output row.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    /// Hash of only the fields that determine the meta-trained parameter;
    /// evaluations that reuse a checkpoint share this value.
    pub fn train_hash(&self) -> String {
        #[derive(Serialize)]
        struct TrainFingerprint<'a> {
            kind: TaskKind,
            d: usize,
            t_train: usize,
            n_per_task: usize,
            seed: u64,
            network: &'a NetworkSection,
            meta: Option<TrainMeta<'a>>,
            ode: Option<&'a OdeSection>,
        }
        // The test-time adaptation knobs don't touch training.
        #[derive(Serialize)]
        struct TrainMeta<'a> {
            iterations: usize,
            batch: usize,
            inner_steps: usize,
            inner_alpha: f64,
            eta: f64,
            eta_decay: Option<DecaySection>,
            lambda: f64,
            grad_mode: GradMode,
            inner_rule: RuleKind,
            outer_rule: RuleKind,
            sigma_init: f64,
            network: &'a NetworkSection,
        }
        let fp = TrainFingerprint {
            kind: self.experiment.kind,
            d: self.experiment.d,
            t_train: self.experiment.t_train,
            n_per_task: self.experiment.n_per_task,
            seed: self.experiment.seed,
            network: &self.network,
            meta: self.meta.as_ref().map(|m| TrainMeta {
                iterations: m.iterations,
                batch: m.batch,
                inner_steps: m.inner_steps,
                inner_alpha: m.inner_alpha,
                eta: m.eta,
                eta_decay: m.eta_decay,
                lambda: m.lambda,
                grad_mode: m.grad_mode,
                inner_rule: m.inner_rule,
                outer_rule: m.outer_rule,
                sigma_init: m.sigma_init,
                network: &self.network,
            }),
            ode: (self.experiment.kind == TaskKind::Ode).then_some(&self.ode),
        };
        let json = serde_json::to_string(&fp).expect("fingerprint serializes");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ─── Results ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum TaskStatus {
    Ok,
    Failed(String),
}

/// One (task, estimator) outcome.
#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task_index: usize,
    pub estimator: EstimatorKind,
    pub status: TaskStatus,
    pub value: Option<f64>,
    pub std_error: Option<f64>,
    pub truth: f64,
    pub abs_error: Option<f64>,
    /// Fitting cost only (training / tuning / adaptation).
    pub fit_wall_ms: f64,
    /// Fitting plus estimation.
    pub total_wall_ms: f64,
}

/// Cross-task aggregate for one estimator.
#[derive(Debug, Clone)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mae: f64,
    pub mae_ci95: f64,
    pub fit_wall_ms_total: f64,
    pub total_wall_ms_total: f64,
}

/// Everything one run produced, with the directory it was written to.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
    pub train_hash: String,
    pub per_task: Vec<TaskResult>,
    pub summaries: Vec<EstimatorSummary>,
    pub meta: Option<MetaParameter>,
    /// True when at least one (task, estimator) pair failed.
    pub partial: bool,
}

// ─── Phases ─────────────────────────────────────────────────────────────────

fn generate_tasks(
    cfg: &ExperimentConfig,
    count: usize,
    stream: u64,
) -> Result<Vec<GeneratedTask>, HarnessError> {
    let exp = &cfg.experiment;
    let tasks = match exp.kind {
        TaskKind::Oscillatory => sample_oscillatory_tasks(
            OscillatoryEnvironment { d: exp.d },
            count,
            exp.n_per_task,
            exp.seed,
            stream,
        ),
        TaskKind::Ode => sample_ode_tasks(
            count,
            exp.n_per_task,
            cfg.ode.n_s,
            cfg.ode.n_s_truth,
            exp.seed,
            stream,
        ),
    };
    tasks.map_err(|e| HarnessError::Config(e.to_string()))
}

/// Meta-train on freshly generated training tasks. Writes `checkpoint.json`
/// and `meta_trace.csv` into `dir` (plus periodic checkpoints when
/// configured).
pub fn meta_train_phase(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<MetaParameter, HarnessError> {
    let meta_section = cfg
        .meta
        .as_ref()
        .ok_or_else(|| HarnessError::Config("meta-training needs a [meta] section".into()))?;
    let cv = cfg.stein_cv()?;
    let train_tasks = generate_tasks(cfg, cfg.experiment.t_train, seeds::STREAM_TRAIN_TASKS)?;
    let datasets: Vec<TaskDataset> = train_tasks.into_iter().map(|t| t.dataset).collect();
    let cvs = vec![cv.clone(); datasets.len()];
    let config = meta_section.meta_config(cfg.experiment.seed);
    let spec = cfg.network_spec();

    let checkpoint_every = meta_section.checkpoint_every;
    let save_checkpoint = |params: &CVParameters, name: &str| -> Result<(), HarnessError> {
        let path = dir.join(name);
        // Record the optimizer-state convention: the outer optimizer's
        // moments persist across meta-iterations.
        let mut notes = BTreeMap::new();
        notes.insert("outer_optimizer_state".to_string(), "persistent".to_string());
        Checkpoint::new(
            spec.clone(),
            cfg.experiment.kind.boundary(),
            params.clone(),
            CheckpointMeta {
                seed: cfg.experiment.seed,
                config_hash: cfg.train_hash(),
                artifact_version: ARTIFACT_VERSION.to_string(),
                notes,
            },
        )
        .save(&path)
        .map_err(|e| HarnessError::Config(format!("writing {}: {e}", path.display())))
    };

    let mut periodic: Result<(), HarnessError> = Ok(());
    let result = meta_train(&cvs, &datasets, &spec, &config, |i, params| {
        if let Some(every) = checkpoint_every {
            if periodic.is_ok() && every > 0 && i % every == 0 && i < config.iterations {
                periodic = save_checkpoint(params, &format!("checkpoint-{i:06}.json"));
            }
        }
    });
    periodic?;
    let result = result.map_err(|e| match e {
        TrainError::NonFinite { .. } | TrainError::Ad(_) => HarnessError::Numerical(e.to_string()),
        other => HarnessError::Config(other.to_string()),
    })?;

    save_checkpoint(&result.params, "checkpoint.json")?;
    write_meta_trace(&dir.join("meta_trace.csv"), &result.trace)?;
    Ok(result)
}

fn write_meta_trace(path: &Path, trace: &[TraceRow]) -> Result<(), HarnessError> {
    let mut out = String::from("iteration,mean_outer_loss,grad_norm_estimate,wall_ms\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.iteration, row.mean_outer_loss, row.grad_norm_estimate, row.wall_ms
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Evaluate every enabled estimator on freshly generated test tasks and
/// write `per_task.csv` / `summary.csv` into `dir`.
pub fn evaluate_phase(
    cfg: &ExperimentConfig,
    meta_params: Option<&CVParameters>,
    dir: &Path,
) -> Result<(Vec<TaskResult>, Vec<EstimatorSummary>), HarnessError> {
    if cfg.enabled(EstimatorKind::Mcv) && meta_params.is_none() {
        return Err(HarnessError::Config(
            "mcv is enabled but no meta-trained checkpoint was supplied".into(),
        ));
    }
    let cv = cfg.stein_cv()?;
    let test_tasks = generate_tasks(cfg, cfg.experiment.t_test, seeds::STREAM_TEST_TASKS)?;
    if cfg.experiment.write_task_bundles {
        let path = dir.join("test_tasks.jsonl");
        write_task_bundle(&path, &test_tasks)
            .map_err(|e| HarnessError::Config(format!("writing {}: {e}", path.display())))?;
    }

    let estimators = cfg.experiment.estimators.clone();
    let ncv_cfg = cfg.neural_cv.as_ref().map(|s| s.neural_cv_config());
    let adapt_steps =
        cfg.meta.as_ref().map(|m| m.adapt_steps.unwrap_or(m.inner_steps)).unwrap_or(0);
    // Adaptation applies the same update rule as the meta inner loop, with
    // fresh optimizer state per task.
    let adapt_rule = cfg
        .meta
        .as_ref()
        .map(|m| UpdateRule::with_kind(m.inner_rule, m.adapt_alpha.unwrap_or(m.inner_alpha)))
        .unwrap_or_else(|| UpdateRule::gd(1.0));
    let adapt_lambda = cfg.meta.as_ref().map(|m| m.lambda).unwrap_or(0.0);
    let master_seed = cfg.experiment.seed;

    // Tasks are independent; run them on the worker pool and collect in
    // task order so output files are scheduling-invariant.
    let per_task: Vec<TaskResult> = test_tasks
        .par_iter()
        .map(|task| {
            let mut rows = Vec::with_capacity(estimators.len());
            for &e in &estimators {
                rows.push(evaluate_one(
                    e,
                    task,
                    &cv,
                    ncv_cfg.as_ref(),
                    &cfg.control_functionals,
                    meta_params,
                    adapt_steps,
                    adapt_rule,
                    adapt_lambda,
                    master_seed,
                ));
            }
            rows
        })
        .flatten_iter()
        .collect();

    let summaries = summarize(&estimators, &per_task);
    write_per_task_csv(&dir.join("per_task.csv"), cfg, &per_task)?;
    write_summary_csv(&dir.join("summary.csv"), cfg, &summaries)?;
    Ok((per_task, summaries))
}

/// One (estimator, task) evaluation with wall-clock accounting; failures
/// are captured, never propagated.
#[allow(clippy::too_many_arguments)]
fn evaluate_one(
    estimator: EstimatorKind,
    task: &GeneratedTask,
    cv: &SteinCV,
    ncv_cfg: Option<&NeuralCvConfig>,
    cf_cfg: &CfSection,
    meta_params: Option<&CVParameters>,
    adapt_steps: usize,
    adapt_rule: UpdateRule,
    adapt_lambda: f64,
    master_seed: u64,
) -> TaskResult {
    let truth = task.truth.value;
    let started = Instant::now();
    let mut fit_ms = 0.0;
    let outcome: Result<crate::estimators::Estimate, String> = match estimator {
        EstimatorKind::Mc => {
            mc_estimate(task.dataset.query().values).map_err(|e| e.to_string())
        }
        EstimatorKind::Ncv => {
            let cfg = ncv_cfg.expect("validated: ncv enabled implies [neural_cv]");
            let seed = seeds::derive(master_seed, seeds::STREAM_NCV_INIT, task.index as u64);
            let fit_started = Instant::now();
            let fitted = train_neural_cv(cv, &task.dataset, cfg, seed).map_err(|e| e.to_string());
            fit_ms = fit_started.elapsed().as_secs_f64() * 1e3;
            fitted.and_then(|params| {
                cv_estimate(cv, &params, &task.dataset).map_err(|e| e.to_string())
            })
        }
        EstimatorKind::Cf => {
            let fit_started = Instant::now();
            let out = cf_run(&task.dataset, cf_cfg.lengthscale, cf_cfg.nugget);
            fit_ms = fit_started.elapsed().as_secs_f64() * 1e3;
            match out {
                Ok((_, est)) => Ok(est),
                Err(CfError::Singular { condition }) => {
                    Err(format!("singular kernel system (condition {condition:.3e})"))
                }
                Err(e) => Err(e.to_string()),
            }
        }
        EstimatorKind::Mcv => {
            let gamma_meta = meta_params.expect("validated: mcv enabled implies checkpoint");
            let fit_started = Instant::now();
            let adapted = adapt(
                cv,
                gamma_meta,
                task.dataset.support(),
                adapt_steps,
                adapt_rule,
                adapt_lambda,
            )
            .map_err(|e| e.to_string());
            fit_ms = fit_started.elapsed().as_secs_f64() * 1e3;
            adapted.and_then(|params| {
                cv_estimate(cv, &params, &task.dataset).map_err(|e| e.to_string())
            })
        }
    };
    let total_ms = started.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(est) if est.value.is_finite() => TaskResult {
            task_index: task.index,
            estimator,
            status: TaskStatus::Ok,
            value: Some(est.value),
            std_error: Some(est.std_error),
            truth,
            abs_error: Some((est.value - truth).abs()),
            fit_wall_ms: fit_ms,
            total_wall_ms: total_ms,
        },
        Ok(est) => TaskResult {
            task_index: task.index,
            estimator,
            status: TaskStatus::Failed(format!("non-finite estimate {}", est.value)),
            value: None,
            std_error: None,
            truth,
            abs_error: None,
            fit_wall_ms: fit_ms,
            total_wall_ms: total_ms,
        },
        Err(reason) => TaskResult {
            task_index: task.index,
            estimator,
            status: TaskStatus::Failed(reason),
            value: None,
            std_error: None,
            truth,
            abs_error: None,
            fit_wall_ms: fit_ms,
            total_wall_ms: total_ms,
        },
    }
}

fn summarize(order: &[EstimatorKind], per_task: &[TaskResult]) -> Vec<EstimatorSummary> {
    order
        .iter()
        .map(|&e| {
            let rows: Vec<&TaskResult> =
                per_task.iter().filter(|r| r.estimator == e).collect();
            let errors: Vec<f64> = rows.iter().filter_map(|r| r.abs_error).collect();
            let (mae, ci) = if errors.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let estimates: Vec<crate::estimators::Estimate> = rows
                    .iter()
                    .filter(|r| r.status == TaskStatus::Ok)
                    .map(|r| crate::estimators::Estimate {
                        value: r.value.unwrap(),
                        std_error: r.std_error.unwrap(),
                        n: 0,
                        ci95_halfwidth: 0.0,
                    })
                    .collect();
                let truths: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.status == TaskStatus::Ok)
                    .map(|r| r.truth)
                    .collect();
                let summary =
                    task_errors(&estimates, &truths).expect("non-empty checked above");
                (summary.mae, summary.mae_ci95)
            };
            EstimatorSummary {
                estimator: e,
                n_ok: errors.len(),
                n_failed: rows.len() - errors.len(),
                mae,
                mae_ci95: ci,
                fit_wall_ms_total: rows.iter().map(|r| r.fit_wall_ms).sum(),
                total_wall_ms_total: rows.iter().map(|r| r.total_wall_ms).sum(),
            }
        })
        .collect()
}

// ─── CSV emission ───────────────────────────────────────────────────────────

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const PER_TASK_HEADER: &str = "config_hash,train_hash,seed,version,task_index,estimator,\
status,value,std_error,truth,abs_error,fit_wall_ms,total_wall_ms";

/// Number of trailing wall-time columns in both CSVs; determinism
/// comparisons strip exactly these.
pub const WALL_COLUMNS: usize = 2;

fn write_per_task_csv(
    path: &Path,
    cfg: &ExperimentConfig,
    rows: &[TaskResult],
) -> Result<(), HarnessError> {
    let hash = cfg.hash();
    let train_hash = cfg.train_hash();
    let mut out = String::from(PER_TASK_HEADER);
    out.push('\n');
    for r in rows {
        let status = match &r.status {
            TaskStatus::Ok => "ok".to_string(),
            TaskStatus::Failed(reason) => format!("failed: {}", reason.replace(',', ";")),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            hash,
            train_hash,
            cfg.experiment.seed,
            ARTIFACT_VERSION,
            r.task_index,
            r.estimator,
            status,
            opt(r.value),
            opt(r.std_error),
            r.truth,
            opt(r.abs_error),
            r.fit_wall_ms,
            r.total_wall_ms,
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub const SUMMARY_HEADER: &str =
    "config_hash,train_hash,seed,version,estimator,n_ok,n_failed,mae,mae_ci95,\
fit_wall_ms_total,total_wall_ms_total";

fn write_summary_csv(
    path: &Path,
    cfg: &ExperimentConfig,
    summaries: &[EstimatorSummary],
) -> Result<(), HarnessError> {
    let hash = cfg.hash();
    let train_hash = cfg.train_hash();
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            hash,
            train_hash,
            cfg.experiment.seed,
            ARTIFACT_VERSION,
            s.estimator,
            s.n_ok,
            s.n_failed,
            s.mae,
            s.mae_ci95,
            s.fit_wall_ms_total,
            s.total_wall_ms_total,
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Drop the trailing wall-time columns from every row of a CSV: the part
/// of the file that must be byte-identical across reruns of one config.
pub fn strip_wall_columns(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            fields[..fields.len().saturating_sub(WALL_COLUMNS)].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

// ─── Run orchestration ──────────────────────────────────────────────────────

/// Create `<out_root>/<hash8>-<timestamp>[-k]/` and copy the effective
/// config into it.
pub fn create_run_dir(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, HarnessError> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let prefix = &cfg.hash()[..8];
    let mut dir = out_root.join(format!("{prefix}-{stamp}"));
    let mut k = 0;
    while dir.exists() {
        k += 1;
        dir = out_root.join(format!("{prefix}-{stamp}-{k}"));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| HarnessError::Config(format!("re-serializing config: {e}")))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, text).map_err(io_err(&config_path))?;
    Ok(dir)
}

/// Assert the train/test generator streams drew distinct parameter vectors
/// (bitwise, at 64-bit resolution).
fn assert_disjoint_tasks(train: &[GeneratedTask], test: &[GeneratedTask]) -> Result<(), HarnessError> {
    let key = |t: &GeneratedTask| -> Vec<u64> { t.params.iter().map(|p| p.to_bits()).collect() };
    let train_keys: HashSet<Vec<u64>> = train.iter().map(key).collect();
    for t in test {
        if train_keys.contains(&key(t)) {
            return Err(HarnessError::Numerical(format!(
                "test task {} drew a parameter vector already present in training",
                t.index
            )));
        }
    }
    Ok(())
}

/// Both phases in one run directory: meta-train (when mcv is enabled),
/// then evaluate every enabled estimator on the test tasks.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let dir = create_run_dir(cfg, out_root)?;
    let meta = if cfg.enabled(EstimatorKind::Mcv) {
        // The disjointness audit needs both collections in hand.
        let train = generate_tasks(cfg, cfg.experiment.t_train, seeds::STREAM_TRAIN_TASKS)?;
        let test = generate_tasks(cfg, cfg.experiment.t_test, seeds::STREAM_TEST_TASKS)?;
        assert_disjoint_tasks(&train, &test)?;
        drop((train, test));
        Some(meta_train_phase(cfg, &dir)?)
    } else {
        None
    };
    let (per_task, summaries) =
        evaluate_phase(cfg, meta.as_ref().map(|m| &m.params), &dir)?;
    let partial = per_task.iter().any(|r| r.status != TaskStatus::Ok);
    Ok(RunOutput {
        dir,
        config_hash: cfg.hash(),
        train_hash: cfg.train_hash(),
        per_task,
        summaries,
        meta,
        partial,
    })
}

/// Evaluate against an existing checkpoint (no training phase).
pub fn evaluate_with_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    out_root: &Path,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint_path)
        .map_err(|e| HarnessError::Config(format!("loading checkpoint: {e}")))?;
    let spec = cfg.network_spec();
    if ck.spec != spec {
        return Err(HarnessError::Config(
            "checkpoint network spec does not match the config".into(),
        ));
    }
    let dir = create_run_dir(cfg, out_root)?;
    let copy_path = dir.join("checkpoint.json");
    fs::copy(checkpoint_path, &copy_path).map_err(io_err(&copy_path))?;
    let (per_task, summaries) = evaluate_phase(cfg, Some(&ck.params), &dir)?;
    let partial = per_task.iter().any(|r| r.status != TaskStatus::Ok);
    Ok(RunOutput {
        dir,
        config_hash: cfg.hash(),
        train_hash: cfg.train_hash(),
        per_task,
        summaries,
        meta: None,
        partial,
    })
}

// ─── Sweeps ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Samples per task; tasks change, so each value retrains.
    N,
    /// Adaptation steps at test time; one meta-training is reused.
    L,
    /// Meta-batch size; retrains.
    B,
    /// Meta-iterations; retrains.
    ITr,
    /// Dimension; retrains (and resizes the network input).
    D,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" => Ok(SweepAxis::N),
            "l" => Ok(SweepAxis::L),
            "b" => Ok(SweepAxis::B),
            "i_tr" | "itr" => Ok(SweepAxis::ITr),
            "d" => Ok(SweepAxis::D),
            other => Err(format!("unknown sweep axis {other:?} (expected n, l, b, i_tr, d)")),
        }
    }
}

fn with_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: usize) -> Result<ExperimentConfig, HarnessError> {
    let mut out = cfg.clone();
    match axis {
        SweepAxis::N => out.experiment.n_per_task = value,
        SweepAxis::D => out.experiment.d = value,
        SweepAxis::L => {
            let meta = out.meta.as_mut().ok_or_else(|| {
                HarnessError::Config("an l sweep needs a [meta] section".into())
            })?;
            meta.adapt_steps = Some(value);
        }
        SweepAxis::B => {
            let meta = out.meta.as_mut().ok_or_else(|| {
                HarnessError::Config("a b sweep needs a [meta] section".into())
            })?;
            meta.batch = value;
        }
        SweepAxis::ITr => {
            let meta = out.meta.as_mut().ok_or_else(|| {
                HarnessError::Config("an i_tr sweep needs a [meta] section".into())
            })?;
            meta.iterations = value;
        }
    }
    out.validate()?;
    Ok(out)
}

/// Run the experiment once per axis value. Axes that leave the training
/// problem unchanged (test-time `L`) meta-train once and reuse the
/// checkpoint; all other axes retrain per value.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    out_root: &Path,
) -> Result<Vec<RunOutput>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let mut outputs = Vec::with_capacity(values.len());
    if axis == SweepAxis::L && cfg.enabled(EstimatorKind::Mcv) {
        // One shared meta-training; each value gets its own evaluation dir
        // holding a copy of the same checkpoint.
        let first = with_axis(cfg, axis, values[0])?;
        let first_out = run_experiment(&first, out_root)?;
        let checkpoint = first_out.dir.join("checkpoint.json");
        let rest = &values[1..];
        outputs.push(first_out);
        for &v in rest {
            let cfg_v = with_axis(cfg, axis, v)?;
            outputs.push(evaluate_with_checkpoint(&cfg_v, &checkpoint, out_root)?);
        }
    } else {
        for &v in values {
            let cfg_v = with_axis(cfg, axis, v)?;
            outputs.push(run_experiment(&cfg_v, out_root)?);
        }
    }
    Ok(outputs)
}

// ─── Reports ────────────────────────────────────────────────────────────────

/// One summary row recovered from a run directory.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub config_hash: String,
    pub kind: TaskKind,
    pub d: usize,
    pub n_per_task: usize,
    pub adapt_steps: Option<usize>,
    pub batch: Option<usize>,
    pub iterations: Option<usize>,
    pub estimator: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mae: f64,
    pub mae_ci95: f64,
}

fn parse_summary_dir(dir: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let path = dir.join("summary.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != SUMMARY_HEADER.split(',').count() {
            return Err(HarnessError::Config(format!(
                "{}:{}: expected {} columns, found {}",
                path.display(),
                lineno + 1,
                SUMMARY_HEADER.split(',').count(),
                fields.len()
            )));
        }
        let num = |s: &str| -> f64 { s.parse().unwrap_or(f64::NAN) };
        rows.push(ReportRow {
            config_hash: fields[0].to_string(),
            kind: cfg.experiment.kind,
            d: cfg.experiment.d,
            n_per_task: cfg.experiment.n_per_task,
            adapt_steps: cfg.meta.as_ref().map(|m| m.adapt_steps.unwrap_or(m.inner_steps)),
            batch: cfg.meta.as_ref().map(|m| m.batch),
            iterations: cfg.meta.as_ref().map(|m| m.iterations),
            estimator: fields[4].to_string(),
            n_ok: fields[5].parse().unwrap_or(0),
            n_failed: fields[6].parse().unwrap_or(0),
            mae: num(fields[7]),
            mae_ci95: num(fields[8]),
        });
    }
    Ok(rows)
}

/// Collect summaries from run directories, deduplicating by
/// (config hash, estimator) with the earliest occurrence winning. Returns
/// the rows plus an aligned text table; also writes `report.csv` when an
/// output path is given.
pub fn report(
    dirs: &[PathBuf],
    out_csv: Option<&Path>,
) -> Result<(Vec<ReportRow>, String), HarnessError> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for dir in dirs {
        for row in parse_summary_dir(dir)? {
            if seen.insert((row.config_hash.clone(), row.estimator.clone())) {
                rows.push(row);
            }
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::Config("no estimator rows found in the given runs".into()));
    }

    let mut csv = String::from(
        "config_hash,kind,d,n,l,b,i_tr,estimator,n_ok,n_failed,mae,mae_ci95\n",
    );
    let fmt_opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            &r.config_hash[..8.min(r.config_hash.len())],
            match r.kind {
                TaskKind::Oscillatory => "oscillatory",
                TaskKind::Ode => "ode",
            },
            r.d,
            r.n_per_task,
            fmt_opt(r.adapt_steps),
            fmt_opt(r.batch),
            fmt_opt(r.iterations),
            r.estimator,
            r.n_ok,
            r.n_failed,
            r.mae,
            r.mae_ci95,
        ));
    }
    if let Some(path) = out_csv {
        fs::write(path, &csv).map_err(io_err(path))?;
    }

    let mut table = format!(
        "{:<10} {:<12} {:>2} {:>4} {:>4} {:>4} {:>6}  {:<4} {:>5} {:>6}  {:>12} {:>12}\n",
        "config", "kind", "d", "n", "l", "b", "i_tr", "est", "ok", "failed", "mae", "ci95"
    );
    for r in &rows {
        table.push_str(&format!(
            "{:<10} {:<12} {:>2} {:>4} {:>4} {:>4} {:>6}  {:<4} {:>5} {:>6}  {:>12.6e} {:>12.6e}\n",
            &r.config_hash[..8.min(r.config_hash.len())],
            match r.kind {
                TaskKind::Oscillatory => "oscillatory",
                TaskKind::Ode => "ode",
            },
            r.d,
            r.n_per_task,
            fmt_opt(r.adapt_steps),
            fmt_opt(r.batch),
            fmt_opt(r.iterations),
            r.estimator,
            r.n_ok,
            r.n_failed,
            r.mae,
            r.mae_ci95,
        ));
    }
    Ok((rows, table))
}
