//! `metacv` — run control-variate experiments from TOML configs.
//!
//! Subcommands: `meta-train` (training phase only), `evaluate` (test phase
//! against an existing checkpoint), `run` (both), `sweep` (one axis, many
//! values), `report` (aggregate summaries across run directories).
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical abort,
//! 3 finished with partial results (some estimator failed on some task).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metacv::harness::{
    self, EstimatorKind, ExperimentConfig, HarnessError, RunOutput, SweepAxis,
};

#[derive(Parser)]
#[command(name = "metacv", version, about = "Stein control variate experiment driver")]
struct Cli {
    /// Worker threads for task evaluation and meta-batches (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand.
#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override `experiment.estimators` (comma separated: mc,ncv,cf,mcv).
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if let Some(estimators) = &self.estimators {
            cfg.experiment.estimators = estimators.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train on the training tasks and write a checkpoint.
    MetaTrain(RunArgs),
    /// Evaluate the enabled estimators against an existing checkpoint.
    Evaluate {
        #[command(flatten)]
        args: RunArgs,
        /// Meta-trained parameter produced by `meta-train` or `run`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Meta-train (when mcv is enabled) and evaluate in one run directory.
    Run(RunArgs),
    /// Repeat the experiment along one axis.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// Axis to vary: n, l, b, i_tr, d.
        #[arg(long)]
        axis: SweepAxis,
        /// Axis values (comma separated).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Aggregate summary CSVs from run directories into one table.
    Report {
        /// Run directories produced by `run`, `evaluate`, or `sweep`.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the aggregated table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_run(out: &RunOutput) {
    println!("run directory: {}", out.dir.display());
    println!("config hash:   {}", out.config_hash);
    println!("{:<6} {:>5} {:>7} {:>14} {:>14}", "est", "ok", "failed", "mae", "ci95");
    for s in &out.summaries {
        println!(
            "{:<6} {:>5} {:>7} {:>14.6e} {:>14.6e}",
            s.estimator, s.n_ok, s.n_failed, s.mae, s.mae_ci95
        );
    }
}

fn execute(command: Command) -> Result<bool, HarnessError> {
    match command {
        Command::MetaTrain(args) => {
            let cfg = args.load()?;
            let dir = harness::create_run_dir(&cfg, &args.out)?;
            let result = harness::meta_train_phase(&cfg, &dir)?;
            let last = result.trace.last().expect("at least one iteration");
            println!("run directory: {}", dir.display());
            println!("checkpoint:    {}", dir.join("checkpoint.json").display());
            println!(
                "final iteration {}: mean outer loss {:.6e}, grad norm {:.6e}",
                last.iteration, last.mean_outer_loss, last.grad_norm_estimate
            );
            Ok(false)
        }
        Command::Evaluate { args, checkpoint } => {
            let cfg = args.load()?;
            let out = harness::evaluate_with_checkpoint(&cfg, &checkpoint, &args.out)?;
            print_run(&out);
            Ok(out.partial)
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let out = harness::run_experiment(&cfg, &args.out)?;
            print_run(&out);
            Ok(out.partial)
        }
        Command::Sweep { args, axis, values } => {
            let cfg = args.load()?;
            let outs = harness::sweep(&cfg, axis, &values, &args.out)?;
            let mut partial = false;
            for (value, out) in values.iter().zip(&outs) {
                println!("── value {value} ──");
                print_run(out);
                partial |= out.partial;
            }
            Ok(partial)
        }
        Command::Report { dirs, out } => {
            let (_, table) = harness::report(&dirs, out.as_deref())?;
            print!("{table}");
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: setting thread pool size: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("warning: some estimators failed on some tasks (see per_task.csv)");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
