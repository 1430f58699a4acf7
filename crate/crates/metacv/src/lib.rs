//! Stein-based neural control variates for Monte Carlo integration, with
//! meta-learned initializations shared across related integration tasks.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] — nested automatic differentiation (forward duals for input
//!   derivatives, a reverse tape for parameter gradients, tape-of-tapes for
//!   exact meta-gradients) plus a finite-difference oracle.
//! * [`network`] — small fully connected networks used as vector fields,
//!   including boundary corrections and checkpoint serialization.
//! * [`stein`] — the Langevin–Stein operator applied to a network vector
//!   field, and the closed-form Stein kernel used by control functionals.
//! * [`estimators`] — Monte Carlo and control-variate estimators over
//!   support/query splits of task datasets.
//! * [`training`] — gradient-based fitting: per-task neural control variates,
//!   meta-training across tasks, and fast per-task adaptation.
//! * [`control_functionals`] — the kernel-interpolation baseline.
//! * [`task_environments`] — synthetic task families (oscillatory integrands
//!   on the unit cube, a parametric boundary-value problem) with ground truth.
//! * [`harness`] — reproducible experiment driver: config parsing, run
//!   directories, CSV outputs, sweeps, and report aggregation.

pub mod autodiff;
pub mod control_functionals;
pub mod estimators;
pub mod harness;
pub mod network;
pub mod seeds;
pub mod stein;
pub mod task_environments;
pub mod training;
