//! Batch active learning for Gaussian process regression with derivative
//! observations.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: symmetric matrices, jittered Cholesky, spectra.
//! * [`kernel`]: squared exponential kernel and its derivative blocks.
//! * [`gp`]: values-only and derivative-aware GP models, fitting, prediction.
//! * [`acquisition`]: D/A/E criteria, continuous and pool batch selection,
//!   safety-constrained selection.
//! * [`safety`]: safety GP and the batch safety functional.
//! * [`information`]: information gain and numerical checks of the ordering
//!   and decay results.
//! * [`oracles`]: test functions, gradient estimators, surrogate plant, CSV
//!   elevation loader.
//! * [`harness`]: experiment loops, metrics, replication and CSV output.

pub mod acquisition;
pub mod error;
pub mod gp;
pub mod harness;
pub mod information;
pub mod kernel;
pub mod linalg;
pub mod oracles;
pub mod points;
pub mod safety;

pub use error::{Error, Result};
pub use gp::{Dataset, GpModel, OptimizerConfig, PredictiveBatch, Scheme};
pub use kernel::SEHyperparams;
pub use linalg::{CholFactor, SymMatrix};
pub use points::Points;
