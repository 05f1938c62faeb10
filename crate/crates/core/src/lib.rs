//! Adaptive subpopulation trial design with synthetic controls.
//!
//! The crate is split the same way a trial is:
//!
//! - [`sim`] owns the ground-truth world (a linear factor model over `K`
//!   subpopulations and `T` periods) and is the only place latent quantities
//!   live.
//! - [`estimator`] holds what an experimenter can see ([`TrialState`]) and the
//!   naive and synthetic-control treatment-effect estimators, the variance
//!   bound they are ranked by, and the equality-constrained QP that picks
//!   synthetic weights.
//! - [`policies`] are the recruitment rules: the adaptive synthetic-control
//!   design and four benchmarks.
//! - [`harness`] runs seeded trials, scores them, and aggregates reports.
//!
//! Subpopulation and period indices are zero-based throughout the API.

pub mod error;
pub mod estimator;
pub mod harness;
pub mod policies;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use estimator::{CountView, EstimatorConfig, TrialState, Weights};
pub use harness::{ExperimentReport, ExperimentSpec, LambdaMode};
pub use policies::{Policy, PolicyDecision, PolicyKind, SelectionResult};
pub use sim::{Environment, FactorRegime, Group, Mismatch, SimConfig};
