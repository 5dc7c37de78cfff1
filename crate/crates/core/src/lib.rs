//! Light solver for continuous unbalanced entropic optimal transport.
//!
//! The transport plan is parametrized by two diagonal Gaussian mixtures: `u`
//! for the left marginal and `v` for the conditional potential. The solver
//! minimizes a tractable dual objective with Adam on minibatches of samples.

pub mod cli;
pub mod divergence;
pub mod error;
pub mod gmm;
pub mod io;
pub mod math;
pub mod metrics;
pub mod oracle;
pub mod plan;
pub mod scenario;
pub mod solver;

pub use divergence::{DivergenceKind, DivergenceSpec};
pub use error::{Error, Result};
pub use gmm::GaussianMixture;
pub use metrics::MetricReport;
pub use plan::{ConditionalMixture, PlanModel};
pub use scenario::Scenario;
pub use solver::{objective, objective_and_grad, train, SolverConfig, TrainState};
