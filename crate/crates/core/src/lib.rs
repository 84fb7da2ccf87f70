//! Portfolio selection under a maximum-drawdown constraint when the drift of
//! the risky assets is unknown and learned from observed returns.
//!
//! The crate is organised bottom-up:
//!
//! - [`market`]: parameters, wealth/drawdown dynamics and the admissible set.
//! - [`filter`]: Kalman recursion for the Gaussian prior and a particle filter.
//! - [`quadrature`] and [`simplex`]: numerical building blocks for the solvers.
//! - [`dp_grid`]: tensor-grid backward induction and the constrained Merton problem.
//! - [`neural`] and [`hybrid_now`]: the dense-network engine and the neural
//!   backward solver.
//! - [`simulator`]: Monte-Carlo evaluation, metrics and parameter studies.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dp_grid;
pub mod error;
pub mod filter;
pub mod hybrid_now;
pub mod linalg;
pub mod market;
pub mod neural;
pub mod policy;
pub mod quadrature;
pub mod rng;
pub mod simplex;
pub mod simulator;

pub use dp_grid::{GridConfig, MertonSolution, PriorMode, ValueGrid};
pub use error::{Error, Result};
pub use filter::{FilterComparison, KalmanState, ParticleMeasure};
pub use hybrid_now::{PenaltySpec, PolicyStack, TrainingConfig};
pub use market::{MarketParams, ReturnSample, WealthState};
pub use neural::{AdamState, DenseNet};
pub use policy::Policy;
pub use simulator::{MetricsReport, PathEnsemble, PolicySolver, SensitivityConfig, SimOptions, Strategy};
