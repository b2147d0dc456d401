//! Sequential detection for multi-target radar tracking.
//!
//! A micro-manager tracks targets with Kalman filters and decides at every
//! epoch whether to keep tracking under the current priority allocation or
//! to stop and hand control back to the macro-manager. The stopping cost is
//! a mutual-information (stochastic observability) difference between the
//! highest-priority target and the rest; the decision policies are monotone
//! in the Loewner order and are tuned by simultaneous-perturbation
//! stochastic approximation.
//!
//! Modules, bottom up:
//!
//! - [`filter_core`]: covariance updates, Loewner order, determinant ratios.
//! - [`observability`]: stopping costs and the transformed running cost.
//! - [`policy`]: the four parametrized policy families.
//! - [`optimizer`]: rollouts, cost estimation and SPSA search.
//! - [`gmti_sim`]: radar kinematics and the fly-by / persistent scenarios.
//! - [`linearization`]: Jacobian quality metrics for the measurement map.
//! - [`dp_oracle`]: value iteration for the scalar two-target problem.
//! - [`cli`]: configuration loading and experiment drivers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod cli;
pub mod dp_oracle;
pub mod filter_core;
pub mod gmti_sim;
pub mod linearization;
pub mod observability;
pub mod optimizer;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
