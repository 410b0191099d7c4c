//! Safe experimental optimization of drifting plants.
//!
//! Each call to [`Advisor::advise`] turns a history of noisy measurements
//! into the next experiment. The step is chosen such that, under the supplied
//! Lipschitz constants and noise model, the experiment stays within the
//! constraint slacks while making robust progress on the cost.

// Checks like `!(x >= 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisor;
pub mod cli;
pub mod core;
pub mod geometry;
pub mod pretreat;
pub mod projection;
pub mod reference;
pub mod simharness;
pub mod stepper;

pub use crate::advisor::{default_target, Advisor, AdvisorConfig, GradientOracle};
pub use crate::core::*;
pub use crate::reference::FallbackRule;
