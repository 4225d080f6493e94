//! Optimizers for training under stale gradients, a simulated round-robin
//! asynchronous SGD harness, and the test problems used to study them.
//!
//! The main entry points are [`optim::Optimizer`], [`harness::run_async`],
//! [`nqm::QuadraticProblem`], [`mlp`] and [`sweep::run_sweep`].

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod metrics;
pub mod mlp;
pub mod nqm;
pub mod optim;
pub mod param;
pub mod rng;
pub mod sweep;

pub use error::{Error, Result};
pub use harness::{run_async, DelayConfig, GradientOracle, RunResult, RunSpec, RunStatus};
pub use optim::{Algorithm, Optimizer, OptimizerConfig, OptimizerState};
pub use param::{GroupMode, GroupSpec, ParamVector};
pub use rng::Rng;
