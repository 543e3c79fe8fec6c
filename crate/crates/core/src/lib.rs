//! Semantic-entropy curriculum learning and token-selective KL regularization
//! on top of GRPO, for tabular softmax sequence policies.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation over in-memory values; file formats, configuration files and
//! the command line live in the `sent-lab` crate.
//!
//! Module map:
//!
//! - [`task_env`]: synthetic modular-arithmetic tasks and answer verification.
//! - [`policy`]: tabular direct-logit softmax policy.
//! - [`grpo`]: group rollouts, advantages, clipped surrogate, exact KL and the
//!   shared objective engine.
//! - [`sent`]: low-entropy / high-covariance token selection and per-token KL
//!   coefficients.
//! - [`curriculum`]: semantic entropy profiles and staged curricula.
//! - [`dynamics`]: first-order entropy-change forecasts checked against exact
//!   recomputation.
//! - [`baselines`]: interchangeable objective modes.
//! - [`harness`]: the staged training loop and Pass@K evaluation.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod baselines;
pub mod curriculum;
pub mod dynamics;
mod error;
pub mod grpo;
pub mod harness;
pub mod math;
pub mod policy;
pub mod rng;
pub mod sent;
pub mod task_env;

pub use error::{Error, Result};
