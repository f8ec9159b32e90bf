//! Token-level state-value estimation and advantages for grouped
//! sequence-generation rollouts.
//!
//! The crate bundles:
//!
//! - a bit-exact on-disk trace format for rollout groups ([`trace_model`]);
//! - a seeded synthetic generator with exactly computable state values
//!   ([`synth_env`]);
//! - baseline estimators — group-average (GRPO), Monte-Carlo continuations,
//!   and GAE over supplied values ([`estimators`]);
//! - milestone-based credit assignment over decoded text ([`numca`]);
//! - hidden-state nearest-neighbor value estimation ([`hista`]);
//! - a mean-absolute-error benchmark harness ([`sveb`]);
//! - numeric verification suites for the supporting math ([`theory`]);
//! - a reproducible CLI front end ([`cli`]).
//!
//! Everything randomized draws from seed-derived streams ([`rng`]), so every
//! workflow is deterministic given its seed, including under multi-threaded
//! execution.

pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod hista;
pub mod numca;
pub mod rng;
pub mod sveb;
pub mod synth_env;
pub mod theory;
pub mod trace_model;

pub use error::{Error, Result};
