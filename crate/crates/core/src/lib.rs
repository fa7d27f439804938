//! Single-agent regional traffic signal control laboratory.
//!
//! A deterministic point-queue simulator for signalized grids, queue sensing
//! from per-link vehicle records (full information or probe samples), an
//! environment with a matrix observation and a `3M` action space, a small
//! policy-gradient learner, and the run harness and wire protocol.

pub mod error;
pub mod harness;
pub mod learner;
pub mod netmodel;
pub mod rlenv;
pub mod scenario;
pub mod mesosim;
pub mod sensing;
pub mod signals;

pub use error::{Error, Result};
