//! Training, scoring, simulation, and data tooling for step-wise GUI agents.
//!
//! The library is organized around one ordinary data flow: raw trajectory
//! files are curated by [`pipeline`], scored against gold actions by
//! [`reward`], used to optimize a tiny tokenized policy in [`grpo`], and
//! checked end to end against the simulated sites in [`env`] through the
//! harnesses in [`eval`].

pub mod env;
pub mod eval;
pub mod fixtures;
pub mod grpo;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod reward;
pub mod util;
