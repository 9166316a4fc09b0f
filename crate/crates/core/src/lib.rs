//! Offline reinforcement learning for job-shop and flexible job-shop scheduling.
//!
//! The crate covers the full pipeline:
//!
//! - [`instance`]: problem instances (generation, benchmark-format parsing, serialization)
//! - [`sim`]: the scheduling MDP (decision-point states, legal machine-operation pairs,
//!   makespan rewards, trace validation)
//! - [`heuristics`]: behavior policies that produce offline data (priority dispatching
//!   rules, a random policy, a genetic algorithm)
//! - [`features`]: operation / machine / pair feature extraction and normalization
//! - [`dataset`]: building, storing, analyzing and sampling offline transition datasets
//! - [`autodiff`]: a minimal dense-tensor reverse-mode automatic differentiation engine
//! - [`nets`]: the dual-attention encoder, actor head and twin dueling quantile critics
//! - [`trainer`]: the offline training loop (quantile TD loss, conservative penalty,
//!   delayed entropy-regularized policy updates, Polyak targets)
//! - [`eval`]: greedy / sampling inference and optimality-gap reporting

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod fixtures;
pub mod heuristics;
pub mod instance;
pub mod nets;
pub mod oracle;
pub mod seeding;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
pub use instance::{Instance, Job, Kind, Operation};
pub use sim::{Action, ScheduleTrace, SimState};
