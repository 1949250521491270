//! Step-level process supervision for self-improving reasoners.
//!
//! The crate covers the whole loop: sampling diverse reasoning trajectories,
//! labeling their steps (per-step Monte Carlo, binary search, or
//! verifier-guided first-error detection with two-rollout self-verification),
//! training a process verifier, building preference pairs from verifier
//! rewards, and aligning the reasoner with an odds-ratio preference loss.
//!
//! A synthetic layered-DAG environment with an exhaustive oracle
//! ([`synthenv`]) makes every stage executable and checkable at desk scale,
//! and [`reasoner::remote`] connects the same pipeline to any
//! OpenAI-compatible inference server.

pub mod baselines;
pub mod config;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod keys;
pub mod ledger;
pub mod prefs;
pub mod reasoner;
pub mod records;
pub mod saps;
pub mod synthenv;
pub mod types;
pub mod verifier;

pub use error::{Error, Result};
pub use ledger::CostLedger;
pub use types::{LabelSequence, Question, ScoreSequence, Trajectory, TrajectorySource};
