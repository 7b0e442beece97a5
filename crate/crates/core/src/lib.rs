//! Model-free safety filters with formal certificates.
//!
//! The crate trains an action-value network Q(x, u) whose zero-sublevel set
//! is a control-dependent safe set, and certifies the two sufficient
//! conditions that make it one:
//!
//! 1. constraint satisfaction: Q(x, u) <= 0 implies h(x) <= 0, and
//! 2. forward invariance: Q(x, u) <= 0 implies some u' with
//!    Q(f(x, u), u') <= 0,
//!
//! using a sound branch-and-bound search over the joint state-control box
//! with interval and linear symbolic bounds, McCormick envelopes for the
//! bilinear inner-product head, and a projected-gradient falsifier.
//!
//! Module map:
//! - [`envs`]: the four benchmark systems (dynamics, constraints, Jacobians,
//!   interval reachability).
//! - [`net`]: dense ReLU networks with exact gradients; the multiplicative
//!   Q-network and the bounded policy network.
//! - [`bounds`]: sound output enclosures over input boxes.
//! - [`training`]: discounted pretraining, policy fitting, counterexample
//!   fine-tuning.
//! - [`verifier`]: attack, branch-and-bound certification, LP-format export,
//!   grid value-iteration oracle.
//! - [`pipeline`]: the four-stage loop and safe-set metrics.
//! - [`filter`]: the runtime filter and closed-loop rollouts.

pub mod bounds;
pub mod envs;
pub mod filter;
pub mod net;
pub mod pipeline;
pub mod training;
pub mod verifier;

pub use envs::{EnvName, EnvSpec, Hyperbox};
pub use filter::{FilterPolicy, RolloutReport};
pub use net::{Critic, Mlp, ModelFile, PolicyNetwork, QNetwork};
pub use pipeline::{CertifiedArtifact, PipelineConfig};
pub use training::{CounterexampleSet, TrainConfig};
pub use verifier::{BnBConfig, ConditionKind, Verdict, VerdictStatus, VerifyTask};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("fixed-point iteration did not converge after {0} sweeps")]
    NonConvergence(usize),
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
