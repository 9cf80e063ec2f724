//! Single-rollout RLVR laboratory.
//!
//! Synthetic verifiable-reward tasks, a small autoregressive policy with
//! exact gradients, and the advantage estimators compared in single-rollout
//! reinforcement learning: GRPO, RLOO, REINFORCE++, a Beta-baseline
//! estimator with an adaptive discount (MVSR), and the same with
//! entropy-based advantage shaping (MSSR).

pub mod advantage;
pub mod baseline;
pub mod cli;
pub mod env;
pub mod error;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scheduler;
pub mod trainer;

pub use error::{LabError, Result};
