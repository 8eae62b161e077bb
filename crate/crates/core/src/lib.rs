//! Synthetic-experience reinforcement learning.
//!
//! An agent policy is trained on rollouts produced by an experience model
//! instead of a live environment. The crate provides the experience models
//! (a toy shop simulator, a perturbed tabular MDP and a chat-endpoint
//! backend), a retrieval replay buffer, a task curriculum, GRPO/GAE policy
//! optimization, and exact verification of the sim-to-real bounds on tabular
//! MDPs.

pub mod bounds;
pub mod chat;
pub mod cli;
pub mod curriculum;
pub mod datakit;
pub mod env;
pub mod error;
pub mod experience;
pub mod jsonl;
pub mod linalg;
pub mod mdp;
pub mod policy;
pub mod prompts;
pub mod replay;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
