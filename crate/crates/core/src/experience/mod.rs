//! Experience models: the component that, given a task, the interaction
//! history, retrieved demonstrations and the agent's action, produces a
//! reasoning trace, the next state, a reward and a termination flag.
//!
//! Three backends implement [`ExperienceModel`]:
//! - [`TabularPerturbedModel`]: a perturbed copy of an explicit MDP, used to
//!   measure model error and verify the simulation bounds;
//! - [`ShopModel`]: a deterministic scripted shopping site with text states;
//! - [`RemoteModel`]: a chat-completions LLM behind an HTTP endpoint.

mod remote;
mod shop;
mod tabular;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::replay::Transition;
use crate::rng::Rng;

pub use remote::{RemoteModel, RemoteModelConfig};
pub use shop::{
    oracle_action, parse_task, render_task, Catalog, Item, ShopConfig, ShopFeatures, ShopModel, ShopState,
    TaskSpec, SHOP_CATEGORIES, SHOP_COLORS,
};
pub use tabular::{measure_model_error, ModelDiscrepancy, TabularPerturbedModel};

/// Terminal state entered on any action outside the admissible set.
pub const FAILURE_STATE: &str = "[failure] the last action was invalid; the episode has ended";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub state: String,
    pub action: String,
}

/// Everything an experience model conditions on besides the current
/// `(state, action)` pair.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperienceContext {
    pub task: String,
    /// Earlier `(state, action)` pairs of this episode, oldest first. Its
    /// length is the current turn index.
    pub history: Vec<HistoryItem>,
    pub demos: Vec<Transition>,
}

impl ExperienceContext {
    pub fn turn(&self) -> usize {
        self.history.len()
    }
}

/// A state together with the actions the agent may take in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: String,
    pub actions: Vec<String>,
}

/// Output of one model transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStep {
    pub reasoning: String,
    pub next_state: String,
    pub reward: f64,
    pub done: bool,
    /// Admissible actions in `next_state` (empty when `done`).
    pub actions: Vec<String>,
}

impl ModelStep {
    pub fn failure(reasoning: impl Into<String>) -> Self {
        ModelStep {
            reasoning: reasoning.into(),
            next_state: FAILURE_STATE.to_string(),
            reward: 0.0,
            done: true,
            actions: Vec::new(),
        }
    }
}

pub trait ExperienceModel: Send + Sync {
    fn name(&self) -> &str;

    /// Initial observation for `task`.
    fn reset(&self, task: &str, rng: &mut Rng) -> Result<Observation>;

    /// One transition. Implementations must be pure functions of their
    /// arguments (including the RNG state) so concurrent callers with
    /// per-episode streams stay reproducible.
    fn step(&self, ctx: &ExperienceContext, state: &str, action: &str, rng: &mut Rng) -> Result<ModelStep>;
}
