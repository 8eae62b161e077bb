//! Multi-turn episodes between an agent policy and an experience model.
//!
//! Each turn: the policy samples an action for the current state, the top-k
//! most similar stored transitions are retrieved for `(state, action)`, and
//! the model produces the next state from the task, the full history and
//! those demonstrations. Transitions reach the replay buffer only after the
//! episode (or the whole group) finishes, so an episode never retrieves its
//! own steps.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experience::{Catalog, ExperienceContext, ExperienceModel, HistoryItem, ShopState};
use crate::mdp::sample_index;
use crate::policy::{FeatureMap, LinearSoftmaxPolicy};
use crate::replay::{ReplayBuffer, Transition};
use crate::rng::{rng_for, Stream};

const RESET_TURN: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: String,
    /// Admissible actions offered to the policy.
    pub actions: Vec<String>,
    pub action: String,
    pub action_index: usize,
    pub action_log_prob: f64,
    pub reasoning: String,
    pub next_state: String,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: String,
    pub steps: Vec<Step>,
    pub outcome: Outcome,
    pub seed: u64,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Outcome reward: 1 for success, 0 otherwise.
    pub fn outcome_reward(&self) -> f64 {
        if self.is_success() {
            1.0
        } else {
            0.0
        }
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.steps
            .iter()
            .map(|s| Transition {
                task: self.task.clone(),
                state: s.state.clone(),
                action: s.action.clone(),
                next_state: s.next_state.clone(),
                reward: s.reward,
                reasoning: s.reasoning.clone(),
                done: s.done,
                episode: self.seed,
            })
            .collect()
    }

    pub fn history_before(&self, turn: usize) -> Vec<HistoryItem> {
        self.steps[..turn]
            .iter()
            .map(|s| HistoryItem {
                state: s.state.clone(),
                action: s.action.clone(),
            })
            .collect()
    }
}

/// Action distribution of an agent over the admissible actions.
pub trait AgentPolicy: Sync {
    fn action_probs(&self, task: &str, state: &str, actions: &[String]) -> Vec<f64>;
}

/// A [`LinearSoftmaxPolicy`] read through a [`FeatureMap`].
pub struct FeaturePolicy<'a> {
    pub features: &'a dyn FeatureMap,
    pub policy: &'a LinearSoftmaxPolicy,
}

impl AgentPolicy for FeaturePolicy<'_> {
    fn action_probs(&self, task: &str, state: &str, actions: &[String]) -> Vec<f64> {
        self.policy.probs(&self.features.decision(task, state, actions))
    }
}

pub struct UniformPolicy;

impl AgentPolicy for UniformPolicy {
    fn action_probs(&self, _task: &str, _state: &str, actions: &[String]) -> Vec<f64> {
        vec![1.0 / actions.len() as f64; actions.len()]
    }
}

/// Deterministic optimal agent for the shop environment.
pub struct ShopOraclePolicy<'a> {
    pub catalog: &'a Catalog,
}

impl AgentPolicy for ShopOraclePolicy<'_> {
    fn action_probs(&self, task: &str, state: &str, actions: &[String]) -> Vec<f64> {
        let target = crate::experience::parse_task(task)
            .zip(ShopState::parse(state))
            .and_then(|(t, s)| crate::experience::oracle_action(self.catalog, &t, &s));
        match target.and_then(|a| actions.iter().position(|x| *x == a)) {
            Some(i) => (0..actions.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect(),
            None => UniformPolicy.action_probs(task, state, actions),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    /// Demonstrations retrieved per turn.
    pub k: usize,
    /// Whether unsuccessful episodes are added to the replay buffer.
    pub append_failed: bool,
}

impl EpisodeConfig {
    fn keeps(&self, t: &Trajectory) -> bool {
        self.append_failed || t.is_success()
    }
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_turns: 10,
            k: 3,
            append_failed: true,
        }
    }
}

/// Runs one episode against a read-only buffer.
pub fn simulate_episode(
    policy: &dyn AgentPolicy,
    model: &dyn ExperienceModel,
    buffer: &ReplayBuffer,
    task: &str,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory> {
    if config.max_turns == 0 {
        return Err(Error::InvalidArgument("max_turns must be >= 1".into()));
    }
    let mut traj = Trajectory {
        task: task.to_string(),
        steps: Vec::new(),
        outcome: Outcome::Horizon,
        seed,
    };
    let obs = model.reset(task, &mut rng_for(seed, Stream::Model, &[RESET_TURN]))?;
    let mut state = obs.state;
    let mut actions = obs.actions;
    let mut ctx = ExperienceContext {
        task: task.to_string(),
        history: Vec::new(),
        demos: Vec::new(),
    };
    for turn in 0..config.max_turns {
        if actions.is_empty() {
            let err = Error::Backend {
                message: format!("no admissible actions at turn {turn}"),
                raw: Some(state.clone()),
                retryable: false,
            };
            return Err(Error::Episode {
                partial: Box::new(traj),
                source: Box::new(err),
            });
        }
        let probs = policy.action_probs(task, &state, &actions);
        let u: f64 = rng_for(seed, Stream::Policy, &[turn as u64]).random();
        let index = sample_index(&probs, u);
        let action = actions[index].clone();
        ctx.demos = buffer.retrieve_topk(&state, &action, config.k);
        let step = match model.step(&ctx, &state, &action, &mut rng_for(seed, Stream::Model, &[turn as u64])) {
            Ok(s) => s,
            Err(e) => {
                return Err(Error::Episode {
                    partial: Box::new(traj),
                    source: Box::new(e),
                })
            }
        };
        ctx.history.push(HistoryItem {
            state: state.clone(),
            action: action.clone(),
        });
        let done = step.done;
        let reward = step.reward;
        traj.steps.push(Step {
            state: std::mem::take(&mut state),
            actions: std::mem::take(&mut actions),
            action,
            action_index: index,
            action_log_prob: probs[index].ln(),
            reasoning: step.reasoning,
            next_state: step.next_state.clone(),
            reward,
            done,
        });
        if done {
            traj.outcome = if reward > 0.0 { Outcome::Success } else { Outcome::Failure };
            break;
        }
        state = step.next_state;
        actions = step.actions;
    }
    Ok(traj)
}

/// Runs one episode and appends its transitions to `buffer` afterwards.
pub fn run_episode(
    policy: &dyn AgentPolicy,
    model: &dyn ExperienceModel,
    buffer: &mut ReplayBuffer,
    task: &str,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory> {
    let traj = simulate_episode(policy, model, buffer, task, config, seed)?;
    if config.keeps(&traj) {
        buffer.extend(traj.transitions());
    }
    Ok(traj)
}

/// Runs several groups concurrently against the current buffer and then
/// appends every transition in `(group, seed offset)` order. Group `g` uses
/// seeds `base_seeds[g] + 0..n`.
pub fn collect_groups(
    policy: &dyn AgentPolicy,
    model: &dyn ExperienceModel,
    buffer: &mut ReplayBuffer,
    tasks: &[String],
    n: usize,
    config: &EpisodeConfig,
    base_seeds: &[u64],
) -> Result<Vec<Vec<Trajectory>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("group size must be >= 1".into()));
    }
    if tasks.len() != base_seeds.len() {
        return Err(Error::Dimension("one base seed per task is required".into()));
    }
    let frozen: &ReplayBuffer = buffer;
    let jobs: Vec<(usize, u64)> = (0..tasks.len())
        .flat_map(|g| (0..n as u64).map(move |i| (g, i)))
        .collect();
    let results: Vec<Result<Trajectory>> = jobs
        .par_iter()
        .map(|&(g, i)| simulate_episode(policy, model, frozen, &tasks[g], config, base_seeds[g].wrapping_add(i)))
        .collect();
    let mut groups: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(n); tasks.len()];
    let mut first_err = None;
    for ((g, _), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(t) => groups[g].push(t),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(Error::Group {
            partial: groups.into_iter().flatten().collect(),
            source: Box::new(e),
        });
    }
    for t in groups.iter().flatten().filter(|t| config.keeps(t)) {
        buffer.extend(t.transitions());
    }
    Ok(groups)
}

/// `n` episodes of the same task with seeds `base_seed + 0..n`, possibly
/// concurrent; the result is ordered by seed offset.
pub fn collect_group(
    policy: &dyn AgentPolicy,
    model: &dyn ExperienceModel,
    buffer: &mut ReplayBuffer,
    task: &str,
    n: usize,
    config: &EpisodeConfig,
    base_seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut groups = collect_groups(policy, model, buffer, &[task.to_string()], n, config, &[base_seed])?;
    Ok(groups.pop().unwrap_or_default())
}
