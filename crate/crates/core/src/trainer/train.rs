use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantages::{gae_advantages, grpo_step_advantages, RewardAssignment};
use super::update::{build_samples, policy_update, UpdateConfig, UpdateMetrics};
use super::value::{fit_values, ValueEstimator};
use crate::curriculum::{cluster_tasks, generate_variations, mix_tasks, select_seed_tasks, TaskPool};
use crate::env::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::policy::LinearSoftmaxPolicy;
use crate::replay::{HashedEmbedder, ReplayBuffer};
use crate::rng::{derive_seed, rng_for, stream_seed, Stream};
use crate::rollout::{collect_groups, simulate_episode, AgentPolicy, EpisodeConfig, FeaturePolicy, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Grpo,
    GaePpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub group_size: usize,
    /// Groups (tasks) per iteration.
    pub tasks_per_iter: usize,
    pub max_turns: usize,
    /// Demonstrations retrieved per turn.
    pub k: usize,
    pub buffer_capacity: usize,
    pub append_failed: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            tasks_per_iter: 8,
            max_turns: 10,
            k: 3,
            buffer_capacity: 50_000,
            append_failed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_penalty: f64,
    pub trust_radius: f64,
    pub n_minibatches: usize,
    /// Rejected updates are retried with the learning rate halved, up to
    /// this many times.
    pub max_backtracks: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub reward_assignment: RewardAssignment,
    pub value_buckets: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            clip_eps: 0.2,
            kl_penalty: 0.0,
            trust_radius: 0.05,
            n_minibatches: 4,
            max_backtracks: 5,
            gamma: 0.99,
            gae_lambda: 0.95,
            reward_assignment: RewardAssignment::Broadcast,
            value_buckets: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub enabled: bool,
    /// Maximum share of synthetic tasks per batch.
    pub lambda: f64,
    pub seeds_per_iter: usize,
    pub per_seed: usize,
    pub max_depth: u32,
    /// Rewards a task must have accumulated before it can seed variations.
    pub min_observed: u64,
    /// Reward window for task values.
    pub window: usize,
    /// k-means clusters grouping tasks for values under GAE-PPO.
    pub clusters: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 0.3,
            seeds_per_iter: 2,
            per_seed: 2,
            max_depth: 4,
            min_observed: 4,
            window: 8,
            clusters: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    /// Act by argmax instead of sampling.
    pub greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 8,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub algorithm: Algorithm,
    pub env: EnvConfig,
    /// Original task pool; the environment's defaults when empty.
    pub tasks: Vec<String>,
    /// One instruction per line, appended to `tasks`.
    pub tasks_file: Option<PathBuf>,
    /// Evaluation tasks; the original pool when empty.
    pub eval_tasks: Vec<String>,
    pub rollout: RolloutConfig,
    pub optim: OptimConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
    /// Checkpoint period in iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub log_trajectories: bool,
    /// Checkpoint whose policy initializes training, e.g. one trained
    /// against a different backend.
    pub init_checkpoint: Option<PathBuf>,
    /// Trajectory JSONL used to seed the replay buffer.
    pub offline_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 20,
            algorithm: Algorithm::Grpo,
            env: EnvConfig::default(),
            tasks: Vec::new(),
            tasks_file: None,
            eval_tasks: Vec::new(),
            rollout: RolloutConfig::default(),
            optim: OptimConfig::default(),
            curriculum: CurriculumConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 0,
            log_trajectories: true,
            init_checkpoint: None,
            offline_data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let r = &self.rollout;
        let o = &self.optim;
        if r.group_size < 1 || (self.algorithm == Algorithm::Grpo && r.group_size < 2) {
            return bad("rollout.group_size must be >= 2 for grpo and >= 1 otherwise");
        }
        if r.tasks_per_iter < 1 || r.max_turns < 1 {
            return bad("rollout.tasks_per_iter and rollout.max_turns must be >= 1");
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.trust_radius > 0.0 && o.trust_radius.is_finite()) || o.clip_eps < 0.0 || o.kl_penalty < 0.0 {
            return bad("optim: lr and trust_radius must be positive, clip_eps and kl_penalty non-negative");
        }
        if !(o.gamma > 0.0 && o.gamma <= 1.0) || !(0.0..=1.0).contains(&o.gae_lambda) {
            return bad("optim: gamma must lie in (0, 1] and gae_lambda in [0, 1]");
        }
        if o.n_minibatches < 1 || o.value_buckets < 1 {
            return bad("optim.n_minibatches and optim.value_buckets must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.curriculum.lambda) || self.curriculum.window < 1 {
            return bad("curriculum.lambda must lie in [0, 1] and curriculum.window be >= 1");
        }
        if self.eval.episodes_per_task < 1 {
            return bad("eval.episodes_per_task must be >= 1");
        }
        Ok(())
    }

    fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_turns: self.rollout.max_turns,
            k: self.rollout.k,
            append_failed: self.rollout.append_failed,
        }
    }

    fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            lr: self.optim.lr,
            clip_eps: self.optim.clip_eps,
            kl_penalty: self.optim.kl_penalty,
            trust_radius: self.optim.trust_radius,
            n_minibatches: self.optim.n_minibatches,
        }
    }

    /// JSON form with the iteration budget removed, used to check that a
    /// resumed run continues the same experiment.
    fn fingerprint(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::json("serializing config", e))?;
        if let Some(m) = v.as_object_mut() {
            m.remove("iterations");
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub feature_map: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: u64,
    pub value: ValueEstimator,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub mean_return: f64,
}

/// One line of `metrics.jsonl`. Training statistics are `null` on the
/// initial evaluation line (`iter = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: u64,
    /// Evaluation success rate of the policy after this iteration.
    pub success_rate: f64,
    pub eval_return: f64,
    pub train_success_rate: Option<f64>,
    pub mean_return: Option<f64>,
    pub kl: Option<f64>,
    pub clip_frac: Option<f64>,
    pub mean_ratio: Option<f64>,
    pub accepted: Option<bool>,
    pub lr: Option<f64>,
    pub n_tasks: usize,
    pub n_synthetic: usize,
    pub n_synthetic_pool: usize,
    pub n_generated: usize,
    pub buffer_size: usize,
    /// Task-value histogram over evaluated tasks, bins of width 1/16 on
    /// [0, 0.25] with 0 in its own bin: `[0], (0, 1/16], …, (3/16, ∞)`.
    pub value_hist: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: u64,
    pub initial_success_rate: f64,
    pub final_success_rate: f64,
    pub best_success_rate: f64,
    /// First iteration whose evaluation reached 0.9.
    pub first_iter_at_0_9: Option<u64>,
    pub final_eval_return: f64,
    pub out_dir: PathBuf,
}

impl TrainReport {
    pub fn from_metrics(metrics: &[IterMetrics], out_dir: &Path) -> Self {
        let first = metrics.first();
        let last = metrics.last();
        Self {
            iterations: last.map_or(0, |m| m.iter),
            initial_success_rate: first.map_or(0.0, |m| m.success_rate),
            final_success_rate: last.map_or(0.0, |m| m.success_rate),
            best_success_rate: metrics.iter().map(|m| m.success_rate).fold(0.0, f64::max),
            first_iter_at_0_9: metrics.iter().find(|m| m.success_rate >= 0.9).map(|m| m.iter),
            final_eval_return: last.map_or(0.0, |m| m.eval_return),
            out_dir: out_dir.to_path_buf(),
        }
    }
}

struct GreedyPolicy<'a>(&'a dyn AgentPolicy);

impl AgentPolicy for GreedyPolicy<'_> {
    fn action_probs(&self, task: &str, state: &str, actions: &[String]) -> Vec<f64> {
        let p = self.0.action_probs(task, state, actions);
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        (0..p.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json("serializing", e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Loads the policy file of a checkpoint directory.
pub fn load_policy(dir: &Path, feature_map: &str, dim: usize) -> Result<LinearSoftmaxPolicy> {
    let ck: PolicyCheckpoint = read_json(&dir.join("policy.json"))?;
    if ck.feature_map != feature_map || ck.params.len() != dim {
        return Err(Error::Config(format!(
            "checkpoint policy uses features `{}` ({} params), environment needs `{feature_map}` ({dim})",
            ck.feature_map,
            ck.params.len()
        )));
    }
    Ok(LinearSoftmaxPolicy { params: ck.params })
}

pub struct Trainer {
    config: TrainConfig,
    env: Environment,
    policy: LinearSoftmaxPolicy,
    value: ValueEstimator,
    pool: TaskPool,
    buffer: ReplayBuffer,
    eval_tasks: Vec<String>,
    iteration: u64,
    metrics: Vec<IterMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env.build()?;
        let mut tasks = config.tasks.clone();
        if let Some(p) = &config.tasks_file {
            tasks.extend(read_lines(p)?);
        }
        if tasks.is_empty() {
            tasks = env.default_tasks.clone();
        }
        if tasks.is_empty() {
            return Err(Error::Config("no training tasks configured".into()));
        }
        let pool = TaskPool::from_instructions(&tasks);
        let eval_tasks = if config.eval_tasks.is_empty() { pool.originals() } else { config.eval_tasks.clone() };
        let mut buffer = ReplayBuffer::new(config.rollout.buffer_capacity);
        if let Some(p) = &config.offline_data {
            let trajs: Vec<Trajectory> = jsonl::read(p)?;
            buffer.seed(trajs.iter().map(Trajectory::transitions));
        }
        let dim = env.features.dim();
        let mut value = ValueEstimator::new(config.optim.value_buckets);
        let policy = match &config.init_checkpoint {
            Some(dir) => {
                let state_path = dir.join("trainer_state.json");
                if state_path.exists() {
                    let st: TrainerState = read_json(&state_path)?;
                    if st.value.weights.len() == value.weights.len() {
                        value = st.value;
                    }
                }
                load_policy(dir, &env.feature_id, dim)?
            }
            None => LinearSoftmaxPolicy::zeros(dim),
        };
        Ok(Self {
            config,
            env,
            policy,
            value,
            pool,
            buffer,
            eval_tasks,
            iteration: 0,
            metrics: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint directory. `config` may differ from
    /// the checkpointed one only in the iteration budget.
    pub fn from_checkpoint(config: TrainConfig, dir: &Path) -> Result<Self> {
        let state: TrainerState = read_json(&dir.join("trainer_state.json"))?;
        if state.config.fingerprint()? != config.fingerprint()? {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration (only `iterations` may change on resume)",
                dir.display()
            )));
        }
        let mut t = Self::new(config)?;
        t.policy = load_policy(dir, &t.env.feature_id, t.env.features.dim())?;
        t.value = state.value;
        t.pool = TaskPool::load_jsonl(&dir.join("tasks.jsonl"))?;
        let mut buffer = ReplayBuffer::new(t.config.rollout.buffer_capacity);
        buffer.load_jsonl(&dir.join("buffer.jsonl"))?;
        t.buffer = buffer;
        t.metrics = jsonl::read(&dir.join("metrics.jsonl"))?;
        t.iteration = state.iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &LinearSoftmaxPolicy {
        &self.policy
    }

    pub fn pool(&self) -> &TaskPool {
        &self.pool
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn metrics(&self) -> &[IterMetrics] {
        &self.metrics
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    fn agent(&self) -> FeaturePolicy<'_> {
        FeaturePolicy {
            features: self.env.features.as_ref(),
            policy: &self.policy,
        }
    }

    /// Success rate and mean return on the evaluation tasks. Episode seeds
    /// are the same at every call, so successive evaluations differ only
    /// through the policy.
    pub fn evaluate(&self) -> Result<EvalSummary> {
        let trajs = self.evaluation_episodes()?;
        let m = trajs.len().max(1) as f64;
        Ok(EvalSummary {
            success_rate: trajs.iter().filter(|t| t.is_success()).count() as f64 / m,
            mean_return: trajs.iter().map(Trajectory::total_reward).sum::<f64>() / m,
        })
    }

    /// The episodes behind [`Trainer::evaluate`], task-major.
    pub fn evaluation_episodes(&self) -> Result<Vec<Trajectory>> {
        let n = self.config.eval.episodes_per_task;
        let base = stream_seed(self.config.seed, Stream::Eval, &[]);
        let jobs: Vec<(usize, usize)> = (0..self.eval_tasks.len()).flat_map(|j| (0..n).map(move |e| (j, e))).collect();
        let agent = self.agent();
        let greedy = GreedyPolicy(&agent);
        let policy: &dyn AgentPolicy = if self.config.eval.greedy { &greedy } else { &agent };
        let ep = self.config.episode_config();
        jobs.par_iter()
            .map(|&(j, e)| {
                let seed = derive_seed(base, &[j as u64, e as u64]);
                simulate_episode(policy, self.env.model.as_ref(), &self.buffer, &self.eval_tasks[j], &ep, seed)
            })
            .collect()
    }

    fn value_hist(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for r in self.pool.records().iter().filter(|r| r.last_evaluated.is_some()) {
            let bin = if r.value <= 0.0 { 0 } else { ((r.value * 16.0).ceil() as usize).clamp(1, 4) };
            h[bin] += 1;
        }
        h
    }

    fn initial_metrics(&self) -> Result<IterMetrics> {
        let ev = self.evaluate()?;
        Ok(IterMetrics {
            iter: 0,
            success_rate: ev.success_rate,
            eval_return: ev.mean_return,
            train_success_rate: None,
            mean_return: None,
            kl: None,
            clip_frac: None,
            mean_ratio: None,
            accepted: None,
            lr: None,
            n_tasks: self.pool.len(),
            n_synthetic: 0,
            n_synthetic_pool: self.pool.synthetic().len(),
            n_generated: 0,
            buffer_size: self.buffer.len(),
            value_hist: self.value_hist(),
        })
    }

    /// Runs one training iteration and returns its metrics and trajectories.
    pub fn step(&mut self) -> Result<(IterMetrics, Vec<Trajectory>)> {
        let cfg = self.config.clone();
        let i = self.iteration + 1;
        let lambda = if cfg.curriculum.enabled { cfg.curriculum.lambda } else { 0.0 };
        let synthetic = self.pool.frontier();
        let batch = mix_tasks(
            &self.pool.originals(),
            &synthetic,
            lambda,
            cfg.rollout.tasks_per_iter,
            &mut rng_for(cfg.seed, Stream::Curriculum, &[i, 0]),
        )?;
        let n_synthetic = batch.iter().filter(|t| self.pool.get(t).is_some_and(|r| r.is_synthetic())).count();
        let base = stream_seed(cfg.seed, Stream::Rollout, &[i]);
        let seeds: Vec<u64> = (0..batch.len() as u64).map(|g| derive_seed(base, &[g])).collect();

        let features = self.env.features.as_ref();
        let agent = FeaturePolicy {
            features,
            policy: &self.policy,
        };
        let groups = collect_groups(
            &agent,
            self.env.model.as_ref(),
            &mut self.buffer,
            &batch,
            cfg.rollout.group_size,
            &cfg.episode_config(),
            &seeds,
        )?;
        let trajs: Vec<Trajectory> = groups.iter().flatten().cloned().collect();

        let advantages = match cfg.algorithm {
            Algorithm::Grpo => {
                let mut out = Vec::with_capacity(trajs.len());
                for g in &groups {
                    let (adv, stats) = grpo_step_advantages(g, cfg.optim.reward_assignment)?;
                    if stats.std > 0.0 {
                        check_normalized(g)?;
                    }
                    out.extend(adv);
                }
                out
            }
            Algorithm::GaePpo => {
                let adv = trajs
                    .iter()
                    .map(|t| {
                        let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
                        gae_advantages(&rewards, &self.value.trajectory_values(t), cfg.optim.gamma, cfg.optim.gae_lambda)
                    })
                    .collect::<Result<Vec<_>>>()?;
                fit_values(&mut self.value, &trajs, cfg.optim.gamma);
                adv
            }
        };
        let samples = build_samples(features, &trajs, &advantages)?;
        let mut update = cfg.update_config();
        let mut result: Option<(LinearSoftmaxPolicy, UpdateMetrics)> = None;
        for _ in 0..=cfg.optim.max_backtracks {
            let (p, m) = policy_update(&self.policy, &samples, &update)?;
            let accepted = m.accepted;
            result = Some((p, m));
            if accepted {
                break;
            }
            update.lr *= 0.5;
        }
        let (new_policy, um) = result.expect("at least one update attempt");
        self.policy = new_policy;

        self.update_task_values(&groups, &batch, i)?;
        let mut n_generated = 0;
        if cfg.curriculum.enabled {
            if let Some(generator) = &self.env.generator {
                let seeds = select_seed_tasks(&self.pool.eligible(cfg.curriculum.min_observed), cfg.curriculum.seeds_per_iter);
                if !seeds.is_empty() {
                    let new = generate_variations(
                        &seeds,
                        generator.as_ref(),
                        cfg.curriculum.per_seed,
                        cfg.curriculum.max_depth,
                        &self.pool.instructions(),
                        &mut rng_for(cfg.seed, Stream::Curriculum, &[i, 1]),
                    )?;
                    for mut r in new {
                        r.born = Some(i);
                        n_generated += usize::from(self.pool.insert(r));
                    }
                }
            }
        }

        self.iteration = i;
        let ev = self.evaluate()?;
        let n = trajs.len().max(1) as f64;
        let m = IterMetrics {
            iter: i,
            success_rate: ev.success_rate,
            eval_return: ev.mean_return,
            train_success_rate: Some(trajs.iter().filter(|t| t.is_success()).count() as f64 / n),
            mean_return: Some(trajs.iter().map(Trajectory::total_reward).sum::<f64>() / n),
            kl: Some(um.kl),
            clip_frac: Some(um.clip_frac),
            mean_ratio: Some(um.mean_ratio),
            accepted: Some(um.accepted),
            lr: Some(update.lr),
            n_tasks: self.pool.len(),
            n_synthetic,
            n_synthetic_pool: self.pool.synthetic().len(),
            n_generated,
            buffer_size: self.buffer.len(),
            value_hist: self.value_hist(),
        };
        self.metrics.push(m.clone());
        Ok((m, trajs))
    }

    fn update_task_values(&mut self, groups: &[Vec<Trajectory>], batch: &[String], iteration: u64) -> Result<()> {
        let window = self.config.curriculum.window;
        match self.config.algorithm {
            Algorithm::Grpo => {
                for (task, g) in batch.iter().zip(groups) {
                    let rewards: Vec<f64> = g.iter().map(Trajectory::total_reward).collect();
                    if let Some(r) = self.pool.get_mut(task) {
                        r.record_group(&rewards, iteration, window)?;
                    }
                }
            }
            Algorithm::GaePpo => {
                let all: Vec<String> = self.pool.records().iter().map(|r| r.instruction.clone()).collect();
                let assign = cluster_tasks(
                    &all,
                    self.config.curriculum.clusters,
                    &HashedEmbedder::default(),
                    stream_seed(self.config.seed, Stream::Curriculum, &[]),
                );
                let cluster_of: BTreeMap<&str, usize> = all.iter().map(String::as_str).zip(assign).collect();
                let mut cluster_rewards: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (task, g) in batch.iter().zip(groups) {
                    let c = cluster_of[task.as_str()];
                    cluster_rewards.entry(c).or_default().extend(g.iter().map(Trajectory::total_reward));
                }
                let mut seen = std::collections::BTreeSet::new();
                for task in batch {
                    if seen.insert(task.clone()) {
                        let rewards = &cluster_rewards[&cluster_of[task.as_str()]];
                        if let Some(r) = self.pool.get_mut(task) {
                            r.record_group(rewards, iteration, window)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("policy.json"),
            &PolicyCheckpoint {
                feature_map: self.env.feature_id.clone(),
                params: self.policy.params.clone(),
            },
        )?;
        self.buffer.save_jsonl(&dir.join("buffer.jsonl"))?;
        self.pool.save_jsonl(&dir.join("tasks.jsonl"))?;
        jsonl::write(&dir.join("metrics.jsonl"), &self.metrics)?;
        write_json(
            &dir.join("trainer_state.json"),
            &TrainerState {
                iteration: self.iteration,
                value: self.value.clone(),
                config: self.config.clone(),
            },
        )
    }

    /// Runs up to the configured iteration budget, writing `metrics.jsonl`,
    /// per-iteration trajectory logs, checkpoints and `report.json` under
    /// `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainReport> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        if self.metrics.is_empty() {
            let m0 = self.initial_metrics()?;
            self.metrics.push(m0);
        }
        jsonl::write(&metrics_path, &self.metrics)?;
        let traj_dir = out_dir.join("trajectories");
        if self.config.log_trajectories {
            std::fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
        }
        let ck_root = out_dir.join("checkpoints");
        while self.iteration < self.config.iterations {
            let (m, trajs) = self.step()?;
            jsonl::append(&metrics_path, std::slice::from_ref(&m))?;
            if self.config.log_trajectories {
                jsonl::write(&traj_dir.join(format!("iter_{:04}.jsonl", m.iter)), &trajs)?;
            }
            let every = self.config.checkpoint_every;
            if every > 0 && m.iter % every == 0 && m.iter < self.config.iterations {
                self.save_checkpoint(&ck_root.join(format!("iter_{:04}", m.iter)))?;
            }
        }
        self.save_checkpoint(&ck_root.join("final"))?;
        let report = TrainReport::from_metrics(&self.metrics, out_dir);
        write_json(
            &out_dir.join("report.json"),
            &serde_json::json!({ "config": self.config, "summary": report }),
        )?;
        Ok(report)
    }
}

/// Online check of the group-normalization identities.
fn check_normalized(group: &[Trajectory]) -> Result<()> {
    let rewards: Vec<f64> = group.iter().map(Trajectory::total_reward).collect();
    let adv = super::advantages::grpo_advantages(&rewards)?;
    let s = super::advantages::group_stats(&adv);
    if s.mean.abs() > 1e-9 || (s.std - 1.0).abs() > 1e-9 {
        return Err(Error::Numeric(format!(
            "group advantages have mean {} and std {}",
            s.mean, s.std
        )));
    }
    Ok(())
}
