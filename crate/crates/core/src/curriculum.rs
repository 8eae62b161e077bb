//! Reward-variance curriculum.
//!
//! A task's value is the population variance of its recent outcome rewards:
//! zero when the agent always succeeds or always fails, maximal (0.25 for
//! binary rewards) when successes and failures are balanced. High-value tasks
//! seed a generator that proposes variations, and a bounded fraction of each
//! training batch is drawn from the generated pool.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatClient, ChatMessage};
use crate::error::{Error, Result};
use crate::experience::{parse_task, render_task, Catalog, TaskSpec, SHOP_CATEGORIES, SHOP_COLORS};
use crate::jsonl;
use crate::prompts;
use crate::replay::Embedder;
use crate::rng::{rng_from_seed, Rng};

/// Population variance of `rewards`; exactly zero when all rewards agree.
pub fn task_value(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("task value of an empty reward list is undefined".into()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(0.0);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    Ok(rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Generated {
        /// Instruction of the parent task.
        parent: String,
        depth: u32,
    },
}

impl Origin {
    pub fn depth(&self) -> u32 {
        match self {
            Origin::Seed => 0,
            Origin::Generated { depth, .. } => *depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub instruction: String,
    pub origin: Origin,
    /// Most recent outcome rewards (bounded window).
    pub group_rewards: Vec<f64>,
    /// Cached value of `group_rewards`; 0 before any evaluation.
    pub value: f64,
    /// Training iteration of the most recent evaluation.
    pub last_evaluated: Option<u64>,
    /// Total rewards observed over the record's lifetime.
    pub n_observed: u64,
    /// Training iteration that generated the record (`None` for seeds).
    #[serde(default)]
    pub born: Option<u64>,
}

impl TaskRecord {
    pub fn seed(instruction: impl Into<String>) -> Self {
        Self::with_origin(instruction, Origin::Seed)
    }

    pub fn with_origin(instruction: impl Into<String>, origin: Origin) -> Self {
        Self {
            instruction: instruction.into(),
            origin,
            group_rewards: Vec::new(),
            value: 0.0,
            last_evaluated: None,
            n_observed: 0,
            born: None,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.origin, Origin::Generated { .. })
    }

    /// Appends a group of outcome rewards, keeping the last `window`.
    pub fn record_group(&mut self, rewards: &[f64], iteration: u64, window: usize) -> Result<()> {
        if rewards.is_empty() {
            return Err(Error::InvalidArgument("empty reward group".into()));
        }
        self.group_rewards.extend_from_slice(rewards);
        let excess = self.group_rewards.len().saturating_sub(window.max(1));
        self.group_rewards.drain(..excess);
        self.value = task_value(&self.group_rewards)?;
        self.last_evaluated = Some(iteration);
        self.n_observed += rewards.len() as u64;
        Ok(())
    }
}

/// Up to `m` records with positive value, highest value first; ties go to the
/// most recently evaluated record, then to the lexicographically smaller
/// instruction.
pub fn select_seed_tasks(records: &[TaskRecord], m: usize) -> Vec<TaskRecord> {
    let mut pos: Vec<&TaskRecord> = records.iter().filter(|r| r.value > 0.0).collect();
    pos.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(b.last_evaluated.cmp(&a.last_evaluated))
            .then(a.instruction.cmp(&b.instruction))
    });
    pos.into_iter().take(m).cloned().collect()
}

/// Proposes variations of a seed task.
pub trait TaskGenerator: Send + Sync {
    fn propose(&self, seed: &str, count: usize, rng: &mut Rng) -> Result<Vec<String>>;
    /// Outputs failing this check are discarded.
    fn is_well_formed(&self, instruction: &str) -> bool;
}

/// Up to `per_seed` new, well-formed, distinct variations per seed, excluding
/// instructions in `known`. Seeds at `max_depth` are not expanded.
pub fn generate_variations(
    seeds: &[TaskRecord],
    generator: &dyn TaskGenerator,
    per_seed: usize,
    max_depth: u32,
    known: &BTreeSet<String>,
    rng: &mut Rng,
) -> Result<Vec<TaskRecord>> {
    let mut seen = known.clone();
    let mut out = Vec::new();
    if per_seed == 0 {
        return Ok(out);
    }
    for seed in seeds {
        let depth = seed.origin.depth();
        if depth >= max_depth {
            continue;
        }
        let mut accepted = 0;
        for v in generator.propose(&seed.instruction, per_seed, rng)? {
            if accepted == per_seed {
                break;
            }
            if v == seed.instruction || !generator.is_well_formed(&v) || !seen.insert(v.clone()) {
                continue;
            }
            out.push(TaskRecord::with_origin(
                v,
                Origin::Generated {
                    parent: seed.instruction.clone(),
                    depth: depth + 1,
                },
            ));
            accepted += 1;
        }
    }
    Ok(out)
}

/// Scripted mutations for the shop: swap the target color or category,
/// tighten the price cap, or add a reviews requirement. Every variation is a
/// feasible purchase task.
pub struct ShopTaskGenerator {
    pub catalog: Catalog,
}

impl ShopTaskGenerator {
    pub fn candidates(&self, spec: &TaskSpec) -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for color in 0..SHOP_COLORS.len() {
            if color != spec.color {
                out.push(TaskSpec { color, ..spec.clone() });
            }
        }
        for category in 0..SHOP_CATEGORIES.len() {
            if category != spec.category {
                out.push(TaskSpec { category, ..spec.clone() });
            }
        }
        let prices: BTreeSet<u32> = self.catalog.matching_items(spec).map(|i| i.price).collect();
        for p in prices {
            if spec.max_price.is_none_or(|cap| p < cap) {
                out.push(TaskSpec {
                    max_price: Some(p),
                    ..spec.clone()
                });
            }
        }
        if !spec.require_reviews {
            out.push(TaskSpec {
                require_reviews: true,
                ..spec.clone()
            });
        }
        out.retain(|t| self.catalog.is_feasible(t));
        out
    }
}

impl TaskGenerator for ShopTaskGenerator {
    fn propose(&self, seed: &str, count: usize, rng: &mut Rng) -> Result<Vec<String>> {
        let spec = parse_task(seed).ok_or_else(|| Error::InvalidArgument(format!("unparseable shop task: {seed:?}")))?;
        let mut cands: Vec<String> = self.candidates(&spec).iter().map(render_task).collect();
        cands.shuffle(rng);
        cands.truncate(count);
        Ok(cands)
    }

    fn is_well_formed(&self, instruction: &str) -> bool {
        parse_task(instruction).is_some_and(|t| self.catalog.is_feasible(&t))
    }
}

/// LLM-backed generator using the task-variation prompt.
pub struct RemoteTaskGenerator {
    client: ChatClient,
    validator: Box<dyn Fn(&str) -> bool + Send + Sync>,
}

impl RemoteTaskGenerator {
    pub fn new(client: ChatClient) -> Self {
        Self {
            client,
            validator: Box::new(|s| !s.trim().is_empty() && s.len() <= 500),
        }
    }

    /// Replaces the default well-formedness check (non-empty, ≤ 500 bytes).
    pub fn with_validator(mut self, f: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.validator = Box::new(f);
        self
    }

    pub fn build_messages(seed: &str, count: usize) -> Result<Vec<ChatMessage>> {
        let k = count.to_string();
        let user = prompts::render(prompts::TASK_VARIATION.user, &[("seeds", &format!("- {seed}")), ("k", &k)])?;
        Ok(vec![
            ChatMessage::system(prompts::TASK_VARIATION.system.trim_end()),
            ChatMessage::user(user),
        ])
    }
}

/// Numbered lines following the first `VARIATIONS:` marker.
pub fn parse_variations(reply: &str) -> Vec<String> {
    let Some((_, body)) = reply.split_once("VARIATIONS:") else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for line in body.lines() {
        let line = line.trim();
        if line.starts_with("SEED:") {
            break;
        }
        let digits = line.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            continue;
        }
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            let v = rest.trim();
            if !v.is_empty() {
                out.push(v.to_string());
            }
        }
    }
    out
}

impl TaskGenerator for RemoteTaskGenerator {
    fn propose(&self, seed: &str, count: usize, _rng: &mut Rng) -> Result<Vec<String>> {
        self.client.complete_with(Self::build_messages(seed, count)?, |reply| {
            let vs = parse_variations(reply);
            if vs.is_empty() {
                Err("reply lists no variations".to_string())
            } else {
                Ok(vs)
            }
        })
    }

    fn is_well_formed(&self, instruction: &str) -> bool {
        (self.validator)(instruction)
    }
}

/// Samples a training batch of `batch` tasks. The synthetic share is
/// `⌈λ·batch⌉` capped by the synthetic pool size (synthetic tasks are drawn
/// without replacement); the rest comes from the original pool, without
/// replacement until the pool is exhausted, then cycling through fresh
/// permutations. With an empty original pool the batch holds only the
/// synthetic share.
pub fn mix_tasks(original: &[String], synthetic: &[String], lambda: f64, batch: usize, rng: &mut Rng) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if original.is_empty() && synthetic.is_empty() {
        return Err(Error::InvalidArgument("both task pools are empty".into()));
    }
    let cap = ((lambda * batch as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_syn = cap.min(synthetic.len()).min(batch);
    let mut out: Vec<String> = rand::seq::index::sample(rng, synthetic.len(), n_syn)
        .into_iter()
        .map(|i| synthetic[i].clone())
        .collect();
    if !original.is_empty() {
        let mut need = batch - n_syn;
        while need > 0 {
            let take = need.min(original.len());
            out.extend(
                rand::seq::index::sample(rng, original.len(), take)
                    .into_iter()
                    .map(|i| original[i].clone()),
            );
            need -= take;
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Instruction-keyed task pool.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskPool {
    records: Vec<TaskRecord>,
    index: HashMap<String, usize>,
}

impl TaskPool {
    pub fn from_instructions<S: AsRef<str>>(instructions: &[S]) -> Self {
        let mut pool = Self::default();
        for i in instructions {
            pool.insert(TaskRecord::seed(i.as_ref()));
        }
        pool
    }

    /// Adds a record unless its instruction is already present.
    pub fn insert(&mut self, record: TaskRecord) -> bool {
        if self.index.contains_key(&record.instruction) {
            return false;
        }
        self.index.insert(record.instruction.clone(), self.records.len());
        self.records.push(record);
        true
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn get(&self, instruction: &str) -> Option<&TaskRecord> {
        self.index.get(instruction).map(|&i| &self.records[i])
    }

    pub fn get_mut(&mut self, instruction: &str) -> Option<&mut TaskRecord> {
        self.index.get(instruction).map(|&i| &mut self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn instructions(&self) -> BTreeSet<String> {
        self.index.keys().cloned().collect()
    }

    pub fn originals(&self) -> Vec<String> {
        self.records.iter().filter(|r| !r.is_synthetic()).map(|r| r.instruction.clone()).collect()
    }

    pub fn synthetic(&self) -> Vec<String> {
        self.records.iter().filter(|r| r.is_synthetic()).map(|r| r.instruction.clone()).collect()
    }

    /// Synthetic tasks from the most recent generation that produced any.
    pub fn frontier(&self) -> Vec<String> {
        let latest = self.records.iter().filter(|r| r.is_synthetic()).filter_map(|r| r.born).max();
        self.records
            .iter()
            .filter(|r| r.is_synthetic() && r.born == latest)
            .map(|r| r.instruction.clone())
            .collect()
    }

    /// Records with at least `min_observed` rewards, the seeding eligibility
    /// rule.
    pub fn eligible(&self, min_observed: u64) -> Vec<TaskRecord> {
        self.records.iter().filter(|r| r.n_observed >= min_observed).cloned().collect()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.records)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let mut pool = Self::default();
        for r in jsonl::read::<TaskRecord>(path)? {
            if !pool.insert(r) {
                return Err(Error::Config(format!("duplicate task in {}", path.display())));
            }
        }
        Ok(pool)
    }
}

/// k-means over task embeddings with seeded initialization (distinct random
/// tasks as initial centers) and a fixed iteration cap. Returns the cluster
/// index of each task.
pub fn cluster_tasks(instructions: &[String], k: usize, embedder: &dyn Embedder, seed: u64) -> Vec<usize> {
    let n = instructions.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let points: Vec<Vec<f32>> = instructions.iter().map(|t| embedder.embed(t)).collect();
    let k = k.min(n);
    let mut rng = rng_from_seed(seed);
    let mut centers: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| points[i].iter().map(|x| f64::from(*x)).collect())
        .collect();
    let dist = |p: &[f32], c: &[f64]| -> f64 { p.iter().zip(c).map(|(x, y)| (f64::from(*x) - y).powi(2)).sum() };
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist(p, &centers[a]).total_cmp(&dist(p, &centers[b])))
                .unwrap_or(0);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f32>> = points.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| f64::from(m[d])).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::ShopConfig;
    use crate::replay::HashedEmbedder;

    fn rec(instr: &str, rewards: &[f64], iter: u64) -> TaskRecord {
        let mut r = TaskRecord::seed(instr);
        r.record_group(rewards, iter, 64).unwrap();
        r
    }

    #[test]
    fn values() {
        assert_eq!(task_value(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(task_value(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.25);
        assert_eq!(task_value(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.1875);
        assert!(task_value(&[]).is_err());
    }

    #[test]
    fn record_window_keeps_latest() {
        let mut r = TaskRecord::seed("t");
        r.record_group(&[1.0, 1.0, 1.0, 1.0], 0, 4).unwrap();
        r.record_group(&[1.0, 0.0], 1, 4).unwrap();
        assert_eq!(r.group_rewards, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(r.value, task_value(&r.group_rewards).unwrap());
        assert_eq!(r.n_observed, 6);
        assert_eq!(r.last_evaluated, Some(1));
    }

    #[test]
    fn seed_selection() {
        let all_success: Vec<_> = (0..3).map(|i| rec(&format!("t{i}"), &[1.0; 4], 0)).collect();
        assert!(select_seed_tasks(&all_success, 3).is_empty());
        let recs = vec![
            rec("a", &[1.0, 1.0], 0),
            rec("b", &[1.0, 0.0, 1.0, 0.0], 0),
            rec("c", &[1.0, 0.0, 0.0, 0.0], 0),
        ];
        let top = select_seed_tasks(&recs, 1);
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].instruction, "b");
        // recency, then instruction order
        let tied = vec![rec("z", &[1.0, 0.0], 1), rec("y", &[1.0, 0.0], 2), rec("x", &[1.0, 0.0], 1)];
        let order: Vec<_> = select_seed_tasks(&tied, 3).into_iter().map(|r| r.instruction).collect();
        assert_eq!(order, vec!["y", "x", "z"]);
    }

    #[test]
    fn scripted_variations() {
        let catalog = Catalog::new(&ShopConfig::default()).unwrap();
        let g = ShopTaskGenerator { catalog };
        let seed = TaskRecord::seed("buy any red mug");
        let mut rng = rng_from_seed(0);
        let out = generate_variations(std::slice::from_ref(&seed), &g, 3, 4, &BTreeSet::new(), &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        let distinct: BTreeSet<_> = out.iter().map(|r| r.instruction.clone()).collect();
        assert_eq!(distinct.len(), 3);
        for r in &out {
            assert!(parse_task(&r.instruction).is_some(), "{}", r.instruction);
            assert!(r.instruction.starts_with("buy "));
            assert_eq!(r.origin, Origin::Generated { parent: seed.instruction.clone(), depth: 1 });
        }
        assert!(generate_variations(std::slice::from_ref(&seed), &g, 0, 4, &BTreeSet::new(), &mut rng).unwrap().is_empty());
        let deep = TaskRecord::with_origin("buy a red mug", Origin::Generated { parent: "p".into(), depth: 4 });
        assert!(generate_variations(&[deep], &g, 3, 4, &BTreeSet::new(), &mut rng).unwrap().is_empty());
    }

    #[test]
    fn variation_reply_parsing() {
        let reply = "SEED: buy a mug\nVARIATIONS:\n  1. buy a red mug\n  2) buy a blue mug under $20\nnot numbered\n3. \nSEED: other\nVARIATIONS:\n1. x";
        assert_eq!(parse_variations(reply), vec!["buy a red mug", "buy a blue mug under $20"]);
        assert!(parse_variations("nothing").is_empty());
    }

    #[test]
    fn mixing_bounds() {
        let orig: Vec<String> = (0..20).map(|i| format!("o{i}")).collect();
        let syn: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        let mut rng = rng_from_seed(1);
        let b = mix_tasks(&orig, &syn, 0.0, 10, &mut rng).unwrap();
        assert!(b.iter().all(|t| t.starts_with('o')));
        let b = mix_tasks(&orig, &[], 1.0, 10, &mut rng).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.iter().all(|t| t.starts_with('o')));
        let b = mix_tasks(&orig, &syn, 0.3, 10, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|t| t.starts_with('s')).count(), 3);
        assert!(mix_tasks(&[], &[], 0.3, 10, &mut rng).is_err());
        assert!(mix_tasks(&orig, &syn, 1.5, 10, &mut rng).is_err());
        // batch larger than the original pool cycles through it evenly
        let b = mix_tasks(&orig[..3], &[], 0.0, 7, &mut rng).unwrap();
        for o in &orig[..3] {
            assert!(b.iter().filter(|t| *t == o).count() >= 2);
        }
    }

    #[test]
    fn pool_round_trip_and_dedup() {
        let mut pool = TaskPool::from_instructions(&["buy a red mug", "buy a blue lamp"]);
        assert!(!pool.insert(TaskRecord::seed("buy a red mug")));
        pool.get_mut("buy a red mug").unwrap().record_group(&[1.0, 0.0], 3, 8).unwrap();
        pool.insert(TaskRecord::with_origin("buy a green mug", Origin::Generated { parent: "buy a red mug".into(), depth: 1 }));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tasks.jsonl");
        pool.save_jsonl(&p).unwrap();
        let back = TaskPool::load_jsonl(&p).unwrap();
        assert_eq!(back, pool);
        assert_eq!(back.synthetic(), vec!["buy a green mug".to_string()]);
    }

    #[test]
    fn clustering_is_deterministic_and_groups_similar_tasks() {
        let tasks: Vec<String> = ["buy a red mug", "buy a blue mug", "buy a red lamp under $20", "buy a black lamp under $20"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let e = HashedEmbedder::default();
        let a = cluster_tasks(&tasks, 2, &e, 3);
        assert_eq!(a, cluster_tasks(&tasks, 2, &e, 3));
        assert!(a.iter().all(|c| *c < 2));
        assert_eq!(cluster_tasks(&tasks, 8, &e, 3).len(), 4);
    }
}
