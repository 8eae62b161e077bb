//! Experience replay with embedding-based retrieval.
//!
//! Transitions are keyed by the text `state ⫽ action`; retrieval returns the
//! `k` stored transitions whose keys have the highest cosine similarity to the
//! query, ties going to the earlier insertion.

use std::collections::VecDeque;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a;

pub const KEY_SEPARATOR: &str = " ⫽ ";
pub const DEFAULT_EMBED_DIM: usize = 256;

/// One stored environment transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub task: String,
    pub state: String,
    pub action: String,
    pub next_state: String,
    pub reward: f64,
    pub reasoning: String,
    pub done: bool,
    /// Seed of the episode that produced the transition.
    pub episode: u64,
}

impl Transition {
    pub fn key(&self) -> String {
        query_key(&self.state, &self.action)
    }
}

pub fn query_key(state: &str, action: &str) -> String {
    format!("{state}{KEY_SEPARATOR}{action}")
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm embedding, or the zero vector for text without tokens.
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Feature-hashed bag of lowercase word tokens, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut counts = vec![0f64; self.dim];
        for tok in tokenize(text) {
            counts[(fnv1a(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; self.dim];
        }
        counts.into_iter().map(|c| (c / norm) as f32).collect()
    }
}

/// Cosine similarity of two unit-or-zero vectors. Accumulates in f64 in
/// index order so every caller gets bit-identical scores.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

#[derive(Debug, Clone)]
struct Entry {
    seq: u64,
    transition: Transition,
    /// Non-zero embedding coordinates in index order.
    embedding: Vec<(u32, f32)>,
}

fn sparse(v: &[f32]) -> Vec<(u32, f32)> {
    v.iter()
        .enumerate()
        .filter(|(_, x)| **x != 0.0)
        .map(|(i, x)| (i as u32, *x))
        .collect()
}

/// Equals [`cosine`] against the dense form of `stored` bit for bit: the
/// omitted terms are exact zeros.
fn sparse_cosine(query: &[f32], stored: &[(u32, f32)]) -> f64 {
    stored
        .iter()
        .map(|&(i, x)| f64::from(query[i as usize]) * f64::from(x))
        .sum()
}

/// A retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<'a> {
    pub score: f64,
    /// Insertion sequence number (monotone over the buffer's lifetime).
    pub seq: u64,
    pub transition: &'a Transition,
}

#[derive(Serialize, Deserialize)]
struct StoredLine {
    seq: u64,
    #[serde(flatten)]
    transition: Transition,
}

/// FIFO-bounded transition store with cosine top-k retrieval.
#[derive(Clone)]
pub struct ReplayBuffer {
    entries: VecDeque<Entry>,
    capacity: usize,
    next_seq: u64,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for ReplayBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayBuffer")
            .field("len", &self.entries.len())
            .field("capacity", &self.capacity)
            .field("next_seq", &self.next_seq)
            .finish()
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self::with_embedder(capacity, Arc::new(HashedEmbedder::default()))
    }

    pub fn with_embedder(capacity: usize, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity,
            next_seq: 0,
            embedder,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn embed_dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter().map(|e| &e.transition)
    }

    fn push_with_seq(&mut self, seq: u64, transition: Transition) {
        if self.capacity == 0 {
            return;
        }
        let embedding = sparse(&self.embedder.embed(&transition.key()));
        while self.entries.len() >= self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry {
            seq,
            transition,
            embedding,
        });
        self.next_seq = self.next_seq.max(seq + 1);
    }

    /// Appends one transition, evicting the oldest entry when full.
    pub fn append(&mut self, transition: Transition) {
        let seq = self.next_seq;
        self.push_with_seq(seq, transition);
    }

    pub fn extend(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        for t in transitions {
            self.append(t);
        }
    }

    /// Seeds the buffer with offline trajectories, given as transition lists.
    pub fn seed<I, T>(&mut self, trajectories: I)
    where
        I: IntoIterator<Item = T>,
        T: IntoIterator<Item = Transition>,
    {
        for traj in trajectories {
            self.extend(traj);
        }
    }

    /// Top-`k` entries by cosine similarity to `state ⫽ action`, restricted to
    /// entries accepted by `keep`.
    pub fn retrieve_scored(
        &self,
        state: &str,
        action: &str,
        k: usize,
        keep: impl Fn(&Transition) -> bool,
    ) -> Vec<Scored<'_>> {
        if k == 0 || self.entries.is_empty() {
            return Vec::new();
        }
        let query = self.embedder.embed(&query_key(state, action));
        let mut hits: Vec<Scored<'_>> = self
            .entries
            .iter()
            .filter(|e| keep(&e.transition))
            .map(|e| Scored {
                score: sparse_cosine(&query, &e.embedding),
                seq: e.seq,
                transition: &e.transition,
            })
            .collect();
        let order = |a: &Scored<'_>, b: &Scored<'_>| b.score.total_cmp(&a.score).then(a.seq.cmp(&b.seq));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        hits
    }

    pub fn retrieve_topk(&self, state: &str, action: &str, k: usize) -> Vec<Transition> {
        self.retrieve_scored(state, action, k, |_| true)
            .into_iter()
            .map(|s| s.transition.clone())
            .collect()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = StoredLine {
                seq: e.seq,
                transition: e.transition.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json("writing buffer", e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a JSONL buffer file; embeddings are recomputed with this
    /// buffer's embedder.
    pub fn load_jsonl(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let stored: StoredLine = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
            self.push_with_seq(stored.seq.max(self.next_seq), stored.transition);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tr(state: &str, action: &str) -> Transition {
        Transition {
            task: "t".into(),
            state: state.into(),
            action: action.into(),
            next_state: format!("after {action}"),
            reward: 0.0,
            reasoning: String::new(),
            done: false,
            episode: 0,
        }
    }

    #[test]
    fn embedder_basics() {
        let e = HashedEmbedder::default();
        assert!(e.embed("").iter().all(|x| *x == 0.0));
        assert!(e.embed(" ,, ").iter().all(|x| *x == 0.0));
        let v = e.embed("buy red shoes");
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-6);
        assert_eq!(v, e.embed("buy red shoes"));
        assert_eq!(v, e.embed("BUY  red, shoes"));
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..15 {
            b.append(tr(&format!("s{i}"), "a"));
        }
        assert_eq!(b.len(), 10);
        let states: Vec<_> = b.transitions().map(|t| t.state.clone()).collect();
        assert_eq!(states, (5..15).map(|i| format!("s{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn seeding_counts() {
        let mut b = ReplayBuffer::new(1000);
        let trajs: Vec<Vec<Transition>> = (0..10)
            .map(|t| (0..5).map(|s| tr(&format!("traj{t} step{s}"), "go")).collect())
            .collect();
        b.seed(trajs);
        assert_eq!(b.len(), 50);
    }

    #[test]
    fn retrieval_edge_cases() {
        let mut b = ReplayBuffer::new(100);
        assert!(b.retrieve_topk("x", "y", 3).is_empty());
        b.append(tr("results page for mugs", "click item-3"));
        b.append(tr("home page", "search mug"));
        assert!(b.retrieve_topk("home page", "search mug", 0).is_empty());
        let top = b.retrieve_topk("home page", "search mug", 5);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].state, "home page");
        b.append(tr("cart page", "checkout"));
        assert_eq!(b.retrieve_topk("cart page", "checkout", 1)[0].state, "cart page");
    }

    #[test]
    fn ties_go_to_earlier_insertion() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..4 {
            let mut t = tr("same state", "same action");
            t.episode = i;
            b.append(t);
        }
        let eps: Vec<u64> = b.retrieve_topk("same state", "same action", 3).iter().map(|t| t.episode).collect();
        assert_eq!(eps, vec![0, 1, 2]);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.jsonl");
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.append(tr(&format!("s{i}"), "a"));
        }
        b.save_jsonl(&path).unwrap();
        let mut back = ReplayBuffer::new(3);
        back.load_jsonl(&path).unwrap();
        assert_eq!(b.transitions().collect::<Vec<_>>(), back.transitions().collect::<Vec<_>>());
        assert_eq!(back.next_seq, 5);
        back.append(tr("s5", "a"));
        assert_eq!(back.entries.back().unwrap().seq, 5);
    }
}
