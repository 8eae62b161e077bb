//! Log-linear softmax policies over sparse action features.
//!
//! A decision point is described by one sparse feature vector per admissible
//! action; logits are `φ(a) · θ`. The tabular policy is the special case of
//! one-hot `(state, action)` features, which is what the gradient checks and
//! the bound verifier use. Text environments use hashed relational features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{log_softmax, softmax, TabularPolicy};
use crate::replay::tokenize;
use crate::rng::fnv1a;

pub type SparseFeatures = Vec<(usize, f64)>;

/// Feature vectors of every admissible action at one decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action_features: Vec<SparseFeatures>,
}

impl Decision {
    pub fn n_actions(&self) -> usize {
        self.action_features.len()
    }
}

/// Maps (task, state, admissible actions) to a [`Decision`].
pub trait FeatureMap: Send + Sync {
    fn dim(&self) -> usize;
    fn decision(&self, task: &str, state: &str, actions: &[String]) -> Decision;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    pub params: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn zeros(dim: usize) -> Self {
        Self {
            params: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn logits(&self, decision: &Decision) -> Vec<f64> {
        decision
            .action_features
            .iter()
            .map(|f| dot(&self.params, f))
            .collect()
    }

    pub fn probs(&self, decision: &Decision) -> Vec<f64> {
        softmax(&self.logits(decision))
    }

    pub fn log_probs(&self, decision: &Decision) -> Vec<f64> {
        log_softmax(&self.logits(decision))
    }

    pub fn from_tabular(policy: &TabularPolicy) -> Self {
        Self {
            params: policy.flat_params(),
        }
    }

    pub fn to_tabular(&self, n_states: usize, n_actions: usize) -> Result<TabularPolicy> {
        TabularPolicy::from_flat(&self.params, n_states, n_actions)
    }

    pub fn check_dim(&self, features: &dyn FeatureMap) -> Result<()> {
        if self.dim() != features.dim() {
            return Err(Error::Dimension(format!(
                "policy has {} parameters, feature map has {}",
                self.dim(),
                features.dim()
            )));
        }
        Ok(())
    }
}

pub fn dot(params: &[f64], features: &SparseFeatures) -> f64 {
    features.iter().map(|&(i, x)| params[i] * x).sum()
}

/// One-hot `(state, action)` features for tabular problems. States are
/// rendered `s<i>` and actions `a<j>`; anything unparseable maps to no
/// features (logit 0).
#[derive(Debug, Clone, Copy)]
pub struct TabularFeatures {
    pub n_states: usize,
    pub n_actions: usize,
}

impl TabularFeatures {
    pub fn decision_for(&self, s: usize) -> Decision {
        Decision {
            action_features: (0..self.n_actions)
                .map(|a| vec![(s * self.n_actions + a, 1.0)])
                .collect(),
        }
    }
}

pub fn parse_index(text: &str, prefix: char) -> Option<usize> {
    text.strip_prefix(prefix)?.parse().ok()
}

impl FeatureMap for TabularFeatures {
    fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn decision(&self, _task: &str, state: &str, actions: &[String]) -> Decision {
        let s = parse_index(state, 's').filter(|s| *s < self.n_states);
        Decision {
            action_features: actions
                .iter()
                .map(|a| match (s, parse_index(a, 'a')) {
                    (Some(s), Some(a)) if a < self.n_actions => vec![(s * self.n_actions + a, 1.0)],
                    _ => Vec::new(),
                })
                .collect(),
        }
    }
}

/// Generic features for free-text environments: per action, a hashed
/// indicator of its leading verb and the same bucket family weighted by the
/// fraction of the action's tokens that also occur in the task.
#[derive(Debug, Clone, Copy)]
pub struct HashedTextFeatures {
    pub dim: usize,
}

impl FeatureMap for HashedTextFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn decision(&self, task: &str, _state: &str, actions: &[String]) -> Decision {
        let task_tokens: std::collections::BTreeSet<String> = tokenize(task).collect();
        let bucket = |key: &str| (fnv1a(key.as_bytes()) % self.dim as u64) as usize;
        Decision {
            action_features: actions
                .iter()
                .map(|a| {
                    let tokens: Vec<String> = tokenize(a).collect();
                    let verb = tokens.first().map(String::as_str).unwrap_or("");
                    let overlap = if tokens.is_empty() {
                        0.0
                    } else {
                        tokens.iter().filter(|t| task_tokens.contains(*t)).count() as f64 / tokens.len() as f64
                    };
                    let mut f = vec![(bucket(&format!("verb:{verb}")), 1.0)];
                    if overlap > 0.0 {
                        f.push((bucket(&format!("overlap:{verb}")), overlap));
                    }
                    f
                })
                .collect(),
        }
    }
}
