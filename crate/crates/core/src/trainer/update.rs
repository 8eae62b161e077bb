//! Clipped-surrogate policy updates with analytic gradients.
//!
//! For a sample with stored log-probability `ℓ_old`, advantage `A` and ratio
//! `ρ = exp(log π_θ(a|s) − ℓ_old)`, the objective is
//! `min(ρA, clip(ρ, 1−ε, 1+ε)A) − β·KL(π_old(·|s) ‖ π_θ(·|s))`, averaged over
//! samples. For a log-linear policy `∇ log π_θ(a|s) = φ(a) − E_π φ` and
//! `∇ KL(π_old ‖ π_θ) = E_π φ − E_old φ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{kl_from_logits, log_softmax};
use crate::policy::{Decision, FeatureMap, LinearSoftmaxPolicy};
use crate::replay::KEY_SEPARATOR;
use crate::rollout::Trajectory;

/// One decision with the data needed for the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub decision: Decision,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    /// Identity of the decision point (task and state), used to measure the
    /// per-state KL radius over distinct states.
    pub key: String,
}

/// Flattens trajectories into samples; `advantages[i][t]` must exist for every
/// step.
pub fn build_samples(features: &dyn FeatureMap, trajectories: &[Trajectory], advantages: &[Vec<f64>]) -> Result<Vec<Sample>> {
    if trajectories.len() != advantages.len() {
        return Err(Error::Dimension(format!(
            "{} trajectories but {} advantage rows",
            trajectories.len(),
            advantages.len()
        )));
    }
    for (i, (t, a)) in trajectories.iter().zip(advantages).enumerate() {
        if t.steps.len() != a.len() {
            return Err(Error::Dimension(format!(
                "trajectory {i} has {} steps but {} advantages",
                t.steps.len(),
                a.len()
            )));
        }
    }
    let flat: Vec<(&Trajectory, usize, f64)> = trajectories
        .iter()
        .zip(advantages)
        .flat_map(|(t, a)| a.iter().enumerate().map(move |(s, &adv)| (t, s, adv)))
        .collect();
    Ok(flat
        .par_iter()
        .map(|&(t, s, advantage)| {
            let step = &t.steps[s];
            Sample {
                decision: features.decision(&t.task, &step.state, &step.actions),
                action: step.action_index,
                old_log_prob: step.action_log_prob,
                advantage,
                key: format!("{}{KEY_SEPARATOR}{}", t.task, step.state),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateConfig {
    pub lr: f64,
    pub clip_eps: f64,
    /// Weight β of the KL(old ‖ new) penalty.
    pub kl_penalty: f64,
    /// Updates whose per-state KL radius exceeds this are rejected.
    pub trust_radius: f64,
    /// Gradient steps per epoch; samples are split into contiguous chunks.
    pub n_minibatches: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            clip_eps: 0.2,
            kl_penalty: 0.0,
            trust_radius: 0.05,
            n_minibatches: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub n_samples: usize,
    pub mean_ratio: f64,
    /// Fraction of samples whose ratio left `[1−ε, 1+ε]`.
    pub clip_frac: f64,
    /// Per-state KL radius between the old and the proposed policy.
    pub kl: f64,
    pub accepted: bool,
}

fn expected_features(decision: &Decision, probs: &[f64], out: &mut Vec<(usize, f64)>) {
    out.clear();
    for (f, p) in decision.action_features.iter().zip(probs) {
        out.extend(f.iter().map(|&(i, x)| (i, p * x)));
    }
}

struct SampleEval {
    objective: f64,
    ratio: f64,
    clipped: bool,
}

/// Adds `scale · ∇(objective of s)` to `grad`.
fn accumulate(
    params: &[f64],
    old_params: &[f64],
    s: &Sample,
    clip_eps: f64,
    kl_penalty: f64,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> SampleEval {
    let logits = theta_logits(params, &s.decision);
    let logp = log_softmax(&logits);
    let ratio = (logp[s.action] - s.old_log_prob).exp();
    let a = s.advantage;
    let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let active = ratio * a <= clipped_ratio * a;
    let old_logits = theta_logits(old_params, &s.decision);
    let kl = if kl_penalty != 0.0 { kl_from_logits(&old_logits, &logits) } else { 0.0 };
    let objective = (ratio * a).min(clipped_ratio * a) - kl_penalty * kl;
    if let Some(grad) = grad {
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let mut scratch = Vec::new();
        // policy-gradient part: ρA(φ(a) − E_π φ)
        if active && a != 0.0 {
            let w = scale * ratio * a;
            for &(i, x) in &s.decision.action_features[s.action] {
                grad[i] += w * x;
            }
            expected_features(&s.decision, &probs, &mut scratch);
            for &(i, x) in &scratch {
                grad[i] -= w * x;
            }
        }
        // penalty part: −β(E_π φ − E_old φ)
        if kl_penalty != 0.0 {
            let w = scale * kl_penalty;
            expected_features(&s.decision, &probs, &mut scratch);
            for &(i, x) in &scratch {
                grad[i] -= w * x;
            }
            let old_probs: Vec<f64> = log_softmax(&old_logits).iter().map(|l| l.exp()).collect();
            expected_features(&s.decision, &old_probs, &mut scratch);
            for &(i, x) in &scratch {
                grad[i] += w * x;
            }
        }
    }
    SampleEval {
        objective,
        ratio,
        clipped: (ratio - 1.0).abs() > clip_eps,
    }
}

fn theta_logits(params: &[f64], decision: &Decision) -> Vec<f64> {
    decision
        .action_features
        .iter()
        .map(|f| f.iter().map(|&(i, x)| params[i] * x).sum())
        .collect()
}

/// Mean surrogate objective over `samples`.
pub fn surrogate(params: &[f64], old_params: &[f64], samples: &[Sample], clip_eps: f64, kl_penalty: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| accumulate(params, old_params, s, clip_eps, kl_penalty, 0.0, None).objective)
        .sum::<f64>()
        / samples.len() as f64
}

/// Analytic gradient of [`surrogate`].
pub fn surrogate_grad(params: &[f64], old_params: &[f64], samples: &[Sample], clip_eps: f64, kl_penalty: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    grad_into(params, old_params, samples, 0, clip_eps, kl_penalty, &mut grad)?;
    Ok(grad)
}

fn grad_into(
    params: &[f64],
    old_params: &[f64],
    samples: &[Sample],
    offset: usize,
    clip_eps: f64,
    kl_penalty: f64,
    grad: &mut [f64],
) -> Result<(f64, usize)> {
    let scale = 1.0 / samples.len().max(1) as f64;
    let mut ratio_sum = 0.0;
    let mut n_clipped = 0;
    for (j, s) in samples.iter().enumerate() {
        let e = accumulate(params, old_params, s, clip_eps, kl_penalty, scale, Some(grad));
        let bad_grad = s.decision.action_features.iter().flatten().any(|&(i, _)| !grad[i].is_finite());
        if !e.ratio.is_finite() || !e.objective.is_finite() || bad_grad {
            return Err(Error::NonFiniteGradient { index: offset + j });
        }
        ratio_sum += e.ratio;
        n_clipped += usize::from(e.clipped);
    }
    Ok((ratio_sum, n_clipped))
}

/// Per-state KL radius `max_s KL(new(·|s) ‖ old(·|s))` over the distinct
/// decision points in `samples`.
pub fn sample_kl_radius(old: &LinearSoftmaxPolicy, new: &LinearSoftmaxPolicy, samples: &[Sample]) -> f64 {
    let mut seen = std::collections::HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.key.as_str()))
        .map(|s| kl_from_logits(&new.logits(&s.decision), &old.logits(&s.decision)))
        .fold(0.0, f64::max)
}

/// One epoch of minibatch ascent on the clipped surrogate. The proposal is
/// returned only if its KL radius is within `trust_radius`; otherwise the
/// input policy is returned unchanged with `accepted = false`.
pub fn policy_update(
    policy: &LinearSoftmaxPolicy,
    samples: &[Sample],
    config: &UpdateConfig,
) -> Result<(LinearSoftmaxPolicy, UpdateMetrics)> {
    if config.n_minibatches == 0 {
        return Err(Error::InvalidArgument("n_minibatches must be >= 1".into()));
    }
    for (j, s) in samples.iter().enumerate() {
        if s.action >= s.decision.n_actions() || !s.old_log_prob.is_finite() || !s.advantage.is_finite() {
            return Err(Error::NonFiniteGradient { index: j });
        }
    }
    let old = policy.params.as_slice();
    let mut params = policy.params.clone();
    let chunk = samples.len().div_ceil(config.n_minibatches).max(1);
    let mut ratio_sum = 0.0;
    let mut n_clipped = 0;
    let mut grad = vec![0.0; params.len()];
    for (c, mb) in samples.chunks(chunk).enumerate() {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (rs, nc) = grad_into(&params, old, mb, c * chunk, config.clip_eps, config.kl_penalty, &mut grad)?;
        ratio_sum += rs;
        n_clipped += nc;
        for (p, g) in params.iter_mut().zip(&grad) {
            *p += config.lr * g;
        }
    }
    let proposal = LinearSoftmaxPolicy { params };
    let kl = sample_kl_radius(policy, &proposal, samples);
    let n = samples.len();
    let accepted = kl <= config.trust_radius;
    let metrics = UpdateMetrics {
        n_samples: n,
        mean_ratio: if n == 0 { 1.0 } else { ratio_sum / n as f64 },
        clip_frac: if n == 0 { 0.0 } else { n_clipped as f64 / n as f64 },
        kl,
        accepted,
    };
    Ok((if accepted { proposal } else { policy.clone() }, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TabularFeatures;

    fn sample(decision: Decision, action: usize, old_log_prob: f64, advantage: f64, key: &str) -> Sample {
        Sample { decision, action, old_log_prob, advantage, key: key.into() }
    }

    #[test]
    fn zero_advantages_leave_params_unchanged() {
        let f = TabularFeatures { n_states: 2, n_actions: 3 };
        let p = LinearSoftmaxPolicy { params: vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5] };
        let samples: Vec<Sample> = (0..2)
            .map(|s| {
                let d = f.decision_for(s);
                let lp = p.log_probs(&d)[1];
                sample(d, 1, lp, 0.0, &format!("s{s}"))
            })
            .collect();
        let cfg = UpdateConfig { kl_penalty: 0.1, ..Default::default() };
        let (q, m) = policy_update(&p, &samples, &cfg).unwrap();
        assert_eq!(q, p);
        assert_eq!(m.kl, 0.0);
        assert!(m.accepted);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let f = TabularFeatures { n_states: 1, n_actions: 2 };
        let p = LinearSoftmaxPolicy::zeros(2);
        let d = f.decision_for(0);
        let s = sample(d.clone(), 0, -(2f64.ln()), 1.0, "s0");
        let cfg = UpdateConfig { lr: 0.01, ..Default::default() };
        let (q, m) = policy_update(&p, &[s], &cfg).unwrap();
        assert!(m.accepted);
        assert!(q.probs(&d)[0] > 0.5);
    }

    #[test]
    fn trust_region_rejects_large_steps() {
        let f = TabularFeatures { n_states: 1, n_actions: 2 };
        let p = LinearSoftmaxPolicy::zeros(2);
        let s = sample(f.decision_for(0), 0, -(2f64.ln()), 1.0, "s0");
        let cfg = UpdateConfig { lr: 100.0, clip_eps: 1e9, trust_radius: 0.01, ..Default::default() };
        let (q, m) = policy_update(&p, &[s], &cfg).unwrap();
        assert!(!m.accepted);
        assert!(m.kl > 0.01);
        assert_eq!(q, p);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let f = TabularFeatures { n_states: 1, n_actions: 2 };
        let p = LinearSoftmaxPolicy::zeros(2);
        let good = sample(f.decision_for(0), 0, -(2f64.ln()), 1.0, "s0");
        let bad = sample(f.decision_for(0), 1, f64::NEG_INFINITY, 1.0, "s0");
        let err = policy_update(&p, &[good, bad], &UpdateConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
    }
}
