//! Advantage estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Gae,
    Grpo,
}

/// How a trajectory-level GRPO advantage is assigned to its steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardAssignment {
    /// Every step carries the trajectory's advantage.
    #[default]
    Broadcast,
    /// Only the final step does; earlier steps get 0.
    FinalStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Per-step advantages aligned with a batch of trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub estimator: Estimator,
    /// `advantages[i][t]` belongs to step `t` of trajectory `i`.
    pub advantages: Vec<Vec<f64>>,
    pub gamma: f64,
    pub gae_lambda: Option<f64>,
    /// One entry per group (GRPO only).
    pub group_stats: Vec<GroupStats>,
}

/// `Â_t = δ_t + γλ·Â_{t+1}` with `δ_t = r_t + γV_{t+1} − V_t`. `values` holds
/// one extra bootstrap entry (0 for terminal states).
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Dimension(format!(
            "GAE needs {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lam * next;
        adv[t] = next;
    }
    Ok(adv)
}

pub fn group_stats(rewards: &[f64]) -> GroupStats {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    GroupStats { mean, std: var.sqrt() }
}

/// `(r_i − mean)/std` over the group with population std; a zero-std group
/// gets all-zero advantages.
pub fn grpo_advantages(group_rewards: &[f64]) -> Result<Vec<f64>> {
    if group_rewards.len() < 2 {
        return Err(Error::InvalidArgument("GRPO needs a group of at least 2".into()));
    }
    let GroupStats { mean, std } = group_stats(group_rewards);
    if std == 0.0 {
        return Ok(vec![0.0; group_rewards.len()]);
    }
    Ok(group_rewards.iter().map(|r| (r - mean) / std).collect())
}

/// GRPO advantages for a group of trajectories of one task, using each
/// trajectory's total reward.
pub fn grpo_step_advantages(group: &[Trajectory], assignment: RewardAssignment) -> Result<(Vec<Vec<f64>>, GroupStats)> {
    let rewards: Vec<f64> = group.iter().map(Trajectory::total_reward).collect();
    let adv = grpo_advantages(&rewards)?;
    let steps = group
        .iter()
        .zip(&adv)
        .map(|(t, &a)| {
            let n = t.steps.len();
            match assignment {
                RewardAssignment::Broadcast => vec![a; n],
                RewardAssignment::FinalStep => (0..n).map(|i| if i + 1 == n { a } else { 0.0 }).collect(),
            }
        })
        .collect();
    Ok((steps, group_stats(&rewards)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_collapses() {
        let r = [0.5, 0.0, 1.0];
        let v = [0.3, 0.1, 0.7, 0.0];
        let td = gae_advantages(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(td[t], r[t] + 0.9 * v[t + 1] - v[t]);
        }
        let mc = gae_advantages(&r, &[0.0; 4], 0.9, 1.0).unwrap();
        assert!((mc[0] - (0.5 + 0.81)).abs() < 1e-12);
        assert!(gae_advantages(&r, &v[..3], 0.9, 0.9).is_err());
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(grpo_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(grpo_advantages(&[1.0]).is_err());
    }
}
