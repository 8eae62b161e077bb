//! Baseline value function for GAE: a linear regressor over two hashed
//! one-hot features per state, the state text alone and the state together
//! with its task. With enumerable states and no hash collisions this is an
//! exact tabular estimator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::replay::KEY_SEPARATOR;
use crate::rng::fnv1a;
use crate::rollout::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimator {
    pub weights: Vec<f64>,
    /// Coordinate-descent sweeps per fit.
    pub max_sweeps: usize,
    /// Stop once a sweep lowers the loss by less than this.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_samples: usize,
    /// Mean squared error before fitting and after each sweep.
    pub loss_history: Vec<f64>,
}

impl ValueEstimator {
    pub fn new(n_buckets: usize) -> Self {
        assert!(n_buckets > 0, "value estimator needs at least one bucket");
        Self {
            weights: vec![0.0; n_buckets],
            max_sweeps: 200,
            tol: 1e-14,
        }
    }

    fn features(&self, task: &str, state: &str) -> [usize; 2] {
        let n = self.weights.len() as u64;
        [
            (fnv1a(state.as_bytes()) % n) as usize,
            (fnv1a(format!("{task}{KEY_SEPARATOR}{state}").as_bytes()) % n) as usize,
        ]
    }

    pub fn predict(&self, task: &str, state: &str) -> f64 {
        self.features(task, state).iter().map(|&i| self.weights[i]).sum()
    }

    /// `V(s_0), …, V(s_{T−1})` plus the bootstrap value: 0 after a terminal
    /// step, otherwise the estimate for the state the episode was cut at.
    pub fn trajectory_values(&self, traj: &Trajectory) -> Vec<f64> {
        let mut v: Vec<f64> = traj.steps.iter().map(|s| self.predict(&traj.task, &s.state)).collect();
        v.push(match traj.steps.last() {
            Some(last) if !last.done => self.predict(&traj.task, &last.next_state),
            _ => 0.0,
        });
        v
    }
}

/// Discounted returns-to-go, bootstrapped with the current estimate where an
/// episode was truncated rather than terminated.
pub fn return_targets(estimator: &ValueEstimator, traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let values = estimator.trajectory_values(traj);
    let mut g = values[traj.steps.len()];
    let mut out = vec![0.0; traj.steps.len()];
    for t in (0..traj.steps.len()).rev() {
        g = traj.steps[t].reward + gamma * g;
        out[t] = g;
    }
    out
}

/// Least-squares regression of return targets onto the hashed features by
/// exact coordinate descent (each coordinate update minimizes the loss along
/// that coordinate, so the loss never increases).
pub fn fit_values(estimator: &mut ValueEstimator, trajectories: &[Trajectory], gamma: f64) -> FitReport {
    let mut rows: Vec<[usize; 2]> = Vec::new();
    let mut targets = Vec::new();
    for traj in trajectories {
        let y = return_targets(estimator, traj, gamma);
        for (step, y) in traj.steps.iter().zip(y) {
            rows.push(estimator.features(&traj.task, &step.state));
            targets.push(y);
        }
    }
    let n = rows.len();
    if n == 0 {
        return FitReport { n_samples: 0, loss_history: Vec::new() };
    }
    // column j -> (row, multiplicity)
    let mut columns: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r[0] == r[1] {
            columns.entry(r[0]).or_default().push((i, 2.0));
        } else {
            for &j in r {
                columns.entry(j).or_default().push((i, 1.0));
            }
        }
    }
    let w = &mut estimator.weights;
    let mut resid: Vec<f64> = rows.iter().zip(&targets).map(|(r, y)| y - w[r[0]] - w[r[1]]).collect();
    let loss = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let mut history = vec![loss(&resid)];
    for _ in 0..estimator.max_sweeps {
        for (&j, col) in &columns {
            let num: f64 = col.iter().map(|&(i, x)| x * resid[i]).sum();
            let den: f64 = col.iter().map(|&(_, x)| x * x).sum();
            let step = num / den;
            w[j] += step;
            for &(i, x) in col {
                resid[i] -= x * step;
            }
        }
        let l = loss(&resid);
        let prev = *history.last().unwrap_or(&f64::INFINITY);
        history.push(l);
        if prev - l < estimator.tol {
            break;
        }
    }
    FitReport { n_samples: n, loss_history: history }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{Outcome, Step};

    fn one_step(task: &str, state: &str, reward: f64) -> Trajectory {
        Trajectory {
            task: task.into(),
            steps: vec![Step {
                state: state.into(),
                actions: vec!["a".into()],
                action: "a".into(),
                action_index: 0,
                action_log_prob: 0.0,
                reasoning: String::new(),
                next_state: "end".into(),
                reward,
                done: true,
            }],
            outcome: Outcome::Failure,
            seed: 0,
        }
    }

    #[test]
    fn constant_return_is_recovered() {
        let trajs: Vec<_> = (0..20).map(|i| one_step("t", &format!("s{}", i % 5), 0.7)).collect();
        let mut v = ValueEstimator::new(4096);
        let rep = fit_values(&mut v, &trajs, 0.9);
        for i in 0..5 {
            assert!((v.predict("t", &format!("s{i}")) - 0.7).abs() < 1e-6);
        }
        assert!(rep.loss_history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn zero_rewards_predict_zero() {
        let trajs: Vec<_> = (0..5).map(|i| one_step("t", &format!("s{i}"), 0.0)).collect();
        let mut v = ValueEstimator::new(64);
        fit_values(&mut v, &trajs, 0.9);
        assert!(v.weights.iter().all(|w| *w == 0.0));
    }
}
