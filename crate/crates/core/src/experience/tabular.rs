use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ExperienceContext, ExperienceModel, ModelStep, Observation};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::parse_index;
use crate::rng::Rng;

/// Measured one-step error of a synthetic MDP against a real one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDiscrepancy {
    /// `max_{s,a} |R - R̂|`
    pub eps_r: f64,
    /// `max_{s,a} TV(P(·|s,a), P̂(·|s,a))`
    pub eps_p: f64,
}

/// A synthetic copy of `base` with kernel `(1-ε)·P + ε·Uniform` and rewards
/// shifted by noise in `[-eps_r_target, eps_r_target]`, clamped to
/// `[0, r_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPerturbedModel {
    base: TabularMdp,
    eps_p_target: f64,
    eps_r_target: f64,
    perturbed: TabularMdp,
}

impl TabularPerturbedModel {
    /// Random reward noise, drawn uniformly per `(s, a)`.
    pub fn new(base: TabularMdp, eps_p_target: f64, eps_r_target: f64, rng: &mut Rng) -> Result<Self> {
        let n_s = base.n_states();
        let n_a = base.n_actions();
        let noise: Vec<Vec<f64>> = (0..n_s)
            .map(|_| (0..n_a).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        Self::with_reward_noise(base, eps_p_target, eps_r_target, &noise)
    }

    /// `noise[s][a] ∈ [-1, 1]` is scaled by `eps_r_target` and added to `R`.
    pub fn with_reward_noise(
        base: TabularMdp,
        eps_p_target: f64,
        eps_r_target: f64,
        noise: &[Vec<f64>],
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps_p_target) {
            return Err(Error::InvalidArgument(format!("eps_p_target {eps_p_target} outside [0,1]")));
        }
        if !(eps_r_target >= 0.0 && eps_r_target.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_r_target {eps_r_target} must be >= 0")));
        }
        let n = base.n_states();
        if noise.len() != n || noise.iter().any(|r| r.len() != base.n_actions()) {
            return Err(Error::Dimension("reward noise table has the wrong shape".into()));
        }
        let uniform = 1.0 / n as f64;
        let kernel: Vec<Vec<Vec<f64>>> = base
            .kernel()
            .iter()
            .map(|per_state| {
                per_state
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|p| (1.0 - eps_p_target) * p + eps_p_target * uniform)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let r_max = base.r_max();
        let rewards: Vec<Vec<f64>> = base
            .rewards()
            .iter()
            .zip(noise)
            .map(|(rs, ns)| {
                rs.iter()
                    .zip(ns)
                    .map(|(r, z)| (r + eps_r_target * z.clamp(-1.0, 1.0)).clamp(0.0, r_max))
                    .collect()
            })
            .collect();
        let perturbed = base.with_dynamics(kernel, rewards)?;
        Ok(Self {
            base,
            eps_p_target,
            eps_r_target,
            perturbed,
        })
    }

    pub fn base(&self) -> &TabularMdp {
        &self.base
    }

    pub fn perturbed(&self) -> &TabularMdp {
        &self.perturbed
    }

    pub fn eps_p_target(&self) -> f64 {
        self.eps_p_target
    }

    pub fn eps_r_target(&self) -> f64 {
        self.eps_r_target
    }

    pub fn actions(&self) -> Vec<String> {
        (0..self.perturbed.n_actions()).map(|a| format!("a{a}")).collect()
    }
}

/// Sup reward gap and sup total-variation kernel gap between `real` and the
/// model's synthetic MDP.
pub fn measure_model_error(real: &TabularMdp, model: &TabularPerturbedModel) -> Result<ModelDiscrepancy> {
    mdp_discrepancy(real, model.perturbed())
}

pub(crate) fn mdp_discrepancy(real: &TabularMdp, synth: &TabularMdp) -> Result<ModelDiscrepancy> {
    if real.n_states() != synth.n_states() || real.n_actions() != synth.n_actions() {
        return Err(Error::Dimension(format!(
            "real MDP is {}x{}, synthetic is {}x{}",
            real.n_states(),
            real.n_actions(),
            synth.n_states(),
            synth.n_actions()
        )));
    }
    let mut eps_r: f64 = 0.0;
    let mut eps_p: f64 = 0.0;
    for s in 0..real.n_states() {
        for a in 0..real.n_actions() {
            eps_r = eps_r.max((real.reward(s, a) - synth.reward(s, a)).abs());
            let tv: f64 = real
                .transition(s, a)
                .iter()
                .zip(synth.transition(s, a))
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
                * 0.5;
            eps_p = eps_p.max(tv);
        }
    }
    Ok(ModelDiscrepancy { eps_r, eps_p })
}

impl ExperienceModel for TabularPerturbedModel {
    fn name(&self) -> &str {
        "tabular"
    }

    fn reset(&self, _task: &str, rng: &mut Rng) -> Result<Observation> {
        let s = self.perturbed.sample_initial(rng.random());
        Ok(Observation {
            state: format!("s{s}"),
            actions: self.actions(),
        })
    }

    /// Rewards here are the synthetic `R̂(s,a)` rather than outcome rewards,
    /// and episodes never terminate on their own.
    fn step(&self, _ctx: &ExperienceContext, state: &str, action: &str, rng: &mut Rng) -> Result<ModelStep> {
        let m = &self.perturbed;
        let s = parse_index(state, 's').filter(|s| *s < m.n_states());
        let a = parse_index(action, 'a').filter(|a| *a < m.n_actions());
        let (Some(s), Some(a)) = (s, a) else {
            return Ok(ModelStep::failure(String::new()));
        };
        let next = m.sample_next(s, a, rng.random());
        Ok(ModelStep {
            reasoning: String::new(),
            next_state: format!("s{next}"),
            reward: m.reward(s, a),
            done: false,
            actions: self.actions(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::FAILURE_STATE;
    use crate::rng::rng_from_seed;

    fn point_mass_mdp() -> TabularMdp {
        let mut kernel = vec![vec![vec![0.25; 4]; 2]; 4];
        kernel[0][0] = vec![1.0, 0.0, 0.0, 0.0];
        TabularMdp::new(kernel, vec![vec![0.5; 2]; 4], 0.9, vec![0.25; 4], 1.0).unwrap()
    }

    #[test]
    fn identical_models_have_zero_error() {
        let base = point_mass_mdp();
        let m = TabularPerturbedModel::new(base.clone(), 0.0, 0.0, &mut rng_from_seed(1)).unwrap();
        let d = measure_model_error(&base, &m).unwrap();
        assert_eq!((d.eps_r, d.eps_p), (0.0, 0.0));
    }

    #[test]
    fn point_mass_row_mixed_with_uniform() {
        let base = point_mass_mdp();
        let m = TabularPerturbedModel::with_reward_noise(base.clone(), 0.1, 0.0, &vec![vec![0.0; 2]; 4]).unwrap();
        let d = measure_model_error(&base, &m).unwrap();
        assert!((d.eps_p - 0.075).abs() < 1e-12, "{}", d.eps_p);
    }

    #[test]
    fn constant_reward_shift() {
        let base = point_mass_mdp();
        let m = TabularPerturbedModel::with_reward_noise(base.clone(), 0.0, 0.05, &vec![vec![1.0; 2]; 4]).unwrap();
        let d = measure_model_error(&base, &m).unwrap();
        assert!((d.eps_r - 0.05).abs() < 1e-12);
    }

    #[test]
    fn clamping_keeps_rewards_in_range() {
        let base = point_mass_mdp();
        let m = TabularPerturbedModel::with_reward_noise(base.clone(), 0.0, 0.9, &vec![vec![1.0; 2]; 4]).unwrap();
        assert!(m.perturbed().rewards().iter().flatten().all(|r| *r == 1.0));
        let d = measure_model_error(&base, &m).unwrap();
        assert!(d.eps_r <= 0.9);
    }

    #[test]
    fn invalid_action_enters_failure_state() {
        let m = TabularPerturbedModel::new(point_mass_mdp(), 0.1, 0.1, &mut rng_from_seed(2)).unwrap();
        let step = m
            .step(&ExperienceContext::default(), "s0", "noop-invalid", &mut rng_from_seed(0))
            .unwrap();
        assert_eq!(step.next_state, FAILURE_STATE);
        assert_eq!(step.reward, 0.0);
        assert!(step.done);
    }

    #[test]
    fn mismatched_spaces_are_rejected() {
        let base = point_mass_mdp();
        let other = TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![0.0]], 0.9, vec![1.0], 1.0).unwrap();
        let m = TabularPerturbedModel::new(other, 0.0, 0.0, &mut rng_from_seed(0)).unwrap();
        assert!(matches!(measure_model_error(&base, &m), Err(Error::Dimension(_))));
    }
}
