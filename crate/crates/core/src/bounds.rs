//! Exact numerical checks of the simulation-error bound and the
//! synthetic-to-real policy improvement bound on tabular instances.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experience::{measure_model_error, TabularPerturbedModel};
use crate::mdp::{evaluate_policy, kl_radius, TabularMdp, TabularPolicy};
use crate::rng::{rng_for, Rng, Stream};

/// Slack absorbed by `holds`.
pub const SLACK: f64 = 1e-9;

/// `ε_R/(1-γ) + 2γ·r_max·ε_P/(1-γ)²`.
pub fn delta_model(eps_r: f64, eps_p: f64, gamma: f64, r_max: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0,1)")));
    }
    for (name, v) in [("eps_r", eps_r), ("eps_p", eps_p), ("r_max", r_max)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
        }
    }
    let h = 1.0 - gamma;
    Ok(eps_r / h + 2.0 * gamma * r_max * eps_p / (h * h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// `|J_M(π) - J_M̂(π)| ≤ Δ_model`
    Simulation,
    /// Real improvement ≥ surrogate − trust penalty − 2Δ_model.
    Improvement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub index: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    /// Seed the instance was drawn from.
    pub seed: u64,
}

/// Extra terms of the improvement check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTerms {
    /// `sup_s KL(π′ ‖ π)`
    pub delta: f64,
    /// `(1/(1-γ))·E_{s∼d^π_M̂, a∼π′}[A^π_M̂(s,a)]`
    pub surrogate: f64,
    /// `4γ/(1-γ)²·V_max·δ`
    pub trust_penalty: f64,
    /// `J_M(π′) - J_M(π)`
    pub real_improvement: f64,
    /// Surrogate exceeds both penalties, so improvement is guaranteed.
    pub triggered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub instance: Instance,
    pub eps_r: f64,
    pub eps_p: f64,
    pub v_max: f64,
    pub delta_model: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`
    pub margin: f64,
    pub holds: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement: Option<ImprovementTerms>,
}

impl BoundReport {
    fn new(kind: BoundKind, instance: Instance, eps_r: f64, eps_p: f64, delta_model: f64, lhs: f64, rhs: f64) -> Self {
        let margin = rhs - lhs;
        Self {
            kind,
            instance,
            eps_r,
            eps_p,
            v_max: instance.r_max / (1.0 - instance.gamma),
            delta_model,
            lhs,
            rhs,
            margin,
            holds: margin >= -SLACK,
            improvement: None,
        }
    }

    /// Recomputes `delta_model` from the stored fields.
    pub fn recomputed_delta_model(&self) -> Result<f64> {
        delta_model(self.eps_r, self.eps_p, self.instance.gamma, self.instance.r_max)
    }
}

fn instance_of(real: &TabularMdp) -> Instance {
    Instance {
        index: 0,
        n_states: real.n_states(),
        n_actions: real.n_actions(),
        gamma: real.gamma(),
        r_max: real.r_max(),
        seed: 0,
    }
}

fn check_shapes(real: &TabularMdp, model: &TabularPerturbedModel, policies: &[&TabularPolicy]) -> Result<()> {
    let synth = model.perturbed();
    if synth.gamma() != real.gamma() || synth.r_max() != real.r_max() || synth.rho0() != real.rho0() {
        return Err(Error::InvalidArgument(
            "real and synthetic MDPs must share gamma, r_max and rho0".into(),
        ));
    }
    for p in policies {
        if p.n_states() != real.n_states() || p.n_actions() != real.n_actions() {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                p.n_states(),
                p.n_actions(),
                real.n_states(),
                real.n_actions()
            )));
        }
    }
    Ok(())
}

/// Checks `|J_M(π) - J_M̂(π)| ≤ Δ_model` with the measured `(ε_R, ε_P)`.
pub fn verify_simulation_lemma(
    real: &TabularMdp,
    model: &TabularPerturbedModel,
    policy: &TabularPolicy,
) -> Result<BoundReport> {
    let err = measure_model_error(real, model)?;
    check_shapes(real, model, &[policy])?;
    let j_real = evaluate_policy(real, policy)?.j;
    let j_synth = evaluate_policy(model.perturbed(), policy)?.j;
    let dm = delta_model(err.eps_r, err.eps_p, real.gamma(), real.r_max())?;
    Ok(BoundReport::new(
        BoundKind::Simulation,
        instance_of(real),
        err.eps_r,
        err.eps_p,
        dm,
        (j_real - j_synth).abs(),
        dm,
    ))
}

/// Checks `J_M(π′) - J_M(π) ≥ surrogate − 4γ/(1-γ)²·V_max·δ − 2Δ_model`,
/// where the surrogate and `δ` are computed on the synthetic MDP.
pub fn verify_policy_improvement(
    real: &TabularMdp,
    model: &TabularPerturbedModel,
    pi: &TabularPolicy,
    pi_prime: &TabularPolicy,
) -> Result<BoundReport> {
    let err = measure_model_error(real, model)?;
    check_shapes(real, model, &[pi, pi_prime])?;
    let gamma = real.gamma();
    let synth = evaluate_policy(model.perturbed(), pi)?;
    let mut expected_adv = 0.0;
    for (s, &d) in synth.occupancy.iter().enumerate() {
        let probs = pi_prime.probs(s);
        expected_adv += d * probs.iter().zip(&synth.advantage[s]).map(|(p, a)| p * a).sum::<f64>();
    }
    let surrogate = expected_adv / (1.0 - gamma);
    let delta = kl_radius(pi, pi_prime)?;
    let v_max = real.v_max();
    let trust_penalty = 4.0 * gamma / (1.0 - gamma).powi(2) * v_max * delta;
    let dm = delta_model(err.eps_r, err.eps_p, gamma, real.r_max())?;
    let real_improvement = evaluate_policy(real, pi_prime)?.j - evaluate_policy(real, pi)?.j;
    let lhs = surrogate - trust_penalty - 2.0 * dm;
    let mut report = BoundReport::new(
        BoundKind::Improvement,
        instance_of(real),
        err.eps_r,
        err.eps_p,
        dm,
        lhs,
        real_improvement,
    );
    report.improvement = Some(ImprovementTerms {
        delta,
        surrogate,
        trust_penalty,
        real_improvement,
        triggered: lhs > 0.0,
    });
    Ok(report)
}

/// How the candidate `π′` deviates from `π`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// i.i.d. Gaussian logit noise.
    #[default]
    Gaussian,
    /// The synthetic advantage table of `π` (a greedy improvement step).
    Ascent,
}

/// `π′ = π + σ·direction` with `σ` bisected so that `sup_s KL(π′‖π)` hits
/// `target` (relative tolerance `1e-6`). Returns `π` for a zero target or a
/// zero direction.
pub fn perturb_to_radius(pi: &TabularPolicy, direction: &[Vec<f64>], target: f64) -> Result<TabularPolicy> {
    if !(target >= 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("target radius {target} must be >= 0")));
    }
    let at = |sigma: f64| -> Result<TabularPolicy> {
        let logits = pi
            .logits()
            .iter()
            .zip(direction)
            .map(|(l, d)| l.iter().zip(d).map(|(x, z)| x + sigma * z).collect())
            .collect();
        TabularPolicy::new(logits)
    };
    if direction.len() != pi.n_states() || direction.iter().any(|d| d.len() != pi.n_actions()) {
        return Err(Error::Dimension("direction table has the wrong shape".into()));
    }
    if target == 0.0 {
        return Ok(pi.clone());
    }
    let radius = |sigma: f64| -> Result<f64> { kl_radius(pi, &at(sigma)?) };
    let mut hi = 1e-3;
    while radius(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            // The direction cannot move the policy that far (e.g. it is
            // constant within every state).
            return Err(Error::Numeric(format!("radius {target} is unreachable along the direction")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = radius(mid)?;
        if (r - target).abs() <= 1e-6 * target {
            return at(mid);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Parameters of a randomized sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: BoundKind,
    pub n_instances: usize,
    pub min_states: usize,
    pub max_states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    pub gammas: Vec<f64>,
    /// Target kernel mixing weights (the measured TV gap is at most this).
    pub eps_p_grid: Vec<f64>,
    /// Target reward noise amplitudes.
    pub eps_r_grid: Vec<f64>,
    /// Target trust radii for the improvement check.
    pub deltas: Vec<f64>,
    pub direction: Direction,
    pub r_max: f64,
    /// Standard deviation of the random base policy's logits.
    pub policy_scale: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: BoundKind::Simulation,
            n_instances: 1000,
            min_states: 4,
            max_states: 10,
            min_actions: 2,
            max_actions: 4,
            gammas: vec![0.8, 0.9, 0.95],
            eps_p_grid: vec![0.0, 0.01, 0.05, 0.1, 0.2],
            eps_r_grid: vec![0.0, 0.01, 0.05, 0.1],
            deltas: vec![0.01, 0.05, 0.1],
            direction: Direction::Gaussian,
            r_max: 1.0,
            policy_scale: 1.0,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_states == 0 || self.min_states > self.max_states {
            return bad(format!("state range {}..={} is empty", self.min_states, self.max_states));
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return bad(format!("action range {}..={} is empty", self.min_actions, self.max_actions));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
            return bad("gammas must be non-empty and within [0,1)".into());
        }
        if self.eps_p_grid.is_empty() || self.eps_p_grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return bad("eps_p_grid must be non-empty and within [0,1]".into());
        }
        if self.eps_r_grid.is_empty() || self.eps_r_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return bad("eps_r_grid must be non-empty and >= 0".into());
        }
        if self.kind == BoundKind::Improvement
            && (self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())))
        {
            return bad("deltas must be non-empty and >= 0".into());
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return bad(format!("r_max {} must be > 0", self.r_max));
        }
        if !(self.policy_scale >= 0.0 && self.policy_scale.is_finite()) {
            return bad(format!("policy_scale {} must be >= 0", self.policy_scale));
        }
        Ok(())
    }
}

fn pick<T: Copy>(xs: &[T], rng: &mut Rng) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// Draws and verifies instance `index`; every draw comes from the instance's
/// own stream, so results do not depend on scheduling.
pub fn run_instance(cfg: &SweepConfig, index: u64) -> Result<BoundReport> {
    let seed = crate::rng::stream_seed(cfg.seed, Stream::Bounds, &[index]);
    let mut rng = rng_for(cfg.seed, Stream::Bounds, &[index]);
    let n_states = rng.random_range(cfg.min_states..=cfg.max_states);
    let n_actions = rng.random_range(cfg.min_actions..=cfg.max_actions);
    let gamma = pick(&cfg.gammas, &mut rng);
    let eps_p = pick(&cfg.eps_p_grid, &mut rng);
    let eps_r = pick(&cfg.eps_r_grid, &mut rng);
    let real = TabularMdp::random(n_states, n_actions, gamma, cfg.r_max, &mut rng)?;
    let model = TabularPerturbedModel::new(real.clone(), eps_p, eps_r, &mut rng)?;
    let pi = TabularPolicy::random(n_states, n_actions, cfg.policy_scale, &mut rng);
    let mut report = match cfg.kind {
        BoundKind::Simulation => verify_simulation_lemma(&real, &model, &pi)?,
        BoundKind::Improvement => {
            let target = pick(&cfg.deltas, &mut rng);
            let direction: Vec<Vec<f64>> = match cfg.direction {
                Direction::Gaussian => (0..n_states)
                    .map(|_| {
                        (0..n_actions)
                            .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
                            .collect()
                    })
                    .collect(),
                Direction::Ascent => evaluate_policy(model.perturbed(), &pi)?.advantage,
            };
            let pi_prime = match perturb_to_radius(&pi, &direction, target) {
                Ok(p) => p,
                // A flat advantage table cannot move the policy; π′ = π.
                Err(Error::Numeric(_)) => pi.clone(),
                Err(e) => return Err(e),
            };
            verify_policy_improvement(&real, &model, &pi, &pi_prime)?
        }
    };
    report.instance.index = index;
    report.instance.seed = seed;
    Ok(report)
}

/// Verifies `cfg.n_instances` instances in parallel, in index order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<BoundReport>> {
    cfg.validate()?;
    (0..cfg.n_instances as u64)
        .into_par_iter()
        .map(|i| run_instance(cfg, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: BoundKind,
    pub instances: usize,
    pub violations: usize,
    pub min_margin: f64,
    /// Improvement checks whose surrogate beat both penalties.
    pub triggered: usize,
    /// Triggered instances whose real improvement was negative.
    pub trigger_violations: usize,
}

pub fn summarize(kind: BoundKind, reports: &[BoundReport]) -> SweepSummary {
    let triggered: Vec<&ImprovementTerms> = reports
        .iter()
        .filter_map(|r| r.improvement.as_ref())
        .filter(|t| t.triggered)
        .collect();
    SweepSummary {
        kind,
        instances: reports.len(),
        violations: reports.iter().filter(|r| !r.holds).count(),
        min_margin: reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min),
        triggered: triggered.len(),
        trigger_violations: triggered.iter().filter(|t| t.real_improvement < -SLACK).count(),
    }
}
