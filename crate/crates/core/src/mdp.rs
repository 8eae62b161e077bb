//! Finite MDPs, tabular softmax policies and exact policy evaluation.
//!
//! Everything here is dense and small; evaluation is a direct linear solve,
//! which is what the bound verifier needs (exact `J`, not estimates).

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;

const ROW_TOL: f64 = 1e-12;

/// A finite discounted MDP with explicit dense tables.
///
/// `kernel[s][a][s']` is the transition probability and `rewards[s][a]` lies in
/// `[0, r_max]`. Instances are validated on construction and on
/// deserialization, so a `TabularMdp` value always satisfies its invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    kernel: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    rho0: Vec<f64>,
    r_max: f64,
}

/// On-disk JSON layout of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    kernel: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    rho0: Vec<f64>,
    r_max: f64,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let mdp = TabularMdp::new(doc.kernel, doc.rewards, doc.gamma, doc.rho0, doc.r_max)?;
        if mdp.n_states != doc.n_states || mdp.n_actions != doc.n_actions {
            return Err(Error::InvalidMdp(format!(
                "declared size {}x{} does not match tables {}x{}",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            kernel: m.kernel,
            rewards: m.rewards,
            gamma: m.gamma,
            rho0: m.rho0,
            r_max: m.r_max,
        }
    }
}

fn check_distribution(row: &[f64], what: impl Fn() -> String) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidMdp(format!("{} has a negative or non-finite entry", what())));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidMdp(format!("{} sums to {sum}", what())));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        kernel: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        rho0: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        let n_states = kernel.len();
        if n_states == 0 {
            return Err(Error::InvalidMdp("no states".into()));
        }
        let n_actions = kernel[0].len();
        if n_actions == 0 {
            return Err(Error::InvalidMdp("no actions".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside (0,1)")));
        }
        if !(r_max.is_finite() && r_max >= 0.0) {
            return Err(Error::InvalidMdp(format!("r_max {r_max} must be finite and >= 0")));
        }
        if rewards.len() != n_states || rho0.len() != n_states {
            return Err(Error::InvalidMdp("rewards/rho0 length differs from state count".into()));
        }
        for (s, per_state) in kernel.iter().enumerate() {
            if per_state.len() != n_actions || rewards[s].len() != n_actions {
                return Err(Error::InvalidMdp(format!("state {s} has the wrong action count")));
            }
            for (a, row) in per_state.iter().enumerate() {
                if row.len() != n_states {
                    return Err(Error::InvalidMdp(format!("kernel row ({s},{a}) has wrong length")));
                }
                check_distribution(row, || format!("kernel row ({s},{a})"))?;
                let r = rewards[s][a];
                if !(0.0..=r_max).contains(&r) {
                    return Err(Error::InvalidMdp(format!(
                        "reward ({s},{a}) = {r} outside [0, {r_max}]"
                    )));
                }
            }
        }
        check_distribution(&rho0, || "rho0".to_string())?;
        Ok(Self {
            n_states,
            n_actions,
            kernel,
            rewards,
            gamma,
            rho0,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn kernel(&self) -> &[Vec<Vec<f64>>] {
        &self.kernel
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.kernel[s][a]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `R_max / (1 - γ)`.
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// A random instance: each kernel row is either a point mass (20%) or a
    /// normalized draw of exponential weights; rewards are uniform on
    /// `[0, r_max]`; `rho0` is a random distribution.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, r_max: f64, rng: &mut Rng) -> Result<Self> {
        let kernel = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        if rng.random_bool(0.2) {
                            let mut row = vec![0.0; n_states];
                            row[rng.random_range(0..n_states)] = 1.0;
                            row
                        } else {
                            random_distribution(n_states, rng)
                        }
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random::<f64>() * r_max).collect())
            .collect();
        let rho0 = random_distribution(n_states, rng);
        Self::new(kernel, rewards, gamma, rho0, r_max)
    }

    /// Returns a copy with `kernel` and `rewards` replaced (same γ, ρ₀, r_max).
    pub fn with_dynamics(&self, kernel: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self::new(kernel, rewards, self.gamma, self.rho0.clone(), self.r_max)?;
        if m.n_states != self.n_states || m.n_actions != self.n_actions {
            return Err(Error::Dimension("replacement dynamics change the MDP size".into()));
        }
        Ok(m)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("parsing MDP document", e))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("MDP serialization cannot fail")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Samples a successor of `(s, a)` using the uniform draw `u ∈ [0,1)`.
    pub fn sample_next(&self, s: usize, a: usize, u: f64) -> usize {
        sample_index(&self.kernel[s][a], u)
    }

    pub fn sample_initial(&self, u: f64) -> usize {
        sample_index(&self.rho0, u)
    }
}

/// Inverse-CDF sampling from a probability vector.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last index with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn random_distribution(n: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x: f64| x / total).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `KL(q ‖ p)` in nats for two full-support distributions given as logits.
pub fn kl_from_logits(q_logits: &[f64], p_logits: &[f64]) -> f64 {
    let lq = log_softmax(q_logits);
    let lp = log_softmax(p_logits);
    let kl: f64 = lq.iter().zip(&lp).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Per-state softmax policy over a fixed action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    logits: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = logits.first().map_or(0, |r| r.len());
        if logits.is_empty() || n_actions == 0 {
            return Err(Error::InvalidArgument("policy needs at least one state and action".into()));
        }
        if logits.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Dimension("ragged logit table".into()));
        }
        if logits.iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("non-finite logit".into()));
        }
        Ok(Self { logits })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            logits: vec![vec![0.0; n_actions]; n_states],
        }
    }

    /// Logits drawn i.i.d. `N(0, scale²)`.
    pub fn random(n_states: usize, n_actions: usize, scale: f64, rng: &mut Rng) -> Self {
        let logits = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        Self { logits }
    }

    pub fn n_states(&self) -> usize {
        self.logits.len()
    }

    pub fn n_actions(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        softmax(&self.logits[s])
    }

    pub fn prob_table(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    /// Row-major flattening `θ[s * n_actions + a]`.
    pub fn flat_params(&self) -> Vec<f64> {
        self.logits.iter().flatten().copied().collect()
    }

    pub fn from_flat(params: &[f64], n_states: usize, n_actions: usize) -> Result<Self> {
        if params.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "{} parameters for a {n_states}x{n_actions} table",
                params.len()
            )));
        }
        Self::new(params.chunks(n_actions).map(|c| c.to_vec()).collect())
    }

    fn check_mdp(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states() != mdp.n_states() || self.n_actions() != mdp.n_actions() {
            return Err(Error::Dimension(format!(
                "policy is {}x{} but MDP is {}x{}",
                self.n_states(),
                self.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Exact value tables of a policy in an MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub advantage: Vec<Vec<f64>>,
    /// `ρ₀ · V`
    pub j: f64,
    /// Normalized discounted state occupancy `d^π` (sums to 1).
    pub occupancy: Vec<f64>,
}

/// Policy-averaged reward vector and transition matrix.
fn induced_chain(mdp: &TabularMdp, probs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = mdp.n_states();
    let mut r_pi = vec![0.0; n];
    let mut p_pi = vec![vec![0.0; n]; n];
    for s in 0..n {
        for (a, &pa) in probs[s].iter().enumerate() {
            r_pi[s] += pa * mdp.reward(s, a);
            for (t, &pt) in mdp.transition(s, a).iter().enumerate() {
                p_pi[s][t] += pa * pt;
            }
        }
    }
    (r_pi, p_pi)
}

/// Solves `V = R_π + γ P_π V` exactly and derives `Q`, `A`, `J` and the
/// discounted occupancy `d = (1-γ) ρ₀ᵀ (I - γ P_π)⁻¹`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<ValueReport> {
    policy.check_mdp(mdp)?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let probs = policy.prob_table();
    let (r_pi, p_pi) = induced_chain(mdp, &probs);

    let system: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| f64::from(u8::from(i == j)) - gamma * p_pi[i][j])
                .collect()
        })
        .collect();
    let v = linalg::solve(system.clone(), r_pi)?;
    let x = linalg::solve(linalg::transpose(&system), mdp.rho0().to_vec())?;
    let occupancy: Vec<f64> = x.into_iter().map(|xi| (1.0 - gamma) * xi).collect();

    let q: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = mdp.transition(s, a).iter().zip(&v).map(|(p, vt)| p * vt).sum();
                    mdp.reward(s, a) + gamma * next
                })
                .collect()
        })
        .collect();
    let advantage = q
        .iter()
        .zip(&v)
        .map(|(qs, vs)| qs.iter().map(|qa| qa - vs).collect())
        .collect();
    let j = mdp.rho0().iter().zip(&v).map(|(r, vs)| r * vs).sum();
    Ok(ValueReport {
        v,
        q,
        advantage,
        j,
        occupancy,
    })
}

/// `sup_s KL(q(·|s) ‖ p(·|s))`, natural log.
pub fn kl_radius(p: &TabularPolicy, q: &TabularPolicy) -> Result<f64> {
    if p.n_states() != q.n_states() || p.n_actions() != q.n_actions() {
        return Err(Error::Dimension("policies have different shapes".into()));
    }
    Ok(p.logits
        .iter()
        .zip(&q.logits)
        .map(|(lp, lq)| kl_from_logits(lq, lp))
        .fold(0.0, f64::max))
}

/// One Monte-Carlo sample of the discounted return from `ρ₀`, using geometric
/// termination: the episode stops with probability `1-γ` after each step and
/// rewards are summed undiscounted, which is an unbiased estimate of `J`.
pub fn sample_return(mdp: &TabularMdp, policy: &TabularPolicy, rng: &mut Rng) -> f64 {
    let probs = policy.prob_table();
    let mut s = mdp.sample_initial(rng.random());
    let mut total = 0.0;
    loop {
        let a = sample_index(&probs[s], rng.random());
        total += mdp.reward(s, a);
        if !rng.random_bool(mdp.gamma()) {
            return total;
        }
        s = mdp.sample_next(s, a, rng.random());
    }
}
