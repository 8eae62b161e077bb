//! Independent oracles shared by the integration tests and the acceptance
//! harness. None of them call the code paths they check.

#![allow(dead_code)]

use rand::Rng as _;
use synthex::mdp::{TabularMdp, TabularPolicy};
use synthex::policy::Decision;
use synthex::replay::{cosine, query_key, Embedder, HashedEmbedder, Transition};
use synthex::rng::Rng;
use synthex::trainer::{surrogate, Sample};

/// Policy evaluation by fixed-point iteration until the sup-norm change is
/// below `tol`.
pub fn value_iteration(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64) -> Vec<f64> {
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    loop {
        let mut next = vec![0.0; n];
        for (s, slot) in next.iter_mut().enumerate() {
            for (a, p) in pi.probs(s).into_iter().enumerate() {
                let ev: f64 = mdp.transition(s, a).iter().zip(&v).map(|(q, x)| q * x).sum();
                *slot += p * (mdp.reward(s, a) + mdp.gamma() * ev);
            }
        }
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff < tol {
            return v;
        }
    }
}

pub fn j_from_values(mdp: &TabularMdp, v: &[f64]) -> f64 {
    mdp.rho0().iter().zip(v).map(|(p, x)| p * x).sum()
}

/// `Â_t = Σ_{l=0}^{T-t-1} (γλ)^l δ_{t+l}` with `δ_t = r_t + γV_{t+1} − V_t`.
pub fn gae_explicit(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let delta: Vec<f64> = (0..t_len).map(|t| rewards[t] + gamma * values[t + 1] - values[t]).collect();
    (0..t_len)
        .map(|t| (0..t_len - t).map(|l| (gamma * lam).powi(l as i32) * delta[t + l]).sum())
        .collect()
}

pub fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Full scan of `entries` (in insertion order) by dense cosine; ties go to
/// the earlier entry.
pub fn brute_force_topk(entries: &[Transition], state: &str, action: &str, k: usize) -> Vec<(usize, f64)> {
    let emb = HashedEmbedder::default();
    let q = emb.embed(&query_key(state, action));
    let mut scored: Vec<(usize, f64)> = entries
        .iter()
        .enumerate()
        .map(|(i, t)| (i, cosine(&q, &emb.embed(&t.key()))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Central finite differences of the surrogate.
pub fn fd_gradient(params: &[f64], old: &[f64], samples: &[Sample], clip: f64, beta: f64, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = surrogate(&p, old, samples, clip, beta);
            p[i] = x - h;
            let down = surrogate(&p, old, samples, clip, beta);
            p[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A random batch over a one-hot tabular parameterization: `n_states`
/// states, 2–4 actions, old parameters `old`, advantages in `[-2, 2]`.
pub fn random_samples(n_states: usize, n_actions: usize, old: &[f64], n: usize, rng: &mut Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let s = rng.random_range(0..n_states);
            let decision = Decision {
                action_features: (0..n_actions).map(|a| vec![(s * n_actions + a, 1.0)]).collect(),
            };
            let logits: Vec<f64> = (0..n_actions).map(|a| old[s * n_actions + a]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            let action = rng.random_range(0..n_actions);
            Sample {
                decision,
                action,
                old_log_prob: logits[action] - lse,
                advantage: rng.random_range(-2.0..2.0),
                key: format!("s{s}"),
            }
        })
        .collect()
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Random buffer contents with deliberate duplicate keys (exact ties).
pub fn random_transitions(n: usize, rng: &mut Rng) -> Vec<Transition> {
    const WORDS: [&str; 10] = ["red", "blue", "mug", "shoes", "search", "click", "page", "item", "buy", "lamp"];
    let mut out: Vec<Transition> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.15) {
            let j = rng.random_range(0..i);
            let mut t = out[j].clone();
            t.episode = i as u64;
            out.push(t);
            continue;
        }
        let phrase = |rng: &mut Rng, len: usize| {
            (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        };
        let (sl, al) = (rng.random_range(1..5), rng.random_range(1..3));
        out.push(Transition {
            task: "t".into(),
            state: phrase(rng, sl),
            action: phrase(rng, al),
            next_state: phrase(rng, 2),
            reward: 0.0,
            reasoning: "r".into(),
            done: false,
            episode: i as u64,
        });
    }
    out
}
