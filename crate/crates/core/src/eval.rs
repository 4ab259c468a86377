//! Retrieval-style evaluation of a policy: Recall@N (Pass@N), greedy
//! accuracy, expected reward and pairwise winrate, all by exact enumeration
//! over the corpus except the Monte-Carlo recall estimator.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{check_temperature, Error, Result};
use crate::policy::{BiEncoderPolicy, CategoricalSampler, Policy};
use crate::world::{PromptEntry, ResponseEntry, RewardOracle, SyntheticWorld};

/// Probability mass `π_t` puts on correct responses for prompt `x`.
pub fn correct_mass(policy: &impl Policy, oracle: &RewardOracle, x: usize, t: f64) -> Result<f64> {
    let probs = policy.probs(x, t)?;
    let mask = oracle.correct_mask(x)?;
    Ok(probs.iter().zip(&mask).filter(|(_, &c)| c).map(|(p, _)| p).sum())
}

/// `1 − (1 − p)^N` for `N` i.i.d. draws.
pub fn recall_from_mass(p: f64, n: usize) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    -((n as f64) * (-p).ln_1p()).exp_m1()
}

pub fn recall_at_n_exact(
    policy: &impl Policy,
    oracle: &RewardOracle,
    x: usize,
    n: usize,
    t: f64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be >= 1".into()));
    }
    Ok(recall_from_mass(correct_mass(policy, oracle, x, t)?, n))
}

/// Fraction of `trials` batches of `N` i.i.d. samples holding a correct response.
pub fn recall_at_n_mc<R: Rng + ?Sized>(
    policy: &impl Policy,
    oracle: &RewardOracle,
    x: usize,
    n: usize,
    t: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("N and trials must be >= 1".into()));
    }
    let sampler = CategoricalSampler::new(&policy.probs(x, t)?);
    let mask = oracle.correct_mask(x)?;
    let hits = (0..trials)
        .filter(|_| (0..n).any(|_| mask[sampler.draw(rng)]))
        .count();
    Ok(hits as f64 / trials as f64)
}

/// Monte-Carlo Recall@N when the `N` responses are drawn without replacement
/// (Gumbel top-N).
pub fn recall_at_n_mc_without_replacement<R: Rng + ?Sized>(
    policy: &impl Policy,
    oracle: &RewardOracle,
    x: usize,
    n: usize,
    t: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("N and trials must be >= 1".into()));
    }
    let lp = policy.log_probs(x, t)?;
    let mask = oracle.correct_mask(x)?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let n = n.min(lp.len());
    let mut hits = 0;
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(lp.len());
    for _ in 0..trials {
        keys.clear();
        keys.extend(lp.iter().enumerate().map(|(y, l)| (l + gumbel.sample(rng), y)));
        keys.select_nth_unstable_by(n - 1, |a, b| b.0.total_cmp(&a.0));
        if keys[..n].iter().any(|&(_, y)| mask[y]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

pub fn greedy_accuracy(policy: &impl Policy, oracle: &RewardOracle) -> Result<f64> {
    let n = policy.world().n_prompts();
    let mut correct = 0usize;
    for x in 0..n {
        let best = policy.top_k(x, 1)?[0];
        if oracle.is_correct(x, best)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// `E_x Σ_y π_t(y | x) r(x, y)`.
pub fn expected_reward(policy: &impl Policy, oracle: &RewardOracle, t: f64) -> Result<f64> {
    check_temperature(t)?;
    let n = policy.world().n_prompts();
    let mut total = 0.0;
    for x in 0..n {
        total += prompt_expected_reward(policy, oracle, x, t)?;
    }
    Ok(total / n as f64)
}

pub fn prompt_expected_reward(
    policy: &impl Policy,
    oracle: &RewardOracle,
    x: usize,
    t: f64,
) -> Result<f64> {
    let probs = policy.probs(x, t)?;
    let rewards = oracle.rewards(x)?;
    Ok(probs.iter().zip(rewards).map(|(p, r)| p * r).sum())
}

/// `P(r(y) > r(y')) − P(r(y) < r(y'))` for one prompt, `y ~ a`, `y' ~ b`.
///
/// Swapping `a` and `b` negates every summand, so the result is exactly
/// antisymmetric and exactly zero for `a == b`.
pub fn prompt_margin(a: &[f64], b: &[f64], rewards: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&i, &j| rewards[i].total_cmp(&rewards[j]));
    // Walk tie groups in ascending reward, carrying each side's mass strictly below.
    let (mut below_a, mut below_b) = (0.0, 0.0);
    let mut margin = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut mass_a, mut mass_b) = (0.0, 0.0);
        while j < order.len() && rewards[order[j]] == rewards[order[i]] {
            mass_a += a[order[j]];
            mass_b += b[order[j]];
            j += 1;
        }
        margin += mass_a * below_b - mass_b * below_a;
        below_a += mass_a;
        below_b += mass_b;
        i = j;
    }
    margin
}

/// `P(r(y) > r(y')) + ½ P(r(y) = r(y'))` for one prompt, `y ~ a`, `y' ~ b`,
/// with `a` and `b` normalized.
pub fn prompt_winrate(a: &[f64], b: &[f64], rewards: &[f64]) -> f64 {
    0.5 + 0.5 * prompt_margin(a, b, rewards)
}

/// Mean over prompts of [`prompt_winrate`] between `π_a` and `π_b` at `t`.
pub fn winrate(
    a: &impl Policy,
    b: &impl Policy,
    oracle: &RewardOracle,
    t: f64,
) -> Result<f64> {
    check_temperature(t)?;
    let n = a.world().n_prompts();
    let mut total = 0.0;
    for x in 0..n {
        total += prompt_margin(&a.probs(x, t)?, &b.probs(x, t)?, oracle.rewards(x)?);
    }
    Ok(0.5 + 0.5 * (total / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub temperature: f64,
    pub recall_ns: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            recall_ns: vec![1, 10, 50],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub greedy_accuracy: f64,
    pub expected_reward: f64,
    pub temperature: f64,
    /// Prompt-averaged Recall@N at `temperature`.
    pub recall_at: BTreeMap<usize, f64>,
    pub winrate_vs_ref: Option<f64>,
}

pub fn evaluate<P: Policy, Q: Policy>(
    policy: &P,
    oracle: &RewardOracle,
    reference: Option<&Q>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let t = settings.temperature;
    check_temperature(t)?;
    let n = policy.world().n_prompts();
    let masses: Vec<f64> = (0..n)
        .map(|x| correct_mass(policy, oracle, x, t))
        .collect::<Result<_>>()?;
    let mut recall_at = BTreeMap::new();
    for &k in &settings.recall_ns {
        if k == 0 {
            return Err(Error::InvalidArgument("recall N must be >= 1".into()));
        }
        let mean = masses.iter().map(|&p| recall_from_mass(p, k)).sum::<f64>() / n as f64;
        recall_at.insert(k, mean);
    }
    Ok(EvalReport {
        greedy_accuracy: greedy_accuracy(policy, oracle)?,
        expected_reward: expected_reward(policy, oracle, t)?,
        temperature: t,
        recall_at,
        winrate_vs_ref: reference.map(|r| winrate(policy, r, oracle, t)).transpose()?,
    })
}

/// Two-prompt instance on which low temperature wins Recall@1 and high
/// temperature wins Recall@50 (prompt-averaged, exact-gold correctness).
///
/// Prompt 0's argmax is its gold, so cooling concentrates mass on it.
/// Prompt 1's argmax is a wrong distractor, so only heating reaches its gold.
pub fn crossover_instance() -> Result<(std::sync::Arc<SyntheticWorld>, BiEncoderPolicy)> {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|c| c / n).to_vec()
    };
    let mut embeddings = vec![unit([1.0, 0.0, 0.0]), unit([0.0, 1.0, 0.0])];
    for k in 0..8 {
        embeddings.push(unit([0.0, 0.01 * k as f64, 1.0]));
    }
    let responses = embeddings
        .into_iter()
        .enumerate()
        .map(|(id, embedding)| ResponseEntry { id, embedding })
        .collect();
    let prompts = vec![
        PromptEntry { id: 0, features: vec![1.0, 0.0, 0.5], gold: 0 },
        PromptEntry { id: 1, features: vec![0.0, 0.3, 1.0], gold: 1 },
    ];
    let world = std::sync::Arc::new(SyntheticWorld::from_parts(3, 0, responses, prompts, vec![vec![0, 1]])?);
    let mut policy = BiEncoderPolicy::identity(std::sync::Arc::clone(&world));
    policy.weights_mut().mapv_inplace(|v| v * 4.0);
    Ok((world, policy))
}

/// Low and high temperatures of [`crossover_instance`].
pub const CROSSOVER_TEMPERATURES: (f64, f64) = (0.5, 2.0);
