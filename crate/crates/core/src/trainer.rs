//! The iterative loop: sample from the behavior policy, rank with the reward
//! oracle, merge candidate lists, descend a ranking loss. Also the
//! supervised InfoNCE warm start.

use std::collections::BTreeSet;
use web_time::Instant;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_temperature, Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSettings};
use crate::mining::{
    make_negative, rank_candidates, select_training_slice_lenient, CandidatePool, HardnessLevel,
    Memorization, PreferenceExample,
};
use crate::numerics::derive_seed;
use crate::objectives::{check_beta, loss_and_grad, sft_loss_and_grad, ObjectiveKind, SftNegatives};
use crate::policy::{BiEncoderPolicy, Policy, PolicySnapshot};
use crate::world::RewardOracle;

// Sub-stream tags for seed derivation.
const STREAM_PROMPTS: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;

/// Which snapshot the log-ratio is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// The behavior snapshot taken at the start of each iteration.
    Behavior,
    /// The policy handed to the trainer, frozen for the whole run.
    Initial,
}

/// Where the rejected responses of each training list come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// The reward-bottom of the sampled candidate list.
    Sampled,
    /// Mined at a fixed hardness against the gold response as the fixed positive.
    Mined(HardnessLevel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Prompts annotated per iteration.
    pub prompts_per_iter: usize,
    /// Responses sampled per prompt per iteration.
    pub k: usize,
    /// One sampling temperature per iteration, or a single value for all.
    pub temperatures: Vec<f64>,
    pub lr: f64,
    pub epochs_per_iter: usize,
    pub beta: f64,
    pub objective: ObjectiveKind,
    pub n_pos: usize,
    pub n_neg: usize,
    pub memorization: Memorization,
    pub negatives: NegativeSource,
    pub t_hi: f64,
    pub t_lo: f64,
    pub ref_mode: RefMode,
    pub seed: u64,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let objective = ObjectiveKind::Contrastive;
        let (n_pos, n_neg) = objective.default_slice();
        Self {
            iterations: 3,
            prompts_per_iter: 64,
            k: 10,
            temperatures: vec![1.0],
            lr: 20.0,
            epochs_per_iter: 2,
            beta: 1.0,
            objective,
            n_pos,
            n_neg,
            memorization: Memorization::CurrentOnly,
            negatives: NegativeSource::Sampled,
            t_hi: 2.0,
            t_lo: 1.0,
            ref_mode: RefMode::Behavior,
            seed: 0,
            eval: EvalSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if self.prompts_per_iter < 1 {
            return bad("prompts_per_iter must be >= 1");
        }
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.temperatures.len() != 1 && self.temperatures.len() != self.iterations {
            return bad("temperatures must hold one value or one per iteration");
        }
        for &t in &self.temperatures {
            check_temperature(t)?;
        }
        check_temperature(self.t_hi)?;
        check_temperature(self.t_lo)?;
        if self.t_lo >= self.t_hi {
            return bad("t_lo must be below t_hi");
        }
        check_temperature(self.eval.temperature)?;
        check_beta(self.beta)?;
        if self.n_pos < 1 || self.n_neg < 1 {
            return bad("n_pos and n_neg must be >= 1");
        }
        if self.objective == ObjectiveKind::Pair && (self.n_pos, self.n_neg) != (1, 1) {
            return bad("the pair objective takes exactly one positive and one negative");
        }
        if self.objective == ObjectiveKind::Contrastive && self.n_pos != 1 {
            return bad("the contrastive objective takes exactly one positive");
        }
        Ok(())
    }

    pub fn temperature(&self, iteration: usize) -> f64 {
        if self.temperatures.len() == 1 {
            self.temperatures[0]
        } else {
            self.temperatures[iteration]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub temperature: f64,
    pub prompts_annotated: usize,
    /// Preference examples trained on this iteration.
    pub dataset_size: usize,
    /// Sum over annotated prompts of the merged candidate-list length.
    pub candidates: usize,
    /// Lists shorter than the requested slice that were trained on a smaller one.
    pub shortened: usize,
    /// Mean fraction of repeated ids among each prompt's fresh samples.
    pub duplicate_rate: f64,
    /// Mean training loss at the start of each epoch.
    pub epoch_losses: Vec<f64>,
    pub grad_updates: usize,
    pub oracle_calls: usize,
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: BiEncoderPolicy,
    pub records: Vec<IterationRecord>,
    /// Wall-clock time per iteration; kept apart from the reproducible records.
    pub wall_times_ms: Vec<f64>,
}

/// `W ← W − lr·G`.
pub fn update_step(policy: &mut BiEncoderPolicy, grad: &Array2<f64>, lr: f64) -> Result<()> {
    let w = policy.weights_mut();
    if w.dim() != grad.dim() {
        return Err(Error::ShapeMismatch {
            expected: w.dim(),
            got: grad.dim(),
        });
    }
    w.scaled_add(-lr, grad);
    Ok(())
}

fn check_finite(policy: &BiEncoderPolicy, loss: f64, phase: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("{phase}: loss became {loss}")));
    }
    if policy.weights().iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("{phase}: non-finite weight")));
    }
    Ok(())
}

/// Mean loss and gradient over `items`, reduced in input order.
fn mean_loss_and_grad<T: Sync>(
    items: &[T],
    dim: usize,
    f: impl Fn(&T) -> Result<(f64, Array2<f64>)> + Sync,
) -> Result<(f64, Array2<f64>)> {
    let parts: Vec<(f64, Array2<f64>)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((dim, dim));
    for (l, g) in &parts {
        loss += l;
        grad += g;
    }
    let n = items.len().max(1) as f64;
    Ok((loss / n, grad / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftMode {
    /// Full-corpus softmax.
    Exact,
    /// Softmax over the gold, every other prompt's gold (in-batch), and the
    /// current policy's `hard` top-scoring wrong responses.
    Estimator { hard: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub mode: SftMode,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            mode: SftMode::Exact,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub policy: BiEncoderPolicy,
    /// Full-batch loss before each epoch's update.
    pub epoch_losses: Vec<f64>,
}

fn sft_negatives(policy: &BiEncoderPolicy, x: usize, mode: SftMode) -> Result<SftNegatives> {
    match mode {
        SftMode::Exact => Ok(SftNegatives::Exact),
        SftMode::Estimator { hard } => {
            let world = policy.world();
            let gold = world.gold(x);
            let mut negs: BTreeSet<usize> = (0..world.n_prompts())
                .map(|p| world.gold(p))
                .filter(|&y| y != gold)
                .collect();
            if hard > 0 {
                let ranked = policy.top_k(x, (hard + 1).min(world.n_responses()))?;
                negs.extend(ranked.into_iter().filter(|&y| y != gold).take(hard));
            }
            if negs.is_empty() {
                return Err(Error::InvalidArgument(
                    "estimator SFT found no negatives; use the exact mode".into(),
                ));
            }
            Ok(SftNegatives::Estimator(negs.into_iter().collect()))
        }
    }
}

/// Full-batch gradient descent on the InfoNCE objective toward every prompt's
/// gold response.
pub fn sft_phase(mut policy: BiEncoderPolicy, cfg: &SftConfig) -> Result<SftOutcome> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument("sft lr must be finite and >= 0".into()));
    }
    let prompts: Vec<usize> = (0..policy.world().n_prompts()).collect();
    let dim = policy.world().embed_dim();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (loss, grad) = mean_loss_and_grad(&prompts, dim, |&x| {
            let negs = sft_negatives(&policy, x, cfg.mode)?;
            sft_loss_and_grad(&policy, x, policy.world().gold(x), &negs)
        })?;
        check_finite(&policy, loss, "sft")?;
        update_step(&mut policy, &grad, cfg.lr)?;
        check_finite(&policy, loss, "sft")?;
        epoch_losses.push(loss);
    }
    Ok(SftOutcome {
        policy,
        epoch_losses,
    })
}

struct Annotation {
    example: Option<PreferenceExample>,
    candidates: usize,
    shortened: bool,
    duplicate_rate: f64,
    oracle_calls: usize,
}

fn annotate_prompt(
    behavior: &PolicySnapshot,
    oracle: &RewardOracle,
    pool: &mut CandidatePool,
    x: usize,
    s: usize,
    cfg: &TrainConfig,
) -> Result<Annotation> {
    let t = cfg.temperature(s);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SAMPLES, s as u64, x as u64]));
    let fresh = behavior.sample(x, t, cfg.k, &mut rng)?;
    let distinct = fresh.iter().collect::<BTreeSet<_>>().len();
    let duplicate_rate = 1.0 - distinct as f64 / fresh.len() as f64;

    let candidates = pool.build_candidates(s, &fresh)?;
    let mut oracle_calls = candidates.len();
    let ranked = match rank_candidates(oracle, x, &candidates) {
        Ok(rl) => Some(rl),
        Err(Error::WrongArity { .. }) => None,
        Err(e) => return Err(e),
    };

    let (list, n_pos) = match cfg.negatives {
        NegativeSource::Sampled => (ranked, cfg.n_pos),
        NegativeSource::Mined(level) => {
            let positive = behavior.world().gold(x);
            let mut neg_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_NEGATIVES, s as u64, x as u64]));
            let mut ids = vec![positive];
            for _ in 0..cfg.n_neg {
                let y = make_negative(
                    behavior.world(),
                    behavior,
                    oracle,
                    x,
                    level,
                    cfg.t_hi,
                    cfg.t_lo,
                    &mut neg_rng,
                )?;
                if !ids.contains(&y) {
                    ids.push(y);
                }
            }
            oracle_calls += ids.len() - 1;
            let rl = match rank_candidates(oracle, x, &ids) {
                Ok(rl) => Some(rl),
                Err(Error::WrongArity { .. }) => None,
                Err(e) => return Err(e),
            };
            (rl, 1)
        }
    };

    let example = list
        .as_ref()
        .and_then(|rl| select_training_slice_lenient(rl, n_pos, cfg.n_neg));
    let shortened = example
        .as_ref()
        .is_some_and(|e| (e.n_pos, e.n_neg) != (n_pos, cfg.n_neg));
    Ok(Annotation {
        example,
        candidates: candidates.len(),
        shortened,
        duplicate_rate,
        oracle_calls,
    })
}

/// Runs `cfg.iterations` rounds of sample → rank → merge → optimize, starting
/// from `policy`. Winrates in the records are against `policy` as passed in.
pub fn larpo_train(
    policy: BiEncoderPolicy,
    oracle: &RewardOracle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut policy = policy;
    let initial = policy.snapshot();
    let world = policy.shared_world().clone();
    let n_prompts = world.n_prompts();
    let dim = world.embed_dim();
    let mut pools: Vec<CandidatePool> = (0..n_prompts)
        .map(|x| CandidatePool::new(x, cfg.memorization))
        .collect();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut wall_times_ms = Vec::with_capacity(cfg.iterations);

    for s in 0..cfg.iterations {
        let started = Instant::now();
        let behavior = policy.snapshot();
        let prompts: Vec<usize> = if cfg.prompts_per_iter >= n_prompts {
            (0..n_prompts).collect()
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_PROMPTS, s as u64]));
            let mut chosen = index::sample(&mut rng, n_prompts, cfg.prompts_per_iter).into_vec();
            chosen.sort_unstable();
            chosen
        };

        let selected: BTreeSet<usize> = prompts.iter().copied().collect();
        let annotations: Vec<Annotation> = pools
            .par_iter_mut()
            .enumerate()
            .filter(|(x, _)| selected.contains(x))
            .map(|(x, pool)| annotate_prompt(&behavior, oracle, pool, x, s, cfg))
            .collect::<Result<_>>()?;

        let dataset: Vec<PreferenceExample> =
            annotations.iter().filter_map(|a| a.example.clone()).collect();
        if dataset.is_empty() {
            return Err(Error::EmptyDataset(s));
        }

        let mut epoch_losses = Vec::with_capacity(cfg.epochs_per_iter);
        for _ in 0..cfg.epochs_per_iter {
            let (loss, grad) = mean_loss_and_grad(&dataset, dim, |ex| match cfg.ref_mode {
                RefMode::Behavior => {
                    loss_and_grad(cfg.objective, &policy, &behavior, ex.prompt, ex.ids(), cfg.beta)
                }
                RefMode::Initial => {
                    loss_and_grad(cfg.objective, &policy, &initial, ex.prompt, ex.ids(), cfg.beta)
                }
            })?;
            check_finite(&policy, loss, "preference optimization")?;
            update_step(&mut policy, &grad, cfg.lr)?;
            check_finite(&policy, loss, "preference optimization")?;
            epoch_losses.push(loss);
        }

        let eval = evaluate(&policy, oracle, Some(&initial), &cfg.eval)?;
        let n_ann = annotations.len();
        records.push(IterationRecord {
            iteration: s,
            temperature: cfg.temperature(s),
            prompts_annotated: n_ann,
            dataset_size: dataset.len(),
            candidates: annotations.iter().map(|a| a.candidates).sum(),
            shortened: annotations.iter().filter(|a| a.shortened).count(),
            duplicate_rate: annotations.iter().map(|a| a.duplicate_rate).sum::<f64>() / n_ann as f64,
            epoch_losses,
            grad_updates: cfg.epochs_per_iter,
            oracle_calls: annotations.iter().map(|a| a.oracle_calls).sum(),
            eval,
        });
        wall_times_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TrainOutcome {
        policy,
        records,
        wall_times_ms,
    })
}
