//! End-to-end run: build the world, warm-start with SFT, align, evaluate.

use std::sync::Arc;
use web_time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::numerics::derive_seed;
use crate::policy::BiEncoderPolicy;
use crate::trainer::{larpo_train, sft_phase, IterationRecord};
use crate::world::{generate_world_with, RewardOracle, SyntheticWorld};

const STREAM_INIT: u64 = 11;

/// The world and oracle shared by every seed of a run or study.
#[derive(Clone, Debug)]
pub struct Environment {
    pub world: Arc<SyntheticWorld>,
    pub oracle: RewardOracle,
}

impl Environment {
    pub fn new(cfg: &Config) -> Result<Self> {
        let world = Arc::new(generate_world_with(&cfg.world_params())?);
        let oracle = RewardOracle::new(&world, cfg.oracle_kind(), cfg.correctness_rule())?;
        Ok(Self { world, oracle })
    }

    /// Random initialization followed by the SFT warm start, seeded by `seed`.
    pub fn sft_policy(&self, cfg: &Config, seed: u64) -> Result<(BiEncoderPolicy, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_INIT]));
        let init = BiEncoderPolicy::random(Arc::clone(&self.world), cfg.init_std, &mut rng);
        let out = sft_phase(init, &cfg.sft_config())?;
        Ok((out.policy, out.epoch_losses))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub sft_ms: f64,
    pub iterations_ms: Vec<f64>,
    pub total_ms: f64,
}

/// Everything a run produced. All fields outside `timing` are reproducible
/// bit for bit from `config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: Config,
    pub world_digest: String,
    pub sft: SftSummary,
    pub iterations: Vec<IterationRecord>,
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
    pub timing: Timing,
}

pub fn run(cfg: &Config) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let env = Environment::new(cfg)?;
    let (sft, losses) = env.sft_policy(cfg, cfg.seed)?;
    let train = cfg.train_config();
    let sft_eval = evaluate(&sft, &env.oracle, Some(&sft), &train.eval)?;
    let sft_ms = started.elapsed().as_secs_f64() * 1e3;
    let outcome = larpo_train(sft, &env.oracle, &train)?;
    let final_eval = outcome
        .records
        .last()
        .map(|r| r.eval.clone())
        .unwrap_or_else(|| sft_eval.clone());
    Ok(RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        world_digest: env.world.digest(),
        sft: SftSummary {
            epochs: losses.len(),
            final_loss: losses.last().copied(),
            eval: sft_eval,
        },
        timing: Timing {
            sft_ms,
            iterations_ms: outcome.wall_times_ms,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
        },
        iterations: outcome.records,
        final_eval,
    })
}

pub const METRICS_HEADER: &str =
    "iter,greedy_acc,expected_reward,recall@1,recall@10,recall@50,winrate";

fn metrics_row(iter: usize, e: &EvalReport) -> String {
    let recall = |n: usize| e.recall_at.get(&n).copied().unwrap_or(f64::NAN);
    format!(
        "{iter},{},{},{},{},{},{}",
        e.greedy_accuracy,
        e.expected_reward,
        recall(1),
        recall(10),
        recall(50),
        e.winrate_vs_ref.unwrap_or(f64::NAN),
    )
}

/// Row 0 is the SFT policy; row `s + 1` follows iteration `s`.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    out += &metrics_row(0, &record.sft.eval);
    out.push('\n');
    for r in &record.iterations {
        out += &metrics_row(r.iteration + 1, &r.eval);
        out.push('\n');
    }
    out
}
