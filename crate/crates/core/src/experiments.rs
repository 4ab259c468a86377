//! Seeded ablation studies with directional trend assertions.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{expected_reward, winrate};
use crate::mining::{HardnessLevel, Memorization};
use crate::objectives::ObjectiveKind;
use crate::pipeline::Environment;
use crate::policy::BiEncoderPolicy;
use crate::trainer::{larpo_train, NegativeSource, TrainConfig};

/// Trend suites need at least this many seeds before asserting anything.
pub const MIN_TREND_SEEDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Objective,
    Hardness,
    Temperature,
    ListSize,
    Memorization,
}

impl Study {
    pub const ALL: [Study; 5] = [
        Study::Objective,
        Study::Hardness,
        Study::Temperature,
        Study::ListSize,
        Study::Memorization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Objective => "objective",
            Study::Hardness => "hardness",
            Study::Temperature => "temperature",
            Study::ListSize => "listsize",
            Study::Memorization => "memorization",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown study {s:?}")))
    }
}

/// One point on a study axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Objective(ObjectiveKind),
    Hardness(HardnessLevel),
    Memorization(Memorization),
    Temperature(f64),
    ListSize(usize),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Objective(k) => write!(f, "{k}"),
            AxisValue::Hardness(h) => write!(f, "{h}"),
            AxisValue::Memorization(m) => write!(f, "{m}"),
            AxisValue::Temperature(t) => write!(f, "{t}"),
            AxisValue::ListSize(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub study: Study,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    pub base: Config,
}

impl SweepSpec {
    /// The study's standard axis, with seeds and grids taken from `base`.
    pub fn new(study: Study, base: Config) -> Self {
        let values = match study {
            Study::Objective => ObjectiveKind::ALL.map(AxisValue::Objective).to_vec(),
            Study::Hardness => HardnessLevel::ALL.map(AxisValue::Hardness).to_vec(),
            Study::Memorization => Memorization::ALL.map(AxisValue::Memorization).to_vec(),
            Study::Temperature => base.temperature_grid.iter().map(|&t| AxisValue::Temperature(t)).collect(),
            Study::ListSize => base.list_sizes.iter().map(|&s| AxisValue::ListSize(s)).collect(),
        };
        Self {
            study,
            values,
            seeds: base.study_seed_list(),
            base,
        }
    }

    fn arm_config(&self, value: &AxisValue, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.base.train_config();
        cfg.seed = seed;
        let pair = |cfg: &mut TrainConfig| {
            cfg.objective = ObjectiveKind::Pair;
            (cfg.n_pos, cfg.n_neg) = (1, 1);
        };
        match (self.study, value) {
            (Study::Objective, AxisValue::Objective(kind)) => {
                cfg.objective = *kind;
                (cfg.n_pos, cfg.n_neg) = kind.default_slice();
                cfg.negatives = NegativeSource::Sampled;
            }
            (Study::Hardness, AxisValue::Hardness(level)) => {
                pair(&mut cfg);
                cfg.negatives = NegativeSource::Mined(*level);
            }
            (Study::Memorization, AxisValue::Memorization(m)) => {
                pair(&mut cfg);
                cfg.negatives = NegativeSource::Sampled;
                cfg.memorization = *m;
            }
            (Study::Temperature, AxisValue::Temperature(t)) => {
                pair(&mut cfg);
                cfg.negatives = NegativeSource::Sampled;
                cfg.temperatures = vec![*t];
            }
            (Study::ListSize, AxisValue::ListSize(size)) => {
                cfg.objective = ObjectiveKind::Contrastive;
                cfg.negatives = NegativeSource::Sampled;
                cfg.k = *size;
                (cfg.n_pos, cfg.n_neg) = (1, size.saturating_sub(1));
            }
            (study, v) => {
                return Err(Error::InvalidArgument(format!("value {v} does not belong to the {study} axis")))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Final metrics of one (axis value, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub expected_reward: f64,
    pub winrate_vs_sft: f64,
    pub grad_updates: usize,
    pub oracle_calls: usize,
    /// Mean over iterations of the fresh-sample duplicate rate.
    pub duplicate_rate: f64,
    /// Training examples per iteration.
    pub dataset_sizes: Vec<usize>,
    /// Merged candidate-list lengths per iteration, summed over prompts.
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub value: AxisValue,
    pub mean_expected_reward: f64,
    pub std_expected_reward: f64,
    pub mean_winrate: f64,
    pub std_winrate: f64,
    pub mean_duplicate_rate: f64,
    pub seeds: Vec<SeedOutcome>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendStatus {
    Pass,
    Fail,
    /// Every arm has the same mean, so no direction can be read.
    Tie,
    InsufficientSeeds,
    /// The axis is too short for the assertion to mean anything.
    NotAsserted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub study: Study,
    pub status: TrendStatus,
    /// Human-readable statement of what was compared.
    pub diagnostic: String,
    /// For each adjacent pair of compared arms, how many seeds agree with
    /// the asserted direction.
    pub sign_counts: Vec<SignCount>,
    pub arms: Vec<ArmResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignCount {
    pub lower: String,
    pub higher: String,
    pub agree: usize,
    pub of: usize,
}

impl TrendResult {
    pub fn passed(&self) -> bool {
        self.status == TrendStatus::Pass
    }

    pub fn means(&self) -> Vec<f64> {
        self.arms.iter().map(|a| a.mean_expected_reward).collect()
    }

    /// One row per (arm, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "value,seed,expected_reward,winrate_vs_sft,grad_updates,oracle_calls,duplicate_rate,final_dataset_size,final_candidates\n",
        );
        for arm in &self.arms {
            for s in &arm.seeds {
                out += &format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    arm.value,
                    s.seed,
                    s.expected_reward,
                    s.winrate_vs_sft,
                    s.grad_updates,
                    s.oracle_calls,
                    s.duplicate_rate,
                    s.dataset_sizes.last().copied().unwrap_or(0),
                    s.candidates.last().copied().unwrap_or(0),
                );
            }
        }
        out
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn run_arm(
    env: &Environment,
    spec: &SweepSpec,
    value: &AxisValue,
    seed: u64,
    base: &BiEncoderPolicy,
) -> Result<SeedOutcome> {
    let cfg = spec.arm_config(value, seed)?;
    let out = larpo_train(base.clone(), &env.oracle, &cfg)?;
    let t = cfg.eval.temperature;
    Ok(SeedOutcome {
        seed,
        expected_reward: expected_reward(&out.policy, &env.oracle, t)?,
        winrate_vs_sft: winrate(&out.policy, base, &env.oracle, t)?,
        grad_updates: out.records.iter().map(|r| r.grad_updates).sum(),
        oracle_calls: out.records.iter().map(|r| r.oracle_calls).sum(),
        duplicate_rate: out.records.iter().map(|r| r.duplicate_rate).sum::<f64>()
            / out.records.len() as f64,
        dataset_sizes: out.records.iter().map(|r| r.dataset_size).collect(),
        candidates: out.records.iter().map(|r| r.candidates).collect(),
    })
}

/// Trains every (value, seed) pair from the seed's SFT policy and asserts the
/// study's trend on the per-value means.
pub fn run_study(spec: &SweepSpec) -> Result<TrendResult> {
    if spec.values.is_empty() {
        return Err(Error::InvalidArgument("study axis has no values".into()));
    }
    spec.base.validate()?;
    let env = Environment::new(&spec.base)?;
    let bases: Vec<BiEncoderPolicy> = spec
        .seeds
        .par_iter()
        .map(|&seed| env.sft_policy(&spec.base, seed).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.seeds.len()).map(move |s| (v, s)))
        .collect();
    let outcomes: Vec<SeedOutcome> = jobs
        .par_iter()
        .map(|&(v, s)| run_arm(&env, spec, &spec.values[v], spec.seeds[s], &bases[s]))
        .collect::<Result<_>>()?;

    let n_seeds = spec.seeds.len();
    let arms: Vec<ArmResult> = spec
        .values
        .iter()
        .zip(outcomes.chunks(n_seeds.max(1)))
        .map(|(value, seeds)| {
            let er: Vec<f64> = seeds.iter().map(|s| s.expected_reward).collect();
            let wr: Vec<f64> = seeds.iter().map(|s| s.winrate_vs_sft).collect();
            let (mean_er, std_er) = mean_std(&er);
            let (mean_wr, std_wr) = mean_std(&wr);
            ArmResult {
                value: value.clone(),
                mean_expected_reward: mean_er,
                std_expected_reward: std_er,
                mean_winrate: mean_wr,
                std_winrate: std_wr,
                mean_duplicate_rate: seeds.iter().map(|s| s.duplicate_rate).sum::<f64>()
                    / seeds.len() as f64,
                seeds: seeds.to_vec(),
            }
        })
        .collect();
    Ok(assess(spec.study, arms, n_seeds))
}

fn sign_count(lower: &ArmResult, higher: &ArmResult) -> SignCount {
    let agree = lower
        .seeds
        .iter()
        .zip(&higher.seeds)
        .filter(|(l, h)| h.expected_reward >= l.expected_reward)
        .count();
    SignCount {
        lower: lower.value.to_string(),
        higher: higher.value.to_string(),
        agree,
        of: lower.seeds.len(),
    }
}

fn chain_counts(arms: &[&ArmResult]) -> Vec<SignCount> {
    arms.windows(2).map(|w| sign_count(w[0], w[1])).collect()
}

fn nondecreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0])
}

fn fmt_means(arms: &[&ArmResult]) -> String {
    arms.iter()
        .map(|a| format!("{}={:.6}", a.value, a.mean_expected_reward))
        .collect::<Vec<_>>()
        .join(" <= ")
}

/// Applies the study's trend assertion to already-aggregated arms.
pub fn assess(study: Study, arms: Vec<ArmResult>, n_seeds: usize) -> TrendResult {
    let means: Vec<f64> = arms.iter().map(|a| a.mean_expected_reward).collect();
    let all_equal = means.windows(2).all(|w| w[0] == w[1]);
    let (status, diagnostic, sign_counts) = {
        let by_value = |want: &AxisValue| arms.iter().find(|a| &a.value == want);
        match study {
            Study::Objective => {
                let get = |k| by_value(&AxisValue::Objective(k));
                match (
                    get(ObjectiveKind::Pair),
                    get(ObjectiveKind::Contrastive),
                    get(ObjectiveKind::LambdaRank),
                    get(ObjectiveKind::ListMle),
                ) {
                    (Some(p), Some(c), Some(l), Some(m)) => {
                        let best = if l.mean_expected_reward >= m.mean_expected_reward { l } else { m };
                        let chain = [p, c, best];
                        let ok = nondecreasing(&chain.map(|a| a.mean_expected_reward));
                        (ok, format!("pair <= contrastive <= best listwise: {}", fmt_means(&chain)), chain_counts(&chain))
                    }
                    _ => return not_asserted(study, arms, "objective axis lacks one of the four objectives"),
                }
            }
            Study::Hardness | Study::Memorization => {
                let chain: Vec<&ArmResult> = arms.iter().collect();
                let ms: Vec<f64> = chain.iter().map(|a| a.mean_expected_reward).collect();
                let mut ok = nondecreasing(&ms);
                let mut diag = format!("nondecreasing along the axis: {}", fmt_means(&chain));
                if study == Study::Hardness && ms.len() >= 2 {
                    let gap = ms[ms.len() - 1] - ms[0];
                    ok &= gap > 0.0;
                    diag += &format!("; last - first = {gap:.6}");
                }
                (ok, diag, chain_counts(&chain))
            }
            Study::Temperature => {
                if arms.len() < 3 {
                    return not_asserted(study, arms, "temperature grid needs at least three points");
                }
                let first = &arms[0];
                let last = &arms[arms.len() - 1];
                let peak = arms[1..arms.len() - 1]
                    .iter()
                    .max_by(|a, b| a.mean_expected_reward.total_cmp(&b.mean_expected_reward))
                    .expect("interior is nonempty");
                let ok = peak.mean_expected_reward > first.mean_expected_reward
                    && peak.mean_expected_reward > last.mean_expected_reward;
                let diag = format!(
                    "interior maximum at t={} ({:.6}) above t={} ({:.6}) and t={} ({:.6}); duplicate rate at t={} is {:.4}",
                    peak.value,
                    peak.mean_expected_reward,
                    first.value,
                    first.mean_expected_reward,
                    last.value,
                    last.mean_expected_reward,
                    first.value,
                    first.mean_duplicate_rate,
                );
                (ok, diag, vec![sign_count(first, peak), sign_count(last, peak)])
            }
            Study::ListSize => {
                let chain: Vec<&ArmResult> = arms.iter().collect();
                let ms: Vec<f64> = chain.iter().map(|a| a.mean_expected_reward).collect();
                let mut ok = nondecreasing(&ms);
                let mut diag = format!("nondecreasing in size: {}", fmt_means(&chain));
                if ms.len() >= 3 {
                    let first_gain = ms[1] - ms[0];
                    let last_gain = ms[ms.len() - 1] - ms[ms.len() - 2];
                    ok &= last_gain <= first_gain;
                    diag += &format!("; last gain {last_gain:.6} <= first gain {first_gain:.6}");
                }
                (ok, diag, chain_counts(&chain))
            }
        }
    };
    let status = if arms.len() < 2 {
        TrendStatus::NotAsserted
    } else if n_seeds < MIN_TREND_SEEDS {
        TrendStatus::InsufficientSeeds
    } else if all_equal {
        TrendStatus::Tie
    } else if status {
        TrendStatus::Pass
    } else {
        TrendStatus::Fail
    };
    let diagnostic = match status {
        TrendStatus::Tie => format!("tie: every arm has mean {:.6}", means[0]),
        TrendStatus::InsufficientSeeds => {
            format!("insufficient seeds ({n_seeds} < {MIN_TREND_SEEDS}); {diagnostic}")
        }
        _ => diagnostic,
    };
    TrendResult {
        study,
        status,
        diagnostic,
        sign_counts,
        arms,
    }
}

fn not_asserted(study: Study, arms: Vec<ArmResult>, why: &str) -> TrendResult {
    TrendResult {
        study,
        status: TrendStatus::NotAsserted,
        diagnostic: why.to_string(),
        sign_counts: Vec::new(),
        arms,
    }
}
