//! Three operations behind the static page in `www/`. Each returns JSON.
//! The plain functions are what the bindings call; they also run natively.

use larpo::config::Config;
use larpo::eval::{crossover_instance, recall_at_n_exact};
use larpo::objectives::{loss_and_dgamma, ranking_probability, ObjectiveKind};
use larpo::pipeline::run;
use larpo::{Error, Result, RewardOracle};
use serde::Serialize;

pub const MAX_CURVE_N: usize = 200;
pub const MAX_ITERATIONS: usize = 8;

#[derive(Debug, Serialize)]
pub struct RecallCurves {
    pub n: Vec<usize>,
    pub curves: Vec<Curve>,
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub temperature: f64,
    pub recall: Vec<f64>,
}

/// Prompt-averaged Recall@N for N = 1..=max_n on the two-prompt crossover
/// instance, one curve per temperature.
pub fn recall_curves(temperatures: &[f64], max_n: usize) -> Result<RecallCurves> {
    if temperatures.is_empty() {
        return Err(Error::InvalidArgument("no temperatures given".into()));
    }
    if max_n == 0 || max_n > MAX_CURVE_N {
        return Err(Error::InvalidArgument(format!("max N must be in 1..={MAX_CURVE_N}")));
    }
    let (world, policy) = crossover_instance()?;
    let oracle = RewardOracle::exact(&world);
    let n: Vec<usize> = (1..=max_n).collect();
    let curves = temperatures
        .iter()
        .map(|&t| {
            let recall = n
                .iter()
                .map(|&k| {
                    let total = (0..world.n_prompts())
                        .map(|x| recall_at_n_exact(&policy, &oracle, x, k, t))
                        .sum::<Result<f64>>()?;
                    Ok(total / world.n_prompts() as f64)
                })
                .collect::<Result<_>>()?;
            Ok(Curve { temperature: t, recall })
        })
        .collect::<Result<_>>()?;
    Ok(RecallCurves { n, curves })
}

#[derive(Debug, Serialize)]
pub struct ObjectiveValue {
    pub objective: String,
    pub loss: f64,
    pub dloss_dgamma: Vec<f64>,
    pub ranking_probability: f64,
}

/// Every objective evaluated on a best-first list of implicit rewards.
/// The pair loss uses the first and last entries.
pub fn ranking_losses(gammas: &[f64]) -> Result<Vec<ObjectiveValue>> {
    if gammas.len() < 2 {
        return Err(Error::InvalidArgument("need at least two rewards".into()));
    }
    if gammas.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument("rewards must be finite".into()));
    }
    ObjectiveKind::ALL
        .into_iter()
        .map(|kind| {
            let list = match kind {
                ObjectiveKind::Pair => vec![gammas[0], gammas[gammas.len() - 1]],
                _ => gammas.to_vec(),
            };
            let (loss, dloss_dgamma) = loss_and_dgamma(kind, &list)?;
            Ok(ObjectiveValue {
                objective: kind.to_string(),
                loss,
                dloss_dgamma,
                ranking_probability: ranking_probability(kind, &list)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TrainingRow {
    pub iteration: usize,
    pub greedy_accuracy: f64,
    pub expected_reward: f64,
    pub recall_at_1: f64,
    pub winrate_vs_sft: f64,
}

/// A default-world run with the chosen objective. Row 0 is the SFT policy.
pub fn train(objective: &str, iterations: usize, seed: u64) -> Result<Vec<TrainingRow>> {
    if iterations > MAX_ITERATIONS {
        return Err(Error::InvalidArgument(format!("at most {MAX_ITERATIONS} iterations")));
    }
    let kind: ObjectiveKind = objective.parse()?;
    let cfg = Config {
        objective: kind,
        iterations,
        seed,
        ..Config::default()
    };
    let record = run(&cfg)?;
    let row = |iteration: usize, e: &larpo::eval::EvalReport| TrainingRow {
        iteration,
        greedy_accuracy: e.greedy_accuracy,
        expected_reward: e.expected_reward,
        recall_at_1: e.recall_at.get(&1).copied().unwrap_or(f64::NAN),
        winrate_vs_sft: e.winrate_vs_ref.unwrap_or(0.5),
    };
    let mut rows = vec![row(0, &record.sft.eval)];
    rows.extend(record.iterations.iter().enumerate().map(|(s, r)| row(s + 1, &r.eval)));
    Ok(rows)
}

pub fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("demo records serialize")
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(e: larpo::Error) -> JsError {
        JsError::new(&e.to_string())
    }

    #[wasm_bindgen(js_name = recallCurves)]
    pub fn recall_curves(temperatures: Vec<f64>, max_n: usize) -> Result<String, JsError> {
        super::recall_curves(&temperatures, max_n).map(|v| super::to_json(&v)).map_err(js)
    }

    #[wasm_bindgen(js_name = rankingLosses)]
    pub fn ranking_losses(gammas: Vec<f64>) -> Result<String, JsError> {
        super::ranking_losses(&gammas).map(|v| super::to_json(&v)).map_err(js)
    }

    #[wasm_bindgen]
    pub fn train(objective: &str, iterations: usize, seed: u32) -> Result<String, JsError> {
        super::train(objective, iterations, u64::from(seed)).map(|v| super::to_json(&v)).map_err(js)
    }
}
