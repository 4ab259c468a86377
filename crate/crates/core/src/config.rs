//! Flat key-value run configuration, parsed from TOML.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::mining::{HardnessLevel, Memorization};
use crate::objectives::ObjectiveKind;
use crate::trainer::{NegativeSource, RefMode, SftConfig, SftMode, TrainConfig};
use crate::world::{CorrectnessRule, OracleKind, WorldParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleName {
    DotToGold,
    NoisyDotToGold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectnessName {
    ExactGold,
    RewardThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftModeName {
    Exact,
    Estimator,
}

/// Every knob of a run or study. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub embed_dim: usize,
    pub n_clusters: usize,
    pub world_seed: u64,
    pub cluster_offset: f64,
    pub feature_noise: f64,

    pub oracle: OracleName,
    pub oracle_noise_std: f64,
    pub oracle_noise_seed: u64,
    pub correctness: CorrectnessName,
    pub correctness_threshold: f64,

    pub init_std: f64,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_mode: SftModeName,
    pub sft_hard_negatives: usize,

    pub iterations: usize,
    pub prompts_per_iter: usize,
    pub k: usize,
    pub temperatures: Vec<f64>,
    pub lr: f64,
    pub epochs_per_iter: usize,
    pub beta: f64,
    pub objective: ObjectiveKind,
    /// Defaults to the objective's standard slice when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_pos: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_neg: Option<usize>,
    pub memorization: Memorization,
    /// When present, negatives are mined at this level instead of taken
    /// from the bottom of the sampled list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hardness_level: Option<HardnessLevel>,
    pub t_hi: f64,
    pub t_lo: f64,
    pub ref_mode: RefMode,
    pub seed: u64,

    pub eval_temperature: f64,

    pub study_seeds: usize,
    pub temperature_grid: Vec<f64>,
    pub list_sizes: Vec<usize>,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sft = SftConfig::default();
        let world = WorldParams::new(64, 256, 16, 8, 7);
        Self {
            n_prompts: world.n_prompts,
            n_responses: world.n_responses,
            embed_dim: world.embed_dim,
            n_clusters: world.n_clusters,
            world_seed: world.seed,
            cluster_offset: world.cluster_offset,
            feature_noise: world.feature_noise,
            oracle: OracleName::DotToGold,
            oracle_noise_std: 0.0,
            oracle_noise_seed: 0,
            correctness: CorrectnessName::ExactGold,
            correctness_threshold: 0.9,
            init_std: 0.01,
            sft_epochs: sft.epochs,
            sft_lr: sft.lr,
            sft_mode: SftModeName::Exact,
            sft_hard_negatives: 4,
            iterations: train.iterations,
            prompts_per_iter: train.prompts_per_iter,
            k: train.k,
            temperatures: train.temperatures,
            lr: train.lr,
            epochs_per_iter: train.epochs_per_iter,
            beta: train.beta,
            objective: train.objective,
            n_pos: None,
            n_neg: None,
            memorization: train.memorization,
            hardness_level: None,
            t_hi: train.t_hi,
            t_lo: train.t_lo,
            ref_mode: train.ref_mode,
            seed: train.seed,
            eval_temperature: train.eval.temperature,
            study_seeds: 10,
            temperature_grid: vec![0.3, 0.7, 1.0, 1.5],
            list_sizes: vec![2, 4, 6, 8, 10],
        }
    }
}

impl Config {
    /// Base for the hardness study: each iteration is optimized to near
    /// convergence, where easy negatives stop supplying gradient.
    pub fn hardness_study() -> Self {
        Self {
            lr: 100.0,
            epochs_per_iter: 10,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |e: Error| Error::Config(e.to_string());
        self.world_params().validate().map_err(fail)?;
        self.oracle_kind().validate().map_err(fail)?;
        self.train_config().validate().map_err(fail)?;
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and >= 0".into()));
        }
        if !(self.sft_lr >= 0.0 && self.sft_lr.is_finite()) {
            return Err(Error::Config("sft_lr must be finite and >= 0".into()));
        }
        if self.temperature_grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config("temperature_grid entries must be positive".into()));
        }
        if self.list_sizes.iter().any(|&s| s < 2) {
            return Err(Error::Config("list_sizes entries must be >= 2".into()));
        }
        Ok(())
    }

    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            cluster_offset: self.cluster_offset,
            feature_noise: self.feature_noise,
            ..WorldParams::new(
                self.n_prompts,
                self.n_responses,
                self.embed_dim,
                self.n_clusters,
                self.world_seed,
            )
        }
    }

    pub fn oracle_kind(&self) -> OracleKind {
        match self.oracle {
            OracleName::DotToGold => OracleKind::DotToGold,
            OracleName::NoisyDotToGold => OracleKind::NoisyDotToGold {
                noise_std: self.oracle_noise_std,
                noise_seed: self.oracle_noise_seed,
            },
        }
    }

    pub fn correctness_rule(&self) -> CorrectnessRule {
        match self.correctness {
            CorrectnessName::ExactGold => CorrectnessRule::ExactGold,
            CorrectnessName::RewardThreshold => CorrectnessRule::RewardThreshold {
                threshold: self.correctness_threshold,
            },
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft_epochs,
            lr: self.sft_lr,
            mode: match self.sft_mode {
                SftModeName::Exact => SftMode::Exact,
                SftModeName::Estimator => SftMode::Estimator {
                    hard: self.sft_hard_negatives,
                },
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let (dp, dn) = self.objective.default_slice();
        TrainConfig {
            iterations: self.iterations,
            prompts_per_iter: self.prompts_per_iter,
            k: self.k,
            temperatures: self.temperatures.clone(),
            lr: self.lr,
            epochs_per_iter: self.epochs_per_iter,
            beta: self.beta,
            objective: self.objective,
            n_pos: self.n_pos.unwrap_or(dp),
            n_neg: self.n_neg.unwrap_or(dn),
            memorization: self.memorization,
            negatives: match self.hardness_level {
                Some(level) => NegativeSource::Mined(level),
                None => NegativeSource::Sampled,
            },
            t_hi: self.t_hi,
            t_lo: self.t_lo,
            ref_mode: self.ref_mode,
            seed: self.seed,
            eval: EvalSettings {
                temperature: self.eval_temperature,
                ..EvalSettings::default()
            },
        }
    }

    /// Seeds of a study: `seed, seed + 1, …`.
    pub fn study_seed_list(&self) -> Vec<u64> {
        (0..self.study_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}
