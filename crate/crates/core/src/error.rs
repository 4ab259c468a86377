use thiserror::Error;

use crate::mining::HardnessLevel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid {kind} id {id} (valid range 0..{len})")]
    InvalidId {
        kind: &'static str,
        id: usize,
        len: usize,
    },

    #[error("temperature must be positive and finite, got {0}")]
    NonpositiveTemperature(f64),

    #[error("beta must be positive and finite, got {0}")]
    NonpositiveBeta(f64),

    #[error("wrong arity: expected {expected}, got {got}")]
    WrongArity { expected: String, got: usize },

    #[error("contrastive loss needs at least one loser")]
    EmptyLosers,

    #[error("gold response {0} appears among the negatives")]
    GoldInNegatives(usize),

    #[error("K = {k} out of range 1..={len}")]
    KOutOfRange { k: usize, len: usize },

    #[error("no {level:?} negative for prompt {prompt} after {draws} draws")]
    ExhaustedRejection {
        prompt: usize,
        level: HardnessLevel,
        draws: usize,
    },

    #[error("prompt {0} has no related prompt in its cluster")]
    EmptyCluster(usize),

    #[error("ranked list of length {len} too short for {n_pos} positives and {n_neg} negatives")]
    ListTooShort { len: usize, n_pos: usize, n_neg: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("divergence detected: {0}")]
    Divergence(String),

    #[error("empty preference dataset at iteration {0}: every candidate list was degenerate")]
    EmptyDataset(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveTemperature(t))
    }
}
