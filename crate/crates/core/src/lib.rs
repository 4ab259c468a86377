//! Preference optimization cast as iterative retriever optimization, on a
//! finite synthetic retrieval world where every quantity can be enumerated.
//!
//! A bi-encoder softmax policy ([`policy`]) plays the retriever, a reward
//! oracle ([`world`]) plays the reranker, and [`trainer`] distills the latter
//! into the former with one of four ranking losses ([`objectives`]).

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod mining;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod policy;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use policy::{BiEncoderPolicy, Policy, PolicySnapshot};
pub use world::{generate_world, RewardOracle, SyntheticWorld};
