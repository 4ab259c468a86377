//! Bi-encoder softmax policy over the response corpus.
//!
//! The query encoder is a square matrix `W`; response embeddings are fixed.
//! `s(x, y) = <W u_x, e_y>` and `π_t(y | x) = softmax_y(s(x, ·) / t)` over the
//! whole corpus.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_temperature, Error, Result};
use crate::numerics::log_softmax_in_place;
use crate::world::SyntheticWorld;

/// Read-only scoring interface shared by the live policy and its snapshots.
pub trait Policy {
    fn world(&self) -> &SyntheticWorld;
    fn weights(&self) -> &Array2<f64>;

    /// `W u_x`.
    fn query(&self, x: usize) -> Result<Array1<f64>> {
        self.world().check_prompt(x)?;
        Ok(self.weights().dot(&self.world().features(x)))
    }

    fn score(&self, x: usize, y: usize) -> Result<f64> {
        self.world().check_response(y)?;
        Ok(self.query(x)?.dot(&self.world().embedding(y)))
    }

    /// Scores of every response for prompt `x`, indexed by response id.
    fn scores(&self, x: usize) -> Result<Vec<f64>> {
        let q = self.query(x)?;
        Ok(self.world().embeddings().dot(&q).to_vec())
    }

    /// `log π_t(· | x)` over the full corpus.
    fn log_probs(&self, x: usize, t: f64) -> Result<Vec<f64>> {
        check_temperature(t)?;
        let mut v = self.scores(x)?;
        for s in v.iter_mut() {
            *s /= t;
        }
        log_softmax_in_place(&mut v);
        Ok(v)
    }

    fn log_prob(&self, x: usize, y: usize, t: f64) -> Result<f64> {
        self.world().check_response(y)?;
        Ok(self.log_probs(x, t)?[y])
    }

    fn probs(&self, x: usize, t: f64) -> Result<Vec<f64>> {
        Ok(self.log_probs(x, t)?.into_iter().map(f64::exp).collect())
    }

    /// `k` i.i.d. draws from `π_t(· | x)` by inverse-CDF sampling.
    fn sample<R: Rng + ?Sized>(&self, x: usize, t: f64, k: usize, rng: &mut R) -> Result<Vec<usize>>
    where
        Self: Sized,
    {
        if k == 0 {
            return Err(Error::InvalidArgument("sample count k must be >= 1".into()));
        }
        let sampler = CategoricalSampler::new(&self.probs(x, t)?);
        Ok((0..k).map(|_| sampler.draw(rng)).collect())
    }

    /// The `K` highest-scoring responses; ties go to the lower id.
    fn top_k(&self, x: usize, k: usize) -> Result<Vec<usize>> {
        let r = self.world().n_responses();
        if k == 0 || k > r {
            return Err(Error::KOutOfRange { k, len: r });
        }
        let scores = self.scores(x)?;
        let mut ids: Vec<usize> = (0..r).collect();
        ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ids.truncate(k);
        Ok(ids)
    }

    /// `Σ_y π_t(y | x) e_y`, the softmax-weighted mean response embedding.
    fn mean_embedding(&self, x: usize, t: f64) -> Result<Array1<f64>> {
        let p = Array1::from(self.probs(x, t)?);
        Ok(self.world().embeddings().t().dot(&p))
    }

    fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            world: Arc::new(self.world().clone()),
            weights: Arc::new(self.weights().clone()),
        }
    }
}

/// Cumulative-table sampler over a fixed categorical distribution.
#[derive(Clone, Debug)]
pub struct CategoricalSampler {
    cdf: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { cdf }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("non-empty distribution");
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Trainable policy. Holds the world it scores over.
#[derive(Clone, Debug)]
pub struct BiEncoderPolicy {
    world: Arc<SyntheticWorld>,
    weights: Array2<f64>,
}

impl BiEncoderPolicy {
    pub fn from_weights(world: Arc<SyntheticWorld>, weights: Array2<f64>) -> Result<Self> {
        let d = world.embed_dim();
        if weights.dim() != (d, d) {
            return Err(Error::ShapeMismatch {
                expected: (d, d),
                got: weights.dim(),
            });
        }
        Ok(Self { world, weights })
    }

    pub fn zeros(world: Arc<SyntheticWorld>) -> Self {
        let d = world.embed_dim();
        Self {
            world,
            weights: Array2::zeros((d, d)),
        }
    }

    pub fn identity(world: Arc<SyntheticWorld>) -> Self {
        let d = world.embed_dim();
        Self {
            world,
            weights: Array2::eye(d),
        }
    }

    /// I.i.d. `N(0, std²)` weights.
    pub fn random<R: Rng + ?Sized>(world: Arc<SyntheticWorld>, std: f64, rng: &mut R) -> Self {
        let d = world.embed_dim();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = Array2::from_shape_simple_fn((d, d), || normal.sample(rng));
        Self { world, weights }
    }

    pub fn shared_world(&self) -> &Arc<SyntheticWorld> {
        &self.world
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn to_doc(&self) -> WeightsDoc {
        WeightsDoc::from_matrix(&self.weights)
    }
}

impl Policy for BiEncoderPolicy {
    fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            world: Arc::clone(&self.world),
            weights: Arc::new(self.weights.clone()),
        }
    }
}

/// Frozen copy of a policy's weights, used as `π_ref` and `π_β`.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    world: Arc<SyntheticWorld>,
    weights: Arc<Array2<f64>>,
}

impl PolicySnapshot {
    /// A live policy starting from these weights.
    pub fn to_policy(&self) -> BiEncoderPolicy {
        BiEncoderPolicy {
            world: Arc::clone(&self.world),
            weights: (*self.weights).clone(),
        }
    }
}

impl Policy for PolicySnapshot {
    fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    fn snapshot(&self) -> PolicySnapshot {
        self.clone()
    }
}

/// Row-major weight serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsDoc {
    pub embed_dim: usize,
    pub weights: Vec<f64>,
}

impl WeightsDoc {
    pub fn from_matrix(w: &Array2<f64>) -> Self {
        Self {
            embed_dim: w.nrows(),
            weights: w.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let d = self.embed_dim;
        Array2::from_shape_vec((d, d), self.weights.clone()).map_err(|_| Error::ShapeMismatch {
            expected: (d, d),
            got: (self.weights.len(), 1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, PromptEntry, ResponseEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_world() -> Arc<SyntheticWorld> {
        Arc::new(generate_world(8, 24, 5, 2, 3).unwrap())
    }

    /// A 2-response world where W = I gives scores (1, 0) for prompt 0.
    fn two_response_world() -> Arc<SyntheticWorld> {
        let e = |v: [f64; 2], id| ResponseEntry { id, embedding: v.to_vec() };
        let responses = vec![
            e([1.0, 0.0], 0),
            e([0.0, 1.0], 1),
            e([-1.0, 0.0], 2),
            e([0.0, -1.0], 3),
        ];
        let prompts = vec![PromptEntry { id: 0, features: vec![1.0, 0.0], gold: 0 }];
        Arc::new(SyntheticWorld::from_parts(2, 0, responses, prompts, vec![vec![0]]).unwrap())
    }

    #[test]
    fn score_identity_and_zero() {
        let w = two_response_world();
        let p = BiEncoderPolicy::identity(Arc::clone(&w));
        assert_eq!(p.score(0, 0).unwrap(), 1.0);
        let z = BiEncoderPolicy::zeros(w);
        assert!(z.scores(0).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn score_matches_double_sum() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BiEncoderPolicy::random(Arc::clone(&w), 1.0, &mut rng);
        for x in 0..w.n_prompts() {
            for y in 0..w.n_responses() {
                let u = &w.prompts()[x].features;
                let e = &w.responses()[y].embedding;
                let mut s = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        s += p.weights()[[j, i]] * u[i] * e[j];
                    }
                }
                assert!((p.score(x, y).unwrap() - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_log_prob() {
        let w = two_response_world();
        let p = BiEncoderPolicy::zeros(w);
        for y in 0..4 {
            assert!((p.log_prob(0, y, 1.0).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn logistic_log_probs() {
        // Scores (1, 0, -1, 0); restricting to the first two responses gives σ(1).
        let w = two_response_world();
        let p = BiEncoderPolicy::identity(w);
        let lp = p.log_probs(0, 1.0).unwrap();
        let sig = 0.731_058_578_630_004_9_f64;
        assert!(((lp[0] - lp[1]).exp() / (1.0 + (lp[0] - lp[1]).exp()) - sig).abs() < 1e-12);
        assert!((-(1.0f64 + (-1.0f64).exp()).ln() - (-0.313_261_687_518_222_8)).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let p = BiEncoderPolicy::zeros(small_world());
        assert!(matches!(p.log_probs(0, 0.0), Err(Error::NonpositiveTemperature(_))));
        assert!(matches!(p.log_probs(0, -1.0), Err(Error::NonpositiveTemperature(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.sample(0, 0.0, 3, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let p = BiEncoderPolicy::zeros(two_response_world());
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = p.sample(0, 1.0, 100_000, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for d in draws {
            counts[d] += 1;
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn sharp_sampling_hits_argmax() {
        let p = BiEncoderPolicy::identity(two_response_world());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = p.sample(0, 0.01, 10_000, &mut rng).unwrap();
        let hits = draws.iter().filter(|&&d| d == 0).count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn sampling_is_seeded() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BiEncoderPolicy::random(w, 1.0, &mut rng);
        let a = p.sample(3, 0.8, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = p.sample(3, 0.8, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_k_contract() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BiEncoderPolicy::random(Arc::clone(&w), 1.0, &mut rng);
        let all = p.top_k(0, w.n_responses()).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..w.n_responses()).collect::<Vec<_>>());
        assert!(matches!(p.top_k(0, 0), Err(Error::KOutOfRange { .. })));
        assert!(p.top_k(0, w.n_responses() + 1).is_err());

        let z = BiEncoderPolicy::zeros(w);
        assert_eq!(z.top_k(1, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn snapshot_is_frozen() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = BiEncoderPolicy::random(w, 0.5, &mut rng);
        let snap = p.snapshot();
        let before = snap.log_probs(2, 1.0).unwrap();
        assert_eq!(before, p.log_probs(2, 1.0).unwrap());
        p.weights_mut().mapv_inplace(|v| v * 3.0 + 1.0);
        assert_eq!(snap.log_probs(2, 1.0).unwrap(), before);
        assert_ne!(p.log_probs(2, 1.0).unwrap(), before);
        assert_eq!(snap.snapshot().log_probs(2, 1.0).unwrap(), before);
    }

    #[test]
    fn weights_doc_round_trip() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BiEncoderPolicy::random(Arc::clone(&w), 1.0, &mut rng);
        let doc = p.to_doc();
        assert_eq!(doc.weights[1], p.weights()[[0, 1]]);
        let back = BiEncoderPolicy::from_weights(w, doc.to_matrix().unwrap()).unwrap();
        assert_eq!(back.weights(), p.weights());
    }
}
