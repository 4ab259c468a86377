//! The finite retrieval world: a response corpus with fixed embeddings, a
//! prompt set with gold answers grouped into clusters of related prompts, and
//! the reward oracle that plays the reranker.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, dot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub id: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub id: usize,
    pub features: Vec<f64>,
    pub gold: usize,
}

/// Generation knobs beyond the five required arguments of [`generate_world`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub embed_dim: usize,
    pub n_clusters: usize,
    pub seed: u64,
    /// Norm of the perturbation shared by every prompt of a cluster.
    pub cluster_offset: f64,
    /// Expected norm of the per-prompt i.i.d. feature noise.
    pub feature_noise: f64,
}

impl WorldParams {
    pub fn new(
        n_prompts: usize,
        n_responses: usize,
        embed_dim: usize,
        n_clusters: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_prompts,
            n_responses,
            embed_dim,
            n_clusters,
            seed,
            cluster_offset: 0.75,
            feature_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_clusters < 1 || self.n_prompts < self.n_clusters {
            return bad(format!(
                "need n_prompts >= n_clusters >= 1, got P={} clusters={}",
                self.n_prompts, self.n_clusters
            ));
        }
        if self.n_responses < 4 {
            return bad(format!("need n_responses >= 4, got {}", self.n_responses));
        }
        if self.embed_dim < 2 {
            return bad(format!("need embed_dim >= 2, got {}", self.embed_dim));
        }
        if !(self.cluster_offset >= 0.0 && self.cluster_offset.is_finite())
            || !(self.feature_noise >= 0.0 && self.feature_noise.is_finite())
        {
            return bad("cluster_offset and feature_noise must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldDoc", into = "WorldDoc")]
pub struct SyntheticWorld {
    embed_dim: usize,
    seed: u64,
    responses: Vec<ResponseEntry>,
    prompts: Vec<PromptEntry>,
    clusters: Vec<Vec<usize>>,
    cluster_of: Vec<usize>,
    /// Row `y` is the embedding of response `y`.
    embeddings: Array2<f64>,
    /// Row `x` is the feature vector of prompt `x`.
    features: Array2<f64>,
}

/// Serialized form of a world.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct WorldDoc {
    embed_dim: usize,
    seed: u64,
    responses: Vec<ResponseEntry>,
    prompts: Vec<PromptEntry>,
    clusters: Vec<Vec<usize>>,
}

impl From<SyntheticWorld> for WorldDoc {
    fn from(w: SyntheticWorld) -> Self {
        WorldDoc {
            embed_dim: w.embed_dim,
            seed: w.seed,
            responses: w.responses,
            prompts: w.prompts,
            clusters: w.clusters,
        }
    }
}

impl TryFrom<WorldDoc> for SyntheticWorld {
    type Error = Error;

    fn try_from(doc: WorldDoc) -> Result<Self> {
        SyntheticWorld::from_parts(doc.embed_dim, doc.seed, doc.responses, doc.prompts, doc.clusters)
    }
}

/// Builds a world with the default generation knobs.
pub fn generate_world(
    n_prompts: usize,
    n_responses: usize,
    embed_dim: usize,
    n_clusters: usize,
    seed: u64,
) -> Result<SyntheticWorld> {
    generate_world_with(&WorldParams::new(n_prompts, n_responses, embed_dim, n_clusters, seed))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

pub fn generate_world_with(params: &WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    let WorldParams {
        n_prompts,
        n_responses,
        embed_dim,
        n_clusters,
        seed,
        ..
    } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let responses: Vec<ResponseEntry> = (0..n_responses)
        .map(|id| ResponseEntry {
            id,
            embedding: unit_gaussian(&mut rng, embed_dim),
        })
        .collect();

    // Round-robin so cluster sizes differ by at most one.
    let mut clusters = vec![Vec::new(); n_clusters];
    for x in 0..n_prompts {
        clusters[x % n_clusters].push(x);
    }

    let mut golds = vec![0usize; n_prompts];
    let mut unused: BTreeSet<usize> = (0..n_responses).collect();
    for members in &clusters {
        if unused.len() < members.len() {
            unused = (0..n_responses).collect();
        }
        let pool: Vec<usize> = unused.iter().copied().collect();
        let chosen: Vec<usize> = pool
            .choose_multiple(&mut rng, members.len())
            .copied()
            .collect();
        for (&x, &y) in members.iter().zip(&chosen) {
            golds[x] = y;
            unused.remove(&y);
        }
    }

    let offsets: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            unit_gaussian(&mut rng, embed_dim)
                .into_iter()
                .map(|c| c * params.cluster_offset)
                .collect()
        })
        .collect();
    let noise_std = params.feature_noise / (embed_dim as f64).sqrt();
    let prompts: Vec<PromptEntry> = (0..n_prompts)
        .map(|x| {
            let gold = golds[x];
            let offset = &offsets[x % n_clusters];
            let features = responses[gold]
                .embedding
                .iter()
                .zip(offset)
                .map(|(e, o)| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    e + o + noise_std * n
                })
                .collect();
            PromptEntry { id: x, features, gold }
        })
        .collect();

    SyntheticWorld::from_parts(embed_dim, seed, responses, prompts, clusters)
}

impl SyntheticWorld {
    pub fn from_parts(
        embed_dim: usize,
        seed: u64,
        responses: Vec<ResponseEntry>,
        prompts: Vec<PromptEntry>,
        clusters: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if embed_dim < 2 {
            return bad(format!("embed_dim must be >= 2, got {embed_dim}"));
        }
        if responses.len() < 4 {
            return bad(format!("need at least 4 responses, got {}", responses.len()));
        }
        if prompts.is_empty() {
            return bad("world has no prompts".into());
        }
        for (i, r) in responses.iter().enumerate() {
            if r.id != i {
                return bad(format!("response ids must be dense, found {} at {i}", r.id));
            }
            if r.embedding.len() != embed_dim || r.embedding.iter().any(|v| !v.is_finite()) {
                return bad(format!("response {i} embedding is malformed"));
            }
        }
        for (i, p) in prompts.iter().enumerate() {
            if p.id != i {
                return bad(format!("prompt ids must be dense, found {} at {i}", p.id));
            }
            if p.features.len() != embed_dim || p.features.iter().any(|v| !v.is_finite()) {
                return bad(format!("prompt {i} features are malformed"));
            }
            if p.gold >= responses.len() {
                return bad(format!("prompt {i} gold {} out of range", p.gold));
            }
        }
        let mut cluster_of = vec![usize::MAX; prompts.len()];
        for (c, members) in clusters.iter().enumerate() {
            if members.is_empty() {
                return bad(format!("cluster {c} is empty"));
            }
            for &x in members {
                if x >= prompts.len() || cluster_of[x] != usize::MAX {
                    return bad(format!("cluster {c} lists prompt {x} twice or out of range"));
                }
                cluster_of[x] = c;
            }
        }
        if let Some(x) = cluster_of.iter().position(|&c| c == usize::MAX) {
            return bad(format!("prompt {x} belongs to no cluster"));
        }

        let embeddings = Array2::from_shape_fn((responses.len(), embed_dim), |(y, j)| {
            responses[y].embedding[j]
        });
        let features =
            Array2::from_shape_fn((prompts.len(), embed_dim), |(x, j)| prompts[x].features[j]);
        Ok(Self {
            embed_dim,
            seed,
            responses,
            prompts,
            clusters,
            cluster_of,
            embeddings,
            features,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn responses(&self) -> &[ResponseEntry] {
        &self.responses
    }

    pub fn prompts(&self) -> &[PromptEntry] {
        &self.prompts
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn check_prompt(&self, x: usize) -> Result<()> {
        if x < self.prompts.len() {
            Ok(())
        } else {
            Err(Error::InvalidId {
                kind: "prompt",
                id: x,
                len: self.prompts.len(),
            })
        }
    }

    pub fn check_response(&self, y: usize) -> Result<()> {
        if y < self.responses.len() {
            Ok(())
        } else {
            Err(Error::InvalidId {
                kind: "response",
                id: y,
                len: self.responses.len(),
            })
        }
    }

    pub fn gold(&self, x: usize) -> usize {
        self.prompts[x].gold
    }

    pub fn cluster_of(&self, x: usize) -> usize {
        self.cluster_of[x]
    }

    /// Prompts sharing `x`'s cluster, excluding `x`.
    pub fn related_prompts(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        self.clusters[self.cluster_of[x]].iter().copied().filter(move |&p| p != x)
    }

    pub fn embedding(&self, y: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(y)
    }

    pub fn features(&self, x: usize) -> ArrayView1<'_, f64> {
        self.features.row(x)
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Hex SHA-256 of the serialized world.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("world serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum OracleKind {
    DotToGold,
    NoisyDotToGold { noise_std: f64, noise_seed: u64 },
}

impl OracleKind {
    pub fn validate(&self) -> Result<()> {
        if let OracleKind::NoisyDotToGold { noise_std, .. } = *self {
            if !(noise_std >= 0.0 && noise_std.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "noise_std must be finite and >= 0, got {noise_std}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum CorrectnessRule {
    ExactGold,
    RewardThreshold { threshold: f64 },
}

/// The reranker: `r(x, y)` plus a binary correctness predicate.
///
/// Rewards are tabulated for every (prompt, response) pair at construction,
/// so noisy oracles return the same value on every query.
#[derive(Clone, Debug)]
pub struct RewardOracle {
    kind: OracleKind,
    rule: CorrectnessRule,
    n_responses: usize,
    table: Vec<f64>,
    golds: Vec<usize>,
}

impl RewardOracle {
    pub fn new(world: &SyntheticWorld, kind: OracleKind, rule: CorrectnessRule) -> Result<Self> {
        kind.validate()?;
        let r = world.n_responses();
        let mut table = Vec::with_capacity(world.n_prompts() * r);
        for x in 0..world.n_prompts() {
            let g = world.embedding(world.gold(x));
            for y in 0..r {
                let base = world.embedding(y).dot(&g);
                let value = match kind {
                    OracleKind::DotToGold => base,
                    OracleKind::NoisyDotToGold {
                        noise_std,
                        noise_seed,
                    } => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, &[x as u64, y as u64]));
                        let n: f64 = StandardNormal.sample(&mut rng);
                        base + noise_std * n
                    }
                };
                table.push(value);
            }
        }
        Ok(Self {
            kind,
            rule,
            n_responses: r,
            table,
            golds: (0..world.n_prompts()).map(|x| world.gold(x)).collect(),
        })
    }

    /// Noise-free dot-to-gold oracle with exact-gold correctness.
    pub fn exact(world: &SyntheticWorld) -> Self {
        Self::new(world, OracleKind::DotToGold, CorrectnessRule::ExactGold)
            .expect("noise-free oracle is always valid")
    }

    pub fn kind(&self) -> &OracleKind {
        &self.kind
    }

    pub fn rule(&self) -> &CorrectnessRule {
        &self.rule
    }

    fn check(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.golds.len() {
            return Err(Error::InvalidId {
                kind: "prompt",
                id: x,
                len: self.golds.len(),
            });
        }
        if y >= self.n_responses {
            return Err(Error::InvalidId {
                kind: "response",
                id: y,
                len: self.n_responses,
            });
        }
        Ok(())
    }

    pub fn reward(&self, x: usize, y: usize) -> Result<f64> {
        self.check(x, y)?;
        Ok(self.table[x * self.n_responses + y])
    }

    /// All rewards for prompt `x`, indexed by response id.
    pub fn rewards(&self, x: usize) -> Result<&[f64]> {
        self.check(x, 0)?;
        Ok(&self.table[x * self.n_responses..(x + 1) * self.n_responses])
    }

    pub fn is_correct(&self, x: usize, y: usize) -> Result<bool> {
        let r = self.reward(x, y)?;
        Ok(match self.rule {
            CorrectnessRule::ExactGold => y == self.golds[x],
            CorrectnessRule::RewardThreshold { threshold } => r >= threshold,
        })
    }

    /// Correctness mask over the corpus for prompt `x`.
    pub fn correct_mask(&self, x: usize) -> Result<Vec<bool>> {
        (0..self.n_responses).map(|y| self.is_correct(x, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_world() {
        let w = generate_world(1, 4, 2, 1, 0).unwrap();
        assert_eq!(w.n_prompts(), 1);
        assert!(w.gold(0) < 4);
        assert_eq!(w.related_prompts(0).count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(16, 32, 4, 4, 11).unwrap();
        let b = generate_world(16, 32, 4, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = generate_world(16, 32, 4, 4, 12).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_world(2, 3, 4, 1, 0).is_err());
        assert!(generate_world(2, 8, 1, 1, 0).is_err());
        assert!(generate_world(2, 8, 4, 3, 0).is_err());
        assert!(generate_world(2, 8, 4, 0, 0).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let w = generate_world(8, 40, 6, 2, 3).unwrap();
        for r in w.responses() {
            assert!((dot(&r.embedding, &r.embedding) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn golds_distinct_within_clusters() {
        let w = generate_world(64, 256, 16, 8, 7).unwrap();
        for members in w.clusters() {
            let golds: BTreeSet<usize> = members.iter().map(|&x| w.gold(x)).collect();
            assert_eq!(golds.len(), members.len());
            assert!(members.len() >= 2);
        }
    }

    #[test]
    fn gold_is_unique_reward_argmax() {
        let w = generate_world(64, 256, 16, 8, 7).unwrap();
        let oracle = RewardOracle::exact(&w);
        for x in 0..w.n_prompts() {
            let rewards = oracle.rewards(x).unwrap();
            let g = w.gold(x);
            assert!((rewards[g] - 1.0).abs() < 1e-12);
            for (y, &r) in rewards.iter().enumerate() {
                if y != g {
                    assert!(r < rewards[g], "prompt {x} response {y}");
                }
            }
        }
    }

    #[test]
    fn orthogonal_pair_has_zero_reward() {
        let responses = vec![
            ResponseEntry { id: 0, embedding: vec![1.0, 0.0] },
            ResponseEntry { id: 1, embedding: vec![0.0, 1.0] },
            ResponseEntry { id: 2, embedding: vec![-1.0, 0.0] },
            ResponseEntry { id: 3, embedding: vec![0.0, -1.0] },
        ];
        let prompts = vec![PromptEntry { id: 0, features: vec![1.0, 0.0], gold: 0 }];
        let w = SyntheticWorld::from_parts(2, 0, responses, prompts, vec![vec![0]]).unwrap();
        let oracle = RewardOracle::exact(&w);
        assert_eq!(oracle.reward(0, 1).unwrap(), 0.0);
        assert_eq!(oracle.reward(0, 0).unwrap(), 1.0);
        assert_eq!(oracle.reward(0, 2).unwrap(), -1.0);
        assert!(matches!(oracle.reward(1, 0), Err(Error::InvalidId { kind: "prompt", .. })));
        assert!(matches!(oracle.reward(0, 4), Err(Error::InvalidId { kind: "response", .. })));
    }

    #[test]
    fn noisy_oracle_is_cached_and_pure() {
        let w = generate_world(8, 32, 4, 2, 5).unwrap();
        let kind = OracleKind::NoisyDotToGold { noise_std: 0.3, noise_seed: 99 };
        let a = RewardOracle::new(&w, kind.clone(), CorrectnessRule::ExactGold).unwrap();
        let b = RewardOracle::new(&w, kind, CorrectnessRule::ExactGold).unwrap();
        let exact = RewardOracle::exact(&w);
        let mut differs = false;
        for x in 0..8 {
            for y in 0..32 {
                assert_eq!(a.reward(x, y).unwrap(), a.reward(x, y).unwrap());
                assert_eq!(a.reward(x, y).unwrap(), b.reward(x, y).unwrap());
                differs |= a.reward(x, y).unwrap() != exact.reward(x, y).unwrap();
            }
        }
        assert!(differs);
    }

    #[test]
    fn exact_gold_correctness() {
        let w = generate_world(4, 16, 4, 2, 1).unwrap();
        let oracle = RewardOracle::exact(&w);
        for x in 0..4 {
            let mask = oracle.correct_mask(x).unwrap();
            assert_eq!(mask.iter().filter(|&&c| c).count(), 1);
            assert!(mask[w.gold(x)]);
        }
    }

    #[test]
    fn threshold_correctness_matches_enumeration() {
        let w = generate_world(16, 128, 4, 4, 2).unwrap();
        let oracle = RewardOracle::new(
            &w,
            OracleKind::DotToGold,
            CorrectnessRule::RewardThreshold { threshold: 0.99 },
        )
        .unwrap();
        for x in 0..w.n_prompts() {
            let g = w.responses()[w.gold(x)].embedding.clone();
            for y in 0..w.n_responses() {
                let expected = dot(&w.responses()[y].embedding, &g) >= 0.99;
                assert_eq!(oracle.is_correct(x, y).unwrap(), expected);
            }
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let w = generate_world(6, 12, 3, 3, 4).unwrap();
        let back = SyntheticWorld::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);
        let mut doc: serde_json::Value = serde_json::from_str(&w.to_json().unwrap()).unwrap();
        doc["prompts"][0]["gold"] = serde_json::json!(99);
        assert!(SyntheticWorld::from_json(&doc.to_string()).is_err());
        let keys: Vec<&String> = doc.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
    }
}
