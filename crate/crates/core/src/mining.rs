//! Negative construction, candidate-list assembly across iterations, and
//! reward ranking.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_temperature, Error, Result};
use crate::objectives::{ObjectiveKind, RankedList};
use crate::policy::{CategoricalSampler, Policy};
use crate::world::{RewardOracle, SyntheticWorld};

pub const REJECTION_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardnessLevel {
    /// A random response unrelated to the prompt's cluster.
    Easiest,
    /// The gold response of a related prompt.
    Easy,
    /// An incorrect on-policy response at the high temperature.
    Hard,
    /// An incorrect on-policy response at the low temperature.
    Hardest,
}

impl HardnessLevel {
    pub const ALL: [HardnessLevel; 4] = [
        HardnessLevel::Easiest,
        HardnessLevel::Easy,
        HardnessLevel::Hard,
        HardnessLevel::Hardest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HardnessLevel::Easiest => "easiest",
            HardnessLevel::Easy => "easy",
            HardnessLevel::Hard => "hard",
            HardnessLevel::Hardest => "hardest",
        }
    }
}

impl fmt::Display for HardnessLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HardnessLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HardnessLevel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown hardness level {s:?}")))
    }
}

/// Draws one negative for prompt `x` at the requested hardness.
#[allow(clippy::too_many_arguments)]
pub fn make_negative<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    policy: &impl Policy,
    oracle: &RewardOracle,
    x: usize,
    level: HardnessLevel,
    t_hi: f64,
    t_lo: f64,
    rng: &mut R,
) -> Result<usize> {
    world.check_prompt(x)?;
    if !(t_lo < t_hi) {
        return Err(Error::InvalidArgument(format!(
            "need t_lo < t_hi, got t_lo={t_lo} t_hi={t_hi}"
        )));
    }
    match level {
        HardnessLevel::Easiest => {
            let cluster_golds: BTreeSet<usize> = world.clusters()[world.cluster_of(x)]
                .iter()
                .map(|&p| world.gold(p))
                .collect();
            let pool: Vec<usize> = (0..world.n_responses())
                .filter(|y| !cluster_golds.contains(y))
                .collect();
            if pool.is_empty() {
                return Err(Error::InvalidArgument(
                    "every response is a gold answer of the cluster".into(),
                ));
            }
            Ok(pool[rng.random_range(0..pool.len())])
        }
        HardnessLevel::Easy => {
            let gold = world.gold(x);
            let pool: Vec<usize> = world
                .related_prompts(x)
                .map(|p| world.gold(p))
                .filter(|&y| y != gold)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if pool.is_empty() {
                return Err(Error::EmptyCluster(x));
            }
            Ok(pool[rng.random_range(0..pool.len())])
        }
        HardnessLevel::Hard | HardnessLevel::Hardest => {
            let t = if level == HardnessLevel::Hard { t_hi } else { t_lo };
            check_temperature(t)?;
            let sampler = CategoricalSampler::new(&policy.probs(x, t)?);
            for _ in 0..REJECTION_CAP {
                let y = sampler.draw(rng);
                if !oracle.is_correct(x, y)? {
                    return Ok(y);
                }
            }
            Err(Error::ExhaustedRejection {
                prompt: x,
                level,
                draws: REJECTION_CAP,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Memorization {
    CurrentOnly,
    CurrentPlusPrev,
    CurrentPlusAllPrev,
}

impl Memorization {
    pub const ALL: [Memorization; 3] = [
        Memorization::CurrentOnly,
        Memorization::CurrentPlusPrev,
        Memorization::CurrentPlusAllPrev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Memorization::CurrentOnly => "current_only",
            Memorization::CurrentPlusPrev => "current_plus_prev",
            Memorization::CurrentPlusAllPrev => "current_plus_all_prev",
        }
    }
}

impl fmt::Display for Memorization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Responses generated for one prompt, tagged with the iteration that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub prompt: usize,
    pub memorization: Memorization,
    entries: Vec<(usize, usize)>,
}

impl CandidatePool {
    pub fn new(prompt: usize, memorization: Memorization) -> Self {
        Self {
            prompt,
            memorization,
            entries: Vec::new(),
        }
    }

    /// `(iteration, response id)` pairs in insertion order.
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// Records `fresh` under `iteration` and returns the merged candidate set
    /// for that iteration, deduplicated by id (earliest tag wins).
    pub fn build_candidates(&mut self, iteration: usize, fresh: &[usize]) -> Result<Vec<usize>> {
        if fresh.is_empty() {
            return Err(Error::InvalidArgument("fresh candidate set is empty".into()));
        }
        if let Some(&(last, _)) = self.entries.last() {
            if iteration < last {
                return Err(Error::InvalidArgument(format!(
                    "iteration {iteration} precedes recorded iteration {last}"
                )));
            }
        }
        for &y in fresh {
            if !self.entries.contains(&(iteration, y)) {
                self.entries.push((iteration, y));
            }
        }
        let keep = |tag: usize| match self.memorization {
            Memorization::CurrentOnly => tag == iteration,
            Memorization::CurrentPlusPrev => tag == iteration || tag + 1 == iteration,
            Memorization::CurrentPlusAllPrev => tag <= iteration,
        };
        let mut seen = BTreeSet::new();
        Ok(self
            .entries
            .iter()
            .filter(|&&(tag, _)| keep(tag))
            .filter_map(|&(_, y)| seen.insert(y).then_some(y))
            .collect())
    }
}

/// Sorts candidates by reward, best first; ties go to the lower id.
pub fn rank_candidates(oracle: &RewardOracle, x: usize, ids: &[usize]) -> Result<RankedList> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no candidates to rank".into()));
    }
    let mut scored: Vec<(usize, f64)> = ids
        .iter()
        .map(|&y| Ok((y, oracle.reward(x, y)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (ids, rewards) = scored.into_iter().unzip();
    RankedList::new(x, ids, rewards)
}

/// Top-`n_pos` and bottom-`n_neg` of a ranked list, in rank order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: usize,
    pub list: RankedList,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl PreferenceExample {
    pub fn ids(&self) -> &[usize] {
        &self.list.ids
    }
}

pub fn select_training_slice(rl: &RankedList, kind: ObjectiveKind) -> Result<PreferenceExample> {
    let (n_pos, n_neg) = kind.default_slice();
    select_training_slice_with(rl, n_pos, n_neg)
}

pub fn select_training_slice_with(
    rl: &RankedList,
    n_pos: usize,
    n_neg: usize,
) -> Result<PreferenceExample> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("n_pos and n_neg must be >= 1".into()));
    }
    let len = rl.len();
    if len < n_pos + n_neg {
        return Err(Error::ListTooShort { len, n_pos, n_neg });
    }
    let idx: Vec<usize> = (0..n_pos).chain(len - n_neg..len).collect();
    let list = RankedList::new(
        rl.prompt,
        idx.iter().map(|&i| rl.ids[i]).collect(),
        idx.iter().map(|&i| rl.rewards[i]).collect(),
    )?;
    Ok(PreferenceExample {
        prompt: rl.prompt,
        list,
        n_pos,
        n_neg,
    })
}

/// Like [`select_training_slice_with`], but shrinks the slice to fit a short
/// list: negatives are capped at `len − 1`, then positives fill what is left.
/// `None` for lists of fewer than two responses.
pub fn select_training_slice_lenient(
    rl: &RankedList,
    n_pos: usize,
    n_neg: usize,
) -> Option<PreferenceExample> {
    let len = rl.len();
    if len < 2 {
        return None;
    }
    let neg = n_neg.min(len - 1).max(1);
    let pos = n_pos.min(len - neg).max(1);
    select_training_slice_with(rl, pos, neg).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::BiEncoderPolicy;
    use crate::world::{generate_world, generate_world_with, WorldParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn world() -> Arc<SyntheticWorld> {
        Arc::new(generate_world(16, 64, 8, 4, 5).unwrap())
    }

    #[test]
    fn easy_in_two_prompt_cluster_is_the_other_gold() {
        let w = Arc::new(generate_world(2, 16, 4, 1, 3).unwrap());
        let oracle = RewardOracle::exact(&w);
        let p = BiEncoderPolicy::zeros(Arc::clone(&w));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let y = make_negative(&w, &p, &oracle, 0, HardnessLevel::Easy, 1.0, 0.7, &mut rng).unwrap();
            assert_eq!(y, w.gold(1));
        }
    }

    #[test]
    fn easiest_avoids_cluster_golds() {
        let w = world();
        let oracle = RewardOracle::exact(&w);
        let p = BiEncoderPolicy::zeros(Arc::clone(&w));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in 0..w.n_prompts() {
            let golds: BTreeSet<usize> =
                w.clusters()[w.cluster_of(x)].iter().map(|&p| w.gold(p)).collect();
            for _ in 0..20 {
                let y = make_negative(&w, &p, &oracle, x, HardnessLevel::Easiest, 1.0, 0.7, &mut rng)
                    .unwrap();
                assert!(!golds.contains(&y));
            }
        }
    }

    #[test]
    fn singleton_cluster_has_no_easy_negative() {
        let w = Arc::new(generate_world(1, 8, 4, 1, 3).unwrap());
        let oracle = RewardOracle::exact(&w);
        let p = BiEncoderPolicy::zeros(Arc::clone(&w));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_negative(&w, &p, &oracle, 0, HardnessLevel::Easy, 1.0, 0.7, &mut rng),
            Err(Error::EmptyCluster(0))
        ));
    }

    #[test]
    fn on_policy_negatives_are_incorrect() {
        let w = world();
        let oracle = RewardOracle::exact(&w);
        let p = BiEncoderPolicy::identity(Arc::clone(&w));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for level in [HardnessLevel::Hard, HardnessLevel::Hardest] {
            for x in 0..w.n_prompts() {
                let y = make_negative(&w, &p, &oracle, x, level, 1.0, 0.7, &mut rng).unwrap();
                assert_ne!(y, w.gold(x));
            }
        }
        assert!(make_negative(&w, &p, &oracle, 0, HardnessLevel::Hard, 0.7, 1.0, &mut rng).is_err());
    }

    #[test]
    fn rejection_cap_surfaces() {
        let params = WorldParams {
            cluster_offset: 0.0,
            feature_noise: 0.0,
            ..WorldParams::new(4, 8, 8, 2, 1)
        };
        let w = Arc::new(generate_world_with(&params).unwrap());
        let oracle = RewardOracle::exact(&w);
        let mut p = BiEncoderPolicy::identity(Arc::clone(&w));
        p.weights_mut().mapv_inplace(|v| v * 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = make_negative(&w, &p, &oracle, 0, HardnessLevel::Hardest, 1.0, 0.7, &mut rng);
        assert!(matches!(err, Err(Error::ExhaustedRejection { draws: REJECTION_CAP, .. })));
    }

    #[test]
    fn candidates_by_memorization_mode() {
        for mode in Memorization::ALL {
            let mut pool = CandidatePool::new(0, mode);
            assert_eq!(pool.build_candidates(0, &[3, 1, 3]).unwrap(), vec![3, 1]);
        }
        let sets = [vec![0, 1], vec![2, 3], vec![4, 5]];
        let mut all = CandidatePool::new(0, Memorization::CurrentPlusAllPrev);
        let mut prev = CandidatePool::new(0, Memorization::CurrentPlusPrev);
        let mut cur = CandidatePool::new(0, Memorization::CurrentOnly);
        for (s, f) in sets.iter().enumerate() {
            let a = all.build_candidates(s, f).unwrap();
            let p = prev.build_candidates(s, f).unwrap();
            let c = cur.build_candidates(s, f).unwrap();
            assert_eq!(a.len(), 2 * (s + 1));
            assert_eq!(p.len(), if s == 0 { 2 } else { 4 });
            assert_eq!(&c, f);
        }
    }

    #[test]
    fn overlapping_candidates_dedupe_to_union() {
        let mut pool = CandidatePool::new(0, Memorization::CurrentPlusAllPrev);
        pool.build_candidates(0, &[1, 2, 3]).unwrap();
        pool.build_candidates(1, &[3, 4]).unwrap();
        let merged = pool.build_candidates(2, &[4, 5, 1]).unwrap();
        assert_eq!(merged, vec![1, 2, 3, 4, 5]);
        assert!(pool.build_candidates(1, &[9]).is_err());
        assert!(pool.build_candidates(3, &[]).is_err());
    }

    #[test]
    fn ranking_puts_gold_first() {
        let w = world();
        let oracle = RewardOracle::exact(&w);
        let g = w.gold(4);
        let rl = rank_candidates(&oracle, 4, &[10, g, 20, 30]).unwrap();
        assert_eq!(rl.ids[0], g);
        assert!(matches!(rank_candidates(&oracle, 4, &[g]), Err(Error::WrongArity { .. })));
        assert!(rank_candidates(&oracle, 4, &[1000, 2]).is_err());
    }

    fn ten_list() -> RankedList {
        RankedList::new(0, (0..10).collect(), (0..10).map(|i| 1.0 - i as f64 / 10.0).collect())
            .unwrap()
    }

    #[test]
    fn slices_follow_objective_defaults() {
        let rl = ten_list();
        let c = select_training_slice(&rl, ObjectiveKind::Contrastive).unwrap();
        assert_eq!(c.ids(), &[0, 7, 8, 9]);
        let l = select_training_slice(&rl, ObjectiveKind::ListMle).unwrap();
        assert_eq!(l.ids(), &[0, 1, 8, 9]);
        let p = select_training_slice(&rl, ObjectiveKind::Pair).unwrap();
        assert_eq!(p.ids(), &[0, 9]);

        let two = RankedList::new(3, vec![5, 2], vec![0.9, 0.1]).unwrap();
        assert_eq!(select_training_slice(&two, ObjectiveKind::Pair).unwrap().list, two);
        assert!(matches!(
            select_training_slice(&two, ObjectiveKind::Contrastive),
            Err(Error::ListTooShort { .. })
        ));
    }

    #[test]
    fn lenient_slice_shrinks() {
        let three = RankedList::new(0, vec![4, 5, 6], vec![3.0, 2.0, 1.0]).unwrap();
        assert_eq!(select_training_slice_lenient(&three, 1, 3).unwrap().ids(), &[4, 5, 6]);
        let ex = select_training_slice_lenient(&three, 2, 2).unwrap();
        assert_eq!((ex.n_pos, ex.n_neg), (1, 2));
        let full = select_training_slice_lenient(&ten_list(), 2, 2).unwrap();
        assert_eq!(full.ids(), &[0, 1, 8, 9]);
    }
}
