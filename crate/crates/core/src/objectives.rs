//! Ranking-based preference losses over the log-ratio
//! `γ(y | x) = β (log π_θ(y | x) − log π_ref(y | x))`, their derivatives, and
//! the supervised InfoNCE objective.
//!
//! Each loss is the negative log of a ranking probability (Bradley–Terry,
//! softmax 1-vs-N, product of pairwise sigmoids, Plackett–Luce). Lists are
//! ordered best-first; for the contrastive loss entry 0 is the winner and the
//! rest are losers. Training-time log-probabilities use temperature 1.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, neg_log_sigmoid, sigmoid};
use crate::policy::Policy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Pair,
    Contrastive,
    #[serde(rename = "lambdarank")]
    LambdaRank,
    #[serde(rename = "listmle")]
    ListMle,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Pair,
        ObjectiveKind::Contrastive,
        ObjectiveKind::LambdaRank,
        ObjectiveKind::ListMle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Pair => "pair",
            ObjectiveKind::Contrastive => "contrastive",
            ObjectiveKind::LambdaRank => "lambdarank",
            ObjectiveKind::ListMle => "listmle",
        }
    }

    /// Default (positives, negatives) retained from a ranked candidate list.
    pub fn default_slice(self) -> (usize, usize) {
        match self {
            ObjectiveKind::Pair => (1, 1),
            ObjectiveKind::Contrastive => (1, 3),
            ObjectiveKind::LambdaRank | ObjectiveKind::ListMle => (2, 2),
        }
    }

    pub fn is_listwise(self) -> bool {
        matches!(self, ObjectiveKind::LambdaRank | ObjectiveKind::ListMle)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective {s:?}")))
    }
}

/// Per-response `γ_i` values and the `β` that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaVector {
    pub values: Vec<f64>,
    pub beta: f64,
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveBeta(beta))
    }
}

pub fn gamma(
    policy: &impl Policy,
    reference: &impl Policy,
    x: usize,
    ys: &[usize],
    beta: f64,
) -> Result<GammaVector> {
    check_beta(beta)?;
    let lp = policy.log_probs(x, 1.0)?;
    let lr = reference.log_probs(x, 1.0)?;
    let values = ys
        .iter()
        .map(|&y| {
            policy.world().check_response(y)?;
            Ok(beta * (lp[y] - lr[y]))
        })
        .collect::<Result<_>>()?;
    Ok(GammaVector { values, beta })
}

/// Reward-ordered candidate list for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub prompt: usize,
    pub ids: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl RankedList {
    pub fn new(prompt: usize, ids: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        if ids.len() != rewards.len() {
            return Err(Error::InvalidArgument("ids and rewards differ in length".into()));
        }
        if ids.len() < 2 {
            return Err(Error::WrongArity {
                expected: "at least 2 responses".into(),
                got: ids.len(),
            });
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::InvalidArgument("ranked list contains duplicate ids".into()));
        }
        if rewards.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("rewards must be nonincreasing".into()));
        }
        Ok(Self { prompt, ids, rewards })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn arity(expected: &str, got: usize) -> Error {
    Error::WrongArity {
        expected: expected.into(),
        got,
    }
}

/// `−log σ(γ_w − γ_l)`.
pub fn loss_pair(gamma_w: f64, gamma_l: f64) -> f64 {
    neg_log_sigmoid(gamma_w - gamma_l)
}

/// `−log softmax` of the winner against itself and the losers.
pub fn loss_contrastive(gamma_w: f64, losers: &[f64]) -> Result<f64> {
    if losers.is_empty() {
        return Err(Error::EmptyLosers);
    }
    let mut all = Vec::with_capacity(losers.len() + 1);
    all.push(gamma_w);
    all.extend_from_slice(losers);
    Ok(log_sum_exp(&all) - gamma_w)
}

/// `−Σ_{i<j} log σ(γ_i − γ_j)` over every ordered pair of the list.
pub fn loss_lambdarank(gammas: &[f64]) -> Result<f64> {
    if gammas.len() < 2 {
        return Err(arity("at least 2 list entries", gammas.len()));
    }
    let mut total = 0.0;
    for i in 0..gammas.len() {
        for j in i + 1..gammas.len() {
            total += neg_log_sigmoid(gammas[i] - gammas[j]);
        }
    }
    Ok(total)
}

/// `−Σ_i log softmax_i(γ_i, …, γ_m)`: the Plackett–Luce negative log-likelihood.
pub fn loss_listmle(gammas: &[f64]) -> Result<f64> {
    if gammas.len() < 2 {
        return Err(arity("at least 2 list entries", gammas.len()));
    }
    Ok((0..gammas.len())
        .map(|i| log_sum_exp(&gammas[i..]) - gammas[i])
        .sum())
}

/// Loss of a best-first list under `kind`.
pub fn loss(kind: ObjectiveKind, gammas: &[f64]) -> Result<f64> {
    match kind {
        ObjectiveKind::Pair => {
            if gammas.len() != 2 {
                return Err(arity("exactly 2 list entries", gammas.len()));
            }
            Ok(loss_pair(gammas[0], gammas[1]))
        }
        ObjectiveKind::Contrastive => match gammas.split_first() {
            Some((&w, losers)) => loss_contrastive(w, losers),
            None => Err(arity("a winner and at least one loser", 0)),
        },
        ObjectiveKind::LambdaRank => loss_lambdarank(gammas),
        ObjectiveKind::ListMle => loss_listmle(gammas),
    }
}

/// Loss together with `∂L/∂γ_i`.
pub fn loss_and_dgamma(kind: ObjectiveKind, gammas: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = loss(kind, gammas)?;
    let m = gammas.len();
    let mut d = vec![0.0; m];
    match kind {
        ObjectiveKind::Pair | ObjectiveKind::LambdaRank => {
            for i in 0..m {
                for j in i + 1..m {
                    let s = sigmoid(gammas[j] - gammas[i]);
                    d[i] -= s;
                    d[j] += s;
                }
            }
        }
        ObjectiveKind::Contrastive => {
            let lse = log_sum_exp(gammas);
            for (di, g) in d.iter_mut().zip(gammas) {
                *di = (g - lse).exp();
            }
            d[0] -= 1.0;
        }
        ObjectiveKind::ListMle => {
            for i in 0..m {
                let lse = log_sum_exp(&gammas[i..]);
                d[i] -= 1.0;
                for k in i..m {
                    d[k] += (gammas[k] - lse).exp();
                }
            }
        }
    }
    Ok((value, d))
}

/// Ranking probability computed directly from per-response values in the
/// exponential form, without any log-space shortcut. Feeding it rewards
/// `γ_i + c` instead of `γ_i` exercises the cancellation of the per-prompt
/// normalizer.
pub fn ranking_probability(kind: ObjectiveKind, values: &[f64]) -> Result<f64> {
    let m = values.len();
    match kind {
        ObjectiveKind::Pair => {
            if m != 2 {
                return Err(arity("exactly 2 list entries", m));
            }
            Ok(1.0 / (1.0 + (values[1] - values[0]).exp()))
        }
        ObjectiveKind::Contrastive => {
            if m < 2 {
                return Err(Error::EmptyLosers);
            }
            let num = values[0].exp();
            let den: f64 = values.iter().map(|v| v.exp()).sum();
            Ok(num / den)
        }
        ObjectiveKind::LambdaRank => {
            if m < 2 {
                return Err(arity("at least 2 list entries", m));
            }
            let mut p = 1.0;
            for i in 0..m {
                for j in i + 1..m {
                    p *= 1.0 / (1.0 + (values[j] - values[i]).exp());
                }
            }
            Ok(p)
        }
        ObjectiveKind::ListMle => {
            if m < 2 {
                return Err(arity("at least 2 list entries", m));
            }
            let mut p = 1.0;
            for i in 0..m {
                let den: f64 = values[i..].iter().map(|v| v.exp()).sum();
                p *= values[i].exp() / den;
            }
            Ok(p)
        }
    }
}

/// `∂/∂W` of `Σ_i c_i log π(y_i | x)` at temperature 1, i.e.
/// `(Σ_i c_i e_{y_i} − (Σ_i c_i) ē) u_xᵀ`.
fn weighted_log_prob_grad(
    policy: &impl Policy,
    x: usize,
    ys: &[usize],
    coeffs: &[f64],
) -> Result<Array2<f64>> {
    let world = policy.world();
    let mean = policy.mean_embedding(x, 1.0)?;
    let mut v = Array1::<f64>::zeros(world.embed_dim());
    let mut total = 0.0;
    for (&y, &c) in ys.iter().zip(coeffs) {
        v.scaled_add(c, &world.embedding(y));
        total += c;
    }
    v.scaled_add(-total, &mean);
    Ok(outer(&v, &world.features(x).to_owned()))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Loss and exact gradient with respect to the policy weights for one
/// best-first list.
pub fn loss_and_grad(
    kind: ObjectiveKind,
    policy: &impl Policy,
    reference: &impl Policy,
    x: usize,
    ids: &[usize],
    beta: f64,
) -> Result<(f64, Array2<f64>)> {
    let g = gamma(policy, reference, x, ids, beta)?;
    let (value, dgamma) = loss_and_dgamma(kind, &g.values)?;
    let coeffs: Vec<f64> = dgamma.iter().map(|d| d * beta).collect();
    Ok((value, weighted_log_prob_grad(policy, x, ids, &coeffs)?))
}

pub fn grad(
    kind: ObjectiveKind,
    policy: &impl Policy,
    reference: &impl Policy,
    x: usize,
    list: &RankedList,
    beta: f64,
) -> Result<Array2<f64>> {
    Ok(loss_and_grad(kind, policy, reference, x, &list.ids, beta)?.1)
}

/// Denominator of the supervised InfoNCE objective.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftNegatives {
    /// Softmax over the whole corpus; no estimation.
    Exact,
    /// Softmax over the gold response and these (in-batch and hard) negatives.
    Estimator(Vec<usize>),
}

fn sft_support(policy: &impl Policy, gold: usize, negatives: &SftNegatives) -> Result<Option<Vec<usize>>> {
    policy.world().check_response(gold)?;
    match negatives {
        SftNegatives::Exact => Ok(None),
        SftNegatives::Estimator(negs) => {
            if negs.is_empty() {
                return Err(Error::InvalidArgument(
                    "estimator mode needs at least one negative".into(),
                ));
            }
            let mut set = BTreeSet::new();
            for &y in negs {
                policy.world().check_response(y)?;
                if y == gold {
                    return Err(Error::GoldInNegatives(gold));
                }
                set.insert(y);
            }
            let mut support = vec![gold];
            support.extend(set);
            Ok(Some(support))
        }
    }
}

/// `−log softmax` of `s(x, gold)` against the chosen denominator.
pub fn loss_sft_infonce(
    policy: &impl Policy,
    x: usize,
    gold: usize,
    negatives: &SftNegatives,
) -> Result<f64> {
    Ok(sft_loss_and_grad(policy, x, gold, negatives)?.0)
}

pub fn sft_loss_and_grad(
    policy: &impl Policy,
    x: usize,
    gold: usize,
    negatives: &SftNegatives,
) -> Result<(f64, Array2<f64>)> {
    let support = sft_support(policy, gold, negatives)?;
    let world = policy.world();
    let scores = policy.scores(x)?;
    let mut v = Array1::<f64>::zeros(world.embed_dim());
    let value = match support {
        None => {
            let lse = log_sum_exp(&scores);
            for (y, s) in scores.iter().enumerate() {
                v.scaled_add((s - lse).exp(), &world.embedding(y));
            }
            lse - scores[gold]
        }
        Some(ids) => {
            let sub: Vec<f64> = ids.iter().map(|&y| scores[y]).collect();
            let lse = log_sum_exp(&sub);
            for (&y, s) in ids.iter().zip(&sub) {
                v.scaled_add((s - lse).exp(), &world.embedding(y));
            }
            lse - scores[gold]
        }
    };
    v.scaled_add(-1.0, &world.embedding(gold));
    Ok((value, outer(&v, &world.features(x).to_owned())))
}
