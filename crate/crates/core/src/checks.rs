//! Self-contained invariant suite behind the `check` command.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{crossover_instance, recall_at_n_exact, recall_at_n_mc, winrate, CROSSOVER_TEMPERATURES};
use crate::objectives::{
    gamma, loss, loss_and_grad, loss_contrastive, loss_lambdarank, loss_listmle, loss_pair,
    ranking_probability, sft_loss_and_grad, ObjectiveKind, SftNegatives,
};
use crate::policy::{BiEncoderPolicy, Policy};
use crate::world::{generate_world, RewardOracle, SyntheticWorld};

/// Deliberate defects for exercising the suite itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negate the pairwise loss wherever the suite evaluates it.
    pub flip_pair_sign: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub family: String,
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: String,
    pub checks: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub families: Vec<FamilySummary>,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn failed_families(&self) -> Vec<&str> {
        self.families
            .iter()
            .filter(|f| f.failed > 0)
            .map(|f| f.family.as_str())
            .collect()
    }
}

struct Suite {
    faults: Faults,
    checks: Vec<CheckResult>,
}

impl Suite {
    /// Records `observed <= tolerance`.
    fn within(&mut self, family: &str, name: String, observed: f64, tolerance: f64) {
        self.checks.push(CheckResult {
            family: family.to_string(),
            name,
            tolerance,
            observed,
            passed: observed <= tolerance,
        });
    }

    /// Records a boolean property; `observed` is 0 on success and 1 otherwise.
    fn holds(&mut self, family: &str, name: String, ok: bool) {
        self.within(family, name, if ok { 0.0 } else { 1.0 }, 0.0);
    }

    fn pair(&self, gw: f64, gl: f64) -> f64 {
        let v = loss_pair(gw, gl);
        if self.faults.flip_pair_sign {
            -v
        } else {
            v
        }
    }

    fn loss(&self, kind: ObjectiveKind, gammas: &[f64]) -> Result<f64> {
        match kind {
            ObjectiveKind::Pair if gammas.len() == 2 => Ok(self.pair(gammas[0], gammas[1])),
            _ => loss(kind, gammas),
        }
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_ABS_TOL: f64 = 1e-8;

/// Worst per-component discrepancy between `analytic` and the central
/// difference of `f`, measured relatively except where both are tiny.
pub fn finite_difference_error(
    weights: &Array2<f64>,
    analytic: &Array2<f64>,
    mut f: impl FnMut(&Array2<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut w = weights.clone();
    for idx in ndarray::indices(weights.dim()) {
        let orig = w[idx];
        w[idx] = orig + FD_STEP;
        let up = f(&w)?;
        w[idx] = orig - FD_STEP;
        let down = f(&w)?;
        w[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[idx];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < FD_ABS_TOL {
            (a - numeric).abs() / FD_ABS_TOL * FD_REL_TOL
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn random_weights(world: &Arc<SyntheticWorld>, std: f64, rng: &mut ChaCha8Rng) -> BiEncoderPolicy {
    BiEncoderPolicy::random(Arc::clone(world), std, rng)
}

fn gradient_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "gradient_fidelity";
    let world = Arc::new(generate_world(6, 12, 4, 2, 5)?);
    for kind in ObjectiveKind::ALL {
        let m = if kind == ObjectiveKind::Pair { 2 } else { 4 };
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let policy = random_weights(&world, 0.7, rng);
            let reference = random_weights(&world, 0.7, rng);
            let x = rng.random_range(0..world.n_prompts());
            let ids = index::sample(rng, world.n_responses(), m).into_vec();
            let beta = rng.random_range(0.5..2.0);
            let (_, g) = loss_and_grad(kind, &policy, &reference, x, &ids, beta)?;
            let err = finite_difference_error(policy.weights(), &g, |w| {
                let p = BiEncoderPolicy::from_weights(Arc::clone(&world), w.clone())?;
                s.loss(kind, &gamma(&p, &reference, x, &ids, beta)?.values)
            })?;
            worst = worst.max(err);
        }
        s.within(FAMILY, format!("{kind} over 20 instances"), worst, FD_REL_TOL);
    }
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let policy = random_weights(&world, 0.7, rng);
        let x = rng.random_range(0..world.n_prompts());
        let gold = world.gold(x);
        let negatives = if i % 2 == 0 {
            SftNegatives::Exact
        } else {
            let mut negs: Vec<usize> = (0..world.n_responses()).filter(|&y| y != gold).collect();
            negs.truncate(5);
            SftNegatives::Estimator(negs)
        };
        let (_, g) = sft_loss_and_grad(&policy, x, gold, &negatives)?;
        let err = finite_difference_error(policy.weights(), &g, |w| {
            let p = BiEncoderPolicy::from_weights(Arc::clone(&world), w.clone())?;
            Ok(sft_loss_and_grad(&p, x, gold, &negatives)?.0)
        })?;
        worst = worst.max(err);
    }
    s.within(FAMILY, "sft-infonce over 20 instances".into(), worst, FD_REL_TOL);
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std * z
}

fn reduction_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "reduction_identities";
    let (mut c, mut l, mut m): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let (gw, gl) = (gaussian(rng, 3.0), gaussian(rng, 3.0));
        let p = s.pair(gw, gl);
        c = c.max((loss_contrastive(gw, &[gl])? - p).abs());
        l = l.max((loss_lambdarank(&[gw, gl])? - p).abs());
        m = m.max((loss_listmle(&[gw, gl])? - p).abs());
    }
    s.within(FAMILY, "contrastive with one loser equals pair".into(), c, 1e-12);
    s.within(FAMILY, "lambdarank of two equals pair".into(), l, 1e-12);
    s.within(FAMILY, "listmle of two equals pair".into(), m, 1e-12);
    Ok(())
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Probability of drawing `order` without replacement with weights `e^{γ}`.
fn sequential_draw_probability(gammas: &[f64], order: &[usize]) -> f64 {
    let mut remaining: Vec<usize> = (0..gammas.len()).collect();
    let mut p = 1.0;
    for &i in order {
        let total: f64 = remaining.iter().map(|&j| gammas[j].exp()).sum();
        p *= gammas[i].exp() / total;
        remaining.retain(|&j| j != i);
    }
    p
}

fn plackett_luce_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "plackett_luce";
    for m in 2..=5 {
        let gammas: Vec<f64> = (0..m).map(|_| gaussian(rng, 1.5)).collect();
        let mut total = 0.0;
        let mut worst: f64 = 0.0;
        for order in permutations(m) {
            let ordered: Vec<f64> = order.iter().map(|&i| gammas[i]).collect();
            let model = (-loss_listmle(&ordered)?).exp();
            let direct = sequential_draw_probability(&gammas, &order);
            worst = worst.max((model - direct).abs());
            total += model;
        }
        s.within(FAMILY, format!("m={m} order probabilities match enumeration"), worst, 1e-10);
        s.within(FAMILY, format!("m={m} order probabilities sum to one"), (total - 1.0).abs(), 1e-10);
    }
    Ok(())
}

fn shift_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "shift_invariance";
    for kind in ObjectiveKind::ALL {
        let m = if kind == ObjectiveKind::Pair { 2 } else { 4 };
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let gammas: Vec<f64> = (0..m).map(|_| gaussian(rng, 1.0)).collect();
            let c = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = gammas.iter().map(|g| g + c).collect();
            let a = ranking_probability(kind, &gammas)?;
            let b = ranking_probability(kind, &shifted)?;
            worst = worst.max((a - b).abs());
        }
        s.within(FAMILY, format!("{kind} ranking probability under a common shift"), worst, 1e-12);
    }
    Ok(())
}

fn normalization_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "normalization";
    let world = Arc::new(generate_world(8, 40, 6, 2, 9)?);
    let mut worst: f64 = 0.0;
    let mut lse_worst: f64 = 0.0;
    for _ in 0..20 {
        let p = random_weights(&world, 2.0, rng);
        let t = rng.random_range(0.1..3.0);
        for x in 0..world.n_prompts() {
            let probs = p.probs(x, t)?;
            worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
            let lp = p.log_probs(x, t)?;
            let back: f64 = lp.iter().map(|v| v.exp()).sum();
            lse_worst = lse_worst.max((back - 1.0).abs());
        }
    }
    s.within(FAMILY, "policy probabilities sum to one".into(), worst, 1e-12);
    s.within(FAMILY, "exp of log-probabilities sums to one".into(), lse_worst, 1e-12);
    Ok(())
}

fn closed_form_checks(s: &mut Suite) -> Result<()> {
    const FAMILY: &str = "closed_form";
    let ln2 = std::f64::consts::LN_2;
    s.within(FAMILY, "pair at equal values is ln 2".into(), (s.pair(0.3, 0.3) - ln2).abs(), 1e-12);
    s.within(
        FAMILY,
        "lambdarank of three equal values is 3 ln 2".into(),
        (loss_lambdarank(&[0.0; 3])? - 3.0 * ln2).abs(),
        1e-12,
    );
    s.within(
        FAMILY,
        "listmle of three equal values is ln 6".into(),
        (loss_listmle(&[0.0; 3])? - 6f64.ln()).abs(),
        1e-12,
    );
    Ok(())
}

fn recall_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "recall";
    let world = Arc::new(generate_world(8, 40, 6, 2, 13)?);
    let oracle = RewardOracle::exact(&world);
    let policy = random_weights(&world, 2.0, rng);
    let mut monotone = true;
    for x in 0..world.n_prompts() {
        let mut prev = 0.0;
        for n in 1..=60 {
            let r = recall_at_n_exact(&policy, &oracle, x, n, 1.0)?;
            monotone &= r >= prev && (0.0..=1.0).contains(&r);
            prev = r;
        }
    }
    s.holds(FAMILY, "recall nondecreasing in N and within [0, 1]".into(), monotone);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = rng.random_range(0..world.n_prompts());
        let n = rng.random_range(1..20);
        let t = rng.random_range(0.5..2.0);
        let exact = recall_at_n_exact(&policy, &oracle, x, n, t)?;
        let trials = 10_000;
        let mc = recall_at_n_mc(&policy, &oracle, x, n, t, trials, rng)?;
        let se = (exact * (1.0 - exact) / trials as f64).sqrt().max(1e-12);
        worst = worst.max((mc - exact).abs() / se);
    }
    s.within(FAMILY, "Monte-Carlo recall within 3 standard errors".into(), worst, 3.0);
    Ok(())
}

fn crossover_checks(s: &mut Suite) -> Result<()> {
    const FAMILY: &str = "temperature_crossover";
    let (world, policy) = crossover_instance()?;
    let oracle = RewardOracle::exact(&world);
    let (lo, hi) = CROSSOVER_TEMPERATURES;
    let mean = |n, t| -> Result<f64> {
        let mut total = 0.0;
        for x in 0..world.n_prompts() {
            total += recall_at_n_exact(&policy, &oracle, x, n, t)?;
        }
        Ok(total / world.n_prompts() as f64)
    };
    s.holds(FAMILY, format!("t={lo} beats t={hi} at N=1"), mean(1, lo)? > mean(1, hi)?);
    s.holds(FAMILY, format!("t={hi} beats t={lo} at N=50"), mean(50, hi)? > mean(50, lo)?);
    Ok(())
}

fn winrate_checks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    const FAMILY: &str = "winrate_symmetry";
    let world = Arc::new(generate_world(8, 40, 6, 2, 17)?);
    let oracle = RewardOracle::exact(&world);
    let a = random_weights(&world, 2.0, rng);
    let b = random_weights(&world, 2.0, rng);
    s.within(FAMILY, "policy against itself is one half".into(), (winrate(&a, &a, &oracle, 1.0)? - 0.5).abs(), 0.0);
    let ab = winrate(&a, &b, &oracle, 1.0)?;
    let ba = winrate(&b, &a, &oracle, 1.0)?;
    s.within(FAMILY, "winrate(a, b) + winrate(b, a) is one".into(), (ab + ba - 1.0).abs(), 1e-15);
    Ok(())
}

/// Runs every family; deterministic for a given `faults`.
pub fn run_checks(faults: Faults) -> Result<CheckReport> {
    let mut s = Suite {
        faults,
        checks: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    gradient_checks(&mut s, &mut rng)?;
    reduction_checks(&mut s, &mut rng)?;
    plackett_luce_checks(&mut s, &mut rng)?;
    shift_checks(&mut s, &mut rng)?;
    normalization_checks(&mut s, &mut rng)?;
    closed_form_checks(&mut s)?;
    recall_checks(&mut s, &mut rng)?;
    crossover_checks(&mut s)?;
    winrate_checks(&mut s, &mut rng)?;

    let mut families: Vec<FamilySummary> = Vec::new();
    for c in &s.checks {
        match families.iter_mut().find(|f| f.family == c.family) {
            Some(f) => {
                f.checks += 1;
                f.failed += usize::from(!c.passed);
            }
            None => families.push(FamilySummary {
                family: c.family.clone(),
                checks: 1,
                failed: usize::from(!c.passed),
            }),
        }
    }
    Ok(CheckReport {
        passed: s.checks.iter().all(|c| c.passed),
        families,
        checks: s.checks,
    })
}
