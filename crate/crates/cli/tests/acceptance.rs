//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use larpo::config::Config;
use larpo::eval::{crossover_instance, recall_at_n_exact, recall_at_n_mc, CROSSOVER_TEMPERATURES};
use larpo::experiments::{run_study, Study, SweepSpec};
use larpo::mining::{make_negative, HardnessLevel};
use larpo::objectives::{
    loss_and_grad, loss_contrastive, loss_lambdarank, loss_listmle, loss_pair, ranking_probability,
    sft_loss_and_grad, ObjectiveKind, SftNegatives,
};
use larpo::pipeline::Environment;
use larpo::world::{generate_world, RewardOracle, SyntheticWorld};
use larpo::{BiEncoderPolicy, Policy};
use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");
const HARDNESS_TOML: &str = include_str!("../../../configs/hardness.toml");
const PAIRWISE_TOML: &str = include_str!("../../../configs/pairwise.toml");
const MID_ACCURACY_TOML: &str = include_str!("../../../configs/mid_accuracy.toml");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Independent re-implementation of the policy and losses, used as the
// finite-difference oracle.

fn scores(world: &SyntheticWorld, w: &Array2<f64>, x: usize) -> Vec<f64> {
    let u = world.features(x);
    let d = world.embed_dim();
    let q: Vec<f64> = (0..d).map(|i| (0..d).map(|j| w[[i, j]] * u[j]).sum()).collect();
    (0..world.n_responses())
        .map(|y| {
            let e = world.embedding(y);
            (0..d).map(|i| q[i] * e[i]).sum()
        })
        .collect()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

fn log_probs(world: &SyntheticWorld, w: &Array2<f64>, x: usize) -> Vec<f64> {
    let s = scores(world, w, x);
    let z = lse(&s);
    s.iter().map(|v| v - z).collect()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn oracle_loss(kind: ObjectiveKind, g: &[f64]) -> f64 {
    match kind {
        ObjectiveKind::Pair => softplus(g[1] - g[0]),
        ObjectiveKind::Contrastive => lse(g) - g[0],
        ObjectiveKind::LambdaRank => {
            let mut t = 0.0;
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    t += softplus(g[j] - g[i]);
                }
            }
            t
        }
        ObjectiveKind::ListMle => (0..g.len()).map(|i| lse(&g[i..]) - g[i]).sum(),
    }
}

fn central_difference(w: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(w.dim());
    let mut p = w.clone();
    for idx in ndarray::indices(w.dim()) {
        let orig = p[idx];
        p[idx] = orig + h;
        let up = f(&p);
        p[idx] = orig - h;
        let down = f(&p);
        p[idx] = orig;
        out[idx] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest violation ratio: 1.0 means exactly at tolerance.
fn gradient_violation(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        let v = if scale < 1e-8 {
            (a - n).abs() / 1e-8
        } else {
            (a - n).abs() / scale / 1e-5
        };
        worst = worst.max(v);
    }
    worst
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let world = Arc::new(generate_world(8, 24, 5, 2, 3).unwrap());
    let mut details = Vec::new();
    let mut ok = true;
    for kind in ObjectiveKind::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let policy = BiEncoderPolicy::random(Arc::clone(&world), 0.5, &mut rng);
            let reference = BiEncoderPolicy::random(Arc::clone(&world), 0.5, &mut rng);
            let m = if kind == ObjectiveKind::Pair { 2 } else { rng.random_range(3..=6) };
            let x = rng.random_range(0..world.n_prompts());
            let ids = index::sample(&mut rng, world.n_responses(), m).into_vec();
            let beta = rng.random_range(0.2..2.0);
            let (_, analytic) = loss_and_grad(kind, &policy, &reference, x, &ids, beta).unwrap();
            let ref_lp = log_probs(&world, reference.weights(), x);
            let numeric = central_difference(policy.weights(), 1e-5, |w| {
                let lp = log_probs(&world, w, x);
                let g: Vec<f64> = ids.iter().map(|&y| beta * (lp[y] - ref_lp[y])).collect();
                oracle_loss(kind, &g)
            });
            worst = worst.max(gradient_violation(&analytic, &numeric));
        }
        ok &= worst < 1.0;
        details.push(format!("{kind} {worst:.2e}"));
    }
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let policy = BiEncoderPolicy::random(Arc::clone(&world), 0.5, &mut rng);
        let x = rng.random_range(0..world.n_prompts());
        let gold = world.gold(x);
        let support: Option<Vec<usize>> = (i % 2 == 1).then(|| {
            let mut negs: Vec<usize> = index::sample(&mut rng, world.n_responses(), 6)
                .into_iter()
                .filter(|&y| y != gold)
                .collect();
            negs.sort_unstable();
            negs
        });
        let negatives = match &support {
            None => SftNegatives::Exact,
            Some(n) => SftNegatives::Estimator(n.clone()),
        };
        let (_, analytic) = sft_loss_and_grad(&policy, x, gold, &negatives).unwrap();
        let numeric = central_difference(policy.weights(), 1e-5, |w| {
            let s = scores(&world, w, x);
            match &support {
                None => lse(&s) - s[gold],
                Some(negs) => {
                    let mut sub = vec![s[gold]];
                    sub.extend(negs.iter().map(|&y| s[y]));
                    lse(&sub) - s[gold]
                }
            }
        });
        worst = worst.max(gradient_violation(&analytic, &numeric));
    }
    ok &= worst < 1.0;
    details.push(format!("sft-infonce {worst:.2e}"));
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < 10.0;
    verdict(
        ok,
        format!("worst error / tolerance: {}; {secs:.2}s (< 10s)", details.join(", ")),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gw = rng.random_range(-8.0..8.0);
        let gl = rng.random_range(-8.0..8.0);
        let p = loss_pair(gw, gl);
        worst = worst
            .max((loss_contrastive(gw, &[gl]).unwrap() - p).abs())
            .max((loss_lambdarank(&[gw, gl]).unwrap() - p).abs())
            .max((loss_listmle(&[gw, gl]).unwrap() - p).abs());
    }
    verdict(worst <= 1e-12, format!("max |difference| {worst:.2e} over 100 pairs (tol 1e-12)"))
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

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst, mut worst_sum): (f64, f64) = (0.0, 0.0);
    for m in 2..=5 {
        let gammas: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut total = 0.0;
        for order in permutations(m) {
            let ordered: Vec<f64> = order.iter().map(|&i| gammas[i]).collect();
            let model = (-loss_listmle(&ordered).unwrap()).exp();
            // Sequential sampling without replacement with weights e^γ.
            let mut left: Vec<usize> = (0..m).collect();
            let mut p = 1.0;
            for &i in &order {
                let z: f64 = left.iter().map(|&j| gammas[j].exp()).sum();
                p *= gammas[i].exp() / z;
                left.retain(|&j| j != i);
            }
            worst = worst.max((model - p).abs());
            total += model;
        }
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    verdict(
        worst <= 1e-10 && worst_sum <= 1e-10,
        format!("max order-probability error {worst:.2e}, max |sum - 1| {worst_sum:.2e} (tol 1e-10)"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for kind in ObjectiveKind::ALL {
        for _ in 0..200 {
            let m = if kind == ObjectiveKind::Pair { 2 } else { rng.random_range(2..=6) };
            let gammas: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c = rng.random_range(-10.0..10.0);
            let rewards: Vec<f64> = gammas.iter().map(|g| g + c).collect();
            let a = ranking_probability(kind, &gammas).unwrap();
            let b = ranking_probability(kind, &rewards).unwrap();
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max |P(γ + c) - P(γ)| {worst:.2e} over 800 lists (tol 1e-12)"))
}

fn criterion_5() -> Verdict {
    let ln2 = std::f64::consts::LN_2;
    let e1 = (loss_pair(0.7, 0.7) - ln2).abs();
    let e2 = (loss_lambdarank(&[0.4; 3]).unwrap() - 3.0 * ln2).abs();
    let e3 = (loss_listmle(&[-1.1; 3]).unwrap() - 6f64.ln()).abs();
    let worst = e1.max(e2).max(e3);
    verdict(
        worst <= 1e-12,
        format!("pair {e1:.1e}, lambdarank {e2:.1e}, listmle {e3:.1e} (tol 1e-12)"),
    )
}

fn criterion_6() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let world = Arc::new(generate_world(16, 48, 6, 4, 8).unwrap());
    let oracle = RewardOracle::exact(&world);
    let mut worst_z: f64 = 0.0;
    let mut formula: f64 = 0.0;
    let mut monotone = true;
    let trials = 10_000;
    let mut instances = 0;
    let mut redrawn = 0;
    while instances < 20 {
        let policy = BiEncoderPolicy::random(Arc::clone(&world), rng.random_range(0.5..6.0), &mut rng);
        let x = rng.random_range(0..world.n_prompts());
        let n = rng.random_range(1..=30);
        let t = rng.random_range(0.3..3.0);
        let exact = recall_at_n_exact(&policy, &oracle, x, n, t).unwrap();
        // The standard error is only meaningful with enough expected hits and misses.
        if trials as f64 * exact * (1.0 - exact) < 10.0 {
            redrawn += 1;
            continue;
        }
        instances += 1;
        // Closed form from independently computed probabilities.
        let s: Vec<f64> = scores(&world, policy.weights(), x).iter().map(|v| v / t).collect();
        let z = lse(&s);
        let p = (s[world.gold(x)] - z).exp();
        formula = formula.max((exact - (1.0 - (1.0 - p).powi(n as i32))).abs());
        let mc = recall_at_n_mc(&policy, &oracle, x, n, t, trials, &mut rng).unwrap();
        let se = (exact * (1.0 - exact) / trials as f64).sqrt();
        let zscore = (mc - exact).abs() / se;
        worst_z = worst_z.max(zscore);
        let mut prev = 0.0;
        for k in 1..=100 {
            let r = recall_at_n_exact(&policy, &oracle, x, k, t).unwrap();
            monotone &= r >= prev;
            prev = r;
        }
    }
    let (world_c, policy_c) = crossover_instance().unwrap();
    let oracle_c = RewardOracle::exact(&world_c);
    let (lo, hi) = CROSSOVER_TEMPERATURES;
    let mean = |n, t| {
        (0..world_c.n_prompts())
            .map(|x| recall_at_n_exact(&policy_c, &oracle_c, x, n, t).unwrap())
            .sum::<f64>()
            / world_c.n_prompts() as f64
    };
    let (r1_lo, r1_hi, r50_lo, r50_hi) = (mean(1, lo), mean(1, hi), mean(50, lo), mean(50, hi));
    let crossover = r1_lo > r1_hi && r50_hi > r50_lo;
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst_z <= 3.0 && formula <= 1e-12 && monotone && crossover && secs < 30.0,
        format!(
            "max |MC - exact| {worst_z:.2} SE (<= 3) over 20 instances ({redrawn} degenerate draws replaced); closed-form error {formula:.1e}; monotone {monotone}; \
             crossover R@1 {r1_lo:.3} (t={lo}) > {r1_hi:.3} (t={hi}), R@50 {r50_hi:.3} (t={hi}) > {r50_lo:.3} (t={lo}); {secs:.2}s (< 30s)"
        ),
    )
}

fn study(study: Study, toml: &str) -> (larpo::experiments::TrendResult, f64) {
    let started = Instant::now();
    let cfg = Config::from_toml_str(toml).unwrap();
    let r = run_study(&SweepSpec::new(study, cfg)).unwrap();
    (r, started.elapsed().as_secs_f64())
}

fn study_line(r: &larpo::experiments::TrendResult) -> String {
    let counts: Vec<String> = r
        .sign_counts
        .iter()
        .map(|c| format!("{}<={} in {}/{} seeds", c.lower, c.higher, c.agree, c.of))
        .collect();
    format!("{}; {}", r.diagnostic, counts.join(", "))
}

fn criterion_7() -> Verdict {
    let (r, secs) = study(Study::Objective, DEFAULT_TOML);
    let seeds = r.arms[0].seeds.len();
    verdict(
        r.passed() && seeds == 10 && secs < 120.0,
        format!("{}; {seeds} seeds; {secs:.1}s (< 120s)", study_line(&r)),
    )
}

fn criterion_8() -> Verdict {
    let (r, _) = study(Study::Hardness, HARDNESS_TOML);
    verdict(r.passed() && r.arms[0].seeds.len() == 10, study_line(&r))
}

fn criterion_9() -> Verdict {
    let (r, _) = study(Study::ListSize, DEFAULT_TOML);
    let sizes: Vec<String> = r.arms.iter().map(|a| a.value.to_string()).collect();
    verdict(
        r.passed() && sizes == ["2", "4", "6", "8", "10"] && r.arms[0].seeds.len() == 10,
        study_line(&r),
    )
}

fn criterion_10() -> Verdict {
    let (r, _) = study(Study::Memorization, PAIRWISE_TOML);
    verdict(r.passed() && r.arms[0].seeds.len() == 10, study_line(&r))
}

fn criterion_11() -> Verdict {
    let (r, _) = study(Study::Temperature, PAIRWISE_TOML);
    let grid: Vec<String> = r.arms.iter().map(|a| a.value.to_string()).collect();
    let dup = r.arms[0].mean_duplicate_rate;
    verdict(
        r.passed() && grid == ["0.3", "0.7", "1", "1.5"] && r.arms[0].seeds.len() == 10,
        format!("{}; reported duplicate rate at t=0.3: {dup:.4}", study_line(&r)),
    )
}

fn criterion_12() -> Verdict {
    let dir = tempfile::TempDir::new().unwrap();
    let config = dir.path().join("default.toml");
    std::fs::write(&config, DEFAULT_TOML).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_larpo"))
            .args(["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("LARPO_THREADS", "1")
            .output()
            .unwrap()
            .status;
        if !status.success() {
            return verdict(false, format!("run exited with {status}"));
        }
        outputs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    verdict(
        outputs[0] == outputs[1] && !outputs[0].is_empty(),
        format!("two runs, LARPO_THREADS=1, metrics.csv {} bytes each, identical: {}", outputs[0].len(), outputs[0] == outputs[1]),
    )
}

fn criterion_13() -> Verdict {
    let cfg = Config::from_toml_str(MID_ACCURACY_TOML).unwrap();
    let env = Environment::new(&cfg).unwrap();
    let train = cfg.train_config();
    let mut means = [0.0f64; 4];
    let mut worst_margin = f64::INFINITY;
    let (mut lowest, mut highest) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in cfg.study_seed_list() {
        let (policy, _) = env.sft_policy(&cfg, seed).unwrap();
        let g = larpo::eval::greedy_accuracy(&policy, &env.oracle).unwrap();
        lowest = lowest.min(g);
        highest = highest.max(g);
        let n = env.world.n_prompts();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x13);
        let mut level_means = [0.0f64; 4];
        for (li, level) in HardnessLevel::ALL.into_iter().enumerate() {
            let mut total = 0.0;
            for d in 0..1000 {
                let x = d % n;
                let y = make_negative(&env.world, &policy, &env.oracle, x, level, train.t_hi, train.t_lo, &mut rng).unwrap();
                total += log_probs(&env.world, policy.weights(), x)[y];
            }
            level_means[li] = total / 1000.0;
        }
        for w in level_means.windows(2) {
            worst_margin = worst_margin.min(w[1] - w[0]);
        }
        for (m, v) in means.iter_mut().zip(level_means) {
            *m += v / cfg.study_seeds as f64;
        }
    }
    let mid = lowest > 0.2 && highest < 0.9;
    verdict(
        worst_margin >= 0.1 && mid && cfg.study_seeds == 10,
        format!(
            "mean log π per level easiest {:.3} < easy {:.3} < hard {:.3} < hardest {:.3}; smallest per-seed step {worst_margin:.3} nats (>= 0.1); \
             greedy accuracy {lowest:.3}..{highest:.3} across seeds (inside 0.2..0.9)",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 13] = [
        ("gradient fidelity", criterion_1),
        ("reduction identities", criterion_2),
        ("Plackett-Luce oracle", criterion_3),
        ("Z-cancellation", criterion_4),
        ("closed-form spot values", criterion_5),
        ("Recall@N", criterion_6),
        ("objective trend", criterion_7),
        ("hardness trend", criterion_8),
        ("list-size trend", criterion_9),
        ("memorization trend", criterion_10),
        ("temperature study", criterion_11),
        ("determinism", criterion_12),
        ("hardness-metric ordering", criterion_13),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f();
        if !v.pass {
            failed += 1;
        }
        println!("[{}] {:>2}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
