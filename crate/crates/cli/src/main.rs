use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use larpo::checks::{run_checks, Faults};
use larpo::config::Config;
use larpo::experiments::{run_study, Study, SweepSpec};
use larpo::pipeline::{metrics_csv, run};
use larpo::Error;
use serde::Serialize;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_TREND: u8 = 4;

#[derive(Parser)]
#[command(name = "larpo", version, about = "Iterative ranking-based preference optimization on a synthetic retrieval world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// SFT warm start, iterative alignment, evaluation.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One ablation study with its trend assertion.
    Sweep {
        #[arg(long)]
        study: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The invariant suite.
    Check {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    FlipPairSign,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Divergence(_) => EXIT_DIVERGENCE,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display()))
}

/// Writes via a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(path, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("records serialize");
    s.push('\n');
    s
}

fn prepare_out(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    Ok(Config::from_path(path)?)
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let record = run(&cfg)?;
    prepare_out(out)?;
    write_atomic(&out.join("run.json"), &to_json(&record))?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&record))?;
    let f = &record.final_eval;
    println!(
        "greedy_acc {:.4} expected_reward {:.4} winrate_vs_sft {:.4}",
        f.greedy_accuracy,
        f.expected_reward,
        f.winrate_vs_ref.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    version: &'static str,
    config: &'a Config,
    passed: bool,
    result: &'a larpo::experiments::TrendResult,
}

fn cmd_sweep(study: &str, config: &Path, out: &Path) -> Result<(), Failure> {
    let study: Study = study.parse().map_err(|e: Error| {
        let names: Vec<&str> = Study::ALL.iter().map(|s| s.name()).collect();
        Failure::new(EXIT_CONFIG, format!("{e}; expected one of {}", names.join(", ")))
    })?;
    let cfg = load_config(config)?;
    let result = run_study(&SweepSpec::new(study, cfg.clone()))?;
    prepare_out(out)?;
    write_atomic(&out.join(format!("{study}.csv")), &result.to_csv())?;
    let summary = SweepSummary {
        version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        passed: result.passed(),
        result: &result,
    };
    write_atomic(&out.join(format!("{study}_summary.json")), &to_json(&summary))?;
    for arm in &result.arms {
        println!(
            "{:>24}  expected_reward {:.6} ± {:.6}  winrate {:.4}  duplicate_rate {:.4}",
            arm.value.to_string(),
            arm.mean_expected_reward,
            arm.std_expected_reward,
            arm.mean_winrate,
            arm.mean_duplicate_rate
        );
    }
    println!("{study}: {:?}: {}", result.status, result.diagnostic);
    if result.passed() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_TREND, format!("{study} trend not confirmed: {}", result.diagnostic)))
    }
}

fn cmd_check(out: &Path, fault: Option<Fault>) -> Result<(), Failure> {
    let faults = Faults {
        flip_pair_sign: matches!(fault, Some(Fault::FlipPairSign)),
    };
    let report = run_checks(faults)?;
    prepare_out(out)?;
    write_atomic(&out.join("check_report.json"), &to_json(&report))?;
    for f in &report.families {
        let verdict = if f.failed == 0 { "ok" } else { "FAILED" };
        println!("{:<24} {:>3} checks  {verdict}", f.family, f.checks);
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_FAILURE,
            format!("failing families: {}", report.failed_families().join(", ")),
        ))
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("LARPO_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("LARPO_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Run { config, out, seed } => cmd_run(config, out, *seed),
        Command::Sweep { study, config, out } => cmd_sweep(study, config, out),
        Command::Check { out, inject_fault } => cmd_check(out, *inject_fault),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
