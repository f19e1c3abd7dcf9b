//! Command-line front end.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench;
use crate::error::{Error, Result};
use crate::gp::{fit_hyperparameters, Hyperparameters, TrainingSet};
use crate::plot;
use crate::recinv::PriorMean;
use crate::sim::{self, ScenarioConfig, ScenarioSummary};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "gpmpc", version, about = "Channel-aware GP-MPC for a leader-follower vehicle pair")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a labelled training set from the configured delay field.
    GenData(GenDataArgs),
    /// Run the closed loop and write the trace and summary.
    Run(RunArgs),
    /// Time the recursive window update against dense re-inversion.
    BenchInverse(BenchArgs),
    /// Grid-search kernel hyperparameters on a training set.
    FitHyper(FitArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; receives training.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training CSV written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub channel_seed: Option<u64>,
    /// Also run the λ = 0 baseline on the same seeds.
    #[arg(long, conflicts_with = "baseline")]
    pub paired: bool,
    /// Run with the channel term switched off.
    #[arg(long)]
    pub baseline: bool,
    /// Write gap.svg next to the trace.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub nu: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Sidecar describing how an output directory was produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed_overrides: SeedOverrides,
    pub timestamp_unix: u64,
    /// Fully resolved config after overrides.
    pub config: Option<ScenarioConfig>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SeedOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<u64>,
}

#[derive(Debug, Serialize)]
struct FitOutput {
    hyper: Hyperparameters,
    log_marginal_likelihood: f64,
    points: usize,
    candidates: usize,
}

#[derive(Debug, Serialize)]
struct PairedSummary {
    aware: ScenarioSummary,
    baseline: ScenarioSummary,
    delay_cost_aware: f64,
    delay_cost_baseline: f64,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidBounds(_)
        | Error::InvalidHyperparameters(_)
        | Error::EmptyGrid
        | Error::Json(_) => EXIT_CONFIG,
        Error::Collision { .. } => EXIT_RUNTIME,
        _ => EXIT_FAILURE,
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = std::fs::metadata(dir)?;
    if meta.permissions().readonly() {
        return Err(Error::Config(format!("output directory {} is not writable", dir.display())));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn manifest(command: &str, config_path: Option<&Path>, out: &Path, seeds: SeedOverrides, cfg: Option<&ScenarioConfig>) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_path: config_path.map(Path::to_path_buf),
        output_dir: out.to_path_buf(),
        seed_overrides: seeds,
        timestamp_unix: now_unix(),
        config: cfg.cloned(),
    }
}

fn load_training(path: &Path) -> Result<TrainingSet> {
    TrainingSet::load(path)
}

pub fn gen_data(a: &GenDataArgs) -> Result<u8> {
    let mut cfg = ScenarioConfig::load(&a.config)?;
    if let Some(s) = a.data_seed {
        cfg.seeds.data = s;
    }
    ensure_dir(&a.out)?;
    let set = sim::generate_training_data(&cfg)?;
    set.save(&a.out.join("training.csv"))?;
    let seeds = SeedOverrides { data: a.data_seed, channel: None };
    write_json(&a.out.join("manifest.json"), &manifest("gen-data", Some(&a.config), &a.out, seeds, Some(&cfg)))?;
    log::info!("wrote {} rows to {}", set.len(), a.out.join("training.csv").display());
    Ok(EXIT_OK)
}

fn runtime_status(s: &ScenarioSummary) -> u8 {
    if matches!(s.outcome, sim::Outcome::Collision { .. }) || s.infeasible_steps > 0 {
        EXIT_RUNTIME
    } else {
        EXIT_OK
    }
}

pub fn run(a: &RunArgs) -> Result<u8> {
    let mut cfg = ScenarioConfig::load(&a.config)?;
    if let Some(s) = a.channel_seed {
        cfg.seeds.channel = s;
    }
    if a.baseline {
        cfg = cfg.baseline();
    }
    ensure_dir(&a.out)?;
    let training = Arc::new(load_training(&a.data)?);
    let seeds = SeedOverrides { data: None, channel: a.channel_seed };
    write_json(&a.out.join("manifest.json"), &manifest("run", Some(&a.config), &a.out, seeds, Some(&cfg)))?;

    if a.paired {
        let (aware, base) = sim::run_paired(&cfg, training)?;
        aware.save(&a.out.join("trace_aware.csv"))?;
        base.save(&a.out.join("trace_baseline.csv"))?;
        let sa = aware.summary(&cfg);
        let sb = base.summary(&cfg.baseline());
        if a.svg {
            std::fs::write(a.out.join("gap.svg"), plot::gap_svg(&cfg.field, &[("aware", &aware), ("baseline", &base)]))?;
        }
        let code = runtime_status(&sa).max(runtime_status(&sb));
        write_json(
            &a.out.join("summary.json"),
            &PairedSummary { delay_cost_aware: sa.delay_cost, delay_cost_baseline: sb.delay_cost, aware: sa, baseline: sb },
        )?;
        return Ok(code);
    }

    let trace = sim::run_scenario(&cfg, training)?;
    trace.save(&a.out.join("trace.csv"))?;
    let summary = trace.summary(&cfg);
    write_json(&a.out.join("summary.json"), &summary)?;
    if a.svg {
        std::fs::write(a.out.join("gap.svg"), plot::gap_svg(&cfg.field, &[("run", &trace)]))?;
    }
    Ok(runtime_status(&summary))
}

pub fn bench_inverse(a: &BenchArgs) -> Result<u8> {
    if a.sizes.is_empty() {
        return Err(Error::Config("no window sizes given".into()));
    }
    let mut rows = Vec::new();
    for &m in &a.sizes {
        let row = bench::bench_window(m, a.nu, a.reps, a.seed)?;
        log::info!("m = {m}: recursive {:.3e} s, dense {:.3e} s", row.recursive_median_s, row.dense_median_s);
        if row.max_rel_error > 1e-8 {
            log::error!("m = {m}: maintained inverse deviates by {:.3e}", row.max_rel_error);
            return Err(Error::Singular);
        }
        rows.push(row);
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    bench::write_csv(&rows, std::io::BufWriter::new(std::fs::File::create(&a.out)?))?;
    Ok(EXIT_OK)
}

pub fn fit_hyper(a: &FitArgs) -> Result<u8> {
    let cfg = ScenarioConfig::load(&a.config)?;
    let fit = cfg.fit.clone().ok_or_else(|| Error::Config("config has no `fit` section".into()))?;
    let full = load_training(&a.data)?;
    let set = full.subsample(fit.max_points);
    let prior = match cfg.controller.gp.prior_mean {
        PriorMean::Zero => 0.0,
        PriorMean::Constant(c) => c,
        PriorMean::WindowMean => set.mean_delay(),
    };
    let grid = fit.grid.candidates();
    let (hyper, lml) = fit_hyperparameters(&set, &grid, prior)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(&a.out, &FitOutput { hyper, log_marginal_likelihood: lml, points: set.len(), candidates: grid.len() })?;
    Ok(EXIT_OK)
}

/// Runs a parsed command and maps the outcome to a process exit code.
pub fn dispatch(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::BenchInverse(a) => bench_inverse(a),
        Command::FitHyper(a) => fit_hyper(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_bench_sizes() {
        let cli = Cli::try_parse_from(["gpmpc", "bench-inverse", "--sizes", "10,20", "--out", "b.csv"]).unwrap();
        match cli.command {
            Command::BenchInverse(b) => {
                assert_eq!(b.sizes, vec![10, 20]);
                assert_eq!(b.nu, 5);
            }
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn paired_and_baseline_conflict() {
        let r = Cli::try_parse_from([
            "gpmpc", "run", "--config", "c", "--data", "d", "--out", "o", "--paired", "--baseline",
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Collision { gap: -1.0 }), EXIT_RUNTIME);
        assert_eq!(exit_code(&Error::Singular), EXIT_FAILURE);
    }
}
