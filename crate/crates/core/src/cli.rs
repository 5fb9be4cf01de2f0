//! Command implementations behind the `neural-ppo` binary.
//!
//! Every command is a pure function of its arguments: the same invocation
//! writes byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harness::checks::{identity_suite, run_checks};
use crate::harness::sweep::{
    global_k_sweep, linearization_sweep, reference_mdp, sgd_rate_sweep, td_rate_sweep, variance_sweep,
    GlobalSweepReport, SweepParam, SweepReport, SweepSpec,
};
use crate::harness::CheckReport;
use crate::mdp::{FeatureMap, FiniteMdp, MdpGenerator, DEFAULT_EPS_MIX};
use crate::oracle::solve_optimal;
use crate::ppo::{self, records_to_csv, RunConfig};
use crate::seeded_rng;

#[derive(Debug, Parser)]
#[command(name = "neural-ppo", version, about = "Neural PPO on finite MDPs with exact-oracle diagnostics")]
pub struct Cli {
    /// Worker threads for sweep cells (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random MDP file.
    GenerateMdp(GenerateArgs),
    /// Check an MDP file against the model invariants.
    ValidateMdp {
        #[arg(long)]
        mdp: PathBuf,
    },
    /// Run neural PPO and write `records.csv` and `manifest.json`.
    Run(RunArgs),
    /// Run neural PPO, then every identity and inequality check; exits nonzero on failure.
    Check(CheckArgs),
    /// Run a rate sweep and write its JSON report.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    pub n_states: usize,
    #[arg(long, default_value_t = 3)]
    pub n_actions: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS_MIX)]
    pub eps_mix: f64,
    /// Feature dimension; `0` selects one-hot features.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// MDP file; the built-in reference MDP when omitted.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long = "K", default_value_t = 50)]
    pub k_iters: usize,
    /// Inner iterations for both actor and critic.
    #[arg(long = "T", default_value_t = 2000)]
    pub t: usize,
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    #[arg(long, default_value_t = 10.0)]
    pub rf: f64,
    #[arg(long, default_value_t = 10.0)]
    pub rq: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Random policies for the identity suite.
    #[arg(long, default_value_t = 100)]
    pub policies: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// Minimum optimality gap of full PPO runs against `K`.
    Global,
    /// TD critic error against `T`.
    Td,
    /// SGD actor error against `T`.
    Sgd,
    /// Linearization error against `m`.
    Linearization,
    /// Update variance against `R`.
    Variance,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    /// Comma-separated grid; a per-kind default when omitted.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Inner iterations (global, variance).
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Width (global, td, sgd, variance).
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    pub rf: f64,
    #[arg(long, default_value_t = 10.0)]
    pub rq: f64,
    /// Perturbation radius of the linearization sweep.
    #[arg(long, default_value_t = 5.0)]
    pub radius: f64,
    /// First of three consecutive seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    /// `sha256("blob <len>\0" ++ bytes)` of the MDP file, hex encoded.
    pub mdp_hash: String,
    pub versions: Versions,
    pub check_summary: CheckSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub neural_ppo: String,
    pub record_columns: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub passed: usize,
    pub total: usize,
    pub all_pass: bool,
    pub failures: Vec<String>,
}

impl CheckSummary {
    pub fn of(report: &CheckReport) -> Self {
        let (passed, total) = report.summary();
        Self { passed, total, all_pass: report.all_pass(), failures: report.failures().map(|c| c.name.clone()).collect() }
    }
}

/// Report written by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepOutput {
    Global(GlobalSweepReport),
    Rate(SweepReport),
}

/// Git-style content hash over SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build()?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenerateMdp(args) => cmd_generate_mdp(&args).map(|_| 0),
        Command::ValidateMdp { mdp } => cmd_validate_mdp(&mdp),
        Command::Run(args) => cmd_run(&args).map(|_| 0),
        Command::Check(args) => cmd_check(&args).map(|report| if report.all_pass() { 0 } else { 1 }),
        Command::Sweep(args) => cmd_sweep(&args).map(|_| 0),
    }
}

pub fn cmd_generate_mdp(args: &GenerateArgs) -> Result<FiniteMdp> {
    if !(args.gamma > 0.0 && args.gamma < 1.0) {
        bail!("gamma must lie in (0, 1)");
    }
    let features = if args.d == 0 { FeatureMap::OneHot } else { FeatureMap::RandomUnit { d: args.d, scale: 0.9 } };
    let mdp = MdpGenerator::new(args.n_states, args.n_actions, args.gamma)
        .with_eps_mix(args.eps_mix)
        .with_features(features)
        .generate(&mut seeded_rng(args.seed, 0))?;
    write(&args.out, &mdp.to_json())?;
    Ok(mdp)
}

/// Prints the validation report; exit code 0 iff valid.
pub fn cmd_validate_mdp(path: &Path) -> Result<i32> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: crate::mdp::MdpFile = serde_json::from_str(&text).context("parsing MDP file")?;
    let mdp = FiniteMdp::from_file(file)?;
    let report = mdp.validate();
    if report.is_valid() {
        println!("valid: {} states, {} actions, gamma {}, R_max {}", mdp.n_states(), mdp.n_actions(), mdp.gamma(), report.r_max);
        Ok(0)
    } else {
        for v in &report.violations {
            println!("{v}");
        }
        Ok(1)
    }
}

/// Loads `path`, or the reference MDP, together with the bytes the hash is taken over.
pub fn load_mdp(path: Option<&Path>) -> Result<(FiniteMdp, Vec<u8>)> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let mdp = FiniteMdp::from_json(std::str::from_utf8(&bytes).context("MDP file is not UTF-8")?)?;
            Ok((mdp, bytes))
        }
        None => {
            let mdp = reference_mdp();
            let bytes = mdp.to_json().into_bytes();
            Ok((mdp, bytes))
        }
    }
}

impl RunArgs {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            beta: self.beta,
            k_iters: self.k_iters,
            t_f: self.t,
            t_q: self.t,
            m: self.m,
            r_f: self.rf,
            r_q: self.rq,
            seed: self.seed,
            ..RunConfig::default()
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

struct RunArtifacts {
    report: CheckReport,
}

fn run_and_write(args: &RunArgs, extra: impl FnOnce(&FiniteMdp, &mut CheckReport) -> Result<()>) -> Result<RunArtifacts> {
    let (mdp, bytes) = load_mdp(args.mdp.as_deref())?;
    let config = args.config();
    let oracle = solve_optimal(&mdp)?;
    let (records, failure) = match ppo::run_with_oracle(&mdp, &oracle, &config) {
        Ok(out) => (out.records, None),
        Err(f) => (std::mem::take(&mut { f.completed }), Some(f.source)),
    };
    let mut report = CheckReport::default();
    if !records.is_empty() {
        run_checks(&records).into_iter().for_each(|c| report.push(c));
    }
    extra(&mdp, &mut report)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("records.csv"), &records_to_csv(&records))?;
    let manifest = Manifest {
        seed: config.seed,
        config,
        mdp_hash: content_hash(&bytes),
        versions: Versions {
            neural_ppo: env!("CARGO_PKG_VERSION").into(),
            record_columns: crate::ppo::IterationRecord::CSV_HEADER.into(),
        },
        check_summary: CheckSummary::of(&report),
    };
    write(&args.out.join("manifest.json"), &to_json(&manifest))?;
    if let Some(err) = failure {
        bail!("run aborted after {} iterations: {err}", records.len());
    }
    Ok(RunArtifacts { report })
}

pub fn cmd_run(args: &RunArgs) -> Result<CheckReport> {
    Ok(run_and_write(args, |_, _| Ok(()))?.report)
}

/// Writes `check_report.json` next to the run artifacts and prints the table.
pub fn cmd_check(args: &CheckArgs) -> Result<CheckReport> {
    let n = args.policies;
    let seed = args.run.seed;
    let artifacts = run_and_write(&args.run, |mdp, report| {
        let oracle = solve_optimal(mdp)?;
        for c in identity_suite(mdp, &oracle, n, &mut seeded_rng(seed, 6))? {
            report.push(c);
        }
        Ok(())
    })?;
    write(&args.run.out.join("check_report.json"), &to_json(&artifacts.report))?;
    print!("{}", artifacts.report.table());
    let (passed, total) = artifacts.report.summary();
    println!("{passed}/{total} checks passed");
    Ok(artifacts.report)
}

/// Default grids and thresholds per sweep kind.
pub fn default_sweep(kind: SweepKind) -> (SweepParam, Vec<f64>, f64) {
    match kind {
        SweepKind::Global => (SweepParam::K, vec![4.0, 16.0, 64.0, 256.0], -0.35),
        SweepKind::Td | SweepKind::Sgd => (SweepParam::T, vec![64.0, 256.0, 1024.0, 4096.0], -0.4),
        SweepKind::Linearization => {
            (SweepParam::M, vec![64.0, 256.0, 1024.0, 4096.0, 16384.0], -0.4)
        }
        SweepKind::Variance => (SweepParam::R, vec![1.0, 2.0, 4.0, 8.0], 2.2),
    }
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepOutput> {
    let (param, default_grid, threshold) = default_sweep(args.kind);
    let grid = args.grid.clone().unwrap_or(default_grid);
    let spec = SweepSpec::new(param, grid, args.seed, threshold);
    let (mdp, _) = load_mdp(args.mdp.as_deref())?;
    let radius = args.rq;
    let out = match args.kind {
        SweepKind::Global => {
            let oracle = solve_optimal(&mdp)?;
            let t = args.t.unwrap_or(4096);
            let base = RunConfig {
                beta: args.beta,
                t_f: t,
                t_q: t,
                m: args.m.unwrap_or(2048),
                r_f: args.rf,
                r_q: args.rq,
                ..RunConfig::default()
            };
            SweepOutput::Global(global_k_sweep(&mdp, &oracle, &base, spec)?)
        }
        SweepKind::Td => SweepOutput::Rate(td_rate_sweep(&mdp, args.m.unwrap_or(512), radius, spec)?),
        SweepKind::Sgd => SweepOutput::Rate(sgd_rate_sweep(&mdp, args.m.unwrap_or(512), radius, spec)?),
        SweepKind::Linearization => SweepOutput::Rate(linearization_sweep(mdp.d(), args.radius, 32, 256, spec)?),
        SweepKind::Variance => {
            SweepOutput::Rate(variance_sweep(&mdp, args.m.unwrap_or(512), args.t.unwrap_or(2000), 2000, spec)?)
        }
    };
    write(&args.out, &to_json(&out))?;
    let check = match &out {
        SweepOutput::Global(g) => &g.sweep.check,
        SweepOutput::Rate(r) => &r.check,
    };
    println!("{}: slope {:.4} (threshold {}) {}", check.name, check.value, check.rhs, if check.pass { "pass" } else { "FAIL" });
    Ok(out)
}
