//! `dfls`: single solves, benchmark sweeps, profiles and audit manifests.

mod io;
mod plan;
mod profile;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dfls::problems::{default_suite_ids, problem_by_id, NoiseKind, NoiseSpec};
use dfls::profiles::to_csv;
use dfls::solver::{solve, Mode, SolverConfig, Termination};

use crate::io::{jsonl_bytes, resolve, write_atomic};
use crate::plan::{run_plan, BenchPlan, Manifest};
use crate::profile::{build_profiles, manifest_defaults, LogSet, HIGH_ACCURACY_TAUS};

#[derive(Parser)]
#[command(name = "dfls", version, about = "Derivative-free Gauss-Newton least-squares solver and benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem and write its result and evaluation log.
    Solve(SolveArgs),
    /// Run a benchmark sweep, one evaluation log per cell.
    Bench(BenchArgs),
    /// Compute data and performance profiles from a log directory.
    Profile(ProfileArgs),
    /// Print the manifest of a sweep without running it.
    Manifest(ManifestArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    problem: String,
    #[arg(long, default_value = "practical")]
    mode: Mode,
    #[arg(long, default_value = "none")]
    noise: NoiseKind,
    #[arg(long, default_value_t = 1e-2)]
    sigma: f64,
    /// Budget in simplex gradients; the evaluation cap is this times n + 1.
    #[arg(long, default_value_t = 200)]
    budget_gradients: usize,
    #[arg(long, default_value_t = 1e-10)]
    rho_end: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "result.json")]
    out: PathBuf,
    /// Evaluation log path; defaults to the result path with a `.jsonl` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Include the final interpolation geometry in the result.
    #[arg(long)]
    dump_geometry: bool,
}

#[derive(Args)]
struct PlanArgs {
    /// Problem ids; defaults to the full suite.
    #[arg(long, value_delimiter = ',')]
    problems: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "practical")]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_value = "none")]
    noise: Vec<NoiseKind>,
    #[arg(long, value_delimiter = ',', default_value = "1e-2")]
    sigmas: Vec<f64>,
    /// Accuracy levels recorded as the default for `profile`.
    #[arg(long, value_delimiter = ',', default_value = "1e-5")]
    taus: Vec<f64>,
    /// Runs per noisy configuration; smooth configurations run once.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 200)]
    budget_gradients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    rho_end: f64,
}

impl PlanArgs {
    fn plan(&self) -> BenchPlan {
        BenchPlan {
            problems: if self.problems.is_empty() { default_suite_ids() } else { self.problems.clone() },
            modes: self.modes.clone(),
            noises: self.noise.clone(),
            sigmas: self.sigmas.clone(),
            taus: self.taus.clone(),
            budget_gradients: self.budget_gradients,
            runs: self.runs,
            base_seed: self.seed,
            rho_end: self.rho_end,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, default_value = "bench")]
    out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    log_dir: PathBuf,
    /// Accuracy levels; defaults to the manifest's list, else 1e-5.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Add the levels 1e-1, 1e-5, 1e-7, 1e-9 and 1e-11.
    #[arg(long)]
    high_accuracy: bool,
    /// Data-profile range in simplex gradients; defaults to the manifest's budget, else 200.
    #[arg(long)]
    ng: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    alpha_max: f64,
    #[arg(long, default_value = "profiles.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ManifestArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Output path; prints to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A configuration problem the user can fix; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<E: std::fmt::Display>(e: E) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn cmd_solve(args: &SolveArgs) -> Result<ExitCode> {
    let problem = problem_by_id(&args.problem).map_err(usage)?;
    if args.budget_gradients == 0 {
        return Err(usage("budget-gradients must be at least 1"));
    }
    let mut config = SolverConfig::new(args.mode, args.budget_gradients * (problem.n + 1));
    config.rho_end = args.rho_end;
    config.dump_geometry = args.dump_geometry;
    let sigma = if args.noise == NoiseKind::None { 0.0 } else { args.sigma };
    let result = solve(&problem, &config, NoiseSpec::new(args.noise, sigma, args.seed)).map_err(usage)?;

    let out = resolve(&args.out);
    let log = match &args.log {
        Some(p) => resolve(p),
        None => out.with_extension("jsonl"),
    };
    write_atomic(&out, &serde_json::to_vec_pretty(&result)?)?;
    write_atomic(&log, &jsonl_bytes(&result.trace)?)?;
    println!(
        "{} {}: {} after {} evaluations, f = {:e}",
        problem.name,
        args.mode.as_str(),
        result.termination.as_str(),
        result.evals_used,
        result.f_final
    );
    Ok(if result.termination == Termination::EvalFailure {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode> {
    let plan = args.plan.plan();
    plan.validate().map_err(usage)?;
    let dir = resolve(&args.out_dir);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let manifest = pool.install(|| run_plan(&plan, &dir))?;
    let failed = manifest.cells.iter().filter(|c| c.status != "ok").count();
    println!(
        "{} cells run, {} failed; logs in {}",
        manifest.cells.len(),
        failed,
        dir.display()
    );
    for cell in manifest.cells.iter().filter(|c| c.status != "ok") {
        eprintln!("{}: {}", cell.log, cell.status);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(args: &ProfileArgs) -> Result<ExitCode> {
    let dir = resolve(&args.log_dir);
    let defaults = manifest_defaults(&dir)?;
    let mut taus = if !args.tau.is_empty() {
        args.tau.clone()
    } else {
        defaults.as_ref().map(|d| d.1.clone()).unwrap_or_else(|| vec![1e-5])
    };
    if args.high_accuracy {
        taus.extend(HIGH_ACCURACY_TAUS);
    }
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let ng = args.ng.or(defaults.map(|d| d.0)).unwrap_or(200);
    if ng == 0 {
        return Err(usage("ng must be at least 1"));
    }
    let set = LogSet::load(&dir)?;
    let tables = build_profiles(&set, &taus, ng, args.alpha_max).map_err(usage)?;
    let out = resolve(&args.out);
    write_atomic(&out, to_csv(&tables).as_bytes())?;
    println!("{} profiles written to {}", tables.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_manifest(args: &ManifestArgs) -> Result<ExitCode> {
    let manifest = Manifest::planned(&args.plan.plan()).map_err(usage)?;
    let text = serde_json::to_string_pretty(&manifest)?;
    match &args.out {
        Some(p) => write_atomic(&resolve(p), text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Manifest(a) => cmd_manifest(a),
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
