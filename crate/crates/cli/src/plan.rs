//! Benchmark plans, their cells, and the manifest that records them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use dfls::problems::{problem_by_id, NoiseKind, NoiseSpec};
use dfls::solver::{solve, Mode, SolverConfig, Termination};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{jsonl_bytes, sha256_hex, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub problems: Vec<String>,
    pub modes: Vec<Mode>,
    pub noises: Vec<NoiseKind>,
    pub sigmas: Vec<f64>,
    pub taus: Vec<f64>,
    pub budget_gradients: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub rho_end: f64,
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            bail!("runs must be at least 1");
        }
        if self.budget_gradients == 0 {
            bail!("budget-gradients must be at least 1");
        }
        if self.problems.is_empty() || self.modes.is_empty() || self.noises.is_empty() {
            bail!("plan needs at least one problem, mode and noise kind");
        }
        if self.noises.iter().any(|k| *k != NoiseKind::None) && self.sigmas.is_empty() {
            bail!("noisy configurations need at least one sigma");
        }
        for id in &self.problems {
            problem_by_id(id)?;
        }
        Ok(())
    }

    /// Every cell of the plan, in a fixed order. Smooth configurations are
    /// deterministic and get a single run; noisy ones get `runs` seeds.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for mode in &self.modes {
            for noise in &self.noises {
                let (sigmas, runs) = if *noise == NoiseKind::None {
                    (vec![0.0], 1)
                } else {
                    (self.sigmas.clone(), self.runs)
                };
                for sigma in sigmas {
                    for problem in &self.problems {
                        for run in 0..runs {
                            cells.push(Cell {
                                problem: problem.clone(),
                                mode: *mode,
                                noise: *noise,
                                sigma,
                                run,
                                seed: self.base_seed + run as u64,
                                budget_gradients: self.budget_gradients,
                                rho_end: self.rho_end,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

/// One solve of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub problem: String,
    pub mode: Mode,
    pub noise: NoiseKind,
    pub sigma: f64,
    pub run: usize,
    pub seed: u64,
    pub budget_gradients: usize,
    pub rho_end: f64,
}

impl Cell {
    /// Name shared by all cells of one solver configuration.
    pub fn solver_label(&self) -> String {
        solver_label(self.mode, self.noise, self.sigma)
    }

    pub fn log_name(&self) -> String {
        format!("{}__{}__run{}.jsonl", self.solver_label(), self.problem, self.run)
    }

    /// Equivalent single-cell command line.
    pub fn command(&self) -> String {
        format!(
            "dfls solve --problem {} --mode {} --noise {} --sigma {} --budget-gradients {} --rho-end {} --seed {}",
            self.problem,
            self.mode.as_str(),
            self.noise.as_str(),
            self.sigma,
            self.budget_gradients,
            self.rho_end,
            self.seed
        )
    }
}

pub fn solver_label(mode: Mode, noise: NoiseKind, sigma: f64) -> String {
    if noise == NoiseKind::None {
        mode.as_str().to_string()
    } else {
        format!("{}-{}-{}", mode.as_str(), noise.as_str(), sigma)
    }
}

/// Splits `label__problem__runK.jsonl` into its parts.
pub fn parse_log_name(name: &str) -> Option<(String, String, usize)> {
    let stem = name.strip_suffix(".jsonl")?;
    let mut parts = stem.split("__");
    let label = parts.next()?;
    let problem = parts.next()?;
    let run = parts.next()?.strip_prefix("run")?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((label.to_string(), problem.to_string(), run))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    #[serde(flatten)]
    pub cell: Cell,
    pub n: usize,
    pub max_evals: usize,
    pub log: String,
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evals_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_sha256: Option<String>,
}

/// Registry facts for one problem, listed in every manifest for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemEntry {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub two_f0: f64,
    pub two_fstar: f64,
}

impl ProblemEntry {
    pub fn lookup(id: &str) -> Result<Self> {
        let p = problem_by_id(id)?;
        Ok(Self { name: p.name, n: p.n, m: p.m, two_f0: p.two_f0, two_fstar: p.two_fstar })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub plan: BenchPlan,
    pub problems: Vec<ProblemEntry>,
    pub cells: Vec<CellRecord>,
}

impl Manifest {
    pub fn new(plan: &BenchPlan, cells: Vec<CellRecord>) -> Result<Self> {
        let problems = plan
            .problems
            .iter()
            .map(|id| ProblemEntry::lookup(id))
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: "dfls".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            plan: plan.clone(),
            problems,
            cells,
        })
    }

    /// Manifest of a plan whose cells have not been run.
    pub fn planned(plan: &BenchPlan) -> Result<Self> {
        plan.validate()?;
        let cells = plan.cells().iter().map(planned_record).collect::<Result<_>>()?;
        Self::new(plan, cells)
    }
}

/// Manifest entry for a cell that has not been run.
pub fn planned_record(cell: &Cell) -> Result<CellRecord> {
    let problem = problem_by_id(&cell.problem)?;
    Ok(CellRecord {
        cell: cell.clone(),
        n: problem.n,
        max_evals: cell.budget_gradients * (problem.n + 1),
        log: cell.log_name(),
        command: cell.command(),
        status: "planned".into(),
        termination: None,
        evals_used: None,
        f_final: None,
        log_sha256: None,
    })
}

/// Runs one cell and writes its log into `dir`. Failures are recorded in the
/// returned entry instead of aborting the sweep.
pub fn run_cell(cell: &Cell, dir: &Path) -> CellRecord {
    let mut record = match planned_record(cell) {
        Ok(r) => r,
        Err(e) => {
            return CellRecord {
                cell: cell.clone(),
                n: 0,
                max_evals: 0,
                log: cell.log_name(),
                command: cell.command(),
                status: format!("error: {e}"),
                termination: None,
                evals_used: None,
                f_final: None,
                log_sha256: None,
            }
        }
    };
    let outcome = (|| -> Result<_> {
        let problem = problem_by_id(&cell.problem)?;
        let mut config = SolverConfig::new(cell.mode, record.max_evals);
        config.rho_end = cell.rho_end;
        let noise = NoiseSpec::new(cell.noise, cell.sigma, cell.seed);
        let result = solve(&problem, &config, noise)?;
        let bytes = jsonl_bytes(&result.trace)?;
        write_atomic(&dir.join(&record.log), &bytes)?;
        Ok((result, sha256_hex(&bytes)))
    })();
    match outcome {
        Ok((result, hash)) => {
            record.status = "ok".into();
            record.termination = Some(result.termination);
            record.evals_used = Some(result.evals_used);
            record.f_final = Some(result.f_final);
            record.log_sha256 = Some(hash);
        }
        Err(e) => record.status = format!("error: {e:#}"),
    }
    record
}

/// Runs every cell on the current rayon pool and writes `manifest.json`.
pub fn run_plan(plan: &BenchPlan, dir: &Path) -> Result<Manifest> {
    plan.validate()?;
    std::fs::create_dir_all(dir)?;
    let records: Vec<CellRecord> = plan.cells().par_iter().map(|c| run_cell(c, dir)).collect();
    let manifest = Manifest::new(plan, records)?;
    write_atomic(&manifest_path(dir), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
