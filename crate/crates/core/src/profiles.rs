//! Solved tests, data profiles and performance profiles.
//!
//! A problem counts as solved after `N_p` evaluations when the running
//! minimum of the noiseless objective first drops to
//! `f* + τ (f(x0) − f*)`. Data profiles normalize `N_p` by `n_p + 1`;
//! performance profiles normalize by the smallest `N_p` any solver (or run)
//! achieved.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::Problem;

/// One evaluation as written to a JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval_index: usize,
    pub point: Vec<f64>,
    pub f_noisy: f64,
    pub f_true: f64,
}

/// Noiseless objective trace of one run; entry `i` is evaluation `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub problem: String,
    pub solver: String,
    pub run: usize,
    pub f_true: Vec<f64>,
}

impl EvalLog {
    /// Checks that indices run `1, 2, …` before keeping the `f_true` column.
    pub fn from_records(
        problem: impl Into<String>,
        solver: impl Into<String>,
        run: usize,
        records: &[EvalRecord],
    ) -> Result<Self> {
        for (i, rec) in records.iter().enumerate() {
            if rec.eval_index != i + 1 {
                return Err(Error::Profile(format!(
                    "eval_index {} at position {} (expected {})",
                    rec.eval_index,
                    i,
                    i + 1
                )));
            }
        }
        Ok(Self {
            problem: problem.into(),
            solver: solver.into(),
            run,
            f_true: records.iter().map(|r| r.f_true).collect(),
        })
    }
}

/// Evaluations needed to solve; `None` stands for "never".
pub type Np = Option<usize>;

/// First 1-based index at which the running minimum of `f_true` reaches
/// `threshold`.
pub fn first_solved_index(f_true: &[f64], threshold: f64) -> Np {
    let mut best = f64::INFINITY;
    for (i, &f) in f_true.iter().enumerate() {
        if f < best {
            best = f;
        }
        if best <= threshold {
            return Some(i + 1);
        }
    }
    None
}

/// `N_p(τ)` for `log` against the reference values stored on `problem`.
pub fn evals_to_solve(log: &EvalLog, problem: &Problem, tau: f64) -> Np {
    first_solved_index(&log.f_true, problem.solved_threshold(tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Data,
    Performance,
}

impl ProfileKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileKind::Data => "data",
            ProfileKind::Performance => "performance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub solver: String,
    pub tau: f64,
    pub kind: ProfileKind,
    /// `(α, proportion)` samples, `α` ascending.
    pub curve: Vec<(f64, f64)>,
    pub runs_averaged: usize,
}

/// Data-profile grid `0, 0.5, …, Ng`.
pub fn data_alpha_grid(ng: usize) -> Vec<f64> {
    (0..=2 * ng).map(|k| k as f64 / 2.0).collect()
}

/// Performance-profile grid `1, 1.1, 1.2, …` up to `alpha_max`.
pub fn performance_alpha_grid(alpha_max: f64) -> Vec<f64> {
    let top = ((alpha_max * 10.0).round() as usize).max(10);
    (10..=top).map(|j| j as f64 / 10.0).collect()
}

/// `d(α) = |{p : N_p ≤ α (n_p + 1)}| / |P|` on the half-step grid.
pub fn data_profile(
    solver: &str,
    tau: f64,
    ns: &BTreeMap<String, Np>,
    dims: &BTreeMap<String, usize>,
    ng: usize,
) -> Result<ProfileTable> {
    if ns.is_empty() {
        return Err(Error::Profile("empty problem set".into()));
    }
    if ng == 0 {
        return Err(Error::Profile("Ng must be positive".into()));
    }
    let mut scaled = Vec::with_capacity(ns.len());
    for (p, np) in ns {
        let n = *dims
            .get(p)
            .ok_or_else(|| Error::Profile(format!("no dimension for `{p}`")))?;
        scaled.push(np.map(|v| (v, n + 1)));
    }
    let total = ns.len() as f64;
    // α = k/2, so N ≤ α(n+1) is 2N ≤ k(n+1) in integers.
    let curve = (0..=2 * ng)
        .map(|k| {
            let hits = scaled
                .iter()
                .filter(|e| matches!(e, Some((v, d)) if 2 * v <= k * d))
                .count();
            (k as f64 / 2.0, hits as f64 / total)
        })
        .collect();
    Ok(ProfileTable { solver: solver.into(), tau, kind: ProfileKind::Data, curve, runs_averaged: 1 })
}

/// `N_p*`: smallest finite `N_p` over every table given.
pub fn best_counts<'a, I>(tables: I) -> BTreeMap<String, Np>
where
    I: IntoIterator<Item = &'a BTreeMap<String, Np>>,
{
    let mut best: BTreeMap<String, Np> = BTreeMap::new();
    for table in tables {
        for (p, np) in table {
            let slot = best.entry(p.clone()).or_insert(None);
            *slot = match (*slot, *np) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
    }
    best
}

/// `π(α) = |{p : N_p ≤ α N_p*}| / |P|` against given minima.
pub fn performance_curve(
    solver: &str,
    tau: f64,
    ns: &BTreeMap<String, Np>,
    best: &BTreeMap<String, Np>,
    alpha_max: f64,
) -> Result<ProfileTable> {
    if ns.is_empty() {
        return Err(Error::Profile("empty problem set".into()));
    }
    let top = ((alpha_max * 10.0).round() as usize).max(10);
    let total = ns.len() as f64;
    let pairs: Vec<Option<(usize, usize)>> = ns
        .iter()
        .map(|(p, np)| match (np, best.get(p).copied().flatten()) {
            (Some(v), Some(b)) => Some((*v, b)),
            _ => None,
        })
        .collect();
    // α = j/10, so N ≤ α N* is 10N ≤ j N* in integers.
    let curve = (10..=top)
        .map(|j| {
            let hits = pairs
                .iter()
                .filter(|e| matches!(e, Some((v, b)) if 10 * v <= j * b))
                .count();
            (j as f64 / 10.0, hits as f64 / total)
        })
        .collect();
    Ok(ProfileTable { solver: solver.into(), tau, kind: ProfileKind::Performance, curve, runs_averaged: 1 })
}

/// One performance profile per solver, minima taken across solvers.
pub fn performance_profile(
    tau: f64,
    ns_by_solver: &BTreeMap<String, BTreeMap<String, Np>>,
    alpha_max: f64,
) -> Result<Vec<ProfileTable>> {
    if ns_by_solver.is_empty() {
        return Err(Error::Profile("no solvers".into()));
    }
    let best = best_counts(ns_by_solver.values());
    ns_by_solver
        .iter()
        .map(|(s, ns)| performance_curve(s, tau, ns, &best, alpha_max))
        .collect()
}

/// Multi-run performance profiles: minima over every solver and run, one
/// curve per run, then averaged per solver.
pub fn performance_profile_runs(
    tau: f64,
    runs_by_solver: &BTreeMap<String, Vec<BTreeMap<String, Np>>>,
    alpha_max: f64,
) -> Result<Vec<ProfileTable>> {
    if runs_by_solver.is_empty() {
        return Err(Error::Profile("no solvers".into()));
    }
    let best = best_counts(runs_by_solver.values().flatten());
    runs_by_solver
        .iter()
        .map(|(s, runs)| {
            let tables = runs
                .iter()
                .map(|ns| performance_curve(s, tau, ns, &best, alpha_max))
                .collect::<Result<Vec<_>>>()?;
            average_profiles(&tables)
        })
        .collect()
}

/// Pointwise mean of tables sharing kind and grid.
pub fn average_profiles(tables: &[ProfileTable]) -> Result<ProfileTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Profile("nothing to average".into()))?;
    for t in &tables[1..] {
        let same_grid = t.curve.len() == first.curve.len()
            && t.curve.iter().zip(&first.curve).all(|(a, b)| a.0 == b.0);
        if t.kind != first.kind || !same_grid {
            return Err(Error::Profile("mismatched profile grids".into()));
        }
    }
    let count = tables.len() as f64;
    let curve = first
        .curve
        .iter()
        .enumerate()
        .map(|(i, (alpha, _))| {
            let sum: f64 = tables.iter().map(|t| t.curve[i].1).sum();
            (*alpha, sum / count)
        })
        .collect();
    Ok(ProfileTable {
        solver: first.solver.clone(),
        tau: first.tau,
        kind: first.kind,
        curve,
        runs_averaged: tables.iter().map(|t| t.runs_averaged).sum(),
    })
}

/// CSV with columns `kind,solver,tau,alpha,proportion,runs_averaged`, rows
/// ordered by solver, then τ ascending, then kind, then α ascending.
pub fn to_csv(tables: &[ProfileTable]) -> String {
    let mut order: Vec<&ProfileTable> = tables.iter().collect();
    order.sort_by(|a, b| {
        a.solver
            .cmp(&b.solver)
            .then(a.tau.total_cmp(&b.tau))
            .then(a.kind.cmp(&b.kind))
    });
    let mut out = String::from("kind,solver,tau,alpha,proportion,runs_averaged\n");
    for t in order {
        for (alpha, prop) in &t.curve {
            out.push_str(&format!(
                "{},{},{:e},{},{},{}\n",
                t.kind.as_str(),
                t.solver,
                t.tau,
                alpha,
                prop,
                t.runs_averaged
            ));
        }
    }
    out
}
