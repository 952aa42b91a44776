//! Profiles from a directory of evaluation logs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dfls::problems::problem_by_id;
use dfls::profiles::{
    average_profiles, data_profile, evals_to_solve, performance_profile_runs, EvalLog, Np,
    ProfileTable,
};

use crate::io::read_jsonl;
use crate::plan::{manifest_path, parse_log_name, Manifest};

/// Accuracy levels added by `--high-accuracy`.
pub const HIGH_ACCURACY_TAUS: [f64; 5] = [1e-1, 1e-5, 1e-7, 1e-9, 1e-11];

/// Every log in a directory, keyed by solver label then run.
#[derive(Debug, Default)]
pub struct LogSet {
    pub logs: BTreeMap<String, BTreeMap<usize, Vec<EvalLog>>>,
}

impl LogSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| parse_log_name(n).is_some())
            .collect();
        names.sort();
        let mut set = LogSet::default();
        for name in names {
            let (label, problem, run) = parse_log_name(&name).expect("filtered");
            let records = read_jsonl(&dir.join(&name))?;
            let log = EvalLog::from_records(problem, label.clone(), run, &records)
                .with_context(|| name.clone())?;
            set.logs.entry(label).or_default().entry(run).or_default().push(log);
        }
        if set.logs.is_empty() {
            bail!("no evaluation logs in {}", dir.display());
        }
        Ok(set)
    }

    /// `N_p` per solver, per run, per problem.
    pub fn counts(&self, tau: f64) -> Result<BTreeMap<String, Vec<BTreeMap<String, Np>>>> {
        let mut out = BTreeMap::new();
        for (label, runs) in &self.logs {
            let mut per_run = Vec::with_capacity(runs.len());
            for logs in runs.values() {
                let mut ns = BTreeMap::new();
                for log in logs {
                    let problem = problem_by_id(&log.problem)?;
                    ns.insert(log.problem.clone(), evals_to_solve(log, &problem, tau));
                }
                per_run.push(ns);
            }
            out.insert(label.clone(), per_run);
        }
        Ok(out)
    }
}

/// Data and performance profiles for every solver label and τ. Data profiles
/// are averaged over runs; performance minima range over all solvers and runs.
pub fn build_profiles(set: &LogSet, taus: &[f64], ng: usize, alpha_max: f64) -> Result<Vec<ProfileTable>> {
    if taus.is_empty() {
        bail!("at least one tau is required");
    }
    let mut tables = Vec::new();
    for &tau in taus {
        if !(tau > 0.0 && tau < 1.0) {
            bail!("tau must lie in (0, 1), got {tau}");
        }
        let counts = set.counts(tau)?;
        for (label, runs) in &counts {
            let per_run = runs
                .iter()
                .map(|ns| {
                    let dims = ns
                        .keys()
                        .map(|p| Ok((p.clone(), problem_by_id(p)?.n)))
                        .collect::<Result<BTreeMap<_, _>>>()?;
                    Ok(data_profile(label, tau, ns, &dims, ng)?)
                })
                .collect::<Result<Vec<_>>>()?;
            tables.push(average_profiles(&per_run)?);
        }
        tables.extend(performance_profile_runs(tau, &counts, alpha_max)?);
    }
    Ok(tables)
}

/// Budget and default τ list recorded by a bench run, if the directory has a manifest.
pub fn manifest_defaults(dir: &Path) -> Result<Option<(usize, Vec<f64>)>> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some((manifest.plan.budget_gradients, manifest.plan.taus)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{jsonl_bytes, write_atomic};
    use dfls::profiles::EvalRecord;

    fn write_log(dir: &Path, name: &str, f: &[f64]) {
        let records: Vec<EvalRecord> = f
            .iter()
            .enumerate()
            .map(|(i, v)| EvalRecord { eval_index: i + 1, point: vec![0.0, 0.0], f_noisy: *v, f_true: *v })
            .collect();
        write_atomic(&dir.join(name), &jsonl_bytes(&records).unwrap()).unwrap();
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(LogSet::load(dir.path()).is_err());
    }

    #[test]
    fn counts_follow_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        // Rosenbrock: f0 = 12.1, f* = 0, so τ = 0.5 needs f ≤ 6.05.
        write_log(dir.path(), "a__rosenbrock__run0.jsonl", &[12.1, 7.0, 6.0, 1e-9]);
        let set = LogSet::load(dir.path()).unwrap();
        assert_eq!(set.counts(0.5).unwrap()["a"][0]["rosenbrock"], Some(3));
        assert_eq!(set.counts(1e-5).unwrap()["a"][0]["rosenbrock"], Some(4));
        assert_eq!(set.counts(1e-12).unwrap()["a"][0]["rosenbrock"], None);
        let tables = build_profiles(&set, &[1e-5], 4, 2.0).unwrap();
        assert_eq!(tables.len(), 2);
        // N = 4 with n + 1 = 3: solved from α = 1.5 onward.
        let data = &tables[0];
        assert_eq!(data.curve.iter().find(|(_, p)| *p > 0.0).unwrap().0, 1.5);
    }

    #[test]
    fn bad_tau_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), "a__rosenbrock__run0.jsonl", &[12.1]);
        let set = LogSet::load(dir.path()).unwrap();
        assert!(build_profiles(&set, &[1.5], 4, 2.0).is_err());
        assert!(build_profiles(&set, &[], 4, 2.0).is_err());
    }
}
