//! End-to-end runs of the `dfls` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dfls(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfls"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DFLS_OUTPUT_ROOT")
        .output()
        .expect("spawn dfls")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// File name to contents for every file in `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn log_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = snapshot(dir).into_keys().filter(|n| n.ends_with(".jsonl")).collect();
    names.sort();
    names
}

#[test]
fn solve_rosenbrock_reaches_small_objective() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfls(&["solve", "--problem", "rosenbrock", "--mode", "practical"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = read_json(&tmp.path().join("result.json"));
    assert_eq!(result["termination"], "small_objective");
    let log = jsonl_lines(&tmp.path().join("result.jsonl"));
    assert_eq!(log.len() as u64, result["evals_used"].as_u64().unwrap());
    for (i, rec) in log.iter().enumerate() {
        assert_eq!(rec["eval_index"].as_u64().unwrap(), i as u64 + 1);
        assert_eq!(rec["point"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn unknown_problem_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfls(&["solve", "--problem", "no_such_problem"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_problem"));
    assert!(!tmp.path().join("result.json").exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["solve", "--problem", "rosenbrock", "--mode", "bogus"],
        vec!["solve", "--problem", "rosenbrock", "--budget-gradients", "0"],
        vec!["bench", "--runs", "0"],
        vec!["bench", "--problems", "rosenbrock,nope"],
        vec!["frobnicate"],
    ] {
        let out = dfls(&args, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn one_gradient_budget_binds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfls(
        &["solve", "--problem", "rosenbrock", "--budget-gradients", "1", "--out", "r.json"],
        tmp.path(),
    );
    assert!(out.status.success());
    let result = read_json(&tmp.path().join("r.json"));
    assert_eq!(result["termination"], "budget");
    assert!(result["evals_used"].as_u64().unwrap() <= 2 * 3);
    assert!(tmp.path().join("r.jsonl").exists());
}

#[test]
fn output_root_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_dfls"))
        .args(["solve", "--problem", "bard", "--out", "sub/bard.json", "--dump-geometry"])
        .current_dir(tmp.path())
        .env("DFLS_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    let result = read_json(&root.join("sub/bard.json"));
    assert_eq!(result["geometry"]["points"].as_array().unwrap().len(), 4);
    assert!(root.join("sub/bard.jsonl").exists());
}

#[test]
fn smooth_suite_bench_writes_one_log_per_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfls(&["bench", "--out-dir", "smooth", "--runs", "10"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("smooth");
    let names = log_names(&dir);
    assert_eq!(names.len(), 15);
    assert!(names.iter().all(|n| n.starts_with("practical__") && n.ends_with("__run0.jsonl")));
    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["problems"].as_array().unwrap().len(), 15);
    for cell in manifest["cells"].as_array().unwrap() {
        assert_eq!(cell["status"], "ok");
        let n = cell["n"].as_u64().unwrap();
        assert_eq!(cell["max_evals"].as_u64().unwrap(), 200 * (n + 1));
        assert!(cell["evals_used"].as_u64().unwrap() <= 200 * (n + 1));
    }
}

#[test]
fn noisy_bench_seeds_and_reruns_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |dir: &'static str| {
        vec![
            "bench", "--problems", "rosenbrock,bard", "--noise", "add_gaussian", "--runs", "10",
            "--seed", "500", "--jobs", "4", "--out-dir", dir,
        ]
    };
    assert!(dfls(&args("a"), tmp.path()).status.success());
    assert!(dfls(&args("b"), tmp.path()).status.success());
    let a = tmp.path().join("a");
    let names = log_names(&a);
    assert_eq!(names.len(), 20);
    for problem in ["rosenbrock", "bard"] {
        let count = names.iter().filter(|n| n.contains(&format!("__{problem}__"))).count();
        assert_eq!(count, 10);
    }

    let manifest = read_json(&a.join("manifest.json"));
    let mut seeds: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for cell in manifest["cells"].as_array().unwrap() {
        let problem = cell["problem"].as_str().unwrap().to_string();
        let run = cell["run"].as_u64().unwrap();
        let seed = cell["seed"].as_u64().unwrap();
        assert_eq!(seed, 500 + run);
        seeds.entry(problem).or_default().push(seed);
        // Every cell records a SHA-256 digest of a nonempty log.
        let bytes = fs::read(a.join(cell["log"].as_str().unwrap())).unwrap();
        assert_eq!(cell["log_sha256"].as_str().unwrap().len(), 64);
        assert!(!bytes.is_empty());
    }
    for list in seeds.values_mut() {
        list.sort();
        assert_eq!(*list, (500..510).collect::<Vec<_>>());
    }

    // Byte-identical logs and manifest across reruns.
    assert_eq!(snapshot(&a), snapshot(&tmp.path().join("b")));
    // Distinct seeds give distinct logs.
    let r0 = fs::read(a.join(&names[0])).unwrap();
    let r1 = fs::read(a.join(&names[1])).unwrap();
    assert_ne!(r0, r1);
}

#[test]
fn manifest_command_matches_bench_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dfls(
        &["manifest", "--problems", "bard,watson", "--noise", "none,mult_gaussian", "--runs", "3"],
        tmp.path(),
    );
    assert!(out.status.success());
    let manifest: Value = serde_json::from_slice(&out.stdout).unwrap();
    let cells = manifest["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2 + 2 * 3);
    assert!(cells.iter().all(|c| c["status"] == "planned"));
    let problems = manifest["problems"].as_array().unwrap();
    assert_eq!(problems[0]["name"], "bard");
    assert_eq!(problems[0]["n"], 3);
    assert_eq!(problems[0]["m"], 15);
    assert_eq!(problems[1]["two_fstar"], 2.287670e-3);
    // Every cell carries a command that reproduces it alone.
    assert!(cells[0]["command"].as_str().unwrap().starts_with("dfls solve --problem bard"));
}

/// Parsed CSV rows: (kind, solver, tau) to the α-sorted curve.
fn read_profiles(path: &Path) -> BTreeMap<(String, String, String), Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "kind,solver,tau,alpha,proportion,runs_averaged");
    let mut out: BTreeMap<_, Vec<(f64, f64)>> = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        out.entry((f[0].to_string(), f[1].to_string(), f[2].to_string()))
            .or_default()
            .push((f[3].parse().unwrap(), f[4].parse().unwrap()));
    }
    out
}

#[test]
fn profile_of_single_log_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("one");
    assert!(dfls(&["solve", "--problem", "rosenbrock", "--out", "one/r.json", "--log", "one/practical__rosenbrock__run0.jsonl"], tmp.path())
        .status
        .success());
    fs::remove_file(dir.join("r.json")).unwrap();
    let out = dfls(&["profile", "--log-dir", "one", "--tau", "0.5,1e-5", "--out", "p.csv"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tables = read_profiles(&tmp.path().join("p.csv"));
    let solvers: Vec<&String> = tables.keys().map(|k| &k.1).collect();
    assert!(solvers.iter().all(|s| *s == "practical"));
    assert_eq!(tables.len(), 4);

    // Brute-force recount from the log: first index reaching each threshold.
    let log = jsonl_lines(&dir.join("practical__rosenbrock__run0.jsonl"));
    let f: Vec<f64> = log.iter().map(|r| r["f_true"].as_f64().unwrap()).collect();
    let f0 = 12.1;
    for (tau, key) in [(0.5, "5e-1"), (1e-5, "1e-5")] {
        let np = f.iter().position(|v| *v <= tau * f0).unwrap() + 1;
        let curve = &tables[&("data".to_string(), "practical".to_string(), key.to_string())];
        let first = curve.iter().find(|(_, p)| *p == 1.0).unwrap().0;
        // Smallest half-step α with N ≤ α (n + 1).
        let want = (2 * np).div_ceil(3) as f64 / 2.0;
        assert_eq!(first, want, "tau {tau}");
        let perf = &tables[&("performance".to_string(), "practical".to_string(), key.to_string())];
        assert!(perf.iter().all(|(_, p)| *p == 1.0));
    }
}

#[test]
fn profile_thresholds_are_monotone_in_tau() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(dfls(
        &["bench", "--problems", "rosenbrock,bard,watson,cube", "--noise", "none,mult_gaussian", "--runs", "2", "--budget-gradients", "50", "--out-dir", "logs"],
        tmp.path(),
    )
    .status
    .success());
    let out = dfls(&["profile", "--log-dir", "logs", "--tau", "0.5,1e-5", "--out", "p.csv"], tmp.path());
    assert!(out.status.success());
    let tables = read_profiles(&tmp.path().join("p.csv"));
    for solver in ["practical", "practical-mult_gaussian-0.01"] {
        let loose = &tables[&("data".to_string(), solver.to_string(), "5e-1".to_string())];
        let tight = &tables[&("data".to_string(), solver.to_string(), "1e-5".to_string())];
        assert_eq!(loose.len(), 101);
        for (a, b) in loose.iter().zip(tight) {
            assert_eq!(a.0, b.0);
            assert!(a.1 >= b.1, "{solver}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn high_accuracy_grid_and_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = dfls(&["profile", "--log-dir", "empty"], tmp.path());
    assert!(!out.status.success());

    assert!(dfls(&["bench", "--problems", "rosenbrock", "--out-dir", "logs"], tmp.path()).status.success());
    let out = dfls(&["profile", "--log-dir", "logs", "--high-accuracy", "--out", "p.csv"], tmp.path());
    assert!(out.status.success());
    let taus: std::collections::BTreeSet<String> =
        read_profiles(&tmp.path().join("p.csv")).keys().map(|k| k.2.clone()).collect();
    let want: std::collections::BTreeSet<String> =
        ["1e-1", "1e-5", "1e-7", "1e-9", "1e-11"].iter().map(|s| s.to_string()).collect();
    assert_eq!(taus, want);
}
