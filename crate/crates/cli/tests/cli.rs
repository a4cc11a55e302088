use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn logfrag(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_logfrag"));
    cmd.args(args).env_remove("LOGFRAG_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run_in(dir: &Path, sub: &str, config: &str, out: &str) -> (Output, PathBuf) {
    let cfg = dir.join(format!("{out}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let run = dir.join(out);
    let o = logfrag(
        &[
            sub,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ],
        &[],
    );
    (o, run)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn artifacts(run: &Path) -> Vec<String> {
    read_json(&run.join("manifest.json"))["artifact_paths"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn solve_constant_resource_reports_its_mass() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, run) = run_in(
        tmp.path(),
        "solve",
        "problem.m0 = 0.4\nproblem.mu = 0.1\n",
        "solve",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let state = read_json(&run.join("state.json"));
    assert_eq!(state["total_population"].as_f64(), Some(0.4));
    assert!(String::from_utf8_lossy(&o.stdout).contains("total_population"));
}

#[test]
fn manifest_is_written_last_and_lists_nonempty_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, run) = run_in(tmp.path(), "optimize", "problem.mu = 0.05\n", "opt");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest_path = run.join("manifest.json");
    let manifest = read_json(&manifest_path);
    assert_eq!(manifest["command"], "optimize");
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["version"]
        .as_str()
        .unwrap()
        .starts_with("logfrag "));
    let ts = manifest["timestamp"].as_str().unwrap();
    assert!(ts.ends_with('Z') && ts.contains('T'), "{ts}");
    assert_eq!(manifest["config_echo"]["grid.n"], 257);
    assert_eq!(manifest["config_echo"]["problem.mu"].as_f64(), Some(0.05));
    let manifest_time = std::fs::metadata(&manifest_path)
        .unwrap()
        .modified()
        .unwrap();
    let files = artifacts(&run);
    for name in ["m_star.csv", "trace.csv", "result.json"] {
        assert!(
            files.iter().any(|f| f == name),
            "{name} missing from {files:?}"
        );
    }
    for f in &files {
        let meta = std::fs::metadata(run.join(f)).unwrap();
        assert!(meta.len() > 0, "{f} is empty");
        assert!(meta.modified().unwrap() <= manifest_time);
    }
}

#[test]
fn config_echo_replays_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let config = "problem.mu = 0.02\noptimizer.seed = 7\noptimizer.restarts = 3\n";
    let (o, first) = run_in(tmp.path(), "optimize", config, "first");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = read_json(&first.join("manifest.json"))["config_echo"].clone();
    let replay: String = echo
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let (o, second) = run_in(tmp.path(), "optimize", &replay, "second");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let files = artifacts(&first);
    assert_eq!(files, artifacts(&second));
    for f in &files {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn config_errors_exit_with_code_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, _) = run_in(tmp.path(), "solve", "[problem]\nm0 = 1.2\n", "a");
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("problem.m0: m0 must lie in (0,1)"),
        "{}",
        stderr(&o)
    );

    let (o, _) = run_in(tmp.path(), "solve", "problem.mu = 0\n", "b");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("problem.mu"));

    let (o, _) = run_in(tmp.path(), "solve", "solver.tolerance = 1e-8\n", "c");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.tolerance: unknown key"));

    let o = logfrag(
        &[
            "solve",
            "--config",
            tmp.path().join("absent.toml").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));

    let (o, _) = run_in(tmp.path(), "sweep", "criterion.j = \"log1p\"\n", "d");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("criterion.j"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let o = logfrag(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = logfrag(&[], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(logfrag(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn thread_cap_is_validated_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("t");
    let o = logfrag(
        &["solve", "--out", run.to_str().unwrap()],
        &[("LOGFRAG_THREADS", "0")],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = logfrag(
        &["solve", "--out", run.to_str().unwrap()],
        &[("LOGFRAG_THREADS", "2")],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_json(&run.join("manifest.json"))["threads"], 2);
}

#[test]
fn numerical_failure_exits_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, _) = run_in(tmp.path(), "solve", "solver.max_newton = 1\nsolver.fallback_gradient_flow = false\nproblem.mu = 0.001\nresource.kind = \"intervals\"\nresource.intervals = [[0.1, 0.5]]\n", "n");
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn field_resource_round_trips_through_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let base = "problem.mu = 0.01\nresource.kind = \"intervals\"\nresource.intervals = [[0.1, 0.3], [0.6, 0.75]]\n";
    let (o, first) = run_in(tmp.path(), "solve", base, "iv");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    std::fs::copy(first.join("m.csv"), tmp.path().join("m.csv")).unwrap();
    let (o, second) = run_in(
        tmp.path(),
        "solve",
        "problem.mu = 0.01\nresource.kind = \"field\"\nresource.path = \"m.csv\"\n",
        "field",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        read_json(&first.join("state.json"))["total_population"],
        read_json(&second.join("state.json"))["total_population"]
    );
}

#[test]
fn tabulated_criterion_drives_the_optimizer() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: String = (0..=100)
        .map(|i| {
            let t = i as f64 / 50.0;
            format!("{t},{},{},-0.5\n", t - 0.25 * t * t, 1.0 - 0.5 * t)
        })
        .collect();
    std::fs::write(tmp.path().join("j.csv"), format!("t,j,dj,ddj\n{rows}")).unwrap();
    let (o, run) = run_in(
        tmp.path(),
        "optimize",
        "problem.mu = 0.05\ncriterion.j = \"tabulated\"\ncriterion.table = \"j.csv\"\n",
        "tab",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let res = read_json(&run.join("result.json"));
    assert_eq!(res["criterion"], "tabulated");
    let (o, preset) = run_in(
        tmp.path(),
        "optimize",
        "problem.mu = 0.05\ncriterion.j = \"quadratic\"\n",
        "quad",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = res["final_objective"].as_f64().unwrap();
    let b = read_json(&preset.join("result.json"))["final_objective"]
        .as_f64()
        .unwrap();
    assert!((a - b).abs() < 1e-3 * b.abs(), "{a} vs {b}");
}

#[test]
fn spectral_and_sweep_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, run) = run_in(
        tmp.path(),
        "spectral",
        "problem.mu = 0.1\nspectral.k = 6\n",
        "spec",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(run.join("eigenvalues.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert_eq!(
        read_json(&run.join("certificate.json"))["outcome"]["outcome"],
        "certified"
    );

    let (o, run) = run_in(
        tmp.path(),
        "sweep",
        "sweep.mu_min = 1e-3\nsweep.mu_max = 1e-1\nsweep.points = 5\n",
        "sweep",
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
    assert!(rows.starts_with("mu,bv_norm,tv_norm,"));
    assert!(
        read_json(&run.join("slope.json"))["slope"]
            .as_f64()
            .unwrap()
            < 0.0
    );
    assert_eq!(
        artifacts(&run)
            .iter()
            .filter(|f| f.starts_with("fields/"))
            .count(),
        10
    );
}

#[test]
fn verify_prints_a_table_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("v");
    let o = logfrag(&["verify", "--out", run.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!stdout.contains("FAIL"));
    let d = read_json(&run.join("derivative.json"));
    assert!(d["duality_gap"].as_f64().unwrap() < 1e-8);
    assert!(d["energy_form_gap"].as_f64().unwrap() < 1e-6);
}
