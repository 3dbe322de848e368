use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_measure-mdp"));
    c.env_remove("MEASURE_MDP_THREADS").env_remove("SOURCE_DATE_EPOCH");
    c
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

const SINGLE: &str = r#"{"n_states":1,"n_actions":1,"transition":[[[1.0]]],"cost":[[1.0]],"gamma":0.9}"#;
const TWO_CYCLE: &str =
    r#"{"n_states":2,"n_actions":1,"transition":[[[0.0,1.0]],[[1.0,0.0]]],"cost":[[0.0],[0.0]],"gamma":0.9}"#;

#[test]
fn validate_reports_status_through_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["validate", example("two_state.json").to_str().unwrap()])), 0);
    let truncated = write(tmp.path(), "t.json", &SINGLE[..30]);
    let o = run(&["validate", &truncated]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
    let bad = write(
        tmp.path(),
        "bad.json",
        r#"{"n_states":2,"n_actions":1,"transition":[[[0.5,0.4]],[[1.0,0.0]]],"cost":[[0.0],[0.0]],"gamma":0.9}"#,
    );
    let o = run(&["validate", &bad]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("(0,0)"), "{}", stderr(&o));
    assert_eq!(code(&run(&["validate", tmp.path().join("missing.json").to_str().unwrap()])), 2);
}

#[test]
fn solve_single_state_geometric_series_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "single.json", SINGLE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_eq!(code(&run(&["solve", &p, "--out", a.to_str().unwrap()])), 0);
    let sol = json(&a.join("solution.json"));
    assert!((sol["v_star"][0].as_f64().unwrap() - 10.0).abs() < 1e-10);
    assert_eq!(code(&run(&["solve", &p, "--out", b.to_str().unwrap()])), 0);
    assert_eq!(std::fs::read(a.join("solution.json")).unwrap(), std::fs::read(b.join("solution.json")).unwrap());
    let args = ["solve", &p, "--functional", "linear_plus_variance", "--beta", "0", "--out", c.to_str().unwrap()];
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(std::fs::read(a.join("solution.json")).unwrap(), std::fs::read(c.join("solution.json")).unwrap());
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["outputs"][0]["name"], "solution.json");
    assert_eq!(manifest["inputs"][0]["name"], "single.json");
}

#[test]
fn nonlinear_solve_reports_dirac_values() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let problem = example("dissipative.json");
    let args = [
        "solve",
        problem.to_str().unwrap(),
        "--functional",
        "linear_plus_variance",
        "--beta",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(code(&run(&args)), 0);
    let sol = json(&out.join("solution.json"));
    assert_eq!(sol["dirac_values"].as_array().unwrap().len(), 3);
    assert!(sol.get("v_star").is_none());
}

#[test]
fn certify_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let o = run(&["certify", example("dissipative.json").to_str().unwrap(), "--out", good.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&good.join("certificate.json"))["status"], "certified");
    for f in ["telescoping.json", "lyapunov.json", "manifest.json"] {
        assert!(good.join(f).exists(), "{f}");
    }
    let bad = tmp.path().join("bad");
    let o = run(&["certify", example("anti_dissipative.json").to_str().unwrap(), "--out", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let cert = json(&bad.join("certificate.json"));
    assert_eq!(cert["status"], "not_certified");
    assert!(cert["worst_point"]["policy"].is_array());
    let o = run(&["certify", example("dissipative.json").to_str().unwrap(), "--samples", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn learn_reaches_tolerance_and_warns_about_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("l");
    let o = run(&[
        "learn",
        example("three_state.json").to_str().unwrap(),
        "--config",
        example("learning_config.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let last = text.lines().last().unwrap();
    let sup: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(sup < 1e-3);
    for f in ["learned.json", "theta.json", "lift_report.json", "ocp_audit.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // State 2 cannot be reached from state 0 under action 0.
    let chain = write(
        tmp.path(),
        "chain.json",
        r#"{"n_states":3,"n_actions":2,"transition":[[[1,0,0],[0,1,0]],[[1,0,0],[0,0,1]],[[0,0,1],[0,0,1]]],
            "cost":[[1,2],[1,2],[0,0]],"gamma":0.9}"#,
    );
    let cfg = write(
        tmp.path(),
        "cfg.json",
        r#"{"n_episodes":20,"batch_size":10,"epsilon":{"start":0,"end":0,"decay":0.5},"start_states":[0]}"#,
    );
    let o = run(&["learn", &chain, "--config", &cfg, "--out", tmp.path().join("c").to_str().unwrap()]);
    assert!(stderr(&o).contains("unvisited (s,a) pairs"), "{}", stderr(&o));
    assert_eq!(code(&o), 4);
    assert!(tmp.path().join("c/history.csv").exists());
}

#[test]
fn simulate_emits_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let cert_dir = tmp.path().join("cert");
    assert_eq!(code(&run(&["certify", example("dissipative.json").to_str().unwrap(), "--out", cert_dir.to_str().unwrap()])), 0);
    let cert = cert_dir.join("certificate.json");
    let out = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        example("dissipative.json").to_str().unwrap(),
        "--certificate",
        cert.to_str().unwrap(),
        "--rho0",
        "1,0,0",
        "--rho0",
        "0.2,0.3,0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["total_descent_violations"], 0);
    let fixed = csv_rows(&out.join("trajectory_0.csv"));
    assert_eq!(fixed.len(), 201);
    assert!(fixed.iter().all(|r| r[1..] == fixed[0][1..]));
    assert_eq!(fixed[0][4], 0.0);

    let cycle = write(tmp.path(), "cycle.json", TWO_CYCLE);
    let out = tmp.path().join("cyc");
    let args = ["simulate", &cycle, "--rho-star", "0.5,0.5", "--rho0", "0.8,0.2", "--steps", "6", "--out", out.to_str().unwrap()];
    assert_eq!(code(&run(&args)), 0);
    let rows = csv_rows(&out.join("trajectory_0.csv"));
    for r in &rows {
        assert!((r[3] - 0.3).abs() < 1e-12);
    }
    for (k, r) in rows.iter().enumerate() {
        let expected = if k % 2 == 0 { 0.8 } else { 0.2 };
        assert!((r[1] - expected).abs() < 1e-12);
    }
    assert_eq!(code(&run(&["simulate", &cycle, "--out", tmp.path().join("x").to_str().unwrap()])), 1);
}

#[test]
fn thread_variable_is_validated() {
    let o = bin().env("MEASURE_MDP_THREADS", "zero").args(["validate", example("two_state.json").to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().env("MEASURE_MDP_THREADS", "2").args(["validate", example("two_state.json").to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 0);
}
