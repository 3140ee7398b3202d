use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn erw(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erw"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run erw")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn classify_placebo_is_recurrent_with_zero_speed() {
    let dir = tempfile::tempdir().unwrap();
    let out = erw(&["classify", "--builtin", "placebo"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir.path());
    assert_eq!(r["spec"]["delta"], 0.0);
    assert_eq!(r["phase"]["transience"], "Recurrent");
    assert_eq!(r["phase"]["speed"], "Zero");
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    assert!(r["assertions"]
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a["claim"].is_string()));
}

#[test]
fn malformed_kernel_row_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(
        &spec,
        r#"{"name":"bad","M":1,"states":[[0.6],[0.4]],"kernel":[[0.5,0.5],[0.7,0.2]],"initial":"stationary"}"#,
    )
    .unwrap();
    let out = erw(&["classify", "--spec", spec.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 1"));
}

#[test]
fn unknown_builtin_and_bad_options_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        erw(&["classify", "--builtin", "nope"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        erw(&["walk", "--builtin", "placebo", "--reps", "0"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(erw(&["walk"], dir.path()).status.code(), Some(2));
}

#[test]
fn list_builtins_is_stable() {
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_erw"))
            .arg("list-builtins")
            .output()
            .unwrap()
    };
    let first = run();
    assert_eq!(first.status.code(), Some(0));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert!(names.contains(&"placebo"));
    assert!(names.contains(&"example3_truncated"));
    assert_eq!(run().stdout, first.stdout);
}

#[test]
fn walk_csv_is_byte_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "walk",
        "--builtin",
        "two_state",
        "--n",
        "50",
        "--reps",
        "64",
        "--seed",
        "9",
    ];
    assert_eq!(erw(&args, a.path()).status.code(), Some(0));
    let mut threaded = args.to_vec();
    threaded.extend(["--threads", "3"]);
    assert_eq!(erw(&threaded, b.path()).status.code(), Some(0));
    let body = std::fs::read(a.path().join("walk.csv")).unwrap();
    assert_eq!(body, std::fs::read(b.path().join("walk.csv")).unwrap());
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.lines().next(), Some("rep,seed,n,X_n,tau_n,truncated"));
    assert_eq!(text.lines().count(), 65);
}

#[test]
fn config_hash_ignores_output_dir_but_not_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    erw(&["classify", "--builtin", "two_state"], a.path());
    erw(&["classify", "--builtin", "two_state"], b.path());
    erw(&["classify", "--builtin", "two_state", "--seed", "2"], c.path());
    let hash = |d: &Path| report(d)["config_hash"].as_str().unwrap().to_owned();
    assert_eq!(hash(a.path()), hash(b.path()));
    assert_ne!(hash(a.path()), hash(c.path()));
}

#[test]
fn timestamp_only_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    erw(&["classify", "--builtin", "placebo"], dir.path());
    assert!(report(dir.path()).get("timestamp").is_none());
    erw(&["classify", "--builtin", "placebo", "--timestamp"], dir.path());
    assert!(report(dir.path())["timestamp"].is_u64());
}

#[test]
fn oracle_check_on_two_state_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = erw(
        &["oracle-check", "--builtin", "two_state", "--reps", "20000"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("check,side,level,state,tv,threshold"));
}

#[test]
fn failed_assertion_exits_three_and_still_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = erw(
        &[
            "limit-law",
            "--builtin",
            "placebo",
            "--n",
            "100",
            "--reps",
            "200",
            "--tolerance",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let r = report(dir.path());
    assert_eq!(r["assertions"][0]["passed"], false);
}

#[test]
fn truncation_budget_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = erw(
        &[
            "walk",
            "--builtin",
            "placebo",
            "--n",
            "100",
            "--reps",
            "20",
            "--step-cap",
            "10",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(report(dir.path())["truncated_fraction"], 1.0);
}

#[test]
fn renewal_and_tails_write_their_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let params = r#"{"a":[0.95,0.95,0.95],"b":[0.85,0.85,0.85]}"#;
    let out = erw(
        &["renewal", "--builtin", "two_state", "--params", params, "--reps", "500"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("renewal.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("i,delta_sigma,Q"));
    assert_eq!(csv.lines().count(), 502);

    let out = erw(
        &[
            "branching",
            "--builtin",
            "two_state",
            "--params",
            params,
            "--reps",
            "300",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("survival.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("rep,kind,tau0,area,sigma0,truncated"));

    erw(
        &["tails", "--builtin", "two_state", "--params", params, "--reps", "2000"],
        dir.path(),
    );
    let ccdf = std::fs::read_to_string(dir.path().join("ccdf_sigma0.csv")).unwrap();
    assert_eq!(ccdf.lines().next(), Some("x,ccdf"));
}

#[test]
fn recurrent_spec_refuses_renewal() {
    let dir = tempfile::tempdir().unwrap();
    let out = erw(&["renewal", "--builtin", "placebo"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diffusion_runs_without_a_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = erw(
        &["diffusion", "--reps", "1500", "--dt", "0.01", "--horizon", "100"],
        dir.path(),
    );
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
    let r = report(dir.path());
    assert!(r["spec"].is_null());
    assert!((r["estimates"]["exit_formula"].as_f64().unwrap() - 0.8).abs() < 1e-12);
}
