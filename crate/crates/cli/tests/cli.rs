use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subgroup-ate"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const TOY: &str = "y,t,g\n3,1,a\n5,1,a\n1,0,a\n2,0,a\n10,1,b\n8,1,b\n4,0,b\n7,0,b\n";

const TOY_CONFIG: &str = r#"
format = "json"
[columns]
y = "y"
treatment = "t"
subgroup = "g"
[design]
p = 0.5
"#;

#[test]
fn analyze_toy_matches_cell_means() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", TOY);
    let cfg = write(dir.path(), "toy.toml", TOY_CONFIG);
    let out = run(&["analyze", "--data", &data, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let est = v["result"]["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 2);
    assert_eq!(est[0]["subgroup"], "a");
    assert_eq!(est[0]["tau_hat"].as_f64().unwrap(), 4.0 - 1.5);
    assert_eq!(est[1]["tau_hat"].as_f64().unwrap(), 9.0 - 5.5);
    assert_eq!(v["version"], subgroup_ate::VERSION);
    assert_eq!(v["config"]["analysis"]["covariate_model"], "none");
    assert!(v["result"]["equal_effects"].as_array().unwrap().len() > 0);
}

#[test]
fn analyze_writes_report_files() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", TOY);
    let cfg = write(dir.path(), "toy.toml", &TOY_CONFIG.replace("\"json\"", "\"both\""));
    let out_dir = dir.path().join("out");
    let out = run(&["analyze", "--data", &data, "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let csv = std::fs::read_to_string(out_dir.join("estimates.csv")).unwrap();
    assert!(csv.starts_with("subgroup,estimator,variant,tau_hat,se,df"));
    assert!(out_dir.join("analysis.json").exists());
}

#[test]
fn r2_without_covariates_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", TOY);
    let cfg = write(dir.path(), "toy.toml", &format!("{TOY_CONFIG}[analysis]\nr2_adjust = true\n"));
    let out = run(&["analyze", "--data", &data, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("r2_adjust requires covariates"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", TOY);
    let cfg = write(dir.path(), "toy.toml", &format!("{TOY_CONFIG}colour = \"red\"\n"));
    let out = run(&["analyze", "--data", &data, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn validation_failure_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "bad.csv", "y,t,g\n1,1,a\n2,1,a\n3,0,b\n4,0,b\n");
    let cfg = write(dir.path(), "toy.toml", TOY_CONFIG);
    let out = run(&["analyze", "--data", &data, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("empty control cell for subgroup 'a'"), "{err}");
}

#[test]
fn singular_design_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = write(
        dir.path(),
        "flat.csv",
        "y,t,g,x\n3,1,a,1\n5,1,a,1\n1,0,a,1\n2,0,a,1\n10,1,b,1\n8,1,b,1\n4,0,b,1\n7,0,b,1\n",
    );
    let cfg = write(dir.path(), "c.toml", &TOY_CONFIG.replace("g\"\n", "g\"\ncovariates = [\"x\"]\n"));
    let out = run(&["analyze", "--data", &data, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn voucher_shaped_fixture_runs() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "analyze",
        "--data",
        fixture("voucher_like.csv").to_str().unwrap(),
        "--config",
        fixture("voucher_like.toml").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["metadata"]["analysis_level"], "cluster_subgroup");
    assert_eq!(v["result"]["metadata"]["weighted"], true);
    for e in v["result"]["estimates"].as_array().unwrap() {
        assert_eq!(e["se_menu"].as_array().unwrap().len(), 6);
    }
}

#[test]
fn simulate_smoke_is_fast_and_repeatable() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = config("smoke.toml");
    let start = std::time::Instant::now();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(out.status.code(), Some(0));
    run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "3"]);
    let csv_a = std::fs::read(a.join("simulation.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("simulation.csv")).unwrap());
    let header = String::from_utf8_lossy(&csv_a).lines().next().unwrap().to_string();
    assert_eq!(header, "n,pi1,v,error_dist,variant,bias,coverage,true_se,mean_est_se,type1_t,type1_f");
    let v: Value = serde_json::from_slice(&std::fs::read(a.join("simulation.json")).unwrap()).unwrap();
    assert_eq!(v["seed"], 2023);
    assert_eq!(v["config"]["specs"][0][0], 40);
}

#[test]
fn simulate_rejects_crse() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "s.toml", "n = 40\npi1 = 0.5\nn_reps = 5\nvariants = [\"crse\"]\n");
    let out = run(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probe_panels() {
    let dir = TempDir::new().unwrap();
    let out = run(&["probe", "--config", config("panels.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read_to_string(dir.path().join("panel_a.csv")).unwrap();
    let first = a.lines().nth(1).unwrap();
    let split: f64 = first.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!((split * 1e4).floor() / 1e4, 0.9999);

    let b = std::fs::read_to_string(dir.path().join("panel_b.csv")).unwrap();
    let at_zero = b
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[1] == "0.5" && f[4] == "0")
        .unwrap();
    assert_eq!(at_zero[6], "1");
}

#[test]
fn probe_invalid_law_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "p.toml", "[[panel_a]]\nn = 10\nn_k = 12\n");
    let out = run(&["probe", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}
