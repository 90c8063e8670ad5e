use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crra_cli::{execute, ExperimentConfig, RunOptions};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn crra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crra")).args(args).output().unwrap()
}

fn small_merton(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
[market]
kind = "constant"
mu = [1.0]
sigma = [[1.0]]
[utility]
p = 0.85
[grid]
horizon = 1.0
steps = 6
paths = 500
seed = 3
{extra}
"#
    );
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn invalid_exponent_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_merton(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("p = 0.85", "p = 1.2");
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("out");
    let out = crra(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let record: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(record["error"], "ConfigError");
    assert!(record["message"].as_str().unwrap().contains("utility.p"));
    assert!(!out_dir.exists());
}

#[test]
fn merton_config_matches_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("constant_merton.toml");
    let out = crra(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    let y0 = summary["scenarios"][0]["y0"].as_f64().unwrap();
    let exact = 0.85 / 0.3;
    assert!((y0 - exact).abs() / exact <= 0.02, "{y0}");
    assert_eq!(summary["config"]["grid"]["seed"], 7);
    assert!(summary["scenarios"][0]["martingale"].is_null());
}

#[test]
fn csv_schema_and_display_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = r#"
[[scenario]]
name = "tvar"
measure = "tvar"
alpha = 0.1
bound = 0.3
tau = 0.0666666666666666667
"#;
    let cfg = small_merton(tmp.path(), extra);
    let out_dir = tmp.path().join("out");
    let out = crra(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["unconstrained", "tvar"] {
        let opp = fs::read_to_string(out_dir.join(format!("opportunity_{name}.csv"))).unwrap();
        let mut lines = opp.lines();
        assert_eq!(lines.next().unwrap(), "t,path_id,Y,exp_Y,display");
        assert_eq!(opp.lines().count(), 1 + 500 * 7);
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0.0000000000000000e0");
        assert_eq!(first[4], "true");
        // terminal value is exactly zero
        let last: Vec<&str> = opp.lines().last().unwrap().split(',').collect();
        assert_eq!((last[2], last[3], last[4]), ("0.0000000000000000e0", "1.0000000000000000e0", "false"));
        let strat = fs::read_to_string(out_dir.join(format!("strategy_{name}.csv"))).unwrap();
        assert_eq!(strat.lines().next().unwrap(), "t,path_id,zeta_1,beta1,beta2,feasible,display");
        assert_eq!(strat.lines().count(), 1 + 500 * 6);
        assert!(strat.lines().skip(1).all(|l| l.split(',').nth(5) == Some("true")));
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let tvar = &summary["scenarios"][1];
    assert_eq!(tvar["name"], "tvar");
    assert!(tvar["baseline_violations"].as_u64().unwrap() > 0);
    assert!(tvar["y0"].as_f64().unwrap() < summary["scenarios"][0]["y0"].as_f64().unwrap());
}

#[test]
fn identical_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_merton(tmp.path(), "");
    let run = |dir: &str, seed: &str| {
        let d = tmp.path().join(dir);
        let out = crra(&["run", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success());
        (fs::read(d.join("opportunity_unconstrained.csv")).unwrap(), fs::read(d.join("strategy_unconstrained.csv")).unwrap())
    };
    let a = run("a", "9");
    let b = run("b", "9");
    assert!(a == b);
}

#[test]
fn scenario_filter_and_unknown_name() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = r#"
[[scenario]]
name = "var"
measure = "var"
alpha = 0.1
bound = 0.3
tau = 0.1
"#;
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(small_merton(tmp.path(), extra)).unwrap()).unwrap();
    let out = execute(&cfg, &RunOptions { scenario: Some("var".into()), ..RunOptions::default() }).unwrap();
    assert_eq!(out.runs.len(), 1);
    assert_eq!(out.summary.scenarios[0].baseline_violations, None);
    assert!(execute(&cfg, &RunOptions { scenario: Some("nope".into()), ..RunOptions::default() }).is_err());
}

#[test]
fn expression_market_with_knot_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = configs().join("two_asset_expression.toml");
    let mut cfg = ExperimentConfig::load(&cfg_path).unwrap();
    cfg.grid.paths = 800;
    let out = execute(&cfg, &RunOptions { oracle_checks: true, ..RunOptions::default() }).unwrap();
    assert_eq!(out.runs.len(), 3);
    for r in &out.summary.scenarios {
        assert!(r.all_feasible, "{}", r.name);
        assert!(r.max_decomposition_residual <= 1e-6);
    }
    assert!(out.summary.flags.is_empty(), "{:?}", out.summary.flags);
    crra_cli::output::write_all(&out, tmp.path()).unwrap();
    let header = fs::read_to_string(tmp.path().join("strategy_wang.csv")).unwrap();
    assert!(header.starts_with("t,path_id,zeta_1,zeta_2,beta1,beta2,feasible,display\n"));
}
