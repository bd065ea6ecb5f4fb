use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvar_mlmc::model::LinearGaussian;

fn cli(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvar-mlmc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

fn rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("missing column {name}"))
}

#[test]
fn estimate_matches_closed_form_cvar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 2, "model": "linear_gaussian", "optimizer": {"z0": [0.4]}, "experiment": {"tolerances": [0.02]}}"#);
    let out = dir.path().join("out");
    let o = cli(&["estimate"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, r) = rows(&out.join("estimates.csv"));
    assert_eq!(r.len(), 1);
    let cvar: f64 = r[0][column(&h, "cvar")].parse().unwrap();
    let rmse: f64 = r[0][column(&h, "rmse")].parse().unwrap();
    let exact = LinearGaussian::default().cvar(0.4, 0.7);
    assert!((cvar - exact).abs() <= rmse, "{cvar} vs {exact} (rmse {rmse})");
    let errors: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("errors.json")).unwrap()).unwrap();
    assert_eq!(errors[0]["tolerance"], 0.02);
    let (fh, fr) = rows(&out.join("functionals.csv"));
    assert_eq!(fh, ["run", "theta", "phi", "d_phi", "d_psi_1"]);
    assert!(fr.len() >= 17);
}

#[test]
fn reliability_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 3, "model": "linear_gaussian", "experiment": {"tolerances": [0.05], "repeats": 20, "reference": {"samples": 20000, "level": 0}}}"#,
    );
    let out = dir.path().join("out");
    let o = cli(&["reliability"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, r) = rows(&out.join("reliability.csv"));
    assert_eq!(
        h,
        ["run", "tolerance", "estimated_rmse", "true_pointwise_error", "true_sup_error", "cost", "converged", "var", "cvar"]
    );
    assert_eq!(r.len(), 20);
    assert!(out.join("reference.json").exists());
}

#[test]
fn optimize_writes_history_and_per_iteration_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 5, "model": "linear_gaussian", "optimizer": {"alpha": 0.2, "eps": 0.01}}"#);
    let out = dir.path().join("out");
    let o = cli(&["optimize", "--threads", "2"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, r) = rows(&out.join("history.csv"));
    assert_eq!(&h[..3], ["j", "z0", "theta"]);
    let last: f64 = r.last().unwrap()[column(&h, "residual")].parse().unwrap();
    assert!(last <= 0.01);
    for j in 0..r.len() {
        assert!(out.join(format!("hierarchy_{j}.json")).exists());
        let (ch, cr) = rows(&out.join(format!("cdf_{j}.csv")));
        assert_eq!(ch, ["q", "cdf", "var", "cvar"]);
        assert_eq!(cr.last().unwrap()[1], "1");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 8, "model": "linear_gaussian", "experiment": {"tolerances": [0.05, 0.03], "repeats": 2}}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cli(&["complexity"], &cfg, &a).status.success());
    assert!(cli(&["complexity", "--threads", "3"], &cfg, &b).status.success());
    assert_eq!(std::fs::read(a.join("complexity.csv")).unwrap(), std::fs::read(b.join("complexity.csv")).unwrap());
    let c = dir.path().join("c");
    assert!(cli(&["complexity", "--seed", "9"], &cfg, &c).status.success());
    assert_ne!(std::fs::read(a.join("complexity.csv")).unwrap(), std::fs::read(c.join("complexity.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_code_two_and_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model": "fhn", "optimizer": {"alpha": 0.1, "step": 2}}"#);
    let o = cli(&["optimize"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(record["error"], "config");
    assert_eq!(record["path"], "optimizer.step");

    let cfg = write_config(dir.path(), r#"{"experiment": {"kind": "complexity"}}"#);
    let o = cli(&["estimate"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(record["path"], "experiment.kind");
}

#[test]
fn runtime_errors_exit_with_code_one_and_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": "linear_gaussian", "experiment": {"tolerances": [0.1], "reference": {"path": "/nonexistent/reference.json"}}}"#,
    );
    let o = cli(&["reliability"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(record["error"], "io");
}
