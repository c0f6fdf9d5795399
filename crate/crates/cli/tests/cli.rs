use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sumformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    run(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn verify_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("verify_report.json"))).unwrap();
    let records = report["records"].as_array().unwrap();
    assert!(records.len() >= 10);
    for r in records {
        assert_eq!(r["status"], "pass", "{r}");
        assert!(r.get("witness_path").is_some() && r.get("max_residual").is_some());
    }
}

#[test]
fn verify_literal_n_linformer_fails_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["verify", "--variant", "linformer", "--linformer-scale", "n"]);
    assert_eq!(code(&o), 3);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("sigma-recovery-linformer"), "{stderr}");
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join("verify_report.json"))).unwrap();
    let rec = report["records"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == "sigma-recovery-linformer")
        .unwrap();
    assert_eq!(rec["status"], "fail");
    assert!(rec["max_residual"].as_f64().unwrap() >= 1e-2);
    let witness = rec["witness_path"].as_str().unwrap();
    let w: serde_json::Value = serde_json::from_str(&read(Path::new(witness))).unwrap();
    assert!(w["input"]["data"].is_array());
}

#[test]
fn verify_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["verify", "--tol", "0"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_zero_epochs_writes_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train", "--epochs", "0", "--points", "40"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("curve.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][..3], ["0", "validation", "relative_l2"]);
    assert!(read(&dir.path().join("curve.csv")).starts_with("epoch,split,metric,value\n"));
    let manifest: serde_json::Value = serde_json::from_str(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["epochs"], 0);
    assert_eq!(manifest["config"]["seed"], 0);
}

#[test]
fn train_is_deterministic_and_records_every_five_epochs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["train", "--epochs", "200", "--points", "20", "--d-latent", "4", "--seed", "3"];
    assert_eq!(code(&run_in(a.path(), &args)), 0);
    assert_eq!(code(&run_in(b.path(), &args)), 0);
    let ca = read(&a.path().join("curve.csv"));
    assert_eq!(ca, read(&b.path().join("curve.csv")));
    let validation = csv_rows(&a.path().join("curve.csv"))
        .into_iter()
        .filter(|r| r[1] == "validation")
        .count();
    assert!(validation >= 40, "{validation}");
    // Re-running into the same directory overwrites byte-identically.
    assert_eq!(code(&run_in(a.path(), &args)), 0);
    assert_eq!(ca, read(&a.path().join("curve.csv")));
}

#[test]
fn train_divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train", "--epochs", "20", "--points", "20", "--lr", "1e300"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("curve.csv").exists());
}

#[test]
fn sweep_grid_sizes_and_formula_column() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--epochs", "1", "--points", "20"];
    let mut args = vec!["sweep", "--d-list", "2", "--dprime-list", "8", "--seeds", "4"];
    args.extend(small);
    assert_eq!(code(&run_in(dir.path(), &args)), 0);
    assert_eq!(csv_rows(&dir.path().join("sweep.csv")).len(), 1);

    let mut args = vec!["sweep", "--d-list", "1,2", "--dprime-list", "2,8,32", "--seeds", "0,1"];
    args.extend(small);
    assert_eq!(code(&run_in(dir.path(), &args)), 0);
    let text = read(&dir.path().join("sweep.csv"));
    assert!(text.starts_with("d,d_prime,seed,best_val_err,dprime_formula\n"));
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let expected = if r[0] == "1" { "3" } else { "9" };
        assert_eq!(r[4], expected);
    }
}

#[test]
fn bench_ratios() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in(dir.path(), &["bench"])), 0);
    let rows = csv_rows(&dir.path().join("bench.csv"));
    assert_eq!(rows.len(), 12);
    for r in rows.iter().filter(|r| !r[6].is_empty()) {
        let ratio: f64 = r[6].parse().unwrap();
        let (lo, hi) = if r[0] == "standard" { (3.6, 4.4) } else { (1.8, 2.2) };
        assert!((lo..=hi).contains(&ratio), "{r:?}");
        assert_eq!(r[4], r[5], "closed form vs counted: {r:?}");
    }
}

#[test]
fn invalid_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "epochs = 3\nbogus_key = 1\n").unwrap();
    let out = dir.path().join("out");
    let o = run_in(&out, &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let o = run_in(&out, &["verify", "--n", "1"]);
    assert_eq!(code(&o), 2);
    let o = run_in(&out, &["train", "--target", "nope"]);
    assert_eq!(code(&o), 2);
    let o = run_in(&out, &["verify", "--n", "3", "--k", "3"]);
    assert_eq!(code(&o), 2);
    let o = run_in(&out, &["verify", "--variant", "sparse"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("from-file");
    fs::write(
        &cfg,
        format!("epochs = 10\npoints = 30\nd_latent = 4\nout = {:?}\n", out.to_str().unwrap()),
    )
    .unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("curve.csv")).len(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["points"], 30);
    assert_eq!(manifest["config"]["epochs"], 0);
}
