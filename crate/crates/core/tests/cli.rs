use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use kgp::commands::load_model;
use kgp::grid::predict_mean;
use kgp::io::{read_json, Manifest, TensorFile};
use serde_json::{json, Value};
use tempfile::TempDir;

fn kgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgp")).args(args).output().expect("spawn kgp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_burgers(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "dataset": {"preset": "burgers", "n": 2, "m": 16, "nt": 8},
        "grid": {"manifest": "data/manifest.json"},
        "training": {"max_iters": 10, "learning_rate": 0.05},
        "seed": 1
    });
    if let (Some(c), Some(e)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in e {
            c.insert(k.clone(), v.clone());
        }
    }
    write_config(dir, "burgers.json", cfg)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_lists_parameters() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_burgers(tmp.path(), json!({}));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&kgp(&["generate", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&kgp(&["generate", "--config", s(&cfg), "--out", s(&b)])), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let man: Manifest = read_json(&a.join("manifest.json")).unwrap();
    assert_eq!(man.train.len(), 2);
    assert!(man.train.iter().all(|e| e.params.len() == 2));
    let tf = TensorFile::read(&a.join(&man.train[0].file)).unwrap();
    assert_eq!(tf.tensor.shape(), &[16, 8]);
    assert!(a.join("config.resolved.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bad_mu = tiny_burgers(tmp.path(), json!({"dataset": {"preset": "burgers", "n": 1, "m": 16, "nt": 4, "params": [[6.0, 0.02]]}}));
    let o = kgp(&["generate", "--config", s(&bad_mu), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu1"));

    let unknown = write_config(tmp.path(), "unknown.json", json!({"trainig": {}}));
    assert_eq!(code(&kgp(&["generate", "--config", s(&unknown)])), 2);
    assert_eq!(code(&kgp(&["generate"])), 1);
    assert_eq!(code(&kgp(&["verify", "--suite", "nope"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_kgp")).env("KGP_THREADS", "0").args(["verify", "--suite", "kron"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_iterations_keep_the_initial_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_burgers(tmp.path(), json!({"training": {"max_iters": 0}}));
    assert_eq!(code(&kgp(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("data"))])), 0);
    let out = tmp.path().join("m0");
    assert_eq!(code(&kgp(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let sum: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sum["initial_nlml"], sum["best_nlml"]);
    assert_eq!(sum["best_iteration"], 0);
    let model: Value = serde_json::from_slice(&fs::read(out.join("model.json")).unwrap()).unwrap();
    // Parameters live in log space, so the init survives up to one rounding.
    assert!((model["sigma2"].as_f64().unwrap() / 5e-3 - 1.0).abs() < 1e-14);
}

#[test]
fn rectilinear_train_and_predict_match_library() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_burgers(tmp.path(), json!({}));
    assert_eq!(code(&kgp(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("data"))])), 0);
    let model_dir = tmp.path().join("model");
    let t = Instant::now();
    assert_eq!(code(&kgp(&["train", "--config", s(&cfg), "--out", s(&model_dir)])), 0);
    assert!(t.elapsed().as_secs_f64() < 10.0);
    let trace = fs::read_to_string(model_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,nlml,grad_norm,seconds,cg_iters\n"));

    let pred = tmp.path().join("pred");
    let o = kgp(&["predict", "--model", s(&model_dir.join("model.json")), "--out", s(&pred), "--truth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pred.join("var.kgp").exists() && !pred.join("var_lower.kgp").exists());
    let report: Value = serde_json::from_slice(&fs::read(pred.join("predict_report.json")).unwrap()).unwrap();
    assert_eq!(report["relative_errors"].as_array().unwrap().len(), 2);

    let (mf, model) = load_model(&model_dir.join("model.json")).unwrap();
    let man: Manifest = read_json(&tmp.path().join("data/manifest.json")).unwrap();
    let params: Vec<f64> = man.test.iter().flat_map(|e| e.params.clone()).collect();
    let test = mf.grid.with_param_points(kgp::linalg::DenseMatrix::new(man.test.len(), 2, params).unwrap()).unwrap();
    let want = predict_mean(model.fitted(), &test).unwrap();
    let got = TensorFile::read(&pred.join("mean.kgp")).unwrap();
    assert_eq!(got.tensor.values(), want.values());
}

#[test]
fn gappy_train_records_cg_and_predicts_bounds() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "holed.json",
        json!({
            "dataset": {"preset": "holed_square", "n": 3, "lattice": 12, "radius": 0.1},
            "grid": {"manifest": "data/manifest.json"},
            "training": {"max_iters": 5, "learning_rate": 0.05},
            "gappy": {"cg": {"tol": 1e-8}},
            "seed": 2
        }),
    );
    assert_eq!(code(&kgp(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("data"))])), 0);
    let model_dir = tmp.path().join("model");
    assert_eq!(code(&kgp(&["train", "--config", s(&cfg), "--out", s(&model_dir)])), 0);
    let trace = fs::read_to_string(model_dir.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0].split(',').next_back(), Some("cg_iters"));
    assert!(rows[1..].iter().all(|r| r.split(',').next_back().unwrap().parse::<usize>().unwrap() > 0));

    let pred = tmp.path().join("pred");
    assert_eq!(code(&kgp(&["predict", "--model", s(&model_dir.join("model.json")), "--out", s(&pred)])), 0);
    let lo = TensorFile::read(&pred.join("var_lower.kgp")).unwrap();
    let hi = TensorFile::read(&pred.join("var_upper.kgp")).unwrap();
    let mask = lo.mask.clone().expect("bounds carry the mask");
    for ((l, h), m) in lo.tensor.values().iter().zip(hi.tensor.values()).zip(&mask) {
        if *m {
            assert!(l <= h);
        }
    }
}

#[test]
fn verify_passes_clean_and_fails_perturbed() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    assert_eq!(code(&kgp(&["verify", "--suite", "kron", "--out", s(&out)])), 0);
    let rep: Value = serde_json::from_slice(&fs::read(out.join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
    assert!(rep["checks"].as_array().unwrap().iter().all(|c| c["margin"].as_f64().unwrap() >= 0.0));
    assert_eq!(code(&kgp(&["verify", "--suite", "kron", "--perturb", "factor"])), 3);
    assert_eq!(code(&kgp(&["verify", "--suite", "lemma1", "--perturb", "pseudovalues"])), 3);
}

#[test]
fn bench_csv_schema() {
    let tmp = TempDir::new().unwrap();
    let o = kgp(&["bench", "--sizes", "16,32,64", "--dense-cap", "1100", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    let lines: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0][3], "grid_ratio");
    assert!(lines[1][3].is_empty() && !lines[2][3].is_empty());
    // n_total = 4·M·8; only the first two fit under the cap.
    assert!(!lines[2][6].is_empty() && lines[3][6].is_empty());
}
