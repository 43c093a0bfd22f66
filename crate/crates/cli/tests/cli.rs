use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_fpf");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fpf(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("FPF_SEED").output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fpf(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn build_arch_with_clinical_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("arch_clinical.json");
    ok(tmp.path(), &["build-arch", "--config", cfg.to_str().unwrap(), "--out", "arch"]);
    let spec = json(&tmp.path().join("arch/arch.json"));
    assert_eq!(spec["c_t_start"], 179);
    assert_eq!(spec["temporal_channels"], serde_json::json!([179, 147, 115, 83, 51, 32, 32]));
    let run = json(&tmp.path().join("arch/run.json"));
    assert_eq!(run["command"], "build-arch");
    assert_eq!(run["config"]["n_params"], 5_000_000);
    assert!(run["timings"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(run["git_revision"].is_string());
}

#[test]
fn noise_free_matching_evaluates_to_zero_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = write(
        d,
        "clean.json",
        r#"{"height": 24, "width": 24, "frames": 32, "n_regions": 4, "snap_to_grid": true,
            "n_train": 0, "n_validation": 0, "n_test": 2}"#,
    );
    ok(d, &["generate-dataset", "--config", &cfg, "--out", "ds", "--seed", "5"]);
    ok(d, &["match", "--dataset", "ds", "--out", "dm"]);
    ok(d, &["evaluate", "--dataset", "ds", "--pred", "dm", "--out", "ev"]);
    let report = json(&d.join("ev/eval.json"));
    for m in report["maps"].as_array().unwrap() {
        assert_eq!(m["nrmse"]["mean"], 0.0, "{}", m["map"]);
        assert_eq!(m["psnr"]["mean"], "inf", "{}", m["map"]);
    }
    let csv = fs::read_to_string(d.join("ev/roi.csv")).unwrap();
    assert!(csv.starts_with("roi_id,map,ref_mean,pred_mean"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn schema_errors_exit_with_two_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let bad = write(d, "bad.json", r#"{"train": {"batch_size": "eight"}}"#);
    let out = fpf(d, &["train", "--dataset", "ds", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));

    let unknown = write(d, "unknown.json", r#"{"receptive_field": 15, "n_param": 5}"#);
    let out = fpf(d, &["build-arch", "--config", &unknown]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_param"));

    let even = write(
        d,
        "even.json",
        r#"{"receptive_field": 4, "n_params": 1000, "n_nonlinearities": 3, "c_s_stop": 4, "c_s_dec": 2,
            "c_t_stop": 4, "c_t_dec": 2, "input_channels": 4, "output_channels": 5}"#,
    );
    assert_eq!(fpf(d, &["build-arch", "--config", &even]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = fpf(tmp.path(), &["match", "--dataset", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let tiny = write(
        tmp.path(),
        "tiny.json",
        r#"{"receptive_field": 15, "n_params": 10, "n_nonlinearities": 21, "c_s_stop": 64, "c_s_dec": 32,
            "c_t_stop": 32, "c_t_dec": 32, "input_channels": 350, "output_channels": 5}"#,
    );
    let out = fpf(tmp.path(), &["build-arch", "--config", &tiny]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("minimum"));
}

#[test]
fn environment_overrides_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("dataset_tiny.json");
    let out = Command::new(BIN)
        .current_dir(tmp.path())
        .args(["generate-dataset"])
        .env("FPF_CONFIG", &cfg)
        .env("FPF_SEED", "17")
        .env("FPF_OUT", "envout")
        .env("FPF_DETERMINISTIC", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = json(&tmp.path().join("envout/run.json"));
    assert_eq!(run["seed"], 17);
    assert_eq!(run["deterministic"], true);
    assert_eq!(run["threads"], 1);
    assert_eq!(json(&tmp.path().join("envout/manifest.json"))["seed"], 17);
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_pipeline(d: &Path) {
    let c = configs();
    let s = |p: &str| c.join(p).display().to_string();
    let det = "--deterministic";
    ok(d, &["generate-dataset", "--config", &s("dataset_tiny.json"), "--seed", "9", "--out", "ds", det]);
    ok(d, &["match", "--dataset", "ds", "--out", "dm", det]);
    ok(d, &["train", "--dataset", "ds", "--config", &s("train_tiny.json"), "--out", "model", det]);
    ok(d, &["reconstruct", "--model", "model/model.fpft", "--dataset", "ds", "--out", "rec", det]);
    ok(d, &["evaluate", "--dataset", "ds", "--pred", "rec", "--reference", "dm", "--out", "ev", det]);
    ok(d, &["blurriness", "--input", "rec", "--dataset", "ds", "--out", "blur", det]);
    let imp = write(d, "imp.json", r#"{"frames": [0, 4], "repeats": 2, "patch_size": 8}"#);
    ok(d, &["perm-importance", "--model", "model/model.fpft", "--dataset", "ds", "--config", &imp, "--out", "pi", det]);
}

#[test]
fn deterministic_pipeline_reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    tiny_pipeline(a.path());
    tiny_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 30);
    assert_eq!(ta.len(), tb.len());
    for ((pa, da), (pb, db)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs", pa.display());
    }
    for sub in ["model/loss.csv", "model/checkpoints/epoch_0001.fpft", "ev/eval.json", "ev/roi.csv", "blur/blurriness.csv", "pi/importance.csv"] {
        assert!(a.path().join(sub).exists(), "{sub} missing");
    }
    let run = json(&a.path().join("model/run.json"));
    let outputs = run["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o["file"] == "model.fpft" && o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn sweep_reports_infeasible_budgets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "sweep.json", r#"{"receptive_fields": [1, 15], "budgets": [1000, 5000000]}"#);
    ok(tmp.path(), &["sweep-arch", "--config", &cfg, "--out", "sw"]);
    let rows = json(&tmp.path().join("sw/sweep.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r["receptive_field"] == 15 && r["budget"] == 1000 && r["error"].is_string()));
    assert!(rows.iter().any(|r| r["receptive_field"] == 15 && r["spec"]["c_t_start"] == 179));
}
