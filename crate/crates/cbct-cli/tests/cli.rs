//! End-to-end exercises of the `cbct` binary: exit codes, frozen configs,
//! and a miniature simulate → train → eval → sweep chain.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cbct() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cbct"))
}

fn run(args: &[&str]) -> Output {
    cbct().args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
seed = 77

[dataset]
n_cases = 3
n_sparse_views = 13
n_dense_views = 24
grid = { nx = 16, ny = 16, nz = 12, spacing_mm = [4.0, 4.0, 4.0] }

[geometry]
detector_rows = 32
detector_cols = 32
pixel_pitch_mm = [6.0, 6.0]

[train]
kind = "prior_segnet"
mode = "mis"
epochs = 1
batch_size = 4
n_scales = 2
base_channels = 4
"#,
    )
    .unwrap();
    path
}

#[test]
fn missing_dataset_fails_with_data_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dir.path().join("nowhere").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("nowhere"), "error should name the path: {msg}");
}

#[test]
fn malformed_config_fails_with_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = \"zebra\"").unwrap();
    let out = run(&[
        "simulate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_model_kind_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--kind",
        "resnet",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn miniature_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");

    let sim = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(
        sim.status.success(),
        "simulate failed: {}",
        String::from_utf8_lossy(&sim.stderr)
    );
    assert!(data.join("effective-config.toml").exists());
    assert!(data.join("dataset.toml").exists());
    assert!(data.join("case_0000/manifest.toml").exists());

    let train = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(
        train.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );
    let ckpt = run_dir.join("prior_segnet.ckpt");
    assert!(ckpt.exists());
    let log_text = fs::read_to_string(run_dir.join("prior_segnet_log.csv")).unwrap();
    assert!(log_text.starts_with("# model=prior_segnet mode=mis misalign_range_deg=[-5,5]"));

    // resume continues epoch numbering
    let resumed = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert!(
        resumed.status.success(),
        "resume failed: {}",
        String::from_utf8_lossy(&resumed.stderr)
    );
    let log_text = fs::read_to_string(run_dir.join("prior_segnet_log.csv")).unwrap();
    assert!(
        log_text.contains("\n1,train,"),
        "resumed log should start at epoch 1: {log_text}"
    );

    // eval with only the FDK baseline needs no network at all
    let eval_dir = dir.path().join("eval");
    let eval = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--models",
        "fdk",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(
        eval.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);
    assert!(metrics.lines().skip(1).all(|l| l.contains(",fdk,")));
    let agg = fs::read_to_string(eval_dir.join("aggregate.csv")).unwrap();
    assert!(agg.lines().nth(1).unwrap().starts_with("fdk,"));

    // eval with the trained checkpoint: row count = slices × models
    let eval2_dir = dir.path().join("eval2");
    let eval2 = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--models",
        &format!("fdk,{}", ckpt.to_str().unwrap()),
        "--out",
        eval2_dir.to_str().unwrap(),
        "--alpha",
        "2.0",
    ]);
    assert!(
        eval2.status.success(),
        "eval2 failed: {}",
        String::from_utf8_lossy(&eval2.stderr)
    );
    let metrics2 = fs::read_to_string(eval2_dir.join("metrics.csv")).unwrap();
    let n_rows = metrics2.lines().count() - 1;
    // tiny dataset: 1 test case × 12 slices × 2 models
    assert_eq!(n_rows % 2, 0);
    assert!(metrics2.contains(",prior_segnet,"));

    // sweep over two angles
    let sweep_dir = dir.path().join("sweep");
    let sweep = run(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--models",
        ckpt.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
        "--alphas",
        "-2,0,2",
    ]);
    assert!(
        sweep.status.success(),
        "sweep failed: {}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    let sweep_csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    // 3 alphas × 2 models (fdk baseline + checkpoint)
    assert_eq!(sweep_csv.lines().count() - 1, 6);
}
