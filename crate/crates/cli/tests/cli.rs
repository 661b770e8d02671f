use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
    "datasets": ["iris"],
    "hidden_sizes": [8],
    "mlp_epochs": 20,
    "n_samples": 100,
    "n_repeats": 3,
    "n_test_instances": 5,
    "n_dataset_seeds": 1,
    "finetune_epochs": 20,
    "depth_range": [1, 2],
    "depth_width": 8,
    "k_range": [1, 2],
    "grid_resolution": 5
}"#;

fn ndt_lime(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndt-lime")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn show_config_applies_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = ndt_lime(&[
        "show-config",
        "--config",
        &cfg,
        "--dataset",
        "wine",
        "--dataset",
        "friedman1",
        "--seed",
        "7",
    ]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["datasets"], serde_json::json!(["wine", "friedman1"]));
    assert_eq!(v["seed"], 7);
    assert_eq!(v["n_samples"], 100);
}

#[test]
fn run_table_writes_outputs_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("table");
    let out_str = out_dir.to_str().unwrap();

    let first = ndt_lime(&["run-table", "--config", &cfg, "--out", out_str]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let csv = fs::read_to_string(out_dir.join("table.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("dataset,LR_stability,LR_fidelity,LR_regularity"));
    assert!(csv.lines().nth(1).unwrap().starts_with("iris,"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run-table");
    assert_eq!(manifest["errors"], serde_json::json!([]));

    let again = ndt_lime(&["run-table", "--config", &cfg, "--out", out_str]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already exists"));

    let forced = ndt_lime(&["run-table", "--config", &cfg, "--out", out_str, "--overwrite"]);
    assert!(forced.status.success());
    assert_eq!(fs::read_to_string(out_dir.join("table.csv")).unwrap(), csv);
}

#[test]
fn failed_cells_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("bad");
    let out = ndt_lime(&[
        "run-table",
        "--config",
        &cfg,
        "--dataset",
        "iris",
        "--dataset",
        dir.path().join("absent.csv").to_str().unwrap(),
        "--target",
        "y",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(out_dir.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().contains("NA"));
    let manifest: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!manifest["errors"].as_array().unwrap().is_empty());
}

#[test]
fn csv_dataset_with_target_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,y\n");
    for i in 0..60 {
        let a = (i as f64 * 0.37).sin();
        let b = (i as f64 * 0.11).cos();
        text.push_str(&format!("{a},{b},{}\n", 2.0 * a - b));
    }
    let data = dir.path().join("data.csv");
    fs::write(&data, text).unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("csv");
    let out = ndt_lime(&[
        "run-table",
        "--config",
        &cfg,
        "--dataset",
        data.to_str().unwrap(),
        "--target",
        "y",
        "--task",
        "regression",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("table.csv").exists());
}

#[test]
fn sweeps_and_plot_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cases: [(&str, &[&str], &[&str]); 4] = [
        ("depth-sweep", &["iris"], &["depth_sweep.csv", "depth_sweep.json"]),
        ("k-sweep", &["iris"], &["k_sweep.csv", "k_sweep.json"]),
        ("boundary-grid", &["blobs"], &["boundary_grid.csv", "boundary_summary.json"]),
        ("stability-matrix", &["iris"], &["stability_matrix.json", "stability_matrix_NDT.csv"]),
    ];
    for (command, datasets, files) in cases {
        let out_dir = dir.path().join(command);
        let mut args = vec![command, "--config", &cfg, "--out", out_dir.to_str().unwrap()];
        for d in datasets {
            args.extend(["--dataset", d]);
        }
        let out = ndt_lime(&args);
        assert!(out.status.success(), "{command}: {}", String::from_utf8_lossy(&out.stderr));
        for f in files {
            assert!(out_dir.join(f).exists(), "{command} did not write {f}");
        }
        assert!(out_dir.join("manifest.json").exists());
    }
    let grid = fs::read_to_string(dir.path().join("boundary-grid").join("boundary_grid.csv")).unwrap();
    assert_eq!(grid.lines().next().unwrap(), "x,y,f_pred,dt_pred,ndt_init_pred,ndt_tuned_pred");
    assert_eq!(grid.lines().count(), 26);
}

#[test]
fn invalid_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"n_repeats": 1}"#);
    let out = ndt_lime(&["run-table", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_repeats"));

    let cfg = write_config(dir.path(), r#"{"no_such_key": 1}"#);
    let out = ndt_lime(&["show-config", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}
