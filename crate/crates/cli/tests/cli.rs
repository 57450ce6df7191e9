use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dti(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dti"));
    cmd.args(args).env_remove("DTI_OUTPUT_ROOT").env_remove("DTI_WORKERS").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let out = dti(&["config"], &[]);
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["dataset"]["num_users"] = 10.into();
    cfg["dataset"]["items_per_user"] = 20.into();
    cfg["dataset"]["num_items"] = 30.into();
    cfg["prompting"]["n"] = 3.into();
    cfg["model"]["d_model"] = 8.into();
    cfg["model"]["ff_dim"] = 16.into();
    cfg["train"]["max_epochs"] = 1.into();
    cfg["train"]["batch_size"] = 8.into();
    cfg["compare_ks"] = serde_json::json!([2, 4]);
    cfg["ablation_ks"] = serde_json::json!([1, 3]);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_a_sealed_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let out = dti(
        &["run", "--config", cfg.to_str().unwrap(), "--output-dir", run_dir.to_str().unwrap(), "--paradigm", "dti", "--k", "4", "--dump-attention"],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["config"]["train"]["k"], 4);
    assert_eq!(manifest["config"]["train"]["paradigm"], "dti");
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(files.contains(&"attention.txt"));

    // Append-never: a second run into the same directory is refused.
    let again = dti(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", run_dir.to_str().unwrap()], &[]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn flags_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let out = dti(
        &["run", "--config", cfg.to_str().unwrap(), "--output-dir", run_dir.to_str().unwrap(), "--seed", "9", "--lr", "0.001"],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["seed"], 9);
    assert_eq!(written["train"]["learning_rate"], 0.001);
    assert_eq!(written["prompting"]["n"], 3);
}

#[test]
fn output_root_env_prefixes_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = dti(
        &["run", "--config", cfg.to_str().unwrap(), "--output-dir", "nested/run"],
        &[("DTI_OUTPUT_ROOT", tmp.path())],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("nested/run/manifest.json").is_file());
}

#[test]
fn missing_csv_exits_2_without_creating_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let missing = tmp.path().join("nope.csv");
    let out = dti(
        &["run", "--config", cfg.to_str().unwrap(), "--csv", missing.to_str().unwrap(), "--output-dir", run_dir.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset.path"));
    assert!(!run_dir.exists());
}

#[test]
fn invalid_values_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    let out = dti(
        &["run", "--config", cfg.to_str().unwrap(), "--epochs", "0", "--output-dir", run_dir.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`train`"));
    assert!(!run_dir.exists());

    fs::write(tmp.path().join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    let out = dti(&["run", "--config", tmp.path().join("bad.json").to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_csv_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let csv = tmp.path().join("data.csv");
    fs::write(&csv, "user_id,item_id,timestamp,label,item_text\n1,2,notanumber,1,a b\n").unwrap();
    let out = dti(
        &["run", "--config", cfg.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--output-dir", tmp.path().join("r").to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"));
}

#[test]
fn compare_and_ablate_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cmp = tmp.path().join("cmp");
    let out = dti(
        &["compare", "--config", cfg.to_str().unwrap(), "--output-dir", cmp.to_str().unwrap(), "--ks", "2,3"],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(cmp.join("plot_data.csv").is_file());

    let abl = tmp.path().join("abl");
    let out = dti(&["ablate", "--config", cfg.to_str().unwrap(), "--output-dir", abl.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["both_fixes", "positional_fix_only", "reset_only", "no_fixes"] {
        assert!(stdout.contains(name));
    }
    let grid = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 4 * 2 * 5);
}

#[test]
fn zero_workers_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = dti(&["--workers", "0", "compare", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flops_reports_the_reduction_ratio() {
    let out = dti(&["flops", "--n", "20", "--k", "50", "--c", "5"], &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("14.2857"));

    let out = dti(&["flops", "--json", "--m", "1000"], &[]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((value["reduction_ratio"].as_f64().unwrap() - 100.0 / 7.0).abs() < 1e-12);
}

#[test]
fn gradcheck_passes_in_every_mode() {
    for mode in ["absolute", "rope", "none"] {
        for granularity in ["per-query", "per-token"] {
            let out = dti(&["gradcheck", "--positional-mode", mode, "--granularity", granularity], &[]);
            assert!(out.status.success(), "{mode} {granularity}: {}", stderr(&out));
        }
    }
}
