use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clbench")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, method: &str) -> String {
    let path = dir.join(format!("{method}.yaml"));
    fs::write(
        &path,
        format!(
            "method: {method}\ntask_num: 2\nepochs: 2\nbuffer: {{capacity: 20}}\n\
             backbone: {{hidden: [16, 16]}}\n\
             synthetic: {{num_classes: 4, input_shape: [8], train_per_class: 30, test_per_class: 10}}\n\
             output_dir: {}\n",
            dir.join(method).display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "er");
    let out = clbench(&["run", "--config", &cfg, "--set", "seed=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("last_acc="));
    for f in ["record.json", "matrix.csv", "model.ckpt", "census.json"] {
        assert!(dir.path().join("er").join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(dir.path().join("er/config.resolved.yaml")).unwrap();
    assert!(resolved.contains("seed: 3"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(clbench(&["run", "--config", "/no/such/file.yaml"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "er");
    assert_eq!(clbench(&["run", "--config", &cfg, "--set", "epochs=0"]).status.code(), Some(2));
    let stub = write_config(dir.path(), "dualprompt");
    let out = clbench(&["run", "--config", &stub]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dualprompt"));
    assert!(!dir.path().join("dualprompt").exists());
}

#[test]
fn infeasible_sweep_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "er");
    let out = clbench(&["sweep", "--method", "er", "--targets", "0.000001", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compose_prints_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "finetune");
    let out = clbench(&["compose", "--config", &cfg]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tasks"].as_array().unwrap().len(), 2);
}

#[test]
fn suite_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "finetune");
    write_config(dir.path(), "er");
    let pattern = dir.path().join("*.yaml").display().to_string();
    let out = clbench(&["suite", "--configs", &pattern, "--seeds", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("finetune") && table.contains("er"));
}
