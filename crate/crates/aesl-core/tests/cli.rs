//! End-to-end checks of the `aesl` binary: subcommands, exit codes, and
//! deterministic outputs.

use std::path::Path;
use std::process::{Command, Output};

fn aesl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const GEN_CONFIG: &str = r#"{
    "name": "cli-test", "seed": 11, "n_train": 48, "n_test": 24,
    "num_labels": 6, "feature_dim": 7, "affective_dim": 3,
    "label_cardinality": 2.5
}"#;

fn run_config(out_dir: &Path, seeds: &str) -> String {
    format!(
        r#"{{
        "dataset": {{ "generate": {{
            "name": "cli-test", "seed": 11, "n_train": 48, "n_test": 24,
            "num_labels": 6, "feature_dim": 7, "affective_dim": 3,
            "label_cardinality": 2.5 }} }},
        "protocol": {{ "base": 0, "increment": 3 }},
        "methods": ["aesl", "finetune"],
        "seeds": {seeds},
        "hyper": {{
            "epochs": 2, "batch_size": 16,
            "dims": {{ "node_dim": 4, "gin_hidden": 6, "embed_dim": 5,
                       "latent_dim": 6, "semantic_dim": 5 }}
        }},
        "out_dir": {:?},
        "jobs": 1
    }}"#,
        out_dir.to_str().unwrap()
    )
}

#[test]
fn generate_writes_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("gen.json");
    write(&config, GEN_CONFIG);
    let out = aesl(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "manifest.json",
        "features_train.csv",
        "labels_test.csv",
        "affective_train.csv",
        "oracle_graph.json",
        "prototypes.csv",
    ] {
        assert!(dir.path().join("data").join(file).exists(), "{file}");
    }
}

#[test]
fn run_executes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    write(&config_path, &run_config(&dir.path().join("out"), "[0]"));

    let out = aesl(&["run", "--config", config_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();

    let out = aesl(&["run", "--config", config_path.to_str().unwrap()]);
    assert!(out.status.success());
    let second = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(first, second, "identical config must reproduce results.csv");
}

#[test]
fn missing_protocol_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.json");
    write(
        &config_path,
        r#"{ "dataset": { "manifest": "does-not-matter.json" } }"#,
    );
    let out = aesl(&["run", "--config", config_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("protocol"), "{stderr}");
}

#[test]
fn missing_config_file_exits_2() {
    let out = aesl(&["run", "--config", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flag_overrides_change_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    write(&config_path, &run_config(&dir.path().join("ignored"), "[0]"));
    let out_dir = dir.path().join("flagged");
    let out = aesl(&[
        "run",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "finetune",
        "--seed",
        "3,4",
        "--jobs",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(results.contains("finetune,3,"));
    assert!(results.contains("finetune,4,"));
    assert!(!results.contains("aesl,"));
}

#[test]
fn compare_ranks_methods_across_two_streams() {
    let dir = tempfile::tempdir().unwrap();
    for (tag, increment) in [("a", 3), ("b", 2)] {
        let config_path = dir.path().join(format!("run-{tag}.json"));
        let body = run_config(&dir.path().join(tag), "[0, 1]")
            .replace("\"increment\": 3", &format!("\"increment\": {increment}"));
        write(&config_path, &body);
        let out = aesl(&["run", "--config", config_path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = aesl(&[
        "compare",
        dir.path().join("a").to_str().unwrap(),
        dir.path().join("b").to_str().unwrap(),
        "--alpha",
        "0.05",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("chi2_F"), "{stdout}");
    assert!(stdout.contains("critical difference"), "{stdout}");

    // One directory is not enough for a rank test.
    let out = aesl(&["compare", dir.path().join("a").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn inspect_graph_reports_pcc() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    write(&config_path, &run_config(&dir.path().join("out"), "[0]"));
    let out = aesl(&["run", "--config", config_path.to_str().unwrap()]);
    assert!(out.status.success());

    let out = aesl(&[
        "inspect-graph",
        "--graph",
        dir.path().join("out/aesl_s0/erg_2.json").to_str().unwrap(),
        "--oracle",
        dir.path()
            .join("out/dataset/oracle_graph.json")
            .to_str()
            .unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("labels: 6"), "{stdout}");
    assert!(stdout.contains("PCC vs oracle"), "{stdout}");
}
