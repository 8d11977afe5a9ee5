use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn grasp(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grasp"))
        .args(args)
        .arg("--quiet")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn config(dir: &tempfile::TempDir, body: &str) -> PathBuf {
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const SYNTHETIC: &str = "[dataset]\nkind = \"synthetic\"\nseed = 1\n";

#[test]
fn generate_writes_dataset_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, SYNTHETIC);
    let out = dir.path().join("out");
    assert!(grasp(&["generate"], &cfg, &out).status.success());
    let text = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 1001);
    let stats = json(out.join("stats.json"));
    assert_eq!(stats["n_samples"], 1000);
    assert_eq!(stats["n_groups"], 4);
    assert_eq!(stats["n_outliers"], 0);

    let cfg = config(&dir, "[dataset]\nkind = \"synthetic\"\nseed = 1\ncontaminate = true\n");
    assert!(grasp(&["generate"], &cfg, &out).status.success());
    assert_eq!(json(out.join("stats.json"))["n_outliers"], 50);
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for body in [
        format!("{SYNTHETIC}[split]\ntrain = 0.7\nval = 0.2\ntest = 0.2\n"),
        format!("{SYNTHETIC}[inference.grid]\neps = []\nmin_samples = [10]\n"),
        format!("{SYNTHETIC}[gdro]\nepochs = 3\n"),
        "[dataset]\nkind = \"csv\"\npath = \"missing.csv\"\n".to_string(),
    ] {
        let cfg = config(&dir, &body);
        let o = grasp(&["generate"], &cfg, &out);
        assert_eq!(o.status.code(), Some(1), "{body}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    assert!(!out.exists());
}

#[test]
fn stage_failure_exits_with_two_and_leaves_marker() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "x0,label\n1,0\nNaN,1\n").unwrap();
    let cfg = config(&dir, "[dataset]\nkind = \"csv\"\npath = \"bad.csv\"\n");
    let out = dir.path().join("out");
    let o = grasp(&["generate"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    let marker = std::fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(marker.starts_with("stage: generate\n"), "{marker}");
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, SYNTHETIC);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = grasp(&["generate"], &cfg, &blocker.join("out"));
    assert!(!o.status.success());
}

#[test]
fn sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("default");
    assert!(grasp(&["sweep"], &config(&dir, SYNTHETIC), &out).status.success());
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 61);
    assert!(text.lines().next().unwrap().contains("ari"));

    let body = format!("{SYNTHETIC}[inference.grid]\neps = [0.3]\nmin_samples = [20]\n");
    let out = dir.path().join("single");
    assert!(grasp(&["sweep"], &config(&dir, &body), &out).status.success());
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);

    // A CSV without a group column.
    let gen = dir.path().join("gen");
    assert!(grasp(&["generate"], &config(&dir, SYNTHETIC), &gen).status.success());
    let data = std::fs::read_to_string(gen.join("dataset.csv")).unwrap();
    let stripped: String = data
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{},{},{}\n", f[0], f[1], f[2])
        })
        .collect();
    std::fs::write(dir.path().join("plain.csv"), stripped).unwrap();
    let cfg = config(&dir, "[dataset]\nkind = \"csv\"\npath = \"plain.csv\"\n");
    let out = dir.path().join("plain");
    let o = Command::new(env!("CARGO_BIN_EXE_grasp"))
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("omits the ARI column"));
    let header = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(!header.lines().next().unwrap().contains("ari"));
}

#[test]
fn seed_flag_reaches_the_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, SYNTHETIC);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_grasp"))
        .args(["generate", "--quiet", "--seed", "42", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let seeds = &json(out.join("stats.json"))["stamp"]["seeds"];
    for key in ["dataset", "split", "erm", "gdro"] {
        assert_eq!(seeds[key], 42, "{key}");
    }
}
