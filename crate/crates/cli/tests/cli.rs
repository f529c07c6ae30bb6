use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_crs-debias"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "dataset": {"synthetic": {"n_users": 50, "n_items": 120, "n_attrs": 8, "attrs_per_item": 2, "interactions_per_user": 10}},
        "recommender": {"pal": {"dim": 6, "epochs": 3}},
        "csm": {"mapper": {"epochs": 10}},
        "policy": {"train": {"pretrain_episodes": 30, "rl_episodes": 32}},
        "output_dir": dir.join("runs"),
        "seed": 4
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn staged_commands_reproduce_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = ok(bin().args(["pipeline", "--config"]).arg(&config).output().unwrap());
    assert!(out.stdout.is_empty(), "machine output belongs in files");

    ok(bin().args(["prepare", "--config"]).arg(&config).output().unwrap());
    let dirs = run_dirs(&tmp.path().join("runs"));
    assert_eq!(dirs.len(), 2);
    let (piped, staged) = (&dirs[0], &dirs[1]);
    assert!(!staged.join("metrics.json").exists());
    for stage in ["train-rec", "fit-csm", "train-policy", "simulate"] {
        ok(bin().args([stage, "--run"]).arg(staged).output().unwrap());
    }
    assert_eq!(
        fs::read(piped.join("metrics.json")).unwrap(),
        fs::read(staged.join("metrics.json")).unwrap()
    );

    ok(bin().args(["report", "--format", "csv", "--run"]).arg(staged).output().unwrap());
    let csv = fs::read_to_string(staged.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("variant,per,psr,pcu,sr,at,hsr,tsr"));
}

#[test]
fn overrides_reach_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    ok(bin()
        .args(["prepare", "--set", "session.max_turns=7", "--seed", "9", "--config"])
        .arg(&config)
        .output()
        .unwrap());
    let dir = &run_dirs(&tmp.path().join("runs"))[0];
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["session"]["max_turns"], 7);
    assert_eq!(manifest["seeds"]["master"], 9);
    assert!(manifest["outputs"]["catalog.json"].as_str().unwrap().len() == 64);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());

    let bad = bin()
        .args(["pipeline", "--set", "recommender.mode=none", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("CSM requires trained model"));

    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["report", "--run"]).arg(tmp.path()).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));

    // a corrupt checkpoint is a runtime failure
    ok(bin().args(["prepare", "--config"]).arg(&config).output().unwrap());
    let dir = &run_dirs(&tmp.path().join("runs"))[0];
    fs::write(dir.join("model.bin"), b"garbage").unwrap();
    let out = bin().args(["train-policy", "--run"]).arg(dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_emits_a_five_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    ok(bin().args(["ablate", "--baseline-policy", "maxent", "--config"]).arg(&config).output().unwrap());
    let dir = &run_dirs(&tmp.path().join("runs"))[0];
    let md = fs::read_to_string(dir.join("report.md")).unwrap();
    let rows: Vec<&str> = md.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(rows, ["full", "-PAL", "-CSM", "-DPL", "baseline"]);
}
