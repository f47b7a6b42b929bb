//! The `etank` binary end to end on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

fn etank(cmd: &str, config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etank"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("etank runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "seed = 5
[collect]
count = 2
length = 0.03
[train]
epochs = 2
[eval.skills]
count = 1
length = 0.03
[heatmap.grid]
nu = 2
nv = 2
";

#[test]
fn zero_skills_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[collect]\ncount = 0\n");
    let o = etank("collect", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["requested"], 0);
    assert_eq!(m["entries"].as_array().unwrap().len(), 0);
    // Nothing to train on.
    let o = etank("train", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let outs = [dir.path().join("a"), dir.path().join("b")];
    for out in &outs {
        for cmd in ["collect", "train", "estimate", "heatmap", "eval", "safety"] {
            let o = etank(cmd, &cfg, out);
            assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        }
    }
    for f in [
        "dataset/manifest.json",
        "dataset/skill_001.csv",
        "dataset/power_001.csv",
        "model/checkpoint.json",
        "model/split.json",
        "estimate/estimate_report.json",
        "estimate/energy.csv",
        "heatmap/heatmap.csv",
        "heatmap/heatmap_report.json",
        "eval/eval_report.json",
        "safety/safety_report.json",
        "safety/trace_scheduled.csv",
    ] {
        let a = std::fs::read(outs[0].join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let history = std::fs::read_to_string(outs[0].join("model/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_mape_pct,val_mape_pct,wall_s"));
    // Header, the untrained epoch 0 and two epochs.
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [
        ("unknown.toml", "sed = 3\n"),
        ("bad.toml", "[tank]\nepsilon = -1.0\n"),
        ("substeps.toml", "[sim]\nsubsteps = 0\n"),
    ] {
        let cfg = write_config(dir.path(), name, body);
        let o = etank("collect", &cfg, &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
    let o = etank("collect", &dir.path().join("missing.toml"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unstable_gains_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "[collect]\ncount = 1\nlength = 0.03\n[gains]\nstiffness = [1e9, 1e9, 1e9, 50.0, 50.0, 50.0]\n",
    );
    let o = etank("collect", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("skill 0"));
    // The failure is recorded next to the data.
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/dataset/manifest.json")).unwrap()).unwrap();
    assert!(m["entries"][0]["failure"].is_string());
}

#[test]
fn divergent_training_exits_with_4_and_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "seed = 1\n[collect]\ncount = 2\nlength = 0.03\n[train]\nepochs = 3\nlearning_rate = 5.0\n",
    );
    let out = dir.path().join("out");
    assert_eq!(etank("collect", &cfg, &out).status.code(), Some(0));
    let o = etank("train", &cfg, &out);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(out.join("model/history.csv").exists());
    assert!(!out.join("model/checkpoint.json").exists());
}
