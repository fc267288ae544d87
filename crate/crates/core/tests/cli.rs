mod common;

use std::path::Path;
use std::process::Command;

fn grokgeom(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_grokgeom"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_is_idempotent_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY_TOML).unwrap();
    let out = tmp.path().join("out");
    let first = grokgeom(&out, &["train", "--config", cfg.to_str().unwrap()]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let dir = stdout(&first).lines().next().unwrap().to_string();
    let dir = Path::new(&dir);
    for f in [
        "metrics.csv",
        "defect.csv",
        "events.json",
        "config.json",
        "manifest.json",
        "pca_summary.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert!(dir.join("snapshots").is_dir());
    let metrics = std::fs::read(dir.join("metrics.csv")).unwrap();

    let second = grokgeom(&out, &["train", "--config", cfg.to_str().unwrap()]);
    assert!(second.status.success());
    assert_eq!(stdout(&second).lines().next().unwrap(), dir.to_str().unwrap());
    assert_eq!(std::fs::read(dir.join("metrics.csv")).unwrap(), metrics);

    let seed = grokgeom(&out, &["train", "--config", cfg.to_str().unwrap(), "--seed", "4"]);
    assert!(seed.status.success());
    assert_ne!(stdout(&seed).lines().next().unwrap(), dir.to_str().unwrap());

    let pca = grokgeom(&out, &["pca", "--run", dir.to_str().unwrap(), "--null-trials", "100"]);
    assert!(pca.status.success(), "{}", String::from_utf8_lossy(&pca.stderr));
    assert_eq!(stdout(&pca).lines().count(), 5);

    let probe = grokgeom(&out, &["probe", "--run", dir.to_str().unwrap()]);
    assert!(probe.status.success(), "{}", String::from_utf8_lossy(&probe.stderr));
    let rec: serde_json::Value = serde_json::from_str(&stdout(&probe)).unwrap();
    assert_eq!(rec["step"], 40);
    assert!(rec["rho"].as_f64().unwrap() <= 1.0);

    let analyze = grokgeom(&out, &["analyze"]);
    assert!(analyze.status.success(), "{}", String::from_utf8_lossy(&analyze.stderr));
    let a: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("analysis").join("analysis.json")).unwrap()).unwrap();
    assert_eq!(a["runs"].as_array().unwrap().len(), 2);
    assert!(out.join("analysis").join("phase_diagram.csv").is_file());
    assert!(out.join("analysis").join("scaling.csv").is_file());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_flag = grokgeom(tmp.path(), &["train", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    let bad_op = grokgeom(tmp.path(), &["train", "--op", "div"]);
    assert_eq!(bad_op.status.code(), Some(1));
    let slow = grokgeom(tmp.path(), &["train", "--regime", "slow"]);
    assert_eq!(slow.status.code(), Some(1));
    let low_lr = grokgeom(tmp.path(), &["sweep", "--lrs", "1e-4"]);
    assert_eq!(low_lr.status.code(), Some(1));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let bad_cfg = grokgeom(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(bad_cfg.status.code(), Some(1));
}

#[test]
fn intervene_without_baseline_fails_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY_TOML).unwrap();
    let o = grokgeom(
        tmp.path(),
        &[
            "intervene",
            "--config",
            cfg.to_str().unwrap(),
            "--mode",
            "suppress_pca",
            "--seeds",
            "1",
            "--values",
            "1.0",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("baseline"));
}
