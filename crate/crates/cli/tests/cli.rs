//! Drives the `psog` binary through a full generate → train → evaluate flow
//! on a tiny cohort.

use std::path::Path;
use std::process::Command;

fn psog(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_psog")).args(args).output().unwrap();
    assert!(out.status.success(), "psog {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let full = psog(&["config"]);
    let small = full
        .replace("subjects = 12", "subjects = 3")
        .replace("samples_per_fixation = [16, 32]", "samples_per_fixation = [2, 3]")
        .replace("seeds = [0, 1, 2, 3, 4]", "seeds = [0]")
        .replace("max_epochs = 300", "max_epochs = 3")
        .replace("max_epochs = 30", "max_epochs = 2");
    assert_ne!(small, full);
    let p = dir.join("small.toml");
    std::fs::write(&p, small).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn rejects_unknown_experiment() {
    let out = Command::new(env!("CARGO_BIN_EXE_psog")).args(["sweep", "--experiment", "nope"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn images_to_evaluation_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();

    psog(&["generate", "--config", &cfg, "--out", &s("imgs")]);
    assert!(d.join("imgs/manifest.csv").is_file());
    assert!(d.join("imgs/s000_00000.pgm").is_file());

    psog(&["simulate", "--config", &cfg, "--images", &s("imgs/manifest.csv"), "--out", &s("data")]);
    for i in 0..3 {
        assert!(d.join(format!("data/subject_{i:03}.csv")).is_file());
    }

    psog(&["train", "--config", &cfg, "--data", &s("data/subject_000.csv"), "--out", &s("fs")]);
    psog(&[
        "train", "--config", &cfg, "--data", &s("data/subject_000.csv"), "--regimen", "ft",
        "--pool", &s("data/subject_001.csv"), &s("data/subject_002.csv"), "--out", &s("ft"),
    ]);
    for m in ["fs/subject_000_FS", "ft/subject_000_FT"] {
        let report = psog(&[
            "evaluate", "--checkpoint", &s(&format!("{m}.ckpt")), "--data", &s("data/subject_000.csv"),
            "--splits", &s(&format!("{m}.splits.csv")),
        ]);
        let overall = report.lines().find(|l| l.starts_with("overall,")).unwrap();
        let acc: f64 = overall.split(',').nth(2).unwrap().parse().unwrap();
        assert!(acc.is_finite() && acc >= 0.0, "{overall}");
    }
}
