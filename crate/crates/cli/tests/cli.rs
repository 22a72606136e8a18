use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lain_core::experiments::{read_manifest, ExperimentConfig, PLOT_FILES};

fn lain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The tiny config with a handful of episodes, written into `dir`.
fn quick_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::load(&configs().join("tiny.toml")).unwrap();
    cfg.train.episodes = 4;
    cfg.eval.episodes = 2;
    cfg.out_dir = dir.join("out");
    let path = dir.join("quick.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn template_round_trips_to_defaults() {
    let out = lain(&["template"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn shipped_configs_parse() {
    for name in ["template.toml", "tiny.toml", "desk.toml", "full.toml"] {
        let cfg = ExperimentConfig::load(&configs().join(name)).unwrap();
        lain_core::env::Env::new(cfg.scenario.clone(), 0).unwrap();
    }
}

#[test]
fn run_resumes_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path());
    let config = config.to_str().unwrap();
    let out = lain(&["run", "--config", config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    assert_eq!(read_manifest(&out_dir).unwrap().len(), 4);
    for f in PLOT_FILES {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let before = std::fs::read(out_dir.join("evaluation.csv")).unwrap();

    let again = lain(&["run", "--config", config]);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).lines().all(|l| !l.contains(" seed ")));
    assert_eq!(read_manifest(&out_dir).unwrap().len(), 4);
    assert_eq!(std::fs::read(out_dir.join("evaluation.csv")).unwrap(), before);

    let export = dir.path().join("export");
    let out = lain(&["export", "--config", config, "--out", export.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(export.join("evaluation.csv")).unwrap(), before);
    assert_eq!(
        std::fs::read(export.join(PLOT_FILES[2])).unwrap(),
        std::fs::read(out_dir.join(PLOT_FILES[2])).unwrap()
    );
}

#[test]
fn seed_override_adds_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path());
    let out = lain(&["run", "--config", config.to_str().unwrap(), "--seed", "3", "--seed", "4"]);
    assert!(out.status.success());
    let seeds: Vec<u64> = read_manifest(&dir.path().join("out")).unwrap().iter().map(|r| r.seed).collect();
    assert_eq!(seeds.iter().filter(|&&s| s == 3).count(), 4);
    assert_eq!(seeds.len(), 8);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seeds = []\n").unwrap();
    let out = lain(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
    let out = lain(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}

#[test]
fn diverged_run_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&configs().join("tiny.toml")).unwrap();
    cfg.train.episodes = 30;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = 1e12;
    cfg.algorithms.truncate(1);
    cfg.out_dir = dir.path().join("out");
    let path = dir.path().join("diverge.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let out = lain(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAILED"));
    let manifest = read_manifest(&cfg.out_dir).unwrap();
    assert_eq!(manifest.len(), 1);
    assert!(!manifest[0].completed);
}

#[test]
fn chain_test_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path());
    let out = lain(&["chain-test", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("no-faults"));
    assert!(stdout.contains("pbft-n4-mute1"));
    assert!(dir.path().join("chain_report.csv").exists());
}

#[test]
fn oracle_eval_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = lain(&["oracle-eval", "--episodes", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("oracle_eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}
