use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tetraloss::synth::UniverseConfig;
use tetraloss::trainer::TrainConfig;
use tetraloss_cli::RunConfig;

fn toy_config() -> RunConfig {
    RunConfig {
        universe: UniverseConfig::toy(),
        train: TrainConfig { epochs: 6, batch_size: 32, patience_epochs: 6, ..Default::default() },
        ..Default::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

fn tetraloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tetraloss")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &toy_config());
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    let dmad = tmp.path().join("dmad");
    let eval = tmp.path().join("eval");
    let (d, m, x, e) = (data.to_str().unwrap(), model.to_str().unwrap(), dmad.to_str().unwrap(), eval.to_str().unwrap());

    let o = tetraloss(&["generate", "--config", &cfg, "--out", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["universe.emb", "train.emb", "val.emb", "test.emb", "ground_truth.json", "manifest.json", "resolved_config.toml"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }

    let o = tetraloss(&["train", "--config", &cfg, "--data", d, "--out", m]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(model.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,decayed,stopped\n"));
    assert_eq!(history.lines().count(), 7);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(model.join("history_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["scenario"], "tetra");

    let o = tetraloss(&["train-dmad", "--config", &cfg, "--data", d, "--out", x]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ckpt = model.join("adapter.tetr");
    let det = dmad.join("dmad.bin");
    let o = tetraloss(&[
        "eval", "--config", &cfg, "--data", d, "--out", e,
        "--checkpoint", ckpt.to_str().unwrap(), "--dmad", det.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "scenario,fmr_target,threshold,fmr,fnmr,iapar,riapar");
    assert_eq!(report.lines().count(), 1 + 4 * 3);
    for name in ["original", "original_mad", "tetra", "tetra_mad"] {
        assert!(eval.join(format!("det_{name}.csv")).is_file(), "missing det_{name}.csv");
        assert!(eval.join(format!("scores_{name}.csv")).is_file(), "missing scores_{name}.csv");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("Tetra & MAD"));

    let o = tetraloss(&["export-diffs", "--config", &cfg, "--data", d, "--out", e, "--checkpoint", ckpt.to_str().unwrap(), "--n", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let diffs = fs::read_to_string(eval.join("difference_vectors.csv")).unwrap();
    assert_eq!(diffs.lines().count(), 1 + 15);
    assert_eq!(diffs.lines().next().unwrap().split(',').count(), 3 + 8);
}

#[test]
fn eval_without_checkpoint_reports_baseline_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &toy_config());
    let data = tmp.path().join("data");
    let eval = tmp.path().join("eval");
    assert!(tetraloss(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    let o = tetraloss(&["eval", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", eval.to_str().unwrap(), "--fmr-targets", "0.01,0.001"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    let rows: Vec<_> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("Original,")));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &toy_config());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(tetraloss(&["generate", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(tetraloss(&["generate", "--config", &cfg, "--seed", "9", "--out", b.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(a.join("universe.emb")).unwrap(), fs::read(b.join("universe.emb")).unwrap());
    let resolved = RunConfig::load(&b.join("resolved_config.toml")).unwrap();
    assert_eq!((resolved.universe.seed, resolved.train.seed), (9, 9));
}

#[test]
fn missing_data_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &toy_config());
    let missing = tmp.path().join("nope");
    let o = tetraloss(&["train", "--config", &cfg, "--data", missing.to_str().unwrap(), "--out", tmp.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tetraloss generate"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = tmp.path().join("o");
    let o = tetraloss(&["generate", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists(), "nothing is written on a config error");

    let cfg = write_config(tmp.path(), &toy_config());
    let o = tetraloss(&["generate", "--config", &cfg, "--scenario", "quintuplet", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = tetraloss(&["generate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    assert_eq!(tetraloss(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn infeasible_protocol_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.protocol.val_tools = vec!["A".into()];
    let cfg = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    let o = tetraloss(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}
