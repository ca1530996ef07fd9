use std::fs;
use std::path::Path;

use domainfuse::config::RunConfig;
use domainfuse::pipeline::{run_pipeline, RunOptions};

fn quick_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig { output_dir: out.to_path_buf(), ..RunConfig::default() };
    cfg.data.synthetic.n_patients = 24;
    cfg.data.synthetic.signals_per_patient = 4;
    cfg.data.synthetic.class_weights = Some(vec![1.0, 0.5, 1.0, 1.0]);
    for m in [&mut cfg.models.oned, &mut cfg.models.twod, &mut cfg.models.transformer] {
        m.train.epochs = 3;
    }
    cfg.models.hybrid.train.epochs = 3;
    cfg.stats.bootstrap_iters = 200;
    cfg.complementarity.bins = 8;
    cfg
}

const ARTIFACTS: [&str; 14] = [
    "config.toml",
    "split.json",
    "complementarity.json",
    "complementarity.csv",
    "history.json",
    "predictions.csv",
    "confusion.json",
    "ablation.csv",
    "metrics.json",
    "diff_bootstrap.csv",
    "diff_bayes.csv",
    "fidelity.json",
    "radar.json",
    "manifest.json",
];

#[test]
fn run_emits_inventory_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_pipeline(&quick_config(&tmp.path().join("a")), &RunOptions { run_name: Some("r".into()), ..Default::default() })
        .unwrap();
    let b = run_pipeline(&quick_config(&tmp.path().join("b")), &RunOptions { run_name: Some("r".into()), ..Default::default() })
        .unwrap();
    for f in ARTIFACTS {
        assert!(a.dir.join(f).is_file(), "missing {f}");
    }
    let weights: Vec<_> = fs::read_dir(a.dir.join("weights")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(weights.iter().filter(|n| n.to_string_lossy().ends_with(".json")).count(), 5);
    assert_eq!(a.ablation.rows.len(), 5);
    assert!(a.manifest.checks.patients_disjoint);
    assert!(a.manifest.checks.synthetic_from_train_only);

    // config.toml differs only by output_dir, so compare everything else bytewise
    for (rel, hash) in &a.manifest.artifacts {
        if rel == "config.toml" {
            continue;
        }
        assert_eq!(Some(hash), b.manifest.artifacts.get(rel), "{rel} differs between runs");
    }
    assert_eq!(a.manifest.artifacts.len(), b.manifest.artifacts.len());
}

#[test]
fn snapshot_reruns_to_identical_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let first = run_pipeline(&cfg, &RunOptions { run_name: Some("one".into()), ..Default::default() }).unwrap();
    let snap = RunConfig::load(&first.dir.join("config.toml")).unwrap();
    assert_eq!(snap, cfg);
    let second = run_pipeline(&snap, &RunOptions { run_name: Some("two".into()), ..Default::default() }).unwrap();
    for f in ["ablation.csv", "diff_bootstrap.csv", "diff_bayes.csv", "complementarity.json"] {
        assert_eq!(fs::read(first.dir.join(f)).unwrap(), fs::read(second.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn skip_adasyn_leaves_train_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_pipeline(
        &quick_config(tmp.path()),
        &RunOptions { run_name: Some("plain".into()), skip_adasyn: true },
    )
    .unwrap();
    assert!(out.fidelity.is_none());
    assert!(!out.dir.join("fidelity.json").exists());
    let split: serde_json::Value = serde_json::from_slice(&fs::read(out.dir.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["n_synthetic"], 0);
}

#[test]
fn failing_stage_is_named_and_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(tmp.path());
    // a 16-wide scalogram cannot feed four 2×2 poolings
    cfg.views.scalogram.out_rows = 8;
    let err = run_pipeline(&cfg, &RunOptions { run_name: Some("bad".into()), ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("train 2D-CNN"), "{err}");
    assert!(tmp.path().join("bad/split.json").is_file());
    assert!(tmp.path().join("bad/weights").is_dir());
}
