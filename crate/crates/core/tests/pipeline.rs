//! Synthesize, persist, reload, train briefly and round-trip a checkpoint.

use radmamba::model::{load_checkpoint, presets, save_checkpoint};
use radmamba::signal::{default_pack, load_dataset, make_dataset, save_dataset, SynthConfig};
use radmamba::train::{evaluate, train, TrainConfig, TrainOptions};
use radmamba::ExecPolicy;

#[test]
fn dataset_survives_a_disk_round_trip() {
    let cfg = SynthConfig::default();
    let (tr, te) = make_dataset(&default_pack(), 5, 0.8, 3, &cfg, ExecPolicy::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &tr, &te, (0.8, 0.0, Some(3), Some(cfg))).unwrap();
    let (tr2, te2) = load_dataset(dir.path(), 0.5, 99, ExecPolicy::Sequential).unwrap();
    assert_eq!(tr2.classes, tr.classes);
    assert_eq!(tr2.len(), tr.len());
    assert_eq!(te2.len(), te.len());
    for (a, b) in tr.samples.iter().zip(&tr2.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn trained_model_checkpoint_predicts_identically() {
    let (tr, te) = make_dataset(
        &default_pack(),
        8,
        0.75,
        0,
        &SynthConfig::default(),
        ExecPolicy::default(),
    )
    .unwrap();
    let mut cfg = presets::uog20();
    cfg.n_classes = tr.n_classes();
    let tcfg = TrainConfig {
        lr0: 5e-3,
        epochs: 2,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let out = train::<f32>(&cfg, &tr, &te, &tcfg, 0, TrainOptions::default()).unwrap();
    assert_eq!(out.report.epochs.len(), 2);
    assert!(out.report.epochs.iter().all(|e| e.train_loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&out.best, serde_json::json!({"seed": 0}), &path).unwrap();
    let (back, manifest) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.extra["seed"], 0);

    let a = evaluate(&out.best, &te, ExecPolicy::default()).unwrap();
    let b = evaluate(&back, &te, ExecPolicy::Sequential).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.accuracy, out.report.test_accuracy);
}
