use cxrtl_core::augment::{prepare_eval_set, AugmentParams, SourceSet, TransformKind, TransformSpec};
use cxrtl_core::backbone::{BackboneKind, Strategy, StrategyConfig};
use cxrtl_core::nn::tiny::TinyCnn;
use cxrtl_core::optim::{Optim, OptimizerKind};
use cxrtl_core::train::{
    augmentation_ablation, build_model, fit, sweep, train_epoch, FitOptions, RunHistory, TrainConfig,
};
use cxrtl_core::{Error, GrayImage, Label, Network, NormStats, PreparedSample, SeedBank};
use rand::Rng as _;

const STATS: NormStats = NormStats { mean: 0.5, std: 0.25 };

fn synthetic(n: usize, size: usize, seed: u64) -> Vec<(GrayImage, Label)> {
    let mut rng = SeedBank::new(seed).rng("synthetic");
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Norm } else { Label::Pneumonia };
            let level = if label == Label::Norm { 0.3 } else { 0.7 };
            let img = GrayImage::from_fn(size, size, |_, _| level + rng.random_range(-0.1f32..0.1));
            (img, label)
        })
        .collect()
}

fn prepared(n: usize, size: usize, seed: u64) -> Vec<PreparedSample> {
    let params = AugmentParams::with_input_size(size);
    prepare_eval_set(&SourceSet::from_images(synthetic(n, size, seed)), &params, &STATS).unwrap()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn epoch_visits_every_sample_once_with_partial_batch() {
    let samples = prepared(31, 16, 1);
    let model = TinyCnn::new(&SeedBank::new(1), candle_core::DType::F32).unwrap();
    let cfg = TrainConfig {
        batch_size: 30,
        ..TrainConfig::default()
    };
    let mut optim = Optim::new(cfg.optimizer, model.store().trainable_vars(), cfg.base_lr).unwrap();
    let mut rng = SeedBank::new(2).rng("epoch");
    let out = train_epoch(&model, &mut optim, &samples, &cfg, 0, &mut rng).unwrap();
    assert_eq!(out.steps, 2);
    let mut visited = out.visit_order.clone();
    visited.sort_unstable();
    assert_eq!(visited, (0..31).collect::<Vec<_>>());
    assert_ne!(out.visit_order, (0..31).collect::<Vec<_>>());
}

#[test]
fn empty_training_set_is_rejected() {
    let model = TinyCnn::new(&SeedBank::new(1), candle_core::DType::F32).unwrap();
    let cfg = TrainConfig::default();
    let mut optim = Optim::new(cfg.optimizer, model.store().trainable_vars(), cfg.base_lr).unwrap();
    let mut rng = SeedBank::new(2).rng("epoch");
    assert!(train_epoch(&model, &mut optim, &[], &cfg, 0, &mut rng).is_err());
}

#[test]
fn exploding_learning_rate_aborts_with_diagnostics() {
    let mut train = prepared(16, 16, 4);
    let val = prepared(4, 16, 5);
    let model = TinyCnn::new(&SeedBank::new(1), candle_core::DType::F32).unwrap();
    let cfg = TrainConfig {
        base_lr: 1e38,
        optimizer: OptimizerKind::SgdMomentum,
        ..tiny_cfg(3)
    };
    match fit(&model, &mut train, &val, &cfg, FitOptions::default()) {
        Err(Error::NonFiniteLoss { lr, .. }) => assert_eq!(lr, 1e38),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("training with lr 1e38 stayed finite"),
    }
}

#[test]
fn zero_epochs_yield_empty_history_and_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = prepared(8, 16, 6);
    let model = TinyCnn::new(&SeedBank::new(1), candle_core::DType::F32).unwrap();
    let opts = FitOptions {
        run_dir: Some(dir.path().to_path_buf()),
        ..FitOptions::default()
    };
    let out = fit(&model, &mut train, &[], &tiny_cfg(0), opts).unwrap();
    assert!(out.history.records.is_empty());
    assert!(out.history.best.is_none());
    assert!(!dir.path().join("checkpoints").exists());
}

#[test]
fn fit_is_deterministic_and_persists_history() {
    let run = |dir: &std::path::Path| {
        let mut train = prepared(24, 16, 7);
        let val = prepared(8, 16, 8);
        let model = TinyCnn::new(&SeedBank::new(9), candle_core::DType::F32).unwrap();
        let opts = FitOptions {
            label: "tiny".into(),
            run_dir: Some(dir.to_path_buf()),
            restore_best: true,
            ..FitOptions::default()
        };
        fit(&model, &mut train, &val, &tiny_cfg(3), opts).unwrap().history
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = run(a.path());
    let hb = run(b.path());
    assert_eq!(ha.records, hb.records);
    assert_eq!(ha.records.len(), 3);
    for (e, r) in ha.records.iter().enumerate() {
        assert_eq!(r.epoch, e);
        assert_eq!(r.steps, 3);
    }

    let best = ha.best.as_ref().unwrap();
    let max = ha.records.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(best.val_accuracy, max);
    assert!(best.checkpoint.as_ref().unwrap().exists());
    assert!(a.path().join("checkpoints/last.safetensors").exists());

    let reread = RunHistory::read_jsonl(&a.path().join("history.jsonl"), "tiny", None).unwrap();
    assert_eq!(reread.records, ha.records);
}

#[test]
fn sweep_runs_one_fit_per_width() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = prepared(12, 32, 10);
    let val = prepared(4, 32, 11);
    let base = StrategyConfig::new(BackboneKind::Resnet18, Strategy::FrozenBackbone, 10, false);
    let cfg = tiny_cfg(1);
    let mut seen = Vec::new();
    let result = sweep(
        &base,
        &[10, 100],
        None,
        &mut train,
        &val,
        &cfg,
        Some(dir.path()),
        &mut |cell, model| {
            seen.push((cell.n_neurons, model.describe()));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(result.cells.len(), 2);
    assert_eq!(seen.len(), 2);
    assert!(dir.path().join("n10/history.jsonl").exists());
    assert!(dir.path().join("n100/history.jsonl").exists());
    assert!(result.best < 2);

    let full = StrategyConfig::new(BackboneKind::Resnet18, Strategy::Full, 10, false);
    assert!(sweep(&full, &[10], None, &mut train, &val, &cfg, None, &mut |_, _| Ok(())).is_err());
    assert!(sweep(&base, &[], None, &mut train, &val, &cfg, None, &mut |_, _| Ok(())).is_err());
}

#[test]
fn sweep_cell_seed_depends_only_on_width() {
    let base = StrategyConfig::new(BackboneKind::Resnet18, Strategy::OneChannel, 10, false);
    let a = build_model(&base, None, cxrtl_core::train::sweep_cell_seed(1, 10)).unwrap();
    let b = build_model(&base, None, cxrtl_core::train::sweep_cell_seed(1, 10)).unwrap();
    assert_eq!(a.head_checksum().unwrap(), b.head_checksum().unwrap());
    assert_ne!(
        cxrtl_core::train::sweep_cell_seed(1, 10),
        cxrtl_core::train::sweep_cell_seed(1, 100)
    );
}

#[test]
fn ablation_is_deterministic_and_ranked() {
    let sources = SourceSet::from_images(synthetic(16, 16, 12));
    let val = prepared(6, 16, 13);
    let test = prepared(6, 16, 14);
    let params = AugmentParams::with_input_size(16);
    let specs: Vec<TransformSpec> = [TransformKind::Hflip, TransformKind::Rotate]
        .iter()
        .map(|&kind| TransformSpec { kind, params })
        .collect();
    let a = augmentation_ablation(&sources, &val, &test, &STATS, &specs, &tiny_cfg(2)).unwrap();
    let b = augmentation_ablation(&sources, &val, &test, &STATS, &specs, &tiny_cfg(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert!(a[0].test_accuracy >= a[1].test_accuracy);

    let single = augmentation_ablation(&sources, &val, &test, &STATS, &specs[..1], &tiny_cfg(1)).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].transform, "hflip");
}
