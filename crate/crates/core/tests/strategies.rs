use candle_core::{DType, Device, Tensor, Var};
use cxrtl_core::backbone::{
    adapt_first_conv, apply_strategy, build_head, load_backbone, replicate_channel_tensor, AdaptedModel, BackboneKind,
    FirstConvInit, LoadOptions, MlpHead, Strategy, StrategyConfig,
};
use cxrtl_core::nn::layers::{cross_entropy, Conv2d};
use cxrtl_core::nn::params::{ParamStore, Role};
use cxrtl_core::optim::{Optim, OptimizerKind};
use cxrtl_core::{Mode, Network, SeedBank};
use rand::Rng as _;

fn model(kind: BackboneKind, strategy: Strategy, n: usize) -> AdaptedModel {
    let cfg = StrategyConfig::new(kind, strategy, n, false);
    apply_strategy(load_backbone(kind, &LoadOptions::scratch(7)).unwrap(), &cfg).unwrap()
}

fn random_input(b: usize, c: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = SeedBank::new(seed).rng("input");
    let data: Vec<f32> = (0..b * c * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (b, c, size, size), &Device::Cpu).unwrap()
}

#[test]
fn trainable_counts_per_strategy() {
    let cases = [
        (BackboneKind::Resnet18, Strategy::FrozenBackbone, 100, 51_502),
        (BackboneKind::Resnet18, Strategy::OneChannel, 100, 54_638),
        (BackboneKind::Resnet18, Strategy::Full, 100, 11_177_538),
        (BackboneKind::Densenet121, Strategy::FrozenBackbone, 10, 10_272),
        (BackboneKind::Densenet121, Strategy::Full, 10, 6_955_906),
    ];
    for (kind, strategy, n, want) in cases {
        let m = model(kind, strategy, n);
        assert_eq!(m.census().trainable, want, "{kind} {strategy}");
    }
    // strategy I on ResNet-18: everything but the new head is frozen
    let m = model(BackboneKind::Resnet18, Strategy::FrozenBackbone, 100);
    assert_eq!(m.census().frozen, 11_689_512 - 513_000);
}

#[test]
fn strategy_channel_counts() {
    assert_eq!(
        model(BackboneKind::Resnet18, Strategy::FrozenBackbone, 10).input_channels(),
        3
    );
    assert_eq!(
        model(BackboneKind::Resnet18, Strategy::OneChannel, 10).input_channels(),
        1
    );
    assert_eq!(
        model(BackboneKind::Densenet121, Strategy::OneChannel, 10).input_channels(),
        1
    );
    assert_eq!(model(BackboneKind::Densenet121, Strategy::Full, 10).input_channels(), 3);
}

#[test]
fn misuse_is_rejected() {
    let fresh = || load_backbone(BackboneKind::Resnet18, &LoadOptions::scratch(1)).unwrap();
    let cfg_i = StrategyConfig::new(BackboneKind::Resnet18, Strategy::FrozenBackbone, 10, false);
    assert!(adapt_first_conv(fresh(), &cfg_i).is_err());

    let applied = apply_strategy(fresh(), &cfg_i).unwrap();
    assert!(apply_strategy(applied, &cfg_i).is_err());

    let wrong_backbone = StrategyConfig::new(BackboneKind::Densenet121, Strategy::FrozenBackbone, 10, false);
    assert!(apply_strategy(fresh(), &wrong_backbone).is_err());

    let mut bad_channels = StrategyConfig::new(BackboneKind::Resnet18, Strategy::OneChannel, 10, false);
    bad_channels.input_channels = Some(3);
    assert!(apply_strategy(fresh(), &bad_channels).is_err());

    let pretrained_mismatch = StrategyConfig::new(BackboneKind::Resnet18, Strategy::Full, 10, true);
    assert!(apply_strategy(fresh(), &pretrained_mismatch).is_err());
}

#[test]
fn channel_sum_kernel_reproduces_replicated_input() {
    let original = load_backbone(BackboneKind::Resnet18, &LoadOptions::scratch(3)).unwrap();
    let conv3 = Conv2d::load(original.store(), "conv1", 2, 3).unwrap();
    let cfg = StrategyConfig::new(BackboneKind::Resnet18, Strategy::OneChannel, 10, false);
    let adapted = adapt_first_conv(original.clone(), &cfg).unwrap();
    let conv1 = Conv2d::load(adapted.store(), "conv1", 2, 3).unwrap();
    assert_eq!(conv1.in_channels(), 1);

    let gray = random_input(100, 1, 24, 11);
    let a = conv1.forward(&gray).unwrap();
    let b = conv3.forward(&replicate_channel_tensor(&gray).unwrap()).unwrap();
    let err = (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert!(err < 1e-5, "max abs error {err}");
}

#[test]
fn random_first_conv_differs_from_channel_sum() {
    let original = load_backbone(BackboneKind::Densenet121, &LoadOptions::scratch(3)).unwrap();
    let mut cfg = StrategyConfig::new(BackboneKind::Densenet121, Strategy::OneChannel, 10, false);
    cfg.first_conv_init = FirstConvInit::Random;
    let adapted = adapt_first_conv(original.clone(), &cfg).unwrap();
    let name = BackboneKind::Densenet121.first_conv();
    let summed = original.store().tensor(name).unwrap().sum_keepdim(1).unwrap();
    let random = adapted.store().tensor(name).unwrap();
    assert_eq!(random.dims(), summed.dims());
    let diff = (random - summed)
        .unwrap()
        .abs()
        .unwrap()
        .sum_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert!(diff > 0.0);
}

fn take_steps(m: &AdaptedModel, steps: usize) {
    let mut optim = Optim::new(OptimizerKind::Adam, m.store().trainable_vars(), 1e-2).unwrap();
    let mut rng = SeedBank::new(5).rng("dropout");
    for s in 0..steps {
        let x = random_input(4, m.input_channels(), 64, 100 + s as u64);
        let y = Tensor::new(&[0u32, 1, 0, 1], &Device::Cpu).unwrap();
        let logits = m.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
        let loss = cross_entropy(&logits, &y).unwrap();
        optim.step(&loss.backward().unwrap()).unwrap();
    }
}

#[test]
fn full_training_updates_normalization_statistics() {
    let m = model(BackboneKind::Resnet18, Strategy::Full, 10);
    let before = m.backbone_checksum().unwrap();
    let mean_before = m.store().tensor("bn1.running_mean").unwrap().to_vec1::<f32>().unwrap();
    take_steps(&m, 1);
    assert_ne!(m.backbone_checksum().unwrap(), before);
    let mean_after = m.store().tensor("bn1.running_mean").unwrap().to_vec1::<f32>().unwrap();
    assert_ne!(mean_before, mean_after);
}

#[test]
fn frozen_strategy_keeps_head_moving() {
    let m = model(BackboneKind::Densenet121, Strategy::FrozenBackbone, 10);
    let (trunk, head) = (m.backbone_checksum().unwrap(), m.head_checksum().unwrap());
    take_steps(&m, 2);
    assert_eq!(m.backbone_checksum().unwrap(), trunk);
    assert_ne!(m.head_checksum().unwrap(), head);
}

fn set_element(var: &Var, index: usize, value: f64) {
    let t = var.as_tensor();
    let mut v = t
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    v[index] = value;
    let fresh = Tensor::from_vec(v, t.shape(), &Device::Cpu)
        .unwrap()
        .to_dtype(t.dtype())
        .unwrap();
    var.set(&fresh).unwrap();
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

/// Largest per-tensor relative error `|a - n| / (|a| + |n|)` (L2 norms).
fn head_gradient_error(dtype: DType, h: f64) -> f64 {
    let mut rng = SeedBank::new(21).rng("head");
    let mut store = ParamStore::new(dtype).unwrap();
    build_head(16, 8, &mut rng, dtype)
        .unwrap()
        .install(&mut store, "fc")
        .unwrap();
    let head = MlpHead::load(&store, "fc").unwrap();
    let x = random_input(4, 1, 4, 22)
        .reshape((4, 16))
        .unwrap()
        .to_dtype(dtype)
        .unwrap();
    let y = Tensor::new(&[0u32, 1, 1, 0], &Device::Cpu).unwrap();
    let loss = |head: &MlpHead| {
        let l = cross_entropy(&head.forward(&x, &mut Mode::Eval).unwrap(), &y).unwrap();
        l.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    };
    let l = cross_entropy(&head.forward(&x, &mut Mode::Eval).unwrap(), &y).unwrap();
    let grads = l.backward().unwrap();

    let mut worst: f64 = 0.0;
    for name in store.trainable_names() {
        let var = store.var(&name).unwrap();
        let analytic = flat(grads.get(var).unwrap());
        let base = flat(var.as_tensor());
        let mut numeric = Vec::with_capacity(base.len());
        for (i, &b) in base.iter().enumerate() {
            set_element(var, i, b + h);
            let up = loss(&head);
            set_element(var, i, b - h);
            let down = loss(&head);
            set_element(var, i, b);
            numeric.push((up - down) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn head_gradients_match_finite_differences() {
    let e32 = head_gradient_error(DType::F32, 1e-2);
    assert!(e32 < 1e-2, "f32 relative error {e32}");
    let e64 = head_gradient_error(DType::F64, 1e-5);
    assert!(e64 < 1e-4, "f64 relative error {e64}");
}

#[test]
fn zeroed_output_layer_gives_ln2_loss() {
    let m = model(BackboneKind::Resnet18, Strategy::FrozenBackbone, 10);
    for name in ["fc.3.weight", "fc.3.bias"] {
        let var = m.store().var(name).unwrap();
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let x = random_input(6, 3, 64, 4);
    let y = Tensor::new(&[0u32, 1, 1, 0, 1, 0], &Device::Cpu).unwrap();
    let mut rng = SeedBank::new(0).rng("dropout");
    let logits = m.forward(&x, &mut Mode::Train(&mut rng)).unwrap();
    let loss = cross_entropy(&logits, &y).unwrap().to_scalar::<f32>().unwrap() as f64;
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "loss {loss}");
}

#[test]
fn buffers_are_never_trainable() {
    let m = model(BackboneKind::Resnet18, Strategy::Full, 10);
    assert!(!m.store().is_trainable("bn1.running_var").unwrap());
    assert!(m.store().trainable_names().iter().all(|n| !n.contains("running_")));
    let _ = Role::Buffer;
}
