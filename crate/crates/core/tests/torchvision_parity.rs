//! Architecture parity against torchvision.
//!
//! Needs fixtures from
//! `scripts/export_torchvision_weights.py --arch <arch> --out <dir> --random --reference`
//! and `CXRTL_PARITY_DIR=<dir>`; skipped otherwise.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use cxrtl_core::backbone::{load_backbone, BackboneKind, LoadOptions};
use cxrtl_core::{Mode, Network};

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f32>()
        .unwrap()
}

fn check(kind: BackboneKind) {
    let Some(dir) = std::env::var_os("CXRTL_PARITY_DIR").map(PathBuf::from) else {
        eprintln!("CXRTL_PARITY_DIR unset; skipping {kind} parity");
        return;
    };
    let weights = dir.join(kind.weight_file_name());
    let reference =
        candle_core::safetensors::load(dir.join(format!("{}.reference.safetensors", kind.name())), &Device::Cpu)
            .unwrap();
    let model = load_backbone(kind, &LoadOptions::pretrained(Some(weights), 0)).unwrap();
    let x = &reference["input"];

    let features = model.features(x).unwrap();
    let scale = reference["features"]
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    let err = max_abs_diff(&features, &reference["features"]);
    assert!(
        err <= 1e-4 * scale.max(1.0),
        "{kind} features differ by {err} (scale {scale})"
    );

    let logits = model.forward(x, &mut Mode::Eval).unwrap();
    let scale = reference["logits"]
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    let err = max_abs_diff(&logits, &reference["logits"]);
    assert!(
        err <= 1e-4 * scale.max(1.0),
        "{kind} logits differ by {err} (scale {scale})"
    );
}

#[test]
fn resnet18_matches_torchvision() {
    check(BackboneKind::Resnet18);
}

#[test]
fn densenet121_matches_torchvision() {
    check(BackboneKind::Densenet121);
}
