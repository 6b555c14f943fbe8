#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cxrtl_core::imaging::save_png;
use cxrtl_core::{GrayImage, Label, SeedBank, Split};

/// Dark images for class 0, bright ones for class 1, with pixel noise.
pub fn synthetic_image(label: Label, size: usize, rng: &mut impl rand::Rng) -> GrayImage {
    let level = match label {
        Label::Norm => 0.35,
        Label::Pneumonia => 0.65,
    };
    GrayImage::from_fn(size, size, |_, _| level + rng.random_range(-0.1f32..0.1))
}

pub fn synthetic_set(per_class: usize, size: usize, seed: u64) -> Vec<(GrayImage, Label)> {
    let mut rng = SeedBank::new(seed).rng("synthetic");
    (0..2 * per_class)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Norm } else { Label::Pneumonia };
            (synthetic_image(label, size, &mut rng), label)
        })
        .collect()
}

/// Write `root/<split>/<CLASS>/*.png`; `layout` holds `[norm, pneumonia]`
/// counts for train, val and test.
pub fn write_tree(root: &Path, layout: [[usize; 2]; 3], size: usize, seed: u64) {
    let mut rng = SeedBank::new(seed).rng("tree");
    for (split, counts) in [Split::Train, Split::Val, Split::Test].into_iter().zip(layout) {
        for (label, n) in Label::ALL.into_iter().zip(counts) {
            let dir = root.join(split.dir_name()).join(label.dir_name());
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..n {
                let img = synthetic_image(label, size, &mut rng);
                save_png(&img, &dir.join(format!("{}_{i:03}.png", label.name()))).unwrap();
            }
        }
    }
}

/// A run specification for quick scratch-weight runs on 64x64 images.
pub fn small_spec(data_root: &Path, epochs: usize) -> String {
    format!(
        r#"data_root = "{}"
seed = 5

[model]
backbone = "resnet18"
strategy = "I"
pretrained = false
n_neurons = 10

[train]
batch_size = 8
epochs = {epochs}

[augment.params]
input_size = 64
crop_resize = 80
"#,
        data_root.display()
    )
}

pub fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn cxrtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrtl"))
        .args(args)
        .env("CXRTL_LOG", "warn")
        .output()
        .expect("cxrtl binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
