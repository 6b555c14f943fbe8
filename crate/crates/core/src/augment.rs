//! The four training-image transforms, normalization, and assembly of the
//! augmented training set (every original plus one transformed copy).
//!
//! Each stochastic transform is split into a `draw_*` step that samples its
//! parameters and an `apply_*` step that is a pure function of the image and
//! the draw. Tests force specific draws through the `apply_*` functions.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, Label, NormStats};
use crate::error::{Error, Result};
use crate::imaging::{self, GrayImage};
use crate::seed::Rng;

pub const INPUT_SIZE: usize = 224;
pub const CROP_RESIZE: usize = 280;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Resize and normalize only.
    None,
    /// T1: random rotation.
    Rotate,
    /// T2: mirror across the vertical axis.
    Hflip,
    /// T3: brightness / contrast / saturation jitter.
    Jitter,
    /// T4: enlarge, random crop, coin-flip mirror, small rotation.
    CropFlipRotate,
}

impl TransformKind {
    pub const AUGMENTING: [TransformKind; 4] = [
        TransformKind::Rotate,
        TransformKind::Hflip,
        TransformKind::Jitter,
        TransformKind::CropFlipRotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Rotate => "rotate",
            TransformKind::Hflip => "hflip",
            TransformKind::Jitter => "jitter",
            TransformKind::CropFlipRotate => "crop_flip_rotate",
        }
    }

    /// Whether the output depends on random draws.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            TransformKind::Rotate | TransformKind::Jitter | TransformKind::CropFlipRotate
        )
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(TransformKind::None),
            "rotate" | "t1" => Ok(TransformKind::Rotate),
            "hflip" | "t2" => Ok(TransformKind::Hflip),
            "jitter" | "t3" => Ok(TransformKind::Jitter),
            "crop_flip_rotate" | "t4" => Ok(TransformKind::CropFlipRotate),
            other => Err(Error::Parse(format!("unknown transform {other:?}"))),
        }
    }
}

/// Bounds for every transform. Defaults are the reference values; the
/// output size can be reduced for fast synthetic runs, in which case the
/// crop pre-resize scales proportionally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub input_size: usize,
    pub crop_resize: usize,
    pub rotate_max_deg: f64,
    pub jitter: f64,
    pub crop_flip_prob: f64,
    pub crop_rotate_max_deg: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            input_size: INPUT_SIZE,
            crop_resize: CROP_RESIZE,
            rotate_max_deg: 20.0,
            jitter: 0.3,
            crop_flip_prob: 0.5,
            crop_rotate_max_deg: 5.0,
        }
    }
}

impl AugmentParams {
    pub fn with_input_size(input_size: usize) -> Self {
        Self {
            input_size,
            crop_resize: (input_size * CROP_RESIZE).div_ceil(INPUT_SIZE),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Validation(what));
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if self.crop_resize < self.input_size {
            return bad(format!(
                "crop_resize {} smaller than input_size {}",
                self.crop_resize, self.input_size
            ));
        }
        if !(0.0..=20.0).contains(&self.rotate_max_deg) {
            return bad(format!("rotate_max_deg {} outside [0, 20]", self.rotate_max_deg));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if !(0.0..=1.0).contains(&self.crop_flip_prob) {
            return bad(format!("crop_flip_prob {} outside [0, 1]", self.crop_flip_prob));
        }
        if !(0.0..=5.0).contains(&self.crop_rotate_max_deg) {
            return bad(format!(
                "crop_rotate_max_deg {} outside [0, 5]",
                self.crop_rotate_max_deg
            ));
        }
        Ok(())
    }

    pub fn max_crop_offset(&self) -> usize {
        self.crop_resize - self.input_size
    }
}

/// A transform kind together with its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub params: AugmentParams,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, params: AugmentParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { kind, params })
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            kind: TransformKind::Hflip,
            params: AugmentParams::default(),
        }
    }
}

/// `(x − mean) / std` per pixel.
pub fn normalize_image(image: &GrayImage, stats: &NormStats) -> Result<GrayImage> {
    if !stats.std.is_finite() || stats.std <= 0.0 {
        return Err(Error::DegenerateStats { std: stats.std });
    }
    let mean = stats.mean as f32;
    let inv = (1.0 / stats.std) as f32;
    Ok(image.map(|v| (v - mean) * inv))
}

fn finish(image: &GrayImage, params: &AugmentParams, stats: &NormStats) -> Result<GrayImage> {
    let resized = imaging::resize_bilinear(image, params.input_size, params.input_size);
    normalize_image(&resized, stats)
}

/// Resize and normalize without augmentation.
pub fn prepare_original(image: &GrayImage, params: &AugmentParams, stats: &NormStats) -> Result<GrayImage> {
    finish(image, params, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotateDraw {
    pub degrees: f64,
}

pub fn draw_rotate(rng: &mut Rng, params: &AugmentParams) -> RotateDraw {
    RotateDraw {
        degrees: rng.random_range(0.0..=params.rotate_max_deg),
    }
}

pub fn apply_rotate(
    image: &GrayImage,
    draw: RotateDraw,
    params: &AugmentParams,
    stats: &NormStats,
) -> Result<GrayImage> {
    finish(&imaging::rotate(image, draw.degrees, 0.0), params, stats)
}

pub fn transform_rotate(
    image: &GrayImage,
    rng: &mut Rng,
    params: &AugmentParams,
    stats: &NormStats,
) -> Result<GrayImage> {
    let draw = draw_rotate(rng, params);
    apply_rotate(image, draw, params, stats)
}

pub fn transform_hflip(image: &GrayImage, params: &AugmentParams, stats: &NormStats) -> Result<GrayImage> {
    finish(&imaging::hflip(image), params, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub brightness: f64,
    pub contrast: f64,
    /// Drawn for stream compatibility; a no-op on single-channel images.
    pub saturation: f64,
}

impl JitterDraw {
    pub const IDENTITY: JitterDraw = JitterDraw {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };
}

pub fn draw_jitter(rng: &mut Rng, params: &AugmentParams) -> JitterDraw {
    let range = (1.0 - params.jitter)..=(1.0 + params.jitter);
    JitterDraw {
        brightness: rng.random_range(range.clone()),
        contrast: rng.random_range(range.clone()),
        saturation: rng.random_range(range),
    }
}

/// Brightness scales intensities; contrast blends with the image mean;
/// saturation has no chroma to act on. Each step clamps to `[0, 1]`.
pub fn jitter_pixels(image: &GrayImage, draw: JitterDraw) -> GrayImage {
    let b = draw.brightness as f32;
    let bright = image.map(|v| (v * b).clamp(0.0, 1.0));
    let c = draw.contrast as f32;
    let m = bright.mean() as f32;
    bright.map(|v| (v * c + m * (1.0 - c)).clamp(0.0, 1.0))
}

pub fn apply_jitter(
    image: &GrayImage,
    draw: JitterDraw,
    params: &AugmentParams,
    stats: &NormStats,
) -> Result<GrayImage> {
    finish(&jitter_pixels(image, draw), params, stats)
}

pub fn transform_jitter(
    image: &GrayImage,
    rng: &mut Rng,
    params: &AugmentParams,
    stats: &NormStats,
) -> Result<GrayImage> {
    let draw = draw_jitter(rng, params);
    apply_jitter(image, draw, params, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDraw {
    pub x0: usize,
    pub y0: usize,
    pub flip: bool,
    pub degrees: f64,
}

pub fn draw_crop(rng: &mut Rng, params: &AugmentParams) -> CropDraw {
    let max = params.max_crop_offset();
    CropDraw {
        x0: rng.random_range(0..=max),
        y0: rng.random_range(0..=max),
        flip: rng.random_bool(params.crop_flip_prob),
        degrees: rng.random_range(0.0..=params.crop_rotate_max_deg),
    }
}

/// Resize to the enlarged size, crop, optionally mirror, rotate, normalize.
pub fn apply_crop_flip_rotate(
    image: &GrayImage,
    draw: CropDraw,
    params: &AugmentParams,
    stats: &NormStats,
) -> Result<GrayImage> {
    let big = imaging::resize_bilinear(image, params.crop_resize, params.crop_resize);
    let mut out = imaging::crop(&big, draw.x0, draw.y0, params.input_size, params.input_size)?;
    if draw.flip {
        out = imaging::hflip(&out);
    }
    let out = imaging::rotate(&out, draw.degrees, 0.0);
    normalize_image(&out, stats)
}

pub fn transform_crop_flip_rotate(
    image: &GrayImage,
    rng: &mut Rng,
    params: &AugmentParams,
    stats: &NormStats,
) -> Result<GrayImage> {
    let draw = draw_crop(rng, params);
    apply_crop_flip_rotate(image, draw, params, stats)
}

/// Apply a transform of any kind, drawing parameters from `rng` when needed.
pub fn apply_transform(image: &GrayImage, spec: &TransformSpec, rng: &mut Rng, stats: &NormStats) -> Result<GrayImage> {
    let p = &spec.params;
    match spec.kind {
        TransformKind::None => prepare_original(image, p, stats),
        TransformKind::Rotate => transform_rotate(image, rng, p, stats),
        TransformKind::Hflip => transform_hflip(image, p, stats),
        TransformKind::Jitter => transform_jitter(image, rng, p, stats),
        TransformKind::CropFlipRotate => transform_crop_flip_rotate(image, rng, p, stats),
    }
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Memory { name: String, image: Arc<GrayImage> },
}

impl ImageSource {
    pub fn load(&self) -> Result<GrayImage> {
        match self {
            ImageSource::File(path) => imaging::load_grayscale(path),
            ImageSource::Memory { image, .. } => Ok((**image).clone()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ImageSource::File(path) => path.display().to_string(),
            ImageSource::Memory { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleOrigin {
    pub source: String,
    pub transform: TransformKind,
}

/// A model-ready image: resized, normalized, single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub pixels: GrayImage,
    pub label: Label,
    pub origin: SampleOrigin,
}

/// Labeled source images awaiting preparation.
#[derive(Debug, Clone, Default)]
pub struct SourceSet {
    pub items: Vec<(ImageSource, Label)>,
}

impl SourceSet {
    pub fn from_index(index: &DatasetIndex) -> Self {
        Self {
            items: index
                .records()
                .iter()
                .map(|r| (ImageSource::File(r.path.clone()), r.label))
                .collect(),
        }
    }

    pub fn from_images(images: Vec<(GrayImage, Label)>) -> Self {
        Self {
            items: images
                .into_iter()
                .enumerate()
                .map(|(i, (image, label))| {
                    (
                        ImageSource::Memory {
                            name: format!("mem:{i}"),
                            image: Arc::new(image),
                        },
                        label,
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Resize and normalize every source, without augmentation.
pub fn prepare_eval_set(sources: &SourceSet, params: &AugmentParams, stats: &NormStats) -> Result<Vec<PreparedSample>> {
    params.validate()?;
    sources
        .items
        .par_iter()
        .map(|(source, label)| {
            Ok(PreparedSample {
                pixels: prepare_original(&source.load()?, params, stats)?,
                label: *label,
                origin: SampleOrigin {
                    source: source.name(),
                    transform: TransformKind::None,
                },
            })
        })
        .collect()
}

/// The augmented training set. The first half holds the originals, the
/// second half their transformed counterparts in the same order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    samples: Vec<PreparedSample>,
    sources: SourceSet,
    spec: TransformSpec,
    stats: NormStats,
    seed: u64,
    epoch: usize,
}

impl TrainingSet {
    pub fn samples(&self) -> &[PreparedSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<PreparedSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }

    /// Re-draw the augmented half for `epoch`. A no-op for deterministic
    /// transforms and for the epoch already materialized.
    pub fn refresh(&mut self, epoch: usize) -> Result<()> {
        if !self.spec.kind.is_stochastic() || epoch == self.epoch {
            return Ok(());
        }
        let n = self.sources.len();
        let fresh = augmented_half(&self.sources, &self.spec, &self.stats, self.seed, epoch)?;
        self.samples.truncate(n);
        self.samples.extend(fresh);
        self.epoch = epoch;
        Ok(())
    }
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> Rng {
    crate::seed::SeedBank::new(seed).rng_indexed(&format!("augment/{epoch}"), index as u64)
}

fn augmented_half(
    sources: &SourceSet,
    spec: &TransformSpec,
    stats: &NormStats,
    seed: u64,
    epoch: usize,
) -> Result<Vec<PreparedSample>> {
    sources
        .items
        .par_iter()
        .enumerate()
        .map(|(i, (source, label))| {
            let mut rng = sample_rng(seed, epoch, i);
            Ok(PreparedSample {
                pixels: apply_transform(&source.load()?, spec, &mut rng, stats)?,
                label: *label,
                origin: SampleOrigin {
                    source: source.name(),
                    transform: spec.kind,
                },
            })
        })
        .collect()
}

/// Originals (resize + normalize) followed by one transformed copy of each.
pub fn build_training_set(
    sources: SourceSet,
    chosen: TransformSpec,
    stats: &NormStats,
    seed: u64,
) -> Result<TrainingSet> {
    chosen.params.validate()?;
    normalize_image(&GrayImage::filled(1, 1, 0.0), stats)?;
    let pairs: Vec<(PreparedSample, PreparedSample)> = sources
        .items
        .par_iter()
        .enumerate()
        .map(|(i, (source, label))| {
            let image = source.load()?;
            let original = PreparedSample {
                pixels: prepare_original(&image, &chosen.params, stats)?,
                label: *label,
                origin: SampleOrigin {
                    source: source.name(),
                    transform: TransformKind::None,
                },
            };
            let mut rng = sample_rng(seed, 0, i);
            let augmented = PreparedSample {
                pixels: apply_transform(&image, &chosen, &mut rng, stats)?,
                label: *label,
                origin: SampleOrigin {
                    source: source.name(),
                    transform: chosen.kind,
                },
            };
            Ok((original, augmented))
        })
        .collect::<Result<_>>()?;
    let (mut samples, augmented): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    samples.extend(augmented);
    Ok(TrainingSet {
        samples,
        sources,
        spec: chosen,
        stats: *stats,
        seed,
        epoch: 0,
    })
}

/// 2×2 grid of T1..T4 applied to one image, un-normalized, for inspection.
pub fn preview_grid(image: &GrayImage, params: &AugmentParams, rng: &mut Rng) -> Result<GrayImage> {
    let identity = NormStats { mean: 0.0, std: 1.0 };
    let n = params.input_size;
    let tiles: Vec<GrayImage> = TransformKind::AUGMENTING
        .iter()
        .map(|&kind| apply_transform(image, &TransformSpec { kind, params: *params }, rng, &identity))
        .collect::<Result<_>>()?;
    Ok(GrayImage::from_fn(2 * n, 2 * n, |x, y| {
        let tile = &tiles[(y / n) * 2 + x / n];
        tile.get(x % n, y % n).clamp(0.0, 1.0)
    }))
}

/// Seeded generator for standalone transform use.
pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: NormStats = NormStats { mean: 0.0, std: 1.0 };

    fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = rng_from_seed(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random::<f32>())
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats { mean: 0.5, std: 0.25 };
        let out = normalize_image(&GrayImage::filled(2, 2, 0.75), &stats).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let centered = normalize_image(&GrayImage::filled(2, 2, 0.5), &stats).unwrap();
        assert!(centered.pixels().iter().all(|&v| v == 0.0));
        let img = noise(5, 5, 1);
        assert_eq!(normalize_image(&img, &UNIT).unwrap(), img);
        assert!(matches!(
            normalize_image(&img, &NormStats { mean: 0.2, std: 0.0 }),
            Err(Error::DegenerateStats { .. })
        ));
    }

    #[test]
    fn jitter_brightness_scales() {
        let draw = JitterDraw {
            brightness: 1.2,
            ..JitterDraw::IDENTITY
        };
        let out = jitter_pixels(&GrayImage::filled(3, 3, 0.5), draw);
        assert!(out.pixels().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn jitter_identity_factors() {
        let img = noise(40, 30, 2);
        let p = AugmentParams::with_input_size(16);
        let out = apply_jitter(&img, JitterDraw::IDENTITY, &p, &UNIT).unwrap();
        assert_eq!(out, prepare_original(&img, &p, &UNIT).unwrap());
    }

    #[test]
    fn jitter_draws_within_bounds() {
        let p = AugmentParams::default();
        let mut rng = rng_from_seed(3);
        for _ in 0..10_000 {
            let d = draw_jitter(&mut rng, &p);
            for f in [d.brightness, d.contrast, d.saturation] {
                assert!((0.7..=1.3).contains(&f));
            }
        }
    }

    #[test]
    fn crop_identity_draw_is_center_crop() {
        let img = noise(100, 90, 4);
        let p = AugmentParams::default();
        let c = p.max_crop_offset() / 2;
        let draw = CropDraw {
            x0: c,
            y0: c,
            flip: false,
            degrees: 0.0,
        };
        let out = apply_crop_flip_rotate(&img, draw, &p, &UNIT).unwrap();
        let big = imaging::resize_bilinear(&img, 280, 280);
        let expected = imaging::crop(&big, 28, 28, 224, 224).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn params_reject_out_of_bounds() {
        let p = AugmentParams {
            rotate_max_deg: 25.0,
            ..AugmentParams::default()
        };
        assert!(p.validate().is_err());
        let p = AugmentParams {
            crop_resize: 100,
            ..AugmentParams::default()
        };
        assert!(p.validate().is_err());
        assert_eq!(AugmentParams::with_input_size(64).crop_resize, 80);
        assert_eq!(AugmentParams::with_input_size(224).crop_resize, 280);
    }

    #[test]
    fn transform_names_round_trip() {
        for k in TransformKind::AUGMENTING.iter().chain([TransformKind::None].iter()) {
            assert_eq!(k.name().parse::<TransformKind>().unwrap(), *k);
        }
        assert_eq!("T2".parse::<TransformKind>().unwrap(), TransformKind::Hflip);
    }

    #[test]
    fn preview_is_two_by_two() {
        let p = AugmentParams::with_input_size(16);
        let g = preview_grid(&noise(30, 30, 5), &p, &mut rng_from_seed(0)).unwrap();
        assert_eq!((g.width(), g.height()), (32, 32));
    }
}
