//! Single-channel image buffers and the geometric primitives the transforms
//! are built from: decoding, grayscale conversion, bilinear resampling,
//! rotation, mirroring and cropping.
//!
//! Coordinates follow the pixel-center convention: pixel `(x, y)` covers the
//! unit square whose center sits at `(x + 0.5, y + 0.5)`.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

/// Interleaved `H×W×C` intensity array as produced by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Validation(format!(
                "{width}x{height}x{channels} array needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

/// Decode an image file into `[0, 1]` intensities with one or three channels.
///
/// Alpha is dropped; 16-bit files are reduced to 8 bits first.
pub fn decode_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        RawImage::new(width, height, 3, data)
    } else {
        let luma = img.to_luma8();
        let data = luma.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        RawImage::new(width, height, 1, data)
    }
}

/// Decode and convert to a single channel.
pub fn load_grayscale(path: &Path) -> Result<GrayImage> {
    to_grayscale(&decode_image(path)?)
}

/// Write as 8-bit grayscale; values are clamped to `[0, 1]` first. The
/// format follows the file extension.
pub fn save_png(image: &GrayImage, path: &Path) -> Result<()> {
    let bytes = image
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-pixel grayscale levels scaled by three (`r + g + b`, or `3·l` for
/// single-channel files), so that the channel mean is representable exactly
/// as an integer over a denominator of 765.
pub fn decode_gray_levels(path: &Path) -> Result<Vec<u16>> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    if img.color().has_color() {
        Ok(img
            .to_rgb8()
            .as_raw()
            .chunks_exact(3)
            .map(|p| u16::from(p[0]) + u16::from(p[1]) + u16::from(p[2]))
            .collect())
    } else {
        Ok(img.to_luma8().as_raw().iter().map(|&v| 3 * u16::from(v)).collect())
    }
}

/// Collapse channels by unweighted averaging. Single-channel input is
/// returned unchanged.
pub fn to_grayscale(image: &RawImage) -> Result<GrayImage> {
    match image.channels {
        1 => GrayImage::new(image.width, image.height, image.data.clone()),
        3 => {
            let data = image.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
            GrayImage::new(image.width, image.height, data)
        }
        c => Err(Error::UnsupportedFormat(format!("{c} channels (expected 1 or 3)"))),
    }
}

/// Mirror across the vertical axis (reverse the column order).
pub fn hflip(image: &GrayImage) -> GrayImage {
    let mut data = Vec::with_capacity(image.data.len());
    for row in image.data.chunks_exact(image.width.max(1)) {
        data.extend(row.iter().rev());
    }
    GrayImage {
        width: image.width,
        height: image.height,
        data,
    }
}

/// Extract the `width×height` window whose top-left pixel is `(x0, y0)`.
pub fn crop(image: &GrayImage, x0: usize, y0: usize, width: usize, height: usize) -> Result<GrayImage> {
    if x0 + width > image.width || y0 + height > image.height {
        return Err(Error::Validation(format!(
            "crop {width}x{height}+{x0}+{y0} exceeds {}x{} image",
            image.width, image.height
        )));
    }
    let mut data = Vec::with_capacity(width * height);
    for y in y0..y0 + height {
        let start = y * image.width + x0;
        data.extend_from_slice(&image.data[start..start + width]);
    }
    Ok(GrayImage { width, height, data })
}

/// Bilinear (triangle-filter) resampling. When shrinking, the filter support
/// widens with the scale factor so every source pixel contributes, as in the
/// usual antialiased bilinear resize; when enlarging it is plain bilinear
/// interpolation with clamped edges.
pub fn resize_bilinear(image: &GrayImage, width: usize, height: usize) -> GrayImage {
    if image.width == width && image.height == height {
        return image.clone();
    }
    let hweights = filter_weights(image.width, width);
    let vweights = filter_weights(image.height, height);

    // horizontal pass: height x new width
    let mut tmp = vec![0f32; image.height * width];
    for y in 0..image.height {
        let row = &image.data[y * image.width..(y + 1) * image.width];
        for (x, (start, weights)) in hweights.iter().enumerate() {
            let acc: f32 = weights.iter().enumerate().map(|(k, w)| w * row[start + k]).sum();
            tmp[y * width + x] = acc;
        }
    }
    let mut data = vec![0f32; height * width];
    for (y, (start, weights)) in vweights.iter().enumerate() {
        for x in 0..width {
            let acc: f32 = weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[(start + k) * width + x])
                .sum();
            data[y * width + x] = acc;
        }
    }
    GrayImage { width, height, data }
}

fn filter_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5) - center).abs() / support;
                    (1.0 - d).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                // only reachable for degenerate sizes; fall back to nearest
                let nearest = (center.floor() as usize).min(src - 1);
                return (nearest, vec![1.0]);
            }
            // trim zero-weight tails so index arithmetic stays tight
            let first = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            (lo + first, weights[first..=last].iter().map(|&w| w as f32).collect())
        })
        .collect()
}

/// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`),
/// reading `fill` outside the image.
#[inline]
fn sample(image: &GrayImage, sx: f64, sy: f64, fill: f32) -> f32 {
    let u = sx - 0.5;
    let v = sy - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = (u - x0) as f32;
    let fy = (v - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| -> f32 {
        if x < 0 || y < 0 || x >= image.width as i64 || y >= image.height as i64 {
            fill
        } else {
            image.data[y as usize * image.width + x as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotate counter-clockwise by `degrees` about the image center, keeping the
/// canvas size. Uncovered corners take the value `fill`.
pub fn rotate(image: &GrayImage, degrees: f64, fill: f32) -> GrayImage {
    if degrees == 0.0 {
        return image.clone();
    }
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = image.width as f64 / 2.0;
    let cy = image.height as f64 / 2.0;
    GrayImage::from_fn(image.width, image.height, |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        // inverse map: rotate the output offset clockwise (y points down)
        let sx = dx * cos - dy * sin + cx;
        let sy = dx * sin + dy * cos + cy;
        sample(image, sx, sy, fill)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| (x + 3 * y) as f32 / (w + 3 * h) as f32)
    }

    #[test]
    fn grayscale_mean_of_channels() {
        let raw = RawImage::new(1, 1, 3, vec![0.2, 0.4, 0.6]).unwrap();
        let g = to_grayscale(&raw).unwrap();
        assert!((g.get(0, 0) - 0.4).abs() < 1e-7);
    }

    #[test]
    fn grayscale_single_channel_identity() {
        let raw = RawImage::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(to_grayscale(&raw).unwrap().pixels(), raw.data.as_slice());
    }

    #[test]
    fn grayscale_rejects_other_channel_counts() {
        let raw = RawImage::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(to_grayscale(&raw), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn hflip_moves_column() {
        let mut img = GrayImage::filled(10, 2, 0.0);
        img.set(3, 1, 1.0);
        let flipped = hflip(&img);
        assert_eq!(flipped.get(6, 1), 1.0);
        assert_eq!(flipped.pixels().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = ramp(7, 5);
        assert_eq!(resize_bilinear(&img, 7, 5), img);
    }

    #[test]
    fn resize_preserves_constant() {
        let img = GrayImage::filled(300, 250, 0.37);
        for (w, h) in [(224, 224), (280, 280), (31, 17), (600, 400)] {
            let out = resize_bilinear(&img, w, h);
            assert_eq!((out.width(), out.height()), (w, h));
            assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-5));
        }
    }

    #[test]
    fn resize_integer_downscale_averages_blocks() {
        // a 2x shrink with a triangle filter of radius 2 weights the
        // 4 nearest source samples 1/8, 3/8, 3/8, 1/8 in each direction
        let img = GrayImage::from_fn(8, 1, |x, _| x as f32);
        let out = resize_bilinear(&img, 4, 1);
        let expected_interior = |i: usize| {
            let c = 2 * i;
            (c as f32 - 1.0) * 0.125 + c as f32 * 0.375 + (c + 1) as f32 * 0.375 + (c + 2) as f32 * 0.125
        };
        assert!((out.get(1, 0) - expected_interior(1)).abs() < 1e-5);
        assert!((out.get(2, 0) - expected_interior(2)).abs() < 1e-5);
    }

    #[test]
    fn upscale_matches_plain_bilinear() {
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 1);
        // sample positions 0.25, 0.75, 1.25, 1.75 in source pixel units
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (x, e) in expected.iter().enumerate() {
            assert!((out.get(x, 0) - e).abs() < 1e-6, "{x}: {}", out.get(x, 0));
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp(9, 6);
        assert_eq!(rotate(&img, 0.0, 0.0), img);
    }

    #[test]
    fn rotate_quarter_turn_matches_transpose() {
        let img = ramp(8, 8);
        let out = rotate(&img, 90.0, 0.0);
        // counter-clockwise: the right edge moves to the top
        for y in 0..8 {
            for x in 0..8 {
                assert!((out.get(x, y) - img.get(7 - y, x)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn crop_bounds_checked() {
        let img = ramp(5, 5);
        assert!(crop(&img, 3, 0, 3, 2).is_err());
        let c = crop(&img, 1, 2, 3, 2).unwrap();
        assert_eq!(c.get(0, 0), img.get(1, 2));
        assert_eq!(c.get(2, 1), img.get(3, 3));
    }
}
