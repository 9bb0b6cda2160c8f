//! Multi-resolution feature pyramids built from classical descriptors.
//!
//! Level `k` of an `N`-level pyramid has linear scale `2^(k-N)` of the input
//! (area fractions 1/16, 1/4, 1 for three levels). Learned features are
//! replaced by per-pixel descriptors computed on box-downsampled images.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{bilinear_cell, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Descriptor {
    /// Census transform; one 0/1 channel per window neighbor (`neighbor < center`).
    Census { window: usize },
    /// Mean-removed, unit-norm patch vector.
    ZnccPatch { window: usize },
    /// Raw intensity, one channel.
    Intensity,
}

impl Descriptor {
    pub fn window(&self) -> usize {
        match *self {
            Descriptor::Census { window } | Descriptor::ZnccPatch { window } => window,
            Descriptor::Intensity => 1,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            Descriptor::Census { window } => window * window - 1,
            Descriptor::ZnccPatch { window } => window * window,
            Descriptor::Intensity => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let w = self.window();
        if w % 2 == 0 || (w < 3 && !matches!(self, Descriptor::Intensity)) {
            return Err(Error::Config(format!("descriptor window must be odd and >= 3, got {w}")));
        }
        Ok(())
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Descriptor::Census { .. } => f.write_str("census"),
            Descriptor::ZnccPatch { .. } => f.write_str("zncc"),
            Descriptor::Intensity => f.write_str("intensity"),
        }
    }
}

/// Parses the descriptor kind; the window comes from a separate setting.
impl FromStr for Descriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "census" => Ok(Descriptor::Census { window: 5 }),
            "zncc" | "zncc-patch" => Ok(Descriptor::ZnccPatch { window: 5 }),
            "intensity" => Ok(Descriptor::Intensity),
            other => Err(Error::Config(format!("unknown descriptor '{other}'"))),
        }
    }
}

/// Dense `W x H x F` feature grid, channels interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    scale: f64,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>, scale: f64) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::Dimensions(format!(
                "feature map {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Dimensions("feature map contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            scale,
        })
    }

    pub fn from_image(image: &GrayImage, scale: f64) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            channels: 1,
            data: image.data().to_vec(),
            scale,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Linear scale relative to the input image.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Bilinear sample of every channel into `out`; returns `false` (leaving
    /// `out` untouched) outside the pixel-center hull.
    #[inline]
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        let Some((x0, y0, fx, fy)) = bilinear_cell(x, y, self.width, self.height) else {
            return false;
        };
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        for c in 0..self.channels {
            out[c] = p00[c] * w00 + p10[c] * w10 + p01[c] * w01 + p11[c] * w11;
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    /// Levels, coarsest first.
    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &FeatureMap {
        &self.levels[k]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.scale).collect()
    }
}

/// 2x2 box average; output dims are `floor(input / 2)`.
pub fn downsample(image: &GrayImage) -> GrayImage {
    let w = image.width() / 2;
    let h = image.height() / 2;
    GrayImage::from_fn(w.max(1), h.max(1), |x, y| {
        let (x0, y0) = (2 * x, 2 * y);
        let (x1, y1) = ((x0 + 1).min(image.width() - 1), (y0 + 1).min(image.height() - 1));
        (image.get(x0, y0) + image.get(x1, y0) + image.get(x0, y1) + image.get(x1, y1)) * 0.25
    })
}

/// Separable Gaussian blur with replicated borders; `sigma <= 0` copies.
pub fn gaussian_blur(image: &GrayImage, sigma: f64) -> GrayImage {
    if !(sigma > 0.0) {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (image.width() as isize, image.height() as isize);
    let pass = |src: &GrayImage, dx: isize, dy: isize| {
        GrayImage::from_fn(src.width(), src.height(), |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let o = i as isize - radius;
                    let sx = (x as isize + o * dx).clamp(0, w - 1) as usize;
                    let sy = (y as isize + o * dy).clamp(0, h - 1) as usize;
                    k * src.get(sx, sy)
                })
                .sum()
        })
    };
    pass(&pass(image, 1, 0), 0, 1)
}

/// Pyramid with `stages` levels whose finest level is the input resolution.
pub fn build_pyramid(image: &GrayImage, stages: usize, descriptor: Descriptor) -> Result<FeaturePyramid> {
    if stages == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let shifts: Vec<u32> = (0..stages).rev().map(|s| s as u32).collect();
    build_pyramid_levels(image, &shifts, descriptor)
}

/// Pyramid whose level `k` is the input downsampled `shifts[k]` times
/// (coarsest first, strictly decreasing shifts).
pub fn build_pyramid_levels(image: &GrayImage, shifts: &[u32], descriptor: Descriptor) -> Result<FeaturePyramid> {
    build_prefiltered_pyramid(image, shifts, descriptor, &vec![0.0; shifts.len()])
}

/// As [`build_pyramid_levels`], blurring level `k` with `sigmas[k]` (in that
/// level's pixels) before the descriptor is computed.
pub fn build_prefiltered_pyramid(image: &GrayImage, shifts: &[u32], descriptor: Descriptor, sigmas: &[f64]) -> Result<FeaturePyramid> {
    descriptor.validate()?;
    if sigmas.len() != shifts.len() {
        return Err(Error::Config(format!("{} prefilter widths for {} levels", sigmas.len(), shifts.len())));
    }
    if shifts.is_empty() || shifts.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(format!("pyramid shifts must strictly decrease, got {shifts:?}")));
    }
    let coarsest = shifts[0];
    let mut images = vec![image.clone()];
    for _ in 0..coarsest {
        let last = images.last().unwrap();
        if last.width() < 2 || last.height() < 2 {
            return Err(Error::Config(format!(
                "image {}x{} too small for {} downsampling steps",
                image.width(),
                image.height(),
                coarsest
            )));
        }
        images.push(downsample(last));
    }
    let window = descriptor.window();
    let coarse = &images[coarsest as usize];
    if coarse.width() < window || coarse.height() < window {
        return Err(Error::Config(format!(
            "coarsest level {}x{} is smaller than the {window}x{window} descriptor window",
            coarse.width(),
            coarse.height()
        )));
    }
    let levels = shifts
        .iter()
        .zip(sigmas)
        .map(|(&s, &sigma)| {
            let scale = 0.5f64.powi(s as i32);
            compute_descriptor(&gaussian_blur(&images[s as usize], sigma), descriptor, scale)
        })
        .collect();
    Ok(FeaturePyramid { levels })
}

/// Per-pixel descriptor map; borders replicate edge pixels.
pub fn compute_descriptor(image: &GrayImage, descriptor: Descriptor, scale: f64) -> FeatureMap {
    let (w, h) = (image.width(), image.height());
    let channels = descriptor.channels();
    let mut data = vec![0.0; w * h * channels];
    let radius = (descriptor.window() / 2) as isize;
    let at = |x: isize, y: isize| -> f64 {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        image.get(cx, cy)
    };
    data.par_chunks_mut(w * channels).enumerate().for_each(|(y, row)| {
        let y = y as isize;
        for x in 0..w {
            let out = &mut row[x * channels..(x + 1) * channels];
            let xi = x as isize;
            match descriptor {
                Descriptor::Intensity => out[0] = image.get(x, y as usize),
                Descriptor::Census { .. } => {
                    let center = image.get(x, y as usize);
                    let mut c = 0;
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            out[c] = if at(xi + dx, y + dy) < center { 1.0 } else { 0.0 };
                            c += 1;
                        }
                    }
                }
                Descriptor::ZnccPatch { .. } => {
                    let mut c = 0;
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            out[c] = at(xi + dx, y + dy);
                            c += 1;
                        }
                    }
                    let mean = out.iter().sum::<f64>() / channels as f64;
                    out.iter_mut().for_each(|v| *v -= mean);
                    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        out.iter_mut().for_each(|v| *v /= norm);
                    } else {
                        out.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
    });
    FeatureMap {
        width: w,
        height: h,
        channels,
        data,
        scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng_val(&mut rng)).collect();
        GrayImage::new(w, h, data).unwrap()
    }

    fn rng_val(rng: &mut ChaCha8Rng) -> f64 {
        // quantized like an 8-bit image so affine maps cannot merge values
        rng.random_range(0..256) as f64 / 256.0
    }

    #[test]
    fn downsample_small_cases() {
        let img = GrayImage::new(2, 2, vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        let d = downsample(&img);
        assert_eq!((d.width(), d.height()), (1, 1));
        assert_eq!(d.get(0, 0), 2.0);
        let c = downsample(&GrayImage::filled(7, 5, 0.3));
        assert_eq!((c.width(), c.height()), (3, 2));
        assert!(c.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn downsample_matches_nested_loop() {
        let img = random_image(8, 8, 9);
        let d = downsample(&img);
        for y in 0..4 {
            for x in 0..4 {
                let mut s = 0.0;
                for j in 0..2 {
                    for i in 0..2 {
                        s += img.get(2 * x + i, 2 * y + j);
                    }
                }
                assert!((d.get(x, y) - s / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn level_sizes_follow_linear_halving() {
        let img = GrayImage::filled(640, 512, 0.5);
        let p = build_pyramid(&img, 3, Descriptor::Intensity).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(160, 128), (320, 256), (640, 512)]);
        assert_eq!(p.scales(), vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn odd_input_dims_are_floor_consistent() {
        let img = GrayImage::filled(101, 67, 0.5);
        let p = build_pyramid(&img, 3, Descriptor::Intensity).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(25, 16), (50, 33), (101, 67)]);
    }

    #[test]
    fn constant_image_has_zero_census() {
        let img = GrayImage::filled(64, 48, 0.7);
        let p = build_pyramid(&img, 3, Descriptor::Census { window: 5 }).unwrap();
        for level in p.levels() {
            assert_eq!(level.channels(), 24);
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zncc_patches_are_normalized() {
        let img = GrayImage::from_fn(32, 24, |x, y| 0.01 * x as f64 + 0.003 * (y * y) as f64);
        let f = compute_descriptor(&img, Descriptor::ZnccPatch { window: 5 }, 1.0);
        for y in 0..24 {
            for x in 0..32 {
                let v = f.pixel(x, y);
                let mean: f64 = v.iter().sum::<f64>() / 25.0;
                let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(mean.abs() < 1e-9);
                assert!((norm - 1.0).abs() < 1e-9);
                // recompute directly
                let mut patch = Vec::new();
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let cx = (x as i64 + dx).clamp(0, 31) as usize;
                        let cy = (y as i64 + dy).clamp(0, 23) as usize;
                        patch.push(img.get(cx, cy));
                    }
                }
                let m = patch.iter().sum::<f64>() / 25.0;
                let n = patch.iter().map(|p| (p - m) * (p - m)).sum::<f64>().sqrt();
                for (a, p) in v.iter().zip(&patch) {
                    assert!((a - (p - m) / n).abs() < 1e-9);
                }
            }
        }
        let flat = compute_descriptor(&GrayImage::filled(8, 8, 0.2), Descriptor::ZnccPatch { window: 5 }, 1.0);
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_larger_than_coarsest_level_is_config_error() {
        let img = GrayImage::filled(16, 16, 0.1);
        let err = build_pyramid(&img, 3, Descriptor::Census { window: 5 }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(build_pyramid(&img, 3, Descriptor::Census { window: 4 }).is_err());
    }

    #[test]
    fn feature_sampling_is_exact_at_centers() {
        let img = random_image(10, 8, 3);
        let f = compute_descriptor(&img, Descriptor::Census { window: 3 }, 1.0);
        let mut out = vec![0.0; 8];
        assert!(f.sample_into(4.0, 5.0, &mut out));
        assert_eq!(&out[..], f.pixel(4, 5));
        assert!(!f.sample_into(9.5, 5.0, &mut out));
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = GrayImage::filled(9, 7, 0.3);
        let out = gaussian_blur(&img, 1.7);
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let img = random_image(11, 9, 4);
        let sigma = 0.8;
        let out = gaussian_blur(&img, sigma);
        let r = (3.0 * sigma).ceil() as isize;
        let g = |i: isize| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-r..=r).map(g).sum();
        for y in 0..9isize {
            for x in 0..11isize {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = ((x + dx).clamp(0, 10), (y + dy).clamp(0, 8));
                        s += g(dx) * g(dy) * img.get(xx as usize, yy as usize);
                    }
                }
                assert!((out.get(x as usize, y as usize) - s / (norm * norm)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefiltered_levels_blur_before_descriptor() {
        let img = random_image(32, 32, 5);
        let d = Descriptor::Intensity;
        let plain = build_pyramid_levels(&img, &[2, 0], d).unwrap();
        let zero = build_prefiltered_pyramid(&img, &[2, 0], d, &[0.0, 0.0]).unwrap();
        assert_eq!(plain.level(0).data(), zero.level(0).data());
        let blurred = build_prefiltered_pyramid(&img, &[2, 0], d, &[0.0, 1.0]).unwrap();
        assert_eq!(blurred.level(0).data(), plain.level(0).data());
        assert_eq!(blurred.level(1).data(), gaussian_blur(&img, 1.0).data());
        assert!(matches!(build_prefiltered_pyramid(&img, &[2, 0], d, &[1.0]), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn census_invariant_to_monotone_affine(seed in any::<u64>(), a in 0.05f64..20.0, b in -2.0f64..2.0) {
            let img = random_image(24, 20, seed);
            let scaled = GrayImage::from_fn(24, 20, |x, y| a * img.get(x, y) + b);
            let d = Descriptor::Census { window: 5 };
            let f1 = compute_descriptor(&img, d, 1.0);
            let f2 = compute_descriptor(&scaled, d, 1.0);
            prop_assert_eq!(f1.data(), f2.data());
        }
    }
}
