//! Depth maps, soft-argmin regression and the weighted multi-stage error.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics;
use crate::volume::CostVolume;

/// Per-pixel depth (scene units) or disparity (pixels) with confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    confidence: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<f64>,
        confidence: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 || values.len() != n || confidence.len() != n || valid.len() != n {
            return Err(Error::Dimensions(format!(
                "depth map {width}x{height} with {} values, {} confidences, {} flags",
                values.len(),
                confidence.len(),
                valid.len()
            )));
        }
        if values.iter().zip(&valid).any(|(v, ok)| *ok && !v.is_finite()) {
            return Err(Error::Dimensions("valid depth is not finite".into()));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Dimensions("confidence outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            values,
            confidence,
            valid,
        })
    }

    /// Every finite value is valid with confidence 1.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
        let confidence = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Self::new(width, height, values, confidence, valid)
    }

    /// Zero, negative and non-finite values mark invalid pixels (the on-disk
    /// convention for depth and disparity maps).
    pub fn from_positive(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid: Vec<bool> = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        let confidence = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Self::new(width, height, values, confidence, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, m: usize) -> bool {
        self.valid[m]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let m = y * self.width + x;
        self.valid[m].then(|| self.values[m])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values with invalid pixels written as 0.
    pub fn values_or_zero(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(v, ok)| if *ok { *v } else { 0.0 })
            .collect()
    }

    /// Copy with the validity mask replaced.
    pub fn with_mask(&self, valid: Vec<bool>) -> Result<Self> {
        Self::new(self.width, self.height, self.values.clone(), self.confidence.clone(), valid)
    }

    /// Copy with every value multiplied by `factor`.
    pub fn scaled_values(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Box average over valid pixels of each `2^shift` block. A coarse pixel
    /// is valid when any pixel of its block is.
    pub fn downsample_box(&self, shift: u32) -> Self {
        let f = 1usize << shift;
        let (w, h) = (self.width / f, self.height / f);
        let mut values = vec![0.0; w * h];
        let mut confidence = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut c = 0.0;
                let mut n = 0usize;
                for yy in y * f..(y + 1) * f {
                    for xx in x * f..(x + 1) * f {
                        let m = yy * self.width + xx;
                        if self.valid[m] {
                            s += self.values[m];
                            c += self.confidence[m];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    let o = y * w + x;
                    values[o] = s / n as f64;
                    confidence[o] = c / n as f64;
                    valid[o] = true;
                }
            }
        }
        Self {
            width: w,
            height: h,
            values,
            confidence,
            valid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostNormalization {
    /// Costs enter the softmax unchanged.
    None,
    /// Costs are divided by the median of the pixel's valid costs.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionOptions {
    pub temperature: f64,
    pub normalization: CostNormalization,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            normalization: CostNormalization::Median,
        }
    }
}

/// Number of planes around the expectation whose probability mass is
/// reported as confidence.
pub const CONFIDENCE_WINDOW: usize = 4;

/// Soft argmin over raw costs: `p_j = softmax(-cost_j / temperature)` over
/// valid planes, value = expected hypothesis.
pub fn soft_argmin(volume: &CostVolume, temperature: f64) -> Result<DepthMap> {
    soft_argmin_with(
        volume,
        &RegressionOptions {
            temperature,
            normalization: CostNormalization::None,
        },
    )
}

/// Soft argmin with optional per-pixel cost normalization.
///
/// Pixels with fewer than two valid planes are invalid; their value is the
/// ladder midpoint so downstream stages still receive a finite seed.
pub fn soft_argmin_with(volume: &CostVolume, options: &RegressionOptions) -> Result<DepthMap> {
    let tau = options.temperature;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let field = volume.field();
    let d = volume.planes();
    let n = volume.width() * volume.height();
    let out: Vec<(f64, f64, bool)> = (0..n)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(d), Vec::with_capacity(d)),
            |(logits, scratch), m| {
                let (costs, valid) = volume.pixel_costs(m);
                let count = valid.iter().filter(|&&v| v).count();
                if count < 2 {
                    let mid = 0.5 * (field.min_value(m) + field.max_value(m));
                    return (mid, 0.0, false);
                }
                let scale = match options.normalization {
                    CostNormalization::None => 1.0,
                    CostNormalization::Median => {
                        scratch.clear();
                        scratch.extend(costs.iter().zip(valid).filter(|(_, v)| **v).map(|(c, _)| *c));
                        let med = median(scratch);
                        if med > f64::MIN_POSITIVE {
                            1.0 / med
                        } else {
                            1.0
                        }
                    }
                };
                logits.clear();
                let mut max_logit = f64::NEG_INFINITY;
                for j in 0..d {
                    let l = if valid[j] { -costs[j] * scale / tau } else { f64::NEG_INFINITY };
                    max_logit = max_logit.max(l);
                    logits.push(l);
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = if l.is_finite() { (*l - max_logit).exp() } else { 0.0 };
                    z += *l;
                }
                let mut value = 0.0;
                let mut index = 0.0;
                for (j, p) in logits.iter_mut().enumerate() {
                    *p /= z;
                    value += *p * field.value(m, j);
                    index += *p * j as f64;
                }
                let window = CONFIDENCE_WINDOW.min(d);
                let start = ((index - (window as f64 - 1.0) / 2.0).round().max(0.0) as usize).min(d - window);
                let conf: f64 = logits[start..start + window].iter().sum();
                (value, conf.clamp(0.0, 1.0), true)
            },
        )
        .collect();
    let mut values = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for (v, c, ok) in out {
        values.push(v);
        confidence.push(c);
        valid.push(ok);
    }
    DepthMap::new(volume.width(), volume.height(), values, confidence, valid)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLoss {
    /// `sum_k lambda_k * L_k` over stages with a defined term.
    pub total: f64,
    /// Mean absolute error per stage; `None` when a stage has no valid pixel.
    pub terms: Vec<Option<f64>>,
}

/// Weighted sum of per-stage mean absolute errors. Each prediction is
/// compared with the ground truth box-averaged down to its resolution.
pub fn stage_loss(predictions: &[DepthMap], ground_truth: &DepthMap, weights: &[f64]) -> Result<StageLoss> {
    if weights.len() != predictions.len() {
        return Err(Error::Config(format!(
            "{} loss weights for {} stages",
            weights.len(),
            predictions.len()
        )));
    }
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(predictions.len());
    for (k, (pred, lambda)) in predictions.iter().zip(weights).enumerate() {
        let gt = ground_truth_at(ground_truth, pred.width(), pred.height())?;
        let term = metrics::epe(pred, &gt)?;
        match term {
            Some(t) => total += lambda * t,
            None => log::warn!("stage {} has no valid pixels; excluded from the loss", k + 1),
        }
        terms.push(term);
    }
    Ok(StageLoss { total, terms })
}

/// Box-downsamples a full-resolution map to `width x height` (a power-of-two
/// reduction).
pub fn ground_truth_at(gt: &DepthMap, width: usize, height: usize) -> Result<DepthMap> {
    if gt.width() == width && gt.height() == height {
        return Ok(gt.clone());
    }
    let ratio = gt.width() / width.max(1);
    if !ratio.is_power_of_two() || gt.width() != width * ratio || gt.height() != height * ratio {
        return Err(Error::Dimensions(format!(
            "cannot reduce {}x{} to {width}x{height}",
            gt.width(),
            gt.height()
        )));
    }
    Ok(gt.downsample_box(ratio.trailing_zeros()))
}
