//! Cascade schedules and per-pixel hypothesis ladders.
//!
//! Stage `k` sweeps `D_k` planes spaced `I_k` apart, covering `R_k = D_k * I_k`.
//! The first stage spans the whole scene range; every later stage centers a
//! narrower ladder on the upsampled prediction of the stage before it.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::regress::DepthMap;

/// Smallest depth a ladder may reach after clamping.
pub const DEPTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Multi-view depth planes in scene units.
    Depth,
    /// Rectified-stereo disparities in pixels of each stage's resolution.
    Disparity,
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::Depth => "mvs",
            SweepMode::Disparity => "stereo",
        })
    }
}

/// Plane count and interval multiplier for one stage, as written in a config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSpec {
    pub planes: usize,
    pub interval_multiplier: f64,
}

impl StageSpec {
    pub fn new(planes: usize, interval_multiplier: f64) -> Self {
        Self {
            planes,
            interval_multiplier,
        }
    }
}

/// One materialized stage of a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub planes: usize,
    /// Plane spacing, in scene units (depth) or stage pixels (disparity).
    pub interval: f64,
    /// `planes * interval`, same units as `interval`.
    pub range: f64,
    /// Number of 2x downsamplings from the input resolution.
    pub shift: u32,
}

impl Stage {
    pub fn linear_scale(&self) -> f64 {
        0.5f64.powi(self.shift as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSchedule {
    mode: SweepMode,
    base_interval: f64,
    full_range: f64,
    stages: Vec<Stage>,
}

impl CascadeSchedule {
    pub fn mode(&self) -> SweepMode {
        self.mode
    }

    pub fn base_interval(&self) -> f64 {
        self.base_interval
    }

    pub fn full_range(&self) -> f64 {
        self.full_range
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage(&self, k: usize) -> &Stage {
        &self.stages[k]
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn plane_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.planes).collect()
    }

    pub fn intervals(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.interval).collect()
    }

    pub fn ranges(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.range).collect()
    }

    pub fn shifts(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.shift).collect()
    }

    pub fn linear_scales(&self) -> Vec<f64> {
        self.stages.iter().map(Stage::linear_scale).collect()
    }

    /// Fraction of the input image area covered by each stage's grid.
    pub fn area_scales(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.linear_scale().powi(2)).collect()
    }

    pub fn total_planes(&self) -> usize {
        self.stages.iter().map(|s| s.planes).sum()
    }

    /// Range of stage `k` in input-resolution units. Disparities at a
    /// coarse stage stretch by `1 / scale` at full resolution.
    pub fn full_scale_range(&self, k: usize) -> f64 {
        self.to_full_scale(k, self.stages[k].range)
    }

    pub fn full_scale_interval(&self, k: usize) -> f64 {
        self.to_full_scale(k, self.stages[k].interval)
    }

    fn to_full_scale(&self, k: usize, v: f64) -> f64 {
        match self.mode {
            SweepMode::Depth => v,
            SweepMode::Disparity => v / self.stages[k].linear_scale(),
        }
    }

    /// `w_k = R_{k+1} / R_k`, compared at full resolution.
    pub fn range_factors(&self) -> Vec<f64> {
        (1..self.len())
            .map(|k| self.full_scale_range(k) / self.full_scale_range(k - 1))
            .collect()
    }

    /// `p_k = I_{k+1} / I_k`, compared at full resolution.
    pub fn interval_factors(&self) -> Vec<f64> {
        (1..self.len())
            .map(|k| self.full_scale_interval(k) / self.full_scale_interval(k - 1))
            .collect()
    }

    /// Grid size of every stage for an input of `width x height`.
    pub fn stage_dims(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .map(|s| (width >> s.shift, height >> s.shift))
            .collect()
    }

    /// Analytic cost-volume cell count `W_k * H_k * D_k` per stage.
    pub fn cost_cells(&self, width: usize, height: usize) -> Vec<usize> {
        self.stage_dims(width, height)
            .iter()
            .zip(&self.stages)
            .map(|(&(w, h), s)| w * h * s.planes)
            .collect()
    }

    /// Input dimensions must be divisible by this for exact 2x stage ratios.
    pub fn alignment(&self) -> usize {
        1usize << self.stages.first().map_or(0, |s| s.shift)
    }
}

/// Materializes `I_k = multiplier * base_interval` and `R_k = D_k * I_k` for
/// each stage. Stage resolutions double up to `2^-finest_shift` of the input.
///
/// Fails unless the first stage covers `full_range` (in input-resolution
/// units) and every later stage strictly narrows both range and interval.
pub fn schedule_from_config(
    mode: SweepMode,
    base_interval: f64,
    full_range: f64,
    stage_spec: &[StageSpec],
    finest_shift: u32,
) -> Result<CascadeSchedule> {
    if stage_spec.is_empty() {
        return Err(Error::Config("schedule needs at least one stage".into()));
    }
    if !(full_range > 0.0) || !(base_interval > 0.0) {
        return Err(Error::Config(format!(
            "full range and base interval must be positive (got {full_range}, {base_interval})"
        )));
    }
    let n = stage_spec.len() as u32;
    let stages: Vec<Stage> = stage_spec
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            if spec.planes < 2 {
                return Err(Error::Config(format!("stage {} needs at least 2 planes", k + 1)));
            }
            if !(spec.interval_multiplier > 0.0) {
                return Err(Error::Config(format!(
                    "stage {} interval multiplier must be positive",
                    k + 1
                )));
            }
            let interval = spec.interval_multiplier * base_interval;
            Ok(Stage {
                planes: spec.planes,
                interval,
                range: spec.planes as f64 * interval,
                shift: finest_shift + (n - 1 - k as u32),
            })
        })
        .collect::<Result<_>>()?;
    let schedule = CascadeSchedule {
        mode,
        base_interval,
        full_range,
        stages,
    };
    let covered = schedule.full_scale_range(0);
    if covered < full_range * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "stage-1 hypothesis range {covered} does not cover the full range {full_range}"
        )));
    }
    for (k, (w, p)) in schedule
        .range_factors()
        .iter()
        .zip(schedule.interval_factors())
        .enumerate()
    {
        if !(*w < 1.0) || !(p < 1.0) {
            return Err(Error::Config(format!(
                "stage {} must narrow range and interval (w={w}, p={p})",
                k + 2
            )));
        }
    }
    Ok(schedule)
}

/// Per-pixel hypothesis ladders for one stage: pixel `m` tests
/// `start[m] + j * interval` for `j` in `0..planes`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisField {
    stage: usize,
    width: usize,
    height: usize,
    planes: usize,
    interval: f64,
    starts: Vec<f64>,
    center: Option<Vec<f64>>,
}

impl HypothesisField {
    /// Builds a field from explicit ladder starts.
    pub fn from_starts(
        stage: usize,
        width: usize,
        height: usize,
        planes: usize,
        interval: f64,
        starts: Vec<f64>,
    ) -> Result<Self> {
        if starts.len() != width * height || planes == 0 || !(interval > 0.0) {
            return Err(Error::Dimensions(format!(
                "hypothesis field {width}x{height}x{planes} with {} starts and interval {interval}",
                starts.len()
            )));
        }
        Ok(Self {
            stage,
            width,
            height,
            planes,
            interval,
            starts,
            center: None,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    /// Upsampled previous-stage prediction the ladders were centered on.
    pub fn center(&self) -> Option<&[f64]> {
        self.center.as_deref()
    }

    #[inline]
    pub fn value(&self, pixel: usize, plane: usize) -> f64 {
        self.starts[pixel] + plane as f64 * self.interval
    }

    pub fn min_value(&self, pixel: usize) -> f64 {
        self.starts[pixel]
    }

    pub fn max_value(&self, pixel: usize) -> f64 {
        self.value(pixel, self.planes - 1)
    }

    /// Interval of values the ladder at `pixel` accounts for: each plane
    /// stands for a cell of width `interval`, so the span is `planes * interval`.
    pub fn covered_span(&self, pixel: usize) -> (f64, f64) {
        let half = 0.5 * self.interval;
        (self.min_value(pixel) - half, self.max_value(pixel) + half)
    }

    /// Dense `W x H x D` grid of hypothesis values, planes innermost.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.starts.len() * self.planes);
        for m in 0..self.starts.len() {
            out.extend((0..self.planes).map(|j| self.value(m, j)));
        }
        out
    }
}

/// Identical ladder `min_value + j * I_1` at every pixel.
pub fn stage1_field(schedule: &CascadeSchedule, dims: (usize, usize), min_value: f64) -> Result<HypothesisField> {
    let stage = schedule.stage(0);
    HypothesisField::from_starts(
        0,
        dims.0,
        dims.1,
        stage.planes,
        stage.interval,
        vec![min_value; dims.0 * dims.1],
    )
}

/// Ladders for stage `stage` (0-based, >= 1) centered on the bilinearly
/// upsampled prediction of the previous stage.
///
/// Disparity predictions are rescaled into the new stage's pixel units.
/// Ladders that would dip below the mode's floor are shifted up rigidly so
/// plane count and spacing are preserved. Invalid predictions are replaced by
/// the nearest valid value on the same row before upsampling.
pub fn narrow_field(schedule: &CascadeSchedule, stage: usize, prev: &DepthMap) -> Result<HypothesisField> {
    if stage == 0 || stage >= schedule.len() {
        return Err(Error::Config(format!("cannot narrow into stage index {stage}")));
    }
    let cur = schedule.stage(stage);
    let before = schedule.stage(stage - 1);
    let ratio = 1usize << (before.shift - cur.shift);
    let value_scale = match schedule.mode() {
        SweepMode::Depth => 1.0,
        SweepMode::Disparity => ratio as f64,
    };
    let floor = match schedule.mode() {
        SweepMode::Depth => DEPTH_FLOOR,
        SweepMode::Disparity => 0.0,
    };
    let seeds = fill_invalid_by_row(prev);
    let center = upsample_bilinear(&seeds, prev.width(), prev.height(), ratio);
    let half_span = (cur.planes as f64 - 1.0) / 2.0 * cur.interval;
    let starts: Vec<f64> = center
        .par_iter()
        .map(|&c| (c * value_scale - half_span).max(floor))
        .collect();
    let (w, h) = (prev.width() * ratio, prev.height() * ratio);
    let mut field = HypothesisField::from_starts(stage, w, h, cur.planes, cur.interval, starts)?;
    field.center = Some(center.into_iter().map(|c| c * value_scale).collect());
    Ok(field)
}

/// Copies of the map values where each invalid pixel takes the nearest valid
/// value on its row (the left one on ties). Rows without any valid pixel keep
/// their values.
pub fn fill_invalid_by_row(map: &DepthMap) -> Vec<f64> {
    let w = map.width();
    let mut out = map.values().to_vec();
    for (y, row) in out.chunks_mut(w).enumerate() {
        let valid = |x: usize| map.is_valid(y * w + x);
        let mut left: Option<usize> = None;
        let mut nearest_left = vec![None; w];
        for (x, slot) in nearest_left.iter_mut().enumerate() {
            if valid(x) {
                left = Some(x);
            }
            *slot = left;
        }
        let mut right: Option<usize> = None;
        for x in (0..w).rev() {
            if valid(x) {
                right = Some(x);
                continue;
            }
            let pick = match (nearest_left[x], right) {
                (Some(l), Some(r)) => Some(if x - l <= r - x { l } else { r }),
                (l, r) => l.or(r),
            };
            if let Some(src) = pick {
                row[x] = map.values()[y * w + src];
            }
        }
    }
    out
}

/// Bilinear upsampling by an integer factor with pixel centers at integer
/// coordinates; edges clamp.
pub fn upsample_bilinear(values: &[f64], width: usize, height: usize, factor: usize) -> Vec<f64> {
    let (ow, oh) = (width * factor, height * factor);
    let f = factor as f64;
    let mut out = vec![0.0; ow * oh];
    out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        let sy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = sy - y0 as f64;
        for (x, out) in row.iter_mut().enumerate() {
            let sx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = sx - x0 as f64;
            let top = values[y0 * width + x0] * (1.0 - fx) + values[y0 * width + x1] * fx;
            let bottom = values[y1 * width + x0] * (1.0 - fx) + values[y1 * width + x1] * fx;
            *out = top * (1.0 - fy) + bottom * fy;
        }
    });
    out
}

/// Fraction of valid ground-truth pixels whose value falls inside the
/// ladder's covered span; `None` when no pixel is valid.
pub fn coverage_percentage(field: &HypothesisField, ground_truth: &DepthMap) -> Result<Option<f64>> {
    if field.width != ground_truth.width() || field.height != ground_truth.height() {
        return Err(Error::Dimensions(format!(
            "field {}x{} vs ground truth {}x{}",
            field.width,
            field.height,
            ground_truth.width(),
            ground_truth.height()
        )));
    }
    let mut total = 0usize;
    let mut inside = 0usize;
    for m in 0..field.starts.len() {
        if !ground_truth.is_valid(m) {
            continue;
        }
        total += 1;
        let (lo, hi) = field.covered_span(m);
        let v = ground_truth.values()[m];
        if v >= lo && v <= hi {
            inside += 1;
        }
    }
    Ok((total > 0).then(|| inside as f64 / total as f64))
}
