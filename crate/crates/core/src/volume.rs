//! Cost-volume construction: warp source features onto each hypothesis,
//! fuse views into one matching cost per cell, then aggregate spatially.
//!
//! Volumes store costs (lower is better). Cells whose samples fall outside a
//! source image or behind a source camera are excluded, never zero-filled.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{disparity_map_coordinate, Camera, PixelTransfer};
use crate::hypothesis::HypothesisField;
use crate::pyramid::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMetric {
    /// Per-channel variance across all valid views, averaged over channels.
    Variance,
    /// Mean absolute channel difference; fractional Hamming distance on census bits.
    CensusHamming,
    /// `1 - mean` of per-group cosine similarities.
    GroupwiseCorrelation { groups: usize },
}

impl fmt::Display for CostMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostMetric::Variance => f.write_str("variance"),
            CostMetric::CensusHamming => f.write_str("hamming"),
            CostMetric::GroupwiseCorrelation { .. } => f.write_str("groupwise"),
        }
    }
}

/// Parses the metric kind; the group count comes from a separate setting.
impl FromStr for CostMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(CostMetric::Variance),
            "hamming" | "census" => Ok(CostMetric::CensusHamming),
            "groupwise" | "gwc" => Ok(CostMetric::GroupwiseCorrelation { groups: 1 }),
            other => Err(Error::Config(format!("unknown cost metric '{other}'"))),
        }
    }
}

/// `W x H x D` matching costs, planes innermost, with the ladder that
/// defines each plane's value.
#[derive(Debug, Clone)]
pub struct CostVolume {
    width: usize,
    height: usize,
    planes: usize,
    costs: Vec<f64>,
    valid: Vec<bool>,
    field: HypothesisField,
}

impl CostVolume {
    pub fn new(field: HypothesisField, costs: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let cells = field.width() * field.height() * field.planes();
        if costs.len() != cells || valid.len() != cells {
            return Err(Error::Dimensions(format!(
                "volume needs {cells} cells, got {} costs and {} flags",
                costs.len(),
                valid.len()
            )));
        }
        if costs.iter().zip(&valid).any(|(c, v)| *v && !c.is_finite()) {
            return Err(Error::Dimensions("valid volume cell holds a non-finite cost".into()));
        }
        Ok(Self {
            width: field.width(),
            height: field.height(),
            planes: field.planes(),
            costs,
            valid,
            field,
        })
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

    /// Number of stored cost cells.
    pub fn cells(&self) -> usize {
        self.costs.len()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn field(&self) -> &HypothesisField {
        &self.field
    }

    pub fn into_field(self) -> HypothesisField {
        self.field
    }

    #[inline]
    pub fn cost(&self, pixel: usize, plane: usize) -> f64 {
        self.costs[pixel * self.planes + plane]
    }

    #[inline]
    pub fn is_valid(&self, pixel: usize, plane: usize) -> bool {
        self.valid[pixel * self.planes + plane]
    }

    /// Cost of `pixel` at fractional plane position `pos`, linearly
    /// interpolated between the bracketing planes; `None` outside the ladder
    /// or when a bracketing plane is invalid.
    pub fn interpolated_cost(&self, pixel: usize, pos: f64) -> Option<f64> {
        const SNAP: f64 = 1e-9;
        let last = (self.planes - 1) as f64;
        if !(pos > -SNAP && pos < last + SNAP) {
            return None;
        }
        let pos = pos.clamp(0.0, last);
        let nearest = pos.round();
        let base = pixel * self.planes;
        if (pos - nearest).abs() < SNAP {
            let j = base + nearest as usize;
            return self.valid[j].then(|| self.costs[j]);
        }
        let j0 = pos.floor() as usize;
        let t = pos - j0 as f64;
        let j1 = j0 + 1;
        if !self.valid[base + j0] || !self.valid[base + j1] {
            return None;
        }
        Some(self.costs[base + j0] * (1.0 - t) + self.costs[base + j1] * t)
    }

    pub fn pixel_costs(&self, pixel: usize) -> (&[f64], &[bool]) {
        let r = pixel * self.planes..(pixel + 1) * self.planes;
        (&self.costs[r.clone()], &self.valid[r])
    }
}

/// One warped feature slice with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedSlice {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl WarpedSlice {
    /// A feature map taken as-is, fully valid (the reference view).
    pub fn from_features(f: &FeatureMap) -> Self {
        Self {
            width: f.width(),
            height: f.height(),
            channels: f.channels(),
            data: f.data().to_vec(),
            mask: vec![true; f.width() * f.height()],
        }
    }

    pub fn pixel(&self, m: usize) -> &[f64] {
        &self.data[m * self.channels..(m + 1) * self.channels]
    }
}

/// Per-pixel matching cost slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSlice {
    pub costs: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Samples `src` at the reprojection of every reference pixel onto plane
/// `plane` of `field`. Cameras must already be scaled to the field's grid.
pub fn warp_feature_slice(
    src: &FeatureMap,
    ref_cam: &Camera,
    src_cam: &Camera,
    field: &HypothesisField,
    plane: usize,
) -> WarpedSlice {
    let transfer = PixelTransfer::new(ref_cam, src_cam);
    warp_with(src, field, |x, y, m| {
        transfer
            .transfer(x as f64, y as f64, field.value(m, plane))
            .map(|(u, v, _)| (u, v))
    })
}

/// Rectified-stereo warp: samples `right` at `x - disparity` on the same row.
pub fn warp_disparity_slice(right: &FeatureMap, field: &HypothesisField, plane: usize) -> WarpedSlice {
    warp_with(right, field, |x, y, m| {
        Some((disparity_map_coordinate(x as f64, field.value(m, plane)), y as f64))
    })
}

fn warp_with(
    src: &FeatureMap,
    field: &HypothesisField,
    locate: impl Fn(usize, usize, usize) -> Option<(f64, f64)> + Sync,
) -> WarpedSlice {
    let (w, h, c) = (field.width(), field.height(), src.channels());
    let mut data = vec![0.0; w * h * c];
    let mut mask = vec![false; w * h];
    data.par_chunks_mut(w * c)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, mrow))| {
            for x in 0..w {
                if let Some((u, v)) = locate(x, y, y * w + x) {
                    mrow[x] = src.sample_into(u, v, &mut row[x * c..(x + 1) * c]);
                }
            }
        });
    WarpedSlice {
        width: w,
        height: h,
        channels: c,
        data,
        mask,
    }
}

/// Mean over channels of the population variance across views.
/// `samples` holds one `channels`-long vector per view.
#[inline]
fn variance_of(samples: &[f64], views: usize, channels: usize) -> f64 {
    let inv_v = 1.0 / views as f64;
    let mut total = 0.0;
    for c in 0..channels {
        let mut mean = 0.0;
        for v in 0..views {
            mean += samples[v * channels + c];
        }
        mean *= inv_v;
        let mut var = 0.0;
        for v in 0..views {
            let d = samples[v * channels + c] - mean;
            var += d * d;
        }
        total += var * inv_v;
    }
    total / channels as f64
}

#[inline]
fn hamming_of(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[inline]
fn groupwise_of(a: &[f64], b: &[f64], groups: usize) -> f64 {
    let size = a.len() / groups;
    let mut sum = 0.0;
    for g in 0..groups {
        let (ga, gb) = (&a[g * size..(g + 1) * size], &b[g * size..(g + 1) * size]);
        let dot: f64 = ga.iter().zip(gb).map(|(x, y)| x * y).sum();
        let na: f64 = ga.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = gb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            sum += dot / (na * nb);
        }
    }
    1.0 - sum / groups as f64
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "{channels} feature channels cannot be split into {groups} groups"
        )));
    }
    Ok(())
}

/// Variance cost over warped slices (the reference included as one of them).
/// Pixels with fewer than two valid views are invalid.
pub fn variance_cost(slices: &[WarpedSlice]) -> Result<CostSlice> {
    if slices.len() < 2 {
        return Err(Error::Config("variance cost needs at least two views".into()));
    }
    let (w, h, c) = (slices[0].width, slices[0].height, slices[0].channels);
    if slices.iter().any(|s| s.width != w || s.height != h || s.channels != c) {
        return Err(Error::Dimensions("warped slices differ in shape".into()));
    }
    let mut costs = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    costs
        .par_iter_mut()
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each_init(
            || Vec::with_capacity(slices.len() * c),
            |buf, (m, (cost, ok))| {
                buf.clear();
                for s in slices.iter().filter(|s| s.mask[m]) {
                    buf.extend_from_slice(s.pixel(m));
                }
                let views = buf.len() / c;
                if views >= 2 {
                    *cost = variance_of(buf, views, c);
                    *ok = true;
                }
            },
        );
    Ok(CostSlice { costs, valid })
}

/// Group-wise correlation between the left features and a warped right
/// slice, folded to `1 - mean group correlation`.
pub fn groupwise_correlation_cost(left: &FeatureMap, right: &WarpedSlice, groups: usize) -> Result<CostSlice> {
    check_groups(left.channels(), groups)?;
    pairwise_cost(left, right, |a, b| groupwise_of(a, b, groups))
}

/// Mean absolute channel difference (fractional Hamming on census bits).
pub fn census_hamming_cost(left: &FeatureMap, right: &WarpedSlice) -> Result<CostSlice> {
    pairwise_cost(left, right, hamming_of)
}

fn pairwise_cost(
    left: &FeatureMap,
    right: &WarpedSlice,
    f: impl Fn(&[f64], &[f64]) -> f64 + Sync,
) -> Result<CostSlice> {
    if left.width() != right.width || left.height() != right.height || left.channels() != right.channels {
        return Err(Error::Dimensions("left features and warped slice differ in shape".into()));
    }
    let w = left.width();
    let costs: Vec<f64> = (0..w * left.height())
        .into_par_iter()
        .map(|m| if right.mask[m] { f(left.pixel(m % w, m / w), right.pixel(m)) } else { 0.0 })
        .collect();
    Ok(CostSlice {
        costs,
        valid: right.mask.clone(),
    })
}

/// Multi-view variance volume. Samples for every cell are computed on the
/// fly, so only the cost grid is ever stored.
pub fn build_variance_volume(
    reference: &FeatureMap,
    ref_cam: &Camera,
    sources: &[(&FeatureMap, Camera)],
    field: HypothesisField,
) -> Result<CostVolume> {
    if sources.is_empty() {
        return Err(Error::Config("multi-view volume needs at least one source view".into()));
    }
    let (w, h) = (field.width(), field.height());
    if reference.width() != w || reference.height() != h {
        return Err(Error::Dimensions(format!(
            "reference features {}x{} vs field {w}x{h}",
            reference.width(),
            reference.height()
        )));
    }
    let c = reference.channels();
    if sources.iter().any(|(f, _)| f.channels() != c) {
        return Err(Error::Dimensions("source features differ in channel count".into()));
    }
    let transfers: Vec<PixelTransfer> = sources.iter().map(|(_, cam)| PixelTransfer::new(ref_cam, cam)).collect();
    let d = field.planes();
    let views = sources.len() + 1;
    let mut costs = vec![0.0; w * h * d];
    let mut valid = vec![false; w * h * d];
    costs
        .par_chunks_mut(w * d)
        .zip(valid.par_chunks_mut(w * d))
        .enumerate()
        .for_each(|(y, (crow, vrow))| {
            let mut buf = vec![0.0; views * c];
            for x in 0..w {
                let m = y * w + x;
                for j in 0..d {
                    let depth = field.value(m, j);
                    buf[..c].copy_from_slice(reference.pixel(x, y));
                    let mut n = 1;
                    for ((feat, _), t) in sources.iter().zip(&transfers) {
                        if let Some((u, v, _)) = t.transfer(x as f64, y as f64, depth) {
                            if feat.sample_into(u, v, &mut buf[n * c..(n + 1) * c]) {
                                n += 1;
                            }
                        }
                    }
                    if n >= 2 {
                        crow[x * d + j] = variance_of(&buf, n, c);
                        vrow[x * d + j] = true;
                    }
                }
            }
        });
    CostVolume::new(field, costs, valid)
}

/// Rectified-stereo volume over a disparity field.
pub fn build_stereo_volume(
    left: &FeatureMap,
    right: &FeatureMap,
    field: HypothesisField,
    metric: CostMetric,
) -> Result<CostVolume> {
    let (w, h) = (field.width(), field.height());
    if left.width() != w || left.height() != h || right.width() != w || right.height() != h {
        return Err(Error::Dimensions("stereo features must match the field grid".into()));
    }
    if left.channels() != right.channels() {
        return Err(Error::Dimensions("stereo features differ in channel count".into()));
    }
    let c = left.channels();
    if let CostMetric::GroupwiseCorrelation { groups } = metric {
        check_groups(c, groups)?;
    }
    let d = field.planes();
    let mut costs = vec![0.0; w * h * d];
    let mut valid = vec![false; w * h * d];
    costs
        .par_chunks_mut(w * d)
        .zip(valid.par_chunks_mut(w * d))
        .enumerate()
        .for_each(|(y, (crow, vrow))| {
            let mut buf = vec![0.0; 2 * c];
            for x in 0..w {
                let m = y * w + x;
                let lp = left.pixel(x, y);
                for j in 0..d {
                    let u = disparity_map_coordinate(x as f64, field.value(m, j));
                    if !right.sample_into(u, y as f64, &mut buf[c..]) {
                        continue;
                    }
                    let rp = &buf[c..];
                    crow[x * d + j] = match metric {
                        CostMetric::Variance => {
                            buf[..c].copy_from_slice(lp);
                            variance_of(&buf, 2, c)
                        }
                        CostMetric::CensusHamming => hamming_of(lp, rp),
                        CostMetric::GroupwiseCorrelation { groups } => groupwise_of(lp, rp, groups),
                    };
                    vrow[x * d + j] = true;
                }
            }
        });
    CostVolume::new(field, costs, valid)
}

/// Spatial box filter at equal hypothesis value, followed by an optional
/// forward/backward exponential smoothing along the plane axis:
///
/// `f_j = (c_j + s * f_{j-1}) / (1 + s)`, then `b_j = (f_j + s * b_{j+1}) / (1 + s)`.
///
/// For cell `(m, j)` each neighbor contributes its cost linearly interpolated
/// at `value(m, j)` along its own ladder, when both bracketing planes are
/// valid. With identical ladders this is a plain per-plane box average.
/// Invalid cells keep their flag and never contribute to any average.
pub fn aggregate_cost(volume: &CostVolume, window: usize, depth_smooth: f64) -> Result<CostVolume> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("aggregation window must be odd, got {window}")));
    }
    if !(depth_smooth >= 0.0) {
        return Err(Error::Config(format!("depth smoothing weight must be >= 0, got {depth_smooth}")));
    }
    let (w, h, d) = (volume.width, volume.height, volume.planes);
    let r = (window / 2) as isize;
    let starts = volume.field.starts();
    let interval = volume.field.interval();
    let mut costs = volume.costs.clone();
    if window > 1 {
        costs.par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
            let y = y as isize;
            for x in 0..w as isize {
                let m = (y as usize) * w + x as usize;
                for j in 0..d {
                    if !volume.valid[m * d + j] {
                        continue;
                    }
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                        for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                            let q = yy as usize * w + xx as usize;
                            let pos = j as f64 + (starts[m] - starts[q]) / interval;
                            if let Some(c) = volume.interpolated_cost(q, pos) {
                                sum += c;
                                n += 1;
                            }
                        }
                    }
                    row[x as usize * d + j] = sum / n as f64;
                }
            }
        });
    }
    if depth_smooth > 0.0 {
        let norm = 1.0 / (1.0 + depth_smooth);
        costs
            .par_chunks_mut(d)
            .zip(volume.valid.par_chunks(d))
            .for_each(|(cells, valid)| {
                let mut prev: Option<f64> = None;
                for j in 0..d {
                    if !valid[j] {
                        continue;
                    }
                    let v = match prev {
                        Some(p) => (cells[j] + depth_smooth * p) * norm,
                        None => cells[j],
                    };
                    cells[j] = v;
                    prev = Some(v);
                }
                let mut next: Option<f64> = None;
                for j in (0..d).rev() {
                    if !valid[j] {
                        continue;
                    }
                    let v = match next {
                        Some(p) => (cells[j] + depth_smooth * p) * norm,
                        None => cells[j],
                    };
                    cells[j] = v;
                    next = Some(v);
                }
            });
    }
    CostVolume::new(volume.field.clone(), costs, volume.valid.clone())
}
