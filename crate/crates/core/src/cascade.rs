//! Coarse-to-fine driver for multi-view depth and rectified-stereo disparity.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::hypothesis::{narrow_field, stage1_field, CascadeSchedule, HypothesisField, SweepMode};
use crate::image::GrayImage;
use crate::pyramid::{build_prefiltered_pyramid, Descriptor, FeaturePyramid};
use crate::regress::{soft_argmin_with, stage_loss, CostNormalization, DepthMap, RegressionOptions, StageLoss};
use crate::volume::{aggregate_cost, build_stereo_volume, build_variance_volume, CostMetric, CostVolume};

/// An image with its full-resolution camera.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: GrayImage,
    pub camera: Camera,
}

/// A setting with one value per stage; stages past the end of the list reuse
/// the last value.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStage<T>(Vec<T>);

impl<T: Copy> PerStage<T> {
    pub fn uniform(value: T) -> Self {
        Self(vec![value])
    }

    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("per-stage setting needs at least one value".into()));
        }
        Ok(Self(values))
    }

    pub fn get(&self, stage: usize) -> T {
        self.0[stage.min(self.0.len() - 1)]
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }
}

impl<T: std::fmt::Display> std::fmt::Display for PerStage<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOptions {
    pub descriptor: Descriptor,
    pub cost: CostMetric,
    /// Odd spatial window for cost aggregation (1 disables it).
    pub aggregation_window: PerStage<usize>,
    /// Smoothing weight along the hypothesis axis (0 disables it).
    pub depth_smooth: f64,
    /// Softmax temperature of the regression.
    pub temperature: PerStage<f64>,
    pub normalization: CostNormalization,
    /// Gaussian blur applied to each level before its descriptor, as a
    /// standard deviation in that level's pixels (0 disables it).
    pub prefilter: PerStage<f64>,
}

impl CascadeOptions {
    pub fn regression(&self, stage: usize) -> RegressionOptions {
        RegressionOptions {
            temperature: self.temperature.get(stage),
            normalization: self.normalization,
        }
    }

    fn prefilter_sigmas(&self, stages: usize) -> Vec<f64> {
        (0..stages).map(|k| self.prefilter.get(k)).collect()
    }
}

impl Default for CascadeOptions {
    fn default() -> Self {
        let regression = RegressionOptions::default();
        Self {
            descriptor: Descriptor::ZnccPatch { window: 5 },
            cost: CostMetric::Variance,
            aggregation_window: PerStage::uniform(3),
            depth_smooth: 0.0,
            temperature: PerStage::uniform(regression.temperature),
            normalization: regression.normalization,
            prefilter: PerStage::uniform(0.0),
        }
    }
}

/// Wall-clock time per phase of one stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub volume_ms: f64,
    pub aggregate_ms: f64,
    pub regress_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.volume_ms + self.aggregate_ms + self.regress_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    /// 0-based stage index.
    pub stage: usize,
    /// Prediction in stage units (scene depth, or disparity in stage pixels).
    pub depth_map: DepthMap,
    pub field: HypothesisField,
    pub timings: StageTimings,
    /// Cells stored in this stage's cost volume.
    pub cost_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRun {
    stages: Vec<StageResult>,
    schedule: CascadeSchedule,
    options: CascadeOptions,
    input_dims: (usize, usize),
    pyramid_ms: f64,
}

impl CascadeRun {
    pub fn stages(&self) -> &[StageResult] {
        &self.stages
    }

    pub fn schedule(&self) -> &CascadeSchedule {
        &self.schedule
    }

    pub fn options(&self) -> &CascadeOptions {
        &self.options
    }

    /// Processed input size (the input cropped to the schedule alignment).
    pub fn input_dims(&self) -> (usize, usize) {
        self.input_dims
    }

    pub fn pyramid_ms(&self) -> f64 {
        self.pyramid_ms
    }

    /// Last-stage prediction in stage units.
    pub fn final_map(&self) -> &DepthMap {
        &self.stages.last().expect("runs have at least one stage").depth_map
    }

    /// Factor taking input-resolution units to stage-`k` units.
    pub fn value_scale(&self, k: usize) -> f64 {
        match self.schedule.mode() {
            SweepMode::Depth => 1.0,
            SweepMode::Disparity => self.schedule.stage(k).linear_scale(),
        }
    }

    /// Stage-`k` prediction in input-resolution units (disparities rescaled
    /// to full-resolution pixels), still on the stage grid.
    pub fn full_scale_map(&self, k: usize) -> DepthMap {
        let map = &self.stages[k].depth_map;
        match self.schedule.mode() {
            SweepMode::Depth => map.clone(),
            SweepMode::Disparity => map.scaled_values(1.0 / self.value_scale(k)),
        }
    }

    pub fn total_cost_cells(&self) -> usize {
        self.stages.iter().map(|s| s.cost_cells).sum()
    }

    /// Weighted multi-stage error against a full-resolution ground truth.
    pub fn loss(&self, ground_truth: &DepthMap, weights: &[f64]) -> Result<StageLoss> {
        let maps: Vec<DepthMap> = (0..self.stages.len()).map(|k| self.full_scale_map(k)).collect();
        stage_loss(&maps, ground_truth, weights)
    }
}

fn validate_options(options: &CascadeOptions) -> Result<()> {
    if let Some(w) = options.aggregation_window.values().iter().find(|&&w| w % 2 == 0) {
        return Err(Error::Config(format!("aggregation window must be odd, got {w}")));
    }
    if let Some(t) = options.temperature.values().iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    if let Some(s) = options.prefilter.values().iter().find(|&&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("prefilter width must be >= 0, got {s}")));
    }
    Ok(())
}

fn aligned_dims(width: usize, height: usize, schedule: &CascadeSchedule) -> Result<(usize, usize)> {
    let a = schedule.alignment();
    let dims = (width - width % a, height - height % a);
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::Dimensions(format!(
            "image {width}x{height} is smaller than the {a}-pixel stage alignment"
        )));
    }
    if dims != (width, height) {
        log::info!("cropping {width}x{height} input to {}x{}", dims.0, dims.1);
    }
    Ok(dims)
}

fn pyramid_for(image: &GrayImage, dims: (usize, usize), schedule: &CascadeSchedule, options: &CascadeOptions) -> Result<FeaturePyramid> {
    build_prefiltered_pyramid(
        &image.crop(dims.0, dims.1),
        &schedule.shifts(),
        options.descriptor,
        &options.prefilter_sigmas(schedule.len()),
    )
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs every stage: ladder construction, volume, aggregation, regression.
fn run_stages(
    schedule: &CascadeSchedule,
    options: &CascadeOptions,
    dims: (usize, usize),
    min_value: f64,
    mut build: impl FnMut(usize, HypothesisField) -> Result<CostVolume>,
) -> Result<Vec<StageResult>> {
    let stage_dims = schedule.stage_dims(dims.0, dims.1);
    let mut stages: Vec<StageResult> = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let field = match stages.last() {
            None => stage1_field(schedule, stage_dims[0], min_value)?,
            Some(prev) => narrow_field(schedule, k, &prev.depth_map)?,
        };
        let t = Instant::now();
        let volume = build(k, field)?;
        let volume_ms = ms_since(t);
        let t = Instant::now();
        let aggregated = aggregate_cost(&volume, options.aggregation_window.get(k), options.depth_smooth)?;
        let aggregate_ms = ms_since(t);
        let t = Instant::now();
        let depth_map = soft_argmin_with(&aggregated, &options.regression(k))?;
        let regress_ms = ms_since(t);
        log::debug!(
            "stage {}: {}x{}x{} in {:.1} ms",
            k + 1,
            volume.width(),
            volume.height(),
            volume.planes(),
            volume_ms + aggregate_ms + regress_ms
        );
        stages.push(StageResult {
            stage: k,
            cost_cells: volume.cells(),
            depth_map,
            field: aggregated.into_field(),
            timings: StageTimings {
                volume_ms,
                aggregate_ms,
                regress_ms,
            },
        });
    }
    Ok(stages)
}

/// Multi-view depth for `reference` against `sources`. The first ladder
/// starts at the reference camera's `depth_min`.
pub fn run_mvs(reference: &View, sources: &[View], schedule: &CascadeSchedule, options: &CascadeOptions) -> Result<CascadeRun> {
    if schedule.mode() != SweepMode::Depth {
        return Err(Error::Config("multi-view runs need a depth schedule".into()));
    }
    if sources.is_empty() {
        return Err(Error::Config("multi-view runs need at least one source view".into()));
    }
    if options.cost != CostMetric::Variance {
        return Err(Error::Config(format!(
            "multi-view runs use the variance cost, got {}",
            options.cost
        )));
    }
    validate_options(options)?;
    let (w, h) = (reference.image.width(), reference.image.height());
    if sources.iter().any(|v| v.image.width() != w || v.image.height() != h) {
        return Err(Error::Dimensions("all views must share the reference image size".into()));
    }
    let dims = aligned_dims(w, h, schedule)?;
    let t = Instant::now();
    let ref_pyr = pyramid_for(&reference.image, dims, schedule, options)?;
    let src_pyrs = sources
        .iter()
        .map(|v| pyramid_for(&v.image, dims, schedule, options))
        .collect::<Result<Vec<_>>>()?;
    let pyramid_ms = ms_since(t);
    let stages = run_stages(schedule, options, dims, reference.camera.depth_min, |k, field| {
        let scale = schedule.stage(k).linear_scale();
        let ref_cam = reference.camera.scaled(scale);
        let src: Vec<_> = sources
            .iter()
            .zip(&src_pyrs)
            .map(|(v, p)| (p.level(k), v.camera.scaled(scale)))
            .collect();
        build_variance_volume(ref_pyr.level(k), &ref_cam, &src, field)
    })?;
    Ok(CascadeRun {
        stages,
        schedule: schedule.clone(),
        options: options.clone(),
        input_dims: dims,
        pyramid_ms,
    })
}

/// Rectified-stereo disparity of `left` against `right`.
pub fn run_stereo(left: &GrayImage, right: &GrayImage, schedule: &CascadeSchedule, options: &CascadeOptions) -> Result<CascadeRun> {
    if schedule.mode() != SweepMode::Disparity {
        return Err(Error::Config("stereo runs need a disparity schedule".into()));
    }
    validate_options(options)?;
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::Dimensions(format!(
            "left {}x{} and right {}x{} differ",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    let dims = aligned_dims(left.width(), left.height(), schedule)?;
    let t = Instant::now();
    let lp = pyramid_for(left, dims, schedule, options)?;
    let rp = pyramid_for(right, dims, schedule, options)?;
    let pyramid_ms = ms_since(t);
    let stages = run_stages(schedule, options, dims, 0.0, |k, field| {
        build_stereo_volume(lp.level(k), rp.level(k), field, options.cost)
    })?;
    Ok(CascadeRun {
        stages,
        schedule: schedule.clone(),
        options: options.clone(),
        input_dims: dims,
        pyramid_ms,
    })
}
