//! Flat `key = value` configuration files. `#` starts a comment; unknown
//! keys are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::{CascadeOptions, PerStage};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::hypothesis::{schedule_from_config, CascadeSchedule, StageSpec, SweepMode};
use crate::pyramid::Descriptor;
use crate::regress::{CostNormalization, RegressionOptions};

fn per_stage<T: FromStr + Copy>(kv: &mut KeyValues, key: &str, default: T) -> Result<PerStage<T>> {
    match kv.list(key)? {
        None => Ok(PerStage::uniform(default)),
        Some(values) => PerStage::new(values).map_err(|e| Error::parse(kv.path(), kv.line_of(key), e.to_string())),
    }
}
use crate::volume::CostMetric;

/// Parsed `key = value` pairs with their line numbers. Keys may repeat only
/// when declared repeatable.
#[derive(Debug, Clone)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, Vec<(usize, String)>>,
    used: BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str, repeatable: &[&str]) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, n, format!("expected 'key = value', found '{line}'")))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(Error::parse(path, n, "empty key"));
            }
            let slot = entries.entry(key.clone()).or_default();
            if !slot.is_empty() && !repeatable.contains(&key.as_str()) {
                return Err(Error::parse(path, n, format!("duplicate key '{key}' (first on line {})", slot[0].0)));
            }
            slot.push((n, value));
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
            used: BTreeSet::new(),
        })
    }

    pub fn load(path: &Path, repeatable: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text, repeatable)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.used.insert(key.to_string());
        self.entries.get(key).map(|v| v[0].clone())
    }

    /// Every value of a repeatable key, in file order.
    pub fn all(&mut self, key: &str) -> Vec<(usize, String)> {
        self.used.insert(key.to_string());
        self.entries.get(key).cloned().unwrap_or_default()
    }

    pub fn parse_value<T: FromStr>(&self, line: usize, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::parse(&self.path, line, format!("invalid value '{value}' for '{key}'")))
    }

    pub fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((n, v)) => self.parse_value(n, key, &v).map(Some),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.optional(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.optional(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing required key '{key}'", self.path.display())))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((n, v)) => v
                .split(',')
                .map(|item| self.parse_value(n, key, item.trim()))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Line number of `key`, or 0 when absent.
    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |v| v[0].0)
    }

    /// Fails on the first key that no accessor asked for.
    pub fn finish(&self) -> Result<()> {
        for (key, values) in &self.entries {
            if !self.used.contains(key) {
                return Err(Error::parse(&self.path, values[0].0, format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }
}

/// Everything a multi-view or stereo run needs besides its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: SweepMode,
    pub stages: Vec<StageSpec>,
    /// Downsampling steps of the last stage (0 = input resolution).
    pub finest_shift: u32,
    /// Base plane interval; multi-view runs default to the camera's interval.
    pub base_interval: Option<f64>,
    /// Span the first stage must cover, in base intervals.
    pub full_range: f64,
    pub options: CascadeOptions,
    pub fusion: FusionParams,
    pub loss_weights: Vec<f64>,
    /// Nearest-neighbor cap for cloud metrics, in finest-stage intervals.
    pub cloud_distance_cap: f64,
}

fn parse_stage(item: &str) -> Option<StageSpec> {
    let (d, m) = item.trim().split_once(['x', 'X'])?;
    Some(StageSpec::new(d.trim().parse().ok()?, m.trim().parse().ok()?))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path, &[])?)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(path, text, &[])?)
    }

    fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mode = match kv.required::<String>("mode")?.as_str() {
            "mvs" => SweepMode::Depth,
            "stereo" => SweepMode::Disparity,
            other => {
                return Err(Error::parse(kv.path(), kv.line_of("mode"), format!("mode must be mvs or stereo, got '{other}'")))
            }
        };
        let stages_line = kv.line_of("stages");
        let stages_text: String = kv.required("stages")?;
        let stages = stages_text
            .split(',')
            .map(|s| {
                parse_stage(s).ok_or_else(|| {
                    Error::parse(kv.path(), stages_line, format!("stage '{}' is not PLANESxMULTIPLIER", s.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let finest_shift = kv.get_or("finest_shift", 0u32)?;
        let base_interval: Option<f64> = kv.optional("base_interval")?;
        if mode == SweepMode::Disparity && base_interval.is_none() {
            return Err(Error::Config(format!(
                "{}: stereo configs need 'base_interval' (pixels)",
                kv.path().display()
            )));
        }
        let full_range = kv.get_or("full_range", 192.0)?;

        let default_descriptor = match mode {
            SweepMode::Depth => "zncc",
            SweepMode::Disparity => "census",
        };
        let window = kv.get_or("descriptor_window", 5usize)?;
        let descriptor = match kv.get_or("descriptor", default_descriptor.to_string())?.as_str() {
            "census" => Descriptor::Census { window },
            "zncc" | "zncc-patch" => Descriptor::ZnccPatch { window },
            "intensity" => Descriptor::Intensity,
            other => {
                return Err(Error::parse(kv.path(), kv.line_of("descriptor"), format!("unknown descriptor '{other}'")))
            }
        };
        let default_cost = match mode {
            SweepMode::Depth => "variance",
            SweepMode::Disparity => "hamming",
        };
        let groups = kv.get_or("groups", 4usize)?;
        let cost = match kv.get_or("cost", default_cost.to_string())?.as_str() {
            "groupwise" | "gwc" => CostMetric::GroupwiseCorrelation { groups },
            other => CostMetric::from_str(other)
                .map_err(|_| Error::parse(kv.path(), kv.line_of("cost"), format!("unknown cost '{other}'")))?,
        };
        let regression = RegressionOptions::default();
        let default_norm = match regression.normalization {
            CostNormalization::None => "none",
            CostNormalization::Median => "median",
        };
        let normalization = match kv.get_or("normalization", default_norm.to_string())?.as_str() {
            "none" => CostNormalization::None,
            "median" => CostNormalization::Median,
            other => {
                return Err(Error::parse(kv.path(), kv.line_of("normalization"), format!("unknown normalization '{other}'")))
            }
        };
        let defaults = CascadeOptions::default();
        let options = CascadeOptions {
            descriptor,
            cost,
            aggregation_window: per_stage(&mut kv, "aggregation_window", defaults.aggregation_window.get(0))?,
            depth_smooth: kv.get_or("depth_smooth", defaults.depth_smooth)?,
            temperature: per_stage(&mut kv, "temperature", regression.temperature)?,
            normalization,
            prefilter: per_stage(&mut kv, "prefilter", defaults.prefilter.get(0))?,
        };
        let check = |key: &str, n: usize, kv: &KeyValues| -> Result<()> {
            if n > stages.len() {
                return Err(Error::parse(kv.path(), kv.line_of(key), format!("{n} values for {} stages", stages.len())));
            }
            Ok(())
        };
        check("aggregation_window", options.aggregation_window.values().len(), &kv)?;
        check("temperature", options.temperature.values().len(), &kv)?;
        check("prefilter", options.prefilter.values().len(), &kv)?;
        let defaults = FusionParams::default();
        let fusion = FusionParams {
            photometric_threshold: kv.get_or("photometric_threshold", defaults.photometric_threshold)?,
            pixel_threshold: kv.get_or("geometric_pixel_threshold", defaults.pixel_threshold)?,
            relative_threshold: kv.get_or("geometric_relative_threshold", defaults.relative_threshold)?,
            min_views: kv.get_or("min_views", defaults.min_views)?,
        };
        fusion
            .validate()
            .map_err(|e| Error::Config(format!("{}: {e}", kv.path().display())))?;
        let loss_weights = kv.list("loss_weights")?.unwrap_or_else(|| vec![1.0; stages.len()]);
        if loss_weights.len() != stages.len() {
            return Err(Error::parse(
                kv.path(),
                kv.line_of("loss_weights"),
                format!("{} loss weights for {} stages", loss_weights.len(), stages.len()),
            ));
        }
        let cloud_distance_cap = kv.get_or("cloud_distance_cap", 20.0)?;
        kv.finish()?;
        let config = Self {
            mode,
            stages,
            finest_shift,
            base_interval,
            full_range,
            options,
            fusion,
            loss_weights,
            cloud_distance_cap,
        };
        // catch schedule errors at load time
        config.schedule(config.base_interval.unwrap_or(1.0))?;
        Ok(config)
    }

    /// Materializes the schedule; `camera_interval` is used when the config
    /// leaves the base interval open.
    pub fn schedule(&self, camera_interval: f64) -> Result<CascadeSchedule> {
        let base = self.base_interval.unwrap_or(camera_interval);
        schedule_from_config(self.mode, base, self.full_range * base, &self.stages, self.finest_shift)
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            SweepMode::Depth => "mvs",
            SweepMode::Disparity => "stereo",
        };
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}x{}", s.planes, s.interval_multiplier))
            .collect();
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "stages = {}", stages.join(", "));
        let _ = writeln!(s, "finest_shift = {}", self.finest_shift);
        if let Some(b) = self.base_interval {
            let _ = writeln!(s, "base_interval = {b}");
        }
        let _ = writeln!(s, "full_range = {}", self.full_range);
        let o = &self.options;
        let _ = writeln!(s, "descriptor = {}", o.descriptor);
        let _ = writeln!(s, "descriptor_window = {}", o.descriptor.window().max(3));
        match o.cost {
            CostMetric::GroupwiseCorrelation { groups } => {
                let _ = writeln!(s, "cost = groupwise");
                let _ = writeln!(s, "groups = {groups}");
            }
            other => {
                let _ = writeln!(s, "cost = {other}");
            }
        }
        let _ = writeln!(s, "aggregation_window = {}", o.aggregation_window);
        let _ = writeln!(s, "depth_smooth = {}", o.depth_smooth);
        let _ = writeln!(s, "temperature = {}", o.temperature);
        let _ = writeln!(s, "prefilter = {}", o.prefilter);
        let norm = match o.normalization {
            CostNormalization::None => "none",
            CostNormalization::Median => "median",
        };
        let _ = writeln!(s, "normalization = {norm}");
        let f = &self.fusion;
        let _ = writeln!(s, "photometric_threshold = {}", f.photometric_threshold);
        let _ = writeln!(s, "geometric_pixel_threshold = {}", f.pixel_threshold);
        let _ = writeln!(s, "geometric_relative_threshold = {}", f.relative_threshold);
        let _ = writeln!(s, "min_views = {}", f.min_views);
        let w: Vec<String> = self.loss_weights.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "loss_weights = {}", w.join(", "));
        let _ = writeln!(s, "cloud_distance_cap = {}", self.cloud_distance_cap);
        s
    }
}
