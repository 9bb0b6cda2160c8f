//! Error metrics for depth/disparity maps and point clouds, per-stage
//! tables and inlier-percentage curves.
//!
//! Reductions run in a fixed pixel/point order so results do not depend on
//! the thread count.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cascade::CascadeRun;
use crate::error::{Error, Result};
use crate::fusion::PointCloud;
use crate::hypothesis::coverage_percentage;
use crate::regress::{ground_truth_at, DepthMap};

fn check_dims(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Dimensions(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// `|pred - gt|` at every pixel valid in both maps, in raster order.
pub fn abs_errors(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<f64>> {
    check_dims(pred, gt)?;
    Ok((0..pred.values().len())
        .filter(|&m| pred.is_valid(m) && gt.is_valid(m))
        .map(|m| (pred.values()[m] - gt.values()[m]).abs())
        .collect())
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().filter(|&&v| pred(v)).count() as f64 / values.len() as f64)
}

/// End-point error: mean absolute error over commonly valid pixels.
pub fn epe(pred: &DepthMap, gt: &DepthMap) -> Result<Option<f64>> {
    Ok(mean(&abs_errors(pred, gt)?))
}

/// Fraction of commonly valid pixels with error above `threshold`.
pub fn outlier_fraction(pred: &DepthMap, gt: &DepthMap, threshold: f64) -> Result<Option<f64>> {
    Ok(fraction(&abs_errors(pred, gt)?, |e| e > threshold))
}

/// Fraction of pixels whose disparity error exceeds `max(3 px, 5% of truth)`.
pub fn d1(pred: &DepthMap, gt: &DepthMap) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let mut total = 0usize;
    let mut bad = 0usize;
    for m in 0..pred.values().len() {
        if !(pred.is_valid(m) && gt.is_valid(m)) {
            continue;
        }
        let truth = gt.values()[m];
        let err = (pred.values()[m] - truth).abs();
        total += 1;
        if err > f64::max(3.0, 0.05 * truth.abs()) {
            bad += 1;
        }
    }
    Ok((total > 0).then(|| bad as f64 / total as f64))
}

/// Inlier percentage (`error <= t`) for every threshold.
pub fn coverage_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| (t, fraction(errors, |e| e <= t).unwrap_or(0.0)))
        .collect()
}

/// Uniform hash grid for capped nearest-neighbor queries. Cells are a
/// quarter of the cap; queries search shells of cells outward until no
/// closer point can exist, and report the cap when nothing lies within it.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cap: f64,
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

/// Cells per cap length.
const CELLS_PER_CAP: f64 = 4.0;

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>], cap: f64) -> Self {
        let cell = cap / CELLS_PER_CAP;
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self {
            points,
            cap,
            cell,
            buckets,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Distance to the nearest indexed point, capped.
    pub fn nearest_capped(&self, q: &Vector3<f64>) -> f64 {
        let (kx, ky, kz) = Self::key(q, self.cell);
        let mut best = self.cap;
        let max_ring = CELLS_PER_CAP as i64 + 1;
        for r in 0..=max_ring {
            // every point outside the searched block is at least this far
            if best <= (r - 1).max(0) as f64 * self.cell {
                break;
            }
            for dz in -r..=r {
                for dy in -r..=r {
                    let on_face = dz.abs() == r || dy.abs() == r;
                    let step = if on_face { 1 } else { 2 * r.max(1) };
                    let mut dx = -r;
                    while dx <= r {
                        if let Some(ids) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &i in ids {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                        dx += step;
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudScores {
    /// Mean capped distance from predicted points to the reference samples.
    pub accuracy: Option<f64>,
    /// Mean capped distance from reference samples to the prediction.
    pub completeness: Option<f64>,
    /// Mean of accuracy and completeness.
    pub overall: Option<f64>,
}

pub fn cloud_acc_comp(pred: &PointCloud, gt_samples: &PointCloud, dist_cap: f64) -> Result<CloudScores> {
    if !(dist_cap > 0.0) {
        return Err(Error::Config(format!("distance cap must be positive, got {dist_cap}")));
    }
    let directed = |from: &PointCloud, to: &PointCloud| -> Option<f64> {
        if from.is_empty() {
            return None;
        }
        if to.is_empty() {
            return Some(dist_cap);
        }
        let index = GridIndex::new(&to.points, dist_cap);
        let d: Vec<f64> = from.points.par_iter().map(|p| index.nearest_capped(p)).collect();
        mean(&d)
    };
    let accuracy = directed(pred, gt_samples);
    let completeness = directed(gt_samples, pred);
    let overall = match (accuracy, completeness) {
        (Some(a), Some(c)) => Some(0.5 * (a + c)),
        _ => None,
    };
    Ok(CloudScores {
        accuracy,
        completeness,
        overall,
    })
}

/// One row of the per-stage table.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: usize,
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    /// Plane interval in input-resolution units.
    pub interval: f64,
    /// Mean absolute error in input-resolution units.
    pub error: Option<f64>,
    /// Fraction of ground truth inside the stage ladders (stages after the first).
    pub coverage: Option<f64>,
    pub cost_cells: usize,
    pub time_ms: f64,
}

/// Per-stage statistics of a run against a full-resolution ground truth
/// (depth in scene units, or disparity in full-resolution pixels).
pub fn stage_table(run: &CascadeRun, gt: &DepthMap) -> Result<Vec<StageRow>> {
    let schedule = run.schedule();
    run.stages()
        .iter()
        .enumerate()
        .map(|(k, stage)| {
            let map = run.full_scale_map(k);
            let gt_k = ground_truth_at(gt, map.width(), map.height())?;
            let error = epe(&map, &gt_k)?;
            let coverage = if k == 0 {
                None
            } else {
                let unit = run.value_scale(k);
                coverage_percentage(&stage.field, &gt_k.scaled_values(unit))?
            };
            Ok(StageRow {
                stage: k + 1,
                width: stage.depth_map.width(),
                height: stage.depth_map.height(),
                planes: schedule.stage(k).planes,
                interval: schedule.full_scale_interval(k),
                error,
                coverage,
                cost_cells: stage.cost_cells,
                time_ms: stage.timings.total_ms(),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

/// Stage table as CSV. Timings are left out so files stay reproducible.
pub fn write_stage_table_csv(rows: &[StageRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "stage,width,height,planes,interval,error,coverage,cost_cells")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.stage,
            r.width,
            r.height,
            r.planes,
            r.interval,
            opt(r.error),
            opt(r.coverage),
            r.cost_cells
        )?;
    }
    Ok(())
}

pub fn write_coverage_csv(curve: &[(f64, f64)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "threshold,inlier_fraction")?;
    for (t, f) in curve {
        writeln!(out, "{t},{f}")?;
    }
    Ok(())
}

/// Summary error metrics for one map pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapScores {
    pub epe: Option<f64>,
    pub over_1: Option<f64>,
    pub over_2: Option<f64>,
    pub over_3: Option<f64>,
    pub d1: Option<f64>,
    pub pixels: usize,
}

pub fn map_scores(pred: &DepthMap, gt: &DepthMap) -> Result<MapScores> {
    let errs = abs_errors(pred, gt)?;
    Ok(MapScores {
        epe: mean(&errs),
        over_1: fraction(&errs, |e| e > 1.0),
        over_2: fraction(&errs, |e| e > 2.0),
        over_3: fraction(&errs, |e| e > 3.0),
        d1: d1(pred, gt)?,
        pixels: errs.len(),
    })
}

pub fn write_map_scores_csv(scores: &MapScores, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epe,over_1px,over_2px,over_3px,d1,pixels")?;
    writeln!(
        out,
        "{},{},{},{},{},{}",
        opt(scores.epe),
        opt(scores.over_1),
        opt(scores.over_2),
        opt(scores.over_3),
        opt(scores.d1),
        scores.pixels
    )
}

pub fn write_cloud_scores_csv(scores: &CloudScores, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "accuracy,completeness,overall")?;
    writeln!(
        out,
        "{},{},{}",
        opt(scores.accuracy),
        opt(scores.completeness),
        opt(scores.overall)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(w: usize, h: usize, v: Vec<f64>) -> DepthMap {
        DepthMap::from_values(w, h, v).unwrap()
    }

    #[test]
    fn epe_basic() {
        let gt = map(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(epe(&gt, &gt).unwrap(), Some(0.0));
        let off = map(3, 2, gt.values().iter().map(|v| v + 0.25).collect());
        assert!((epe(&off, &gt).unwrap().unwrap() - 0.25).abs() < 1e-12);
        assert!(epe(&map(2, 2, vec![0.0; 4]), &gt).is_err());
    }

    #[test]
    fn metrics_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 400;
        let gt_v: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..120.0)).collect();
        let pred_v: Vec<f64> = gt_v.iter().map(|v| v + rng.random_range(-8.0..8.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
        valid[0] = true;
        let gt = map(20, 20, gt_v.clone()).with_mask(valid.clone()).unwrap();
        let pred = map(20, 20, pred_v.clone());
        let (mut s, mut c, mut o, mut d) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let e = (pred_v[i] - gt_v[i]).abs();
            s += e;
            c += 1.0;
            if e > 2.0 {
                o += 1.0;
            }
            if e > 3.0f64.max(0.05 * gt_v[i]) {
                d += 1.0;
            }
        }
        assert!((epe(&pred, &gt).unwrap().unwrap() - s / c).abs() < 1e-9);
        assert!((outlier_fraction(&pred, &gt, 2.0).unwrap().unwrap() - o / c).abs() < 1e-9);
        assert!((d1(&pred, &gt).unwrap().unwrap() - d / c).abs() < 1e-9);
    }

    #[test]
    fn outlier_extremes() {
        let gt = map(2, 2, vec![5.0; 4]);
        assert_eq!(outlier_fraction(&gt, &gt, 1.0).unwrap(), Some(0.0));
        let far = map(2, 2, vec![7.0; 4]);
        assert_eq!(outlier_fraction(&far, &gt, 1.0).unwrap(), Some(1.0));
    }

    #[test]
    fn d1_threshold_arithmetic() {
        let gt = map(2, 1, vec![100.0, 100.0]);
        let pred = map(2, 1, vec![104.0, 104.0]);
        assert_eq!(d1(&pred, &gt).unwrap(), Some(0.0));
        let gt = map(2, 1, vec![40.0, 40.0]);
        let pred = map(2, 1, vec![44.0, 44.0]);
        assert_eq!(d1(&pred, &gt).unwrap(), Some(1.0));
    }

    #[test]
    fn coverage_curve_cases() {
        let zero = vec![0.0; 10];
        for (_, f) in coverage_curve(&zero, &[0.0, 0.5, 3.0]) {
            assert_eq!(f, 1.0);
        }
        // evenly spread errors on [0, R] give a linear curve
        let r = 10.0;
        let errs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0 * r).collect();
        for (t, f) in coverage_curve(&errs, &[1.0, 2.5, 5.0, 9.0]) {
            assert!((f - t / r).abs() < 1e-3);
        }
    }

    fn plane_cloud(step: f64, n: usize, z: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Vector3::new(i as f64 * step, j as f64 * step, z));
            }
        }
        PointCloud::from_points(pts)
    }

    #[test]
    fn cloud_scores() {
        let a = plane_cloud(0.1, 30, 0.0);
        let s = cloud_acc_comp(&a, &a, 1.0).unwrap();
        assert_eq!((s.accuracy, s.completeness, s.overall), (Some(0.0), Some(0.0), Some(0.0)));

        let shifted = plane_cloud(0.1, 30, 0.05);
        let s = cloud_acc_comp(&shifted, &a, 1.0).unwrap();
        assert!((s.accuracy.unwrap() - 0.05).abs() < 1e-12);
        assert!((s.completeness.unwrap() - 0.05).abs() < 1e-12);

        let empty = PointCloud::default();
        let s = cloud_acc_comp(&empty, &a, 2.0).unwrap();
        assert_eq!(s.accuracy, None);
        assert_eq!(s.completeness, Some(2.0));
        assert_eq!(s.overall, None);
    }

    #[test]
    fn grid_index_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)))
            .collect();
        let idx = GridIndex::new(&pts, 0.7);
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-1.0..6.0), rng.random_range(-1.0..6.0), rng.random_range(-1.0..6.0));
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min).min(0.7);
            assert!((idx.nearest_capped(&q) - brute).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn outlier_fraction_monotone(errs in prop::collection::vec(0.0f64..10.0, 1..50), t in 0.0f64..10.0, dt in 0.0f64..5.0) {
            let n = errs.len();
            let gt = map(n, 1, vec![0.0; n]);
            let pred = map(n, 1, errs);
            let a = outlier_fraction(&pred, &gt, t).unwrap().unwrap();
            let b = outlier_fraction(&pred, &gt, t + dt).unwrap().unwrap();
            prop_assert!(b <= a);
        }

        #[test]
        fn epe_permutation_invariant(errs in prop::collection::vec(-5.0f64..5.0, 2..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let n = errs.len();
            let gt = map(n, 1, vec![1.0; n]);
            let pred = map(n, 1, errs.iter().map(|e| 1.0 + e).collect());
            let mut shuffled = errs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pred2 = map(n, 1, shuffled.iter().map(|e| 1.0 + e).collect());
            let a = epe(&pred, &gt).unwrap().unwrap();
            let b = epe(&pred2, &gt).unwrap().unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
