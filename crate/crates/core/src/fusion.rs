//! Depth-map filtering and fusion into a point cloud.
//!
//! A pixel is consistent with a source view when its back-projection lands
//! inside the source map, the source depth read there (bilinear, all four
//! taps valid) re-projects to within `pixel_threshold` of the original pixel,
//! and the re-projected depth differs by less than `relative_threshold`.

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{bilinear_cell, GrayImage};
use crate::regress::DepthMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            colors: None,
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidGeometry("point cloud has non-finite coordinates".into()));
        }
        let n = self.points.len();
        if self.colors.as_ref().is_some_and(|c| c.len() != n) || self.normals.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::Dimensions("point attributes differ in length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub photometric_threshold: f64,
    pub pixel_threshold: f64,
    pub relative_threshold: f64,
    pub min_views: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            photometric_threshold: 0.3,
            pixel_threshold: 1.0,
            relative_threshold: 0.01,
            min_views: 2,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_threshold > 0.0) || !(self.relative_threshold > 0.0) {
            return Err(Error::Config("consistency thresholds must be positive".into()));
        }
        if self.min_views == 0 {
            return Err(Error::Config("min_views must be at least 1".into()));
        }
        if !self.photometric_threshold.is_finite() {
            return Err(Error::Config("photometric threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Invalidates pixels with confidence below `threshold`, clamped to `[0, 1]`.
pub fn filter_photometric(map: &DepthMap, threshold: f64) -> DepthMap {
    let t = threshold.clamp(0.0, 1.0);
    let valid = map
        .valid_mask()
        .iter()
        .zip(map.confidence())
        .map(|(&ok, &c)| ok && c >= t)
        .collect();
    map.with_mask(valid).expect("mask has the map's size")
}

/// Bilinear depth lookup that needs all four taps valid.
fn sample_depth(map: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (map.width(), map.height());
    let (x0, y0, fx, fy) = bilinear_cell(u, v, w, h)?;
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    let mut d = 0.0;
    for (x, y, wt) in taps {
        d += wt * map.get(x, y)?;
    }
    Some(d)
}

/// Result of a successful round-trip check against one source view.
struct Match {
    world: Vector3<f64>,
    source_pixel: (f64, f64),
}

fn check_pair(
    cam: &Camera,
    pixel: (usize, usize),
    depth: f64,
    src_cam: &Camera,
    src_map: &DepthMap,
    params: &FusionParams,
) -> Option<Match> {
    let p = Point2::new(pixel.0 as f64, pixel.1 as f64);
    let world = cam.backproject(p, depth);
    let (q, _) = src_cam.project(&world)?;
    let src_depth = sample_depth(src_map, q.x, q.y)?;
    let back = src_cam.backproject(q, src_depth);
    let (r, z) = cam.project(&back)?;
    let reproj = (r - p).norm();
    if reproj < params.pixel_threshold && (z - depth).abs() / depth < params.relative_threshold {
        Some(Match {
            world: back,
            source_pixel: (q.x, q.y),
        })
    } else {
        None
    }
}

fn check_inputs(maps: &[DepthMap], cameras: &[Camera]) -> Result<()> {
    if maps.len() != cameras.len() {
        return Err(Error::Dimensions(format!("{} depth maps for {} cameras", maps.len(), cameras.len())));
    }
    Ok(())
}

/// Keeps pixels that are consistent with at least `min_views` other views.
pub fn filter_geometric(maps: &[DepthMap], cameras: &[Camera], params: &FusionParams) -> Result<Vec<DepthMap>> {
    params.validate()?;
    check_inputs(maps, cameras)?;
    maps.par_iter()
        .enumerate()
        .map(|(i, map)| {
            let w = map.width();
            let valid: Vec<bool> = (0..w * map.height())
                .into_par_iter()
                .map(|m| {
                    if !map.is_valid(m) {
                        return false;
                    }
                    let d = map.values()[m];
                    let mut support = 0;
                    for j in (0..maps.len()).filter(|&j| j != i) {
                        if check_pair(&cameras[i], (m % w, m / w), d, &cameras[j], &maps[j], params).is_some() {
                            support += 1;
                            if support >= params.min_views {
                                return true;
                            }
                        }
                    }
                    false
                })
                .collect();
            map.with_mask(valid)
        })
        .collect()
}

fn gray_to_rgb(v: f64) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Back-projects every valid pixel, averaging it with the consistent samples
/// of the other views. Views are visited in index order; a pixel matched by
/// an earlier view is claimed and not emitted again.
///
/// `images` may be empty (no colors) or hold one image per map.
pub fn fuse(maps: &[DepthMap], cameras: &[Camera], images: &[GrayImage], params: &FusionParams) -> Result<PointCloud> {
    params.validate()?;
    check_inputs(maps, cameras)?;
    if !images.is_empty() {
        if images.len() != maps.len() {
            return Err(Error::Dimensions(format!("{} images for {} depth maps", images.len(), maps.len())));
        }
        for (img, map) in images.iter().zip(maps) {
            if img.width() != map.width() || img.height() != map.height() {
                return Err(Error::Dimensions("image and depth map sizes differ".into()));
            }
        }
    }
    let mut claimed: Vec<Vec<bool>> = maps.iter().map(|m| vec![false; m.width() * m.height()]).collect();
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let w = map.width();
        let claimed_i = &claimed[i];
        let fused: Vec<Option<(Vector3<f64>, f64, Vec<(usize, usize)>)>> = (0..w * map.height())
            .into_par_iter()
            .map(|m| {
                if !map.is_valid(m) || claimed_i[m] {
                    return None;
                }
                let (x, y) = (m % w, m / w);
                let d = map.values()[m];
                let mut sum = cameras[i].backproject(Point2::new(x as f64, y as f64), d);
                let mut intensity = images.get(i).map_or(0.0, |img| img.get(x, y));
                let mut n = 1.0;
                let mut claims = Vec::new();
                for j in (0..maps.len()).filter(|&j| j != i) {
                    if let Some(hit) = check_pair(&cameras[i], (x, y), d, &cameras[j], &maps[j], params) {
                        sum += hit.world;
                        let (u, v) = (hit.source_pixel.0.round() as usize, hit.source_pixel.1.round() as usize);
                        if let Some(img) = images.get(j) {
                            intensity += img.get(u, v);
                        }
                        n += 1.0;
                        if j > i {
                            claims.push((j, v * maps[j].width() + u));
                        }
                    }
                }
                Some((sum / n, intensity / n, claims))
            })
            .collect();
        for (point, intensity, claims) in fused.into_iter().flatten() {
            points.push(point);
            colors.push(gray_to_rgb(intensity));
            for (j, q) in claims {
                claimed[j][q] = true;
            }
        }
    }
    let cloud = PointCloud {
        points,
        colors: (!images.is_empty()).then_some(colors),
        normals: None,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Back-projects every valid pixel of every map with no filtering or merging.
pub fn backproject_maps(maps: &[DepthMap], cameras: &[Camera]) -> Result<PointCloud> {
    check_inputs(maps, cameras)?;
    let mut points = Vec::new();
    for (map, cam) in maps.iter().zip(cameras) {
        let w = map.width();
        for m in (0..w * map.height()).filter(|&m| map.is_valid(m)) {
            points.push(cam.backproject(Point2::new((m % w) as f64, (m / w) as f64), map.values()[m]));
        }
    }
    Ok(PointCloud::from_points(points))
}
