//! Synthetic scenes with exact cameras and analytic ground truth.
//!
//! Surfaces carry a procedural texture defined on 3D position, so every view
//! observes the same intensity for the same surface point. The reference
//! camera sits at the world origin looking down `+z`; the world frame is the
//! reference camera frame.

use nalgebra::{Matrix3, Point2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cascade::View;
use crate::error::{Error, Result};
use crate::fusion::PointCloud;
use crate::geometry::{Camera, CameraIntrinsics, CameraPose};
use crate::image::GrayImage;
use crate::regress::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// World plane `z = depth`, fronto-parallel to the reference view.
    FrontoPlane { depth: f64 },
    /// World plane `normal . x = offset` (normal is normalized on use).
    TiltedPlane { normal: Vector3<f64>, offset: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

const HIT_EPS: f64 = 1e-9;

impl Primitive {
    /// Smallest ray parameter `t > 0` with `origin + t * dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::FrontoPlane { depth } => plane_hit(&Vector3::z(), depth, origin, dir),
            Primitive::TiltedPlane { normal, offset } => {
                let n = normal.norm();
                plane_hit(&(normal / n), offset / n, origin, dir)
            }
            Primitive::Sphere { center, radius } => {
                // closest approach of the ray to the center, then step back
                let dd = dir.norm_squared();
                let to_center = center - origin;
                let along = to_center.dot(dir) / dd;
                let closest2 = (to_center - dir * along).norm_squared();
                let r2 = radius * radius;
                if closest2 > r2 {
                    return None;
                }
                let half = ((r2 - closest2) / dd).sqrt();
                [along - half, along + half].into_iter().find(|&t| t > HIT_EPS)
            }
        }
    }

    /// Whether `point` lies strictly inside the solid (or on a plane).
    fn contains(&self, point: &Vector3<f64>) -> bool {
        match *self {
            Primitive::FrontoPlane { depth } => (point.z - depth).abs() < HIT_EPS,
            Primitive::TiltedPlane { normal, offset } => ((normal.dot(point) - offset) / normal.norm()).abs() < HIT_EPS,
            Primitive::Sphere { center, radius } => (point - center).norm() <= radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::FrontoPlane { depth } => depth.is_finite(),
            Primitive::TiltedPlane { normal, offset } => normal.norm() > 0.0 && offset.is_finite() && normal.iter().all(|v| v.is_finite()),
            Primitive::Sphere { center, radius } => radius > 0.0 && center.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Scene(format!("degenerate primitive {self:?}")))
        }
    }
}

fn plane_hit(n: &Vector3<f64>, offset: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let denom = n.dot(dir);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (offset - n.dot(origin)) / denom;
    (t > HIT_EPS).then_some(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub primitive: Primitive,
    /// Untextured surfaces render at a constant mid-gray.
    pub textured: bool,
}

/// Value-noise texture over 3D position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub seed: u64,
    /// Lattice spacing of the coarsest octave, in scene units.
    pub cell: f64,
    pub octaves: u32,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            cell: 12.0,
            octaves: 3,
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u32, x: i64, y: i64, z: i64) -> f64 {
    let mut h = mix64(seed ^ (octave as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    h = mix64(h ^ x as u64);
    h = mix64(h ^ y as u64);
    h = mix64(h ^ z as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl TextureSpec {
    /// Intensity in `[0, 1]` at a world point.
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        for o in 0..self.octaves {
            let freq = (1u64 << o) as f64 / self.cell;
            let amp = 0.5f64.powi(o as i32);
            total += amp * self.octave(o, &(p * freq));
            norm += amp;
        }
        total / norm
    }

    fn octave(&self, o: u32, q: &Vector3<f64>) -> f64 {
        let base = q.map(f64::floor);
        let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
        let (fx, fy, fz) = (fade(q.x - base.x), fade(q.y - base.y), fade(q.z - base.z));
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let v = |dx, dy, dz| lattice(self.seed, o, ix + dx, iy + dy, iz + dz);
        let x00 = lerp(v(0, 0, 0), v(1, 0, 0), fx);
        let x10 = lerp(v(0, 1, 0), v(1, 1, 0), fx);
        let x01 = lerp(v(0, 0, 1), v(1, 0, 1), fx);
        let x11 = lerp(v(0, 1, 1), v(1, 1, 1), fx);
        lerp(lerp(x00, x10, fy), lerp(x01, x11, fy), fz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// Reference at the origin plus `sources` cameras evenly spaced on a
    /// circle of `radius` in the `z = 0` plane, all aimed at `(0, 0, target_depth)`.
    Ring { sources: usize, radius: f64, target_depth: f64 },
    /// Rectified pair: left at the origin, right at `(baseline, 0, 0)`.
    Stereo { baseline: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub surfaces: Vec<Surface>,
    pub texture: TextureSpec,
    pub layout: Layout,
    /// Written into every camera for the first hypothesis ladder.
    pub depth_min: f64,
    pub depth_interval: f64,
    /// Standard deviation of additive Gaussian noise (0 disables it).
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl SceneSpec {
    /// The multi-view scene used by the shipped configuration: a tilted back
    /// wall with two spheres in front, seen by five cameras.
    pub fn default_mvs() -> Self {
        Self {
            width: 640,
            height: 512,
            focal: 800.0,
            surfaces: vec![
                Surface {
                    primitive: Primitive::TiltedPlane {
                        normal: Vector3::new(0.15, -0.1, 1.0),
                        offset: 820.0,
                    },
                    textured: true,
                },
                Surface {
                    primitive: Primitive::Sphere {
                        center: Vector3::new(-70.0, 20.0, 660.0),
                        radius: 110.0,
                    },
                    textured: true,
                },
                Surface {
                    primitive: Primitive::Sphere {
                        center: Vector3::new(120.0, -60.0, 720.0),
                        radius: 60.0,
                    },
                    textured: true,
                },
            ],
            texture: TextureSpec::default(),
            layout: Layout::Ring {
                sources: 4,
                radius: 120.0,
                target_depth: 700.0,
            },
            depth_min: 425.0,
            depth_interval: 2.5,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Rectified pair with disparities between roughly 16 and 48 px.
    pub fn default_stereo() -> Self {
        Self {
            width: 640,
            height: 512,
            focal: 800.0,
            surfaces: vec![
                Surface {
                    primitive: Primitive::TiltedPlane {
                        normal: Vector3::new(0.3, 0.0, 1.0),
                        offset: 1500.0,
                    },
                    textured: true,
                },
                Surface {
                    primitive: Primitive::Sphere {
                        center: Vector3::new(60.0, 30.0, 1080.0),
                        radius: 220.0,
                    },
                    textured: true,
                },
            ],
            texture: TextureSpec {
                seed: 2,
                cell: 64.0,
                octaves: 3,
            },
            layout: Layout::Stereo { baseline: 50.0 },
            depth_min: 100.0,
            depth_interval: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let k = self.intrinsics()?;
        let cam = |pose| Camera::new(k, pose, self.depth_min, self.depth_interval);
        let mut cams = vec![cam(CameraPose::identity())?];
        match self.layout {
            Layout::Ring {
                sources,
                radius,
                target_depth,
            } => {
                let target = Vector3::new(0.0, 0.0, target_depth);
                for i in 0..sources {
                    let a = std::f64::consts::TAU * i as f64 / sources as f64;
                    let eye = Vector3::new(radius * a.cos(), radius * a.sin(), 0.0);
                    cams.push(cam(CameraPose::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0))?)?);
                }
            }
            Layout::Stereo { baseline } => {
                cams.push(cam(CameraPose::from_center(Matrix3::identity(), Vector3::new(baseline, 0.0, 0.0))?)?);
            }
        }
        Ok(cams)
    }

    fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || !(self.focal > 0.0) {
            return Err(Error::Scene("image size and focal length must be positive".into()));
        }
        if self.surfaces.is_empty() {
            return Err(Error::Scene("scene has no primitives".into()));
        }
        if !(self.texture.cell > 0.0) || self.texture.octaves == 0 {
            return Err(Error::Scene("texture cell and octave count must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Scene("noise sigma must be non-negative".into()));
        }
        match self.layout {
            Layout::Ring { sources, radius, .. } if sources == 0 || !(radius > 0.0) => {
                Err(Error::Scene("ring layout needs sources and a positive radius".into()))
            }
            Layout::Stereo { baseline } if !(baseline > 0.0) => Err(Error::Scene("baseline must be positive".into())),
            _ => self.surfaces.iter().try_for_each(|s| s.primitive.validate()),
        }
    }
}

/// Rendered images, cameras and per-view ground truth.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub views: Vec<View>,
    /// Ground-truth depth per view; background pixels are invalid.
    pub depths: Vec<DepthMap>,
    /// Per view and pixel, how many other views see the same surface point.
    pub covisibility: Vec<Vec<u16>>,
    /// Left-view disparity `f * B / Z` (stereo layouts only).
    pub disparity: Option<DepthMap>,
}

impl RenderedScene {
    /// Pixels whose surface point is hidden from, or outside, at least one
    /// other view.
    pub fn occlusion_mask(&self, view: usize) -> Vec<bool> {
        let others = (self.views.len() - 1) as u16;
        self.covisibility[view].iter().map(|&c| c < others).collect()
    }

    /// Ground truth restricted to pixels seen by every view.
    pub fn non_occluded_depth(&self, view: usize) -> DepthMap {
        self.restrict(&self.depths[view], view)
    }

    pub fn non_occluded_disparity(&self) -> Option<DepthMap> {
        self.disparity.as_ref().map(|d| self.restrict(d, 0))
    }

    /// Ground-truth surface points seen by at least `min_others` other views,
    /// taken from every `stride`-th row and column of each view.
    pub fn surface_samples(&self, min_others: u16, stride: usize) -> PointCloud {
        let stride = stride.max(1);
        let mut points = Vec::new();
        for (i, (view, depth)) in self.views.iter().zip(&self.depths).enumerate() {
            for y in (0..depth.height()).step_by(stride) {
                for x in (0..depth.width()).step_by(stride) {
                    let m = y * depth.width() + x;
                    if depth.is_valid(m) && self.covisibility[i][m] >= min_others {
                        points.push(view.camera.backproject(Point2::new(x as f64, y as f64), depth.values()[m]));
                    }
                }
            }
        }
        PointCloud::from_points(points)
    }

    fn restrict(&self, map: &DepthMap, view: usize) -> DepthMap {
        let occ = self.occlusion_mask(view);
        let valid = map.valid_mask().iter().zip(occ).map(|(&v, o)| v && !o).collect();
        map.with_mask(valid).expect("same size")
    }
}

fn nearest_hit(surfaces: &[Surface], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    surfaces
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.primitive.intersect(origin, dir).map(|t| (t, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn visible_from(surfaces: &[Surface], cam: &Camera, width: usize, height: usize, point: &Vector3<f64>) -> bool {
    let Some((px, _)) = cam.project(point) else {
        return false;
    };
    if !(px.x >= 0.0 && px.y >= 0.0 && px.x <= (width - 1) as f64 && px.y <= (height - 1) as f64) {
        return false;
    }
    let origin = cam.center();
    let to_point = point - origin;
    let dist = to_point.norm();
    let dir = to_point / dist;
    match nearest_hit(surfaces, &origin, &dir) {
        Some((t, _)) => t >= dist * (1.0 - 1e-7),
        None => true,
    }
}

/// Renders every camera of the scene.
pub fn render(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    for cam in &cameras {
        let c = cam.center();
        if let Some(s) = spec.surfaces.iter().find(|s| s.primitive.contains(&c)) {
            return Err(Error::Scene(format!("camera at {c:?} is inside {:?}", s.primitive)));
        }
    }
    let (w, h) = (spec.width, spec.height);
    let gray = 0.5;
    let mut views = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    let mut covisibility = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let center = cam.center();
        let rt = cam.pose.rotation().transpose();
        let samples: Vec<(f64, f64, u16)> = (0..w * h)
            .into_par_iter()
            .map(|m| {
                let ray_cam = cam.intrinsics.unproject(Point2::new((m % w) as f64, (m / w) as f64));
                // camera-frame z of the ray is 1, so the ray parameter is the depth
                let dir = rt * ray_cam;
                let Some((t, s)) = nearest_hit(&spec.surfaces, &center, &dir) else {
                    return (0.0, f64::NAN, 0);
                };
                let p = center + dir * t;
                let intensity = if spec.surfaces[s].textured {
                    spec.texture.sample(&p)
                } else {
                    gray
                };
                let seen = cameras
                    .iter()
                    .enumerate()
                    .filter(|&(j, other)| j != i && visible_from(&spec.surfaces, other, w, h, &p))
                    .count() as u16;
                (intensity, t, seen)
            })
            .collect();
        let mut image: Vec<f64> = samples.iter().map(|s| s.0).collect();
        if spec.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed.wrapping_add(i as u64));
            let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Scene(e.to_string()))?;
            image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let depth = DepthMap::from_values(w, h, samples.iter().map(|s| s.1).collect())?;
        if depth.valid_count() == 0 {
            return Err(Error::Scene(format!("camera {i} sees no primitive")));
        }
        views.push(View {
            image: GrayImage::new(w, h, image)?,
            camera: *cam,
        });
        depths.push(depth);
        covisibility.push(samples.iter().map(|s| s.2).collect());
    }
    let disparity = match spec.layout {
        Layout::Stereo { baseline } => {
            let fb = spec.focal * baseline;
            let d = &depths[0];
            let values = d
                .values()
                .iter()
                .zip(d.valid_mask())
                .map(|(&z, &ok)| if ok { fb / z } else { f64::NAN })
                .collect();
            Some(DepthMap::from_values(w, h, values)?)
        }
        Layout::Ring { .. } => None,
    };
    Ok(RenderedScene {
        views,
        depths,
        covisibility,
        disparity,
    })
}
