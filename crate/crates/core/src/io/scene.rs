//! Scene specification files and the on-disk scene layout:
//!
//! ```text
//! images/00000000.pgm      16-bit grayscale
//! cams/00000000_cam.txt
//! depths/00000000.pfm      ground-truth depth, 0 where invalid
//! occlusion/00000000.pgm   255 where another view cannot see the point
//! disparity.pfm            left-view disparity (stereo scenes)
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::cam::{read_cam, write_cam};
use super::config::KeyValues;
use super::pfm::write_depth_pfm;
use super::pnm::{read_pnm, write_pgm};
use crate::cascade::View;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synth::{Layout, Primitive, RenderedScene, SceneSpec, Surface, TextureSpec};

#[derive(Debug, Clone)]
pub struct ScenePaths {
    pub root: PathBuf,
}

pub fn scene_paths(root: &Path) -> ScenePaths {
    ScenePaths { root: root.to_path_buf() }
}

impl ScenePaths {
    pub fn image(&self, i: usize) -> PathBuf {
        self.root.join("images").join(format!("{i:08}.pgm"))
    }

    pub fn cam(&self, i: usize) -> PathBuf {
        self.root.join("cams").join(format!("{i:08}_cam.txt"))
    }

    pub fn depth(&self, i: usize) -> PathBuf {
        self.root.join("depths").join(format!("{i:08}.pfm"))
    }

    pub fn occlusion(&self, i: usize) -> PathBuf {
        self.root.join("occlusion").join(format!("{i:08}.pgm"))
    }

    pub fn disparity(&self) -> PathBuf {
        self.root.join("disparity.pfm")
    }

    /// Number of consecutive views present, starting at index 0.
    pub fn view_count(&self) -> usize {
        (0..).take_while(|&i| self.image(i).exists() && self.cam(i).exists()).count()
    }
}

pub fn read_scene_view(root: &Path, index: usize) -> Result<View> {
    let paths = scene_paths(root);
    Ok(View {
        image: read_pnm(&paths.image(index))?,
        camera: read_cam(&paths.cam(index))?,
    })
}

/// Writes all views, cameras and ground truth; returns the written files.
pub fn write_scene(root: &Path, scene: &RenderedScene) -> Result<Vec<PathBuf>> {
    let paths = scene_paths(root);
    let mut written = Vec::new();
    for (i, (view, depth)) in scene.views.iter().zip(&scene.depths).enumerate() {
        write_pgm(&paths.image(i), &view.image, true)?;
        written.push(paths.image(i));
        write_cam(&paths.cam(i), &view.camera)?;
        written.push(paths.cam(i));
        write_depth_pfm(&paths.depth(i), depth)?;
        written.push(paths.depth(i));
        let occ = scene.occlusion_mask(i);
        let mask = GrayImage::new(depth.width(), depth.height(), occ.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?;
        write_pgm(&paths.occlusion(i), &mask, false)?;
        written.push(paths.occlusion(i));
    }
    if let Some(d) = &scene.disparity {
        write_depth_pfm(&paths.disparity(), d)?;
        written.push(paths.disparity());
    }
    Ok(written)
}

fn parse_primitive(kv: &KeyValues, line: usize, text: &str) -> Result<Surface> {
    let mut tok: Vec<&str> = text.split_whitespace().collect();
    let textured = match tok.last() {
        Some(&"flat") => {
            tok.pop();
            false
        }
        _ => true,
    };
    let nums = tok
        .iter()
        .skip(1)
        .map(|t| kv.parse_value::<f64>(line, "primitive", t))
        .collect::<Result<Vec<f64>>>()?;
    let primitive = match (tok.first().copied(), nums.as_slice()) {
        (Some("fronto"), &[depth]) => Primitive::FrontoPlane { depth },
        (Some("tilted"), &[nx, ny, nz, offset]) => Primitive::TiltedPlane {
            normal: Vector3::new(nx, ny, nz),
            offset,
        },
        (Some("sphere"), &[x, y, z, radius]) => Primitive::Sphere {
            center: Vector3::new(x, y, z),
            radius,
        },
        _ => {
            return Err(Error::parse(
                kv.path(),
                line,
                format!("primitive '{text}' is not 'fronto D', 'tilted NX NY NZ OFFSET' or 'sphere X Y Z R'"),
            ))
        }
    };
    Ok(Surface { primitive, textured })
}

pub fn parse_scene_spec(path: &Path, text: &str) -> Result<SceneSpec> {
    let mut kv = KeyValues::parse(path, text, &["primitive"])?;
    let surfaces = kv
        .all("primitive")
        .iter()
        .map(|(n, v)| parse_primitive(&kv, *n, v))
        .collect::<Result<Vec<_>>>()?;
    if surfaces.is_empty() {
        return Err(Error::Config(format!("{}: missing required key 'primitive'", path.display())));
    }
    let layout = match kv.required::<String>("layout")?.as_str() {
        "ring" => Layout::Ring {
            sources: kv.get_or("sources", 4usize)?,
            radius: kv.required("ring_radius")?,
            target_depth: kv.required("target_depth")?,
        },
        "stereo" => Layout::Stereo {
            baseline: kv.required("baseline")?,
        },
        other => {
            return Err(Error::parse(path, kv.line_of("layout"), format!("layout must be ring or stereo, got '{other}'")))
        }
    };
    let defaults = TextureSpec::default();
    let spec = SceneSpec {
        width: kv.required("width")?,
        height: kv.required("height")?,
        focal: kv.required("focal")?,
        surfaces,
        texture: TextureSpec {
            seed: kv.get_or("texture_seed", defaults.seed)?,
            cell: kv.get_or("texture_cell", defaults.cell)?,
            octaves: kv.get_or("texture_octaves", defaults.octaves)?,
        },
        layout,
        depth_min: kv.required("depth_min")?,
        depth_interval: kv.required("depth_interval")?,
        noise_sigma: kv.get_or("noise_sigma", 0.0)?,
        noise_seed: kv.get_or("noise_seed", 0u64)?,
    };
    kv.finish()?;
    Ok(spec)
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_spec(path, &text)
}
