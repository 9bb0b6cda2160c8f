//! On-disk formats: camera text files, PFM maps, PGM/PPM images, PLY clouds
//! and flat `key = value` configuration files.

mod cam;
mod config;
mod pfm;
mod ply;
mod pnm;
mod scene;

pub use cam::{read_cam, write_cam};
pub use config::{KeyValues, RunConfig};
pub use pfm::{read_depth_pfm, read_pfm, write_depth_pfm, write_pfm, PfmImage};
pub use ply::{read_ply, write_ply};
pub use pnm::{read_pnm, write_pgm};
pub use scene::{load_scene_spec, parse_scene_spec, read_scene_view, scene_paths, write_scene, ScenePaths};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}
