//! Single-channel PFM: `Pf`, `W H`, a scale whose sign gives the byte order,
//! then rows of `f32` from bottom to top.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::{create, open};
use crate::error::{Error, Result};
use crate::regress::DepthMap;

/// Row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub fn write_pfm(path: &Path, image: &PfmImage) -> Result<()> {
    if image.data.len() != image.width * image.height {
        return Err(Error::Dimensions(format!(
            "PFM {}x{} with {} samples",
            image.width,
            image.height,
            image.data.len()
        )));
    }
    let mut out = create(path)?;
    let mut bytes = format!("Pf\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    bytes.reserve(image.data.len() * 4);
    for row in image.data.chunks(image.width).rev() {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn header_line(reader: &mut impl BufRead, path: &Path, line: usize) -> Result<String> {
    let mut s = String::new();
    reader.read_line(&mut s).map_err(|e| Error::io(path, e))?;
    if s.is_empty() {
        return Err(Error::parse(path, line, "truncated header"));
    }
    Ok(s.trim().to_string())
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let mut reader = open(path)?;
    let magic = header_line(&mut reader, path, 1)?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::UnsupportedFormat(format!("{}: three-channel PFM", path.display()))),
        other => return Err(Error::parse(path, 1, format!("bad PFM magic '{other}'"))),
    }
    let dims = header_line(&mut reader, path, 2)?;
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [width, height] = parsed[..] else {
        return Err(Error::parse(path, 2, format!("bad PFM dimensions '{dims}'")));
    };
    let scale_text = header_line(&mut reader, path, 3)?;
    let scale: f64 = scale_text
        .parse()
        .map_err(|_| Error::parse(path, 3, format!("bad PFM scale '{scale_text}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(path, 3, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let mut data = vec![0f32; width * height];
    for (row_from_bottom, chunk) in raw.chunks(width * 4).enumerate() {
        let y = height - 1 - row_from_bottom;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            data[y * width + x] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(PfmImage { width, height, data })
}

/// Writes a map with invalid pixels stored as 0.
pub fn write_depth_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    write_pfm(
        path,
        &PfmImage {
            width: map.width(),
            height: map.height(),
            data: map.values_or_zero().iter().map(|&v| v as f32).collect(),
        },
    )
}

/// Reads a map; zero, negative and non-finite samples are invalid.
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let img = read_pfm(path)?;
    DepthMap::from_positive(img.width, img.height, img.data.iter().map(|&v| v as f64).collect())
}
