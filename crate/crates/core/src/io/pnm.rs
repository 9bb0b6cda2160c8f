//! Binary PGM (P5) and PPM (P6) images, 8 or 16 bits per sample.
//! Intensities are unit-scaled: sample / maxval.

use std::io::{Read, Write};
use std::path::Path;

use super::{create, open};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Reads a P5 or P6 image; color is averaged to gray.
pub fn read_pnm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut line = 1;
    let mut token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                if bytes[*pos] == b'\n' {
                    line += 1;
                }
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse(path, line, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        "P2" | "P3" => return Err(Error::UnsupportedFormat(format!("ASCII {magic} images"))),
        other => return Err(Error::parse(path, 1, format!("bad image magic '{other}'"))),
    };
    let mut number = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::parse(path, 1, format!("bad {what} '{t}'")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval > 65535 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}")));
    }
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let needed = width * height * channels * bps;
    let raw = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| Error::UnsupportedFormat(format!("{}: truncated pixel data", path.display())))?;
    let sample = |i: usize| -> f64 {
        if bps == 2 {
            u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as f64
        } else {
            raw[i] as f64
        }
    };
    let scale = 1.0 / maxval as f64;
    let data = (0..width * height)
        .map(|p| (0..channels).map(|c| sample(p * channels + c)).sum::<f64>() * scale / channels as f64)
        .collect();
    GrayImage::new(width, height, data)
}

/// Writes a P5 image, clamping intensities to `[0, 1]`.
pub fn write_pgm(path: &Path, image: &GrayImage, sixteen_bit: bool) -> Result<()> {
    let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
    let mut bytes = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if sixteen_bit {
            bytes.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            bytes.push(q as u8);
        }
    }
    let mut out = create(path)?;
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}
