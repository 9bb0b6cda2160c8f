//! Camera text files:
//!
//! ```text
//! extrinsic
//! r00 r01 r02 t0
//! r10 r11 r12 t1
//! r20 r21 r22 t2
//! 0 0 0 1
//!
//! intrinsic
//! fx s cx
//! 0 fy cy
//! 0 0 1
//!
//! depth_min depth_interval
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{create, open};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraIntrinsics, CameraPose};

/// Rotations read from text are snapped to the nearest rotation when within
/// this distance of orthonormal.
const ORTHONORMAL_TOLERANCE: f64 = 1e-4;

pub fn write_cam(path: &Path, cam: &Camera) -> Result<()> {
    let mut out = create(path)?;
    let r = cam.pose.rotation();
    let t = cam.pose.translation();
    let k = cam.intrinsics;
    let mut text = String::from("extrinsic\n");
    for i in 0..3 {
        text += &format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
    }
    text += "0 0 0 1\n\nintrinsic\n";
    text += &format!("{} {} {}\n0 {} {}\n0 0 1\n\n", k.fx, k.skew, k.cx, k.fy, k.cy);
    text += &format!("{} {}\n", cam.depth_min, cam.depth_interval);
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    path: &'a Path,
    lines: Vec<(usize, String)>,
    pos: usize,
}

impl Lines<'_> {
    /// Next non-blank line with its 1-based number.
    fn next(&mut self, what: &str) -> Result<(usize, &str)> {
        while let Some((n, l)) = self.lines.get(self.pos) {
            self.pos += 1;
            if !l.trim().is_empty() {
                return Ok((*n, l.trim()));
            }
        }
        let last = self.lines.last().map_or(1, |l| l.0);
        Err(Error::parse(self.path, last, format!("unexpected end of file, expected {what}")))
    }

    fn header(&mut self, name: &str) -> Result<()> {
        let path = self.path;
        let (n, l) = self.next(name)?;
        if l != name {
            return Err(Error::parse(path, n, format!("expected '{name}', found '{l}'")));
        }
        Ok(())
    }

    fn numbers(&mut self, what: &str, count: std::ops::RangeInclusive<usize>) -> Result<(usize, Vec<f64>)> {
        let path = self.path;
        let (n, l) = self.next(what)?;
        let values = l
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(path, n, format!("'{tok}' is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !count.contains(&values.len()) {
            return Err(Error::parse(
                path,
                n,
                format!("{what}: expected {} values, found {}", count.start(), values.len()),
            ));
        }
        Ok((n, values))
    }
}

pub fn read_cam(path: &Path) -> Result<Camera> {
    let lines = open(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))?;
    let mut lines = Lines { path, lines, pos: 0 };

    lines.header("extrinsic")?;
    let mut e = [[0.0; 4]; 4];
    let mut first_row = 0;
    for (i, row) in e.iter_mut().enumerate() {
        let (n, v) = lines.numbers("extrinsic row", 4..=4)?;
        if i == 0 {
            first_row = n;
        }
        row.copy_from_slice(&v);
    }
    if e[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::parse(path, first_row + 3, "extrinsic bottom row must be 0 0 0 1"));
    }
    let rotation = Matrix3::from_fn(|i, j| e[i][j]);
    let translation = Vector3::new(e[0][3], e[1][3], e[2][3]);
    let pose = CameraPose::new(rotation, translation)
        .or_else(|_| CameraPose::new_orthonormalized(rotation, translation, ORTHONORMAL_TOLERANCE))
        .map_err(|err| geometry(path, first_row, err))?;

    lines.header("intrinsic")?;
    let mut k = [[0.0; 3]; 3];
    let mut k_row = 0;
    for (i, row) in k.iter_mut().enumerate() {
        let (n, v) = lines.numbers("intrinsic row", 3..=3)?;
        if i == 0 {
            k_row = n;
        }
        row.copy_from_slice(&v);
    }
    if k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
        return Err(Error::parse(path, k_row + 1, "intrinsic matrix must be upper triangular with 0 0 1 last row"));
    }
    let intrinsics = CameraIntrinsics::with_skew(k[0][0], k[1][1], k[0][2], k[1][2], k[0][1])
        .map_err(|err| geometry(path, k_row, err))?;

    // extra trailing values (plane count, maximum depth) are tolerated
    let (n, d) = lines.numbers("depth range", 2..=4)?;
    Camera::new(intrinsics, pose, d[0], d[1]).map_err(|err| geometry(path, n, err))
}

/// Well-formed numbers that do not describe a camera stay geometry errors,
/// located in the file.
fn geometry(path: &Path, line: usize, err: Error) -> Error {
    match err {
        Error::InvalidGeometry(m) => Error::InvalidGeometry(format!("{}:{line}: {m}", path.display())),
        other => other,
    }
}
