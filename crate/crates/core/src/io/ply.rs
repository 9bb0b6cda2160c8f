//! PLY point clouds: `float x y z`, optional `float nx ny nz`, optional
//! `uchar red green blue`, in ASCII or binary little-endian.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{create, open};
use crate::error::{Error, Result};
use crate::fusion::PointCloud;

/// `%g`-style formatting with six significant digits.
pub(crate) fn format_g6(v: f32) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.5e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        trim(&format!("{:.*}", (5 - exp) as usize, v))
    }
}

pub fn write_ply(cloud: &PointCloud, path: &Path, binary: bool) -> Result<()> {
    cloud.validate()?;
    let mut header = String::from("ply\n");
    header += if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    };
    header += &format!("element vertex {}\n", cloud.len());
    header += "property float x\nproperty float y\nproperty float z\n";
    if cloud.normals.is_some() {
        header += "property float nx\nproperty float ny\nproperty float nz\n";
    }
    if cloud.colors.is_some() {
        header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    header += "end_header\n";
    let mut bytes = header.into_bytes();
    for i in 0..cloud.len() {
        let mut floats = cloud.points[i].iter().map(|&v| v as f32).collect::<Vec<_>>();
        if let Some(n) = &cloud.normals {
            floats.extend(n[i].iter().map(|&v| v as f32));
        }
        let color = cloud.colors.as_ref().map(|c| c[i]);
        if binary {
            for f in floats {
                bytes.extend_from_slice(&f.to_le_bytes());
            }
            if let Some(c) = color {
                bytes.extend_from_slice(&c);
            }
        } else {
            let mut fields: Vec<String> = floats.into_iter().map(format_g6).collect();
            if let Some(c) = color {
                fields.extend(c.iter().map(|v| v.to_string()));
            }
            bytes.extend_from_slice(fields.join(" ").as_bytes());
            bytes.push(b'\n');
        }
    }
    let mut out = create(path)?;
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    U8,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "uchar" | "uint8" => Some(Scalar::U8),
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 => 1,
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

fn next_line(reader: &mut impl BufRead, path: &Path, line_no: &mut usize) -> Result<(usize, String)> {
    let mut s = String::new();
    reader.read_line(&mut s).map_err(|e| Error::io(path, e))?;
    *line_no += 1;
    if s.is_empty() {
        return Err(Error::parse(path, *line_no, "unexpected end of file"));
    }
    Ok((*line_no, s.trim().to_string()))
}

/// Reads clouds written by [`write_ply`] and other vertex-only PLY files
/// with scalar properties.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut reader = open(path)?;
    let mut line_no = 0;
    let (_, magic) = next_line(&mut reader, path, &mut line_no)?;
    if magic != "ply" {
        return Err(Error::parse(path, 1, "missing 'ply' magic"));
    }
    let mut binary = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (n, l) = next_line(&mut reader, path, &mut line_no)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(Error::UnsupportedFormat(format!("PLY format {other}"))),
            ["element", "vertex", c] => {
                count = Some(c.parse::<usize>().map_err(|_| Error::parse(path, n, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", _, c] => {
                in_vertex = false;
                if *c != "0" {
                    return Err(Error::UnsupportedFormat("PLY elements other than vertices".into()));
                }
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| Error::parse(path, n, format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] if !in_vertex => {}
            _ => return Err(Error::parse(path, n, format!("unexpected header line '{l}'"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::parse(path, line_no, "missing format line"))?;
    let count = count.ok_or_else(|| Error::parse(path, line_no, "missing vertex element"))?;
    let index = |name: &str| props.iter().position(|(p, _)| p == name);
    let xyz = [index("x"), index("y"), index("z")];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(Error::parse(path, line_no, "vertex element lacks x, y, z"));
    };
    let nrm = [index("nx"), index("ny"), index("nz")];
    let rgb = [index("red"), index("green"), index("blue")];

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    if binary {
        let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
        let mut raw = vec![0u8; stride * count];
        reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        for rec in raw.chunks_exact(stride.max(1)) {
            let mut off = 0;
            let mut row = Vec::with_capacity(props.len());
            for (_, s) in &props {
                let b = &rec[off..off + s.size()];
                row.push(match s {
                    Scalar::U8 => b[0] as f64,
                    Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                    Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                });
                off += s.size();
            }
            rows.push(row);
        }
    } else {
        for _ in 0..count {
            let (n, l) = next_line(&mut reader, path, &mut line_no)?;
            let row = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, n, format!("bad value '{t}'"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != props.len() {
                return Err(Error::parse(path, n, format!("expected {} values, found {}", props.len(), row.len())));
            }
            rows.push(row);
        }
    }
    let points = rows.iter().map(|r| Vector3::new(r[ix], r[iy], r[iz])).collect();
    let normals = match nrm {
        [Some(a), Some(b), Some(c)] => Some(rows.iter().map(|r| Vector3::new(r[a], r[b], r[c])).collect()),
        _ => None,
    };
    let colors = match rgb {
        [Some(a), Some(b), Some(c)] => Some(rows.iter().map(|r| [r[a] as u8, r[b] as u8, r[c] as u8]).collect()),
        _ => None,
    };
    Ok(PointCloud { points, colors, normals })
}
