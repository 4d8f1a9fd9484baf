//! A PLY subset: one `vertex` element with `x y z` (float or double) and
//! `red green blue` (uchar, or float in [0, 1]), ascii or binary
//! little-endian. Other vertex properties are skipped; other elements must
//! follow the vertex element.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

/// Positions and colors in [0, 1].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

const REQUIRED: [&str; 6] = ["x", "y", "z", "red", "green", "blue"];

pub fn parse_ply(bytes: &[u8], location: &str) -> Result<PointCloud> {
    let err = |reason: String| Error::parse(location.to_string(), reason);
    let header_end = find_header_end(bytes).ok_or_else(|| err("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end.0]).map_err(|_| err("header is not utf-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(err("missing ply magic".into()));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, _] => return Err(err(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if seen_vertex {
                    return Err(err("duplicate vertex element".into()));
                }
                count = Some(n.parse::<usize>().map_err(|_| err(format!("bad vertex count {n}")))?);
                in_vertex = true;
                seen_vertex = true;
            }
            ["element", name, _] => {
                if !seen_vertex {
                    return Err(err(format!("element {name} precedes vertex")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(err("list properties on vertex are unsupported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| err(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(err(format!("unexpected header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| err("missing format line".into()))?;
    let count = count.ok_or_else(|| err("missing vertex element".into()))?;
    let mut idx = [0usize; 6];
    for (k, name) in REQUIRED.iter().enumerate() {
        idx[k] = props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| err(format!("missing vertex property {name}")))?;
    }
    let color_scale: Vec<f64> = idx[3..]
        .iter()
        .map(|&i| if props[i].1.is_integer() { 1.0 / 255.0 } else { 1.0 })
        .collect();

    let body = &bytes[header_end.1..];
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
    };
    let mut push = |vals: &[f64]| -> Result<()> {
        let p = Vector3::new(vals[idx[0]], vals[idx[1]], vals[idx[2]]);
        let c = Vector3::new(
            vals[idx[3]] * color_scale[0],
            vals[idx[4]] * color_scale[1],
            vals[idx[5]] * color_scale[2],
        );
        if !p.iter().chain(c.iter()).all(|v| v.is_finite()) {
            return Err(err(format!("non-finite vertex {}", cloud.len())));
        }
        cloud.positions.push(p);
        cloud.colors.push(c.map(|v| v.clamp(0.0, 1.0)));
        Ok(())
    };
    let mut vals = vec![0.0; props.len()];
    match format {
        Format::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| err("ascii body is not utf-8".into()))?;
            let mut rows = text.lines().filter(|l| !l.trim().is_empty());
            for v in 0..count {
                let row = rows.next().ok_or_else(|| err(format!("expected {count} vertices, found {v}")))?;
                let mut it = row.split_whitespace();
                for (k, slot) in vals.iter_mut().enumerate() {
                    let t = it.next().ok_or_else(|| err(format!("vertex {v}: missing value {k}")))?;
                    *slot = t.parse().map_err(|_| err(format!("vertex {v}: bad number `{t}`")))?;
                }
                push(&vals)?;
            }
        }
        Format::BinaryLe => {
            let stride: usize = props.iter().map(|p| p.1.size()).sum();
            if body.len() < stride * count {
                return Err(err(format!("binary body holds {} of {count} vertices", body.len() / stride.max(1))));
            }
            for row in body.chunks_exact(stride).take(count) {
                let mut off = 0;
                for (slot, (_, s)) in vals.iter_mut().zip(&props) {
                    *slot = s.read_le(&row[off..]);
                    off += s.size();
                }
                push(&vals)?;
            }
        }
    }
    Ok(cloud)
}

/// Returns (end of header text, start of body).
fn find_header_end(bytes: &[u8]) -> Option<(usize, usize)> {
    let needle = b"end_header";
    let pos = bytes.windows(needle.len()).position(|w| w == needle)?;
    let mut body = pos + needle.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    Some((pos, body))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    parse_ply(&bytes, &path.display().to_string())
}

/// Writes an ascii PLY with uchar colors.
pub fn write_ply_ascii(cloud: &PointCloud, mut out: impl Write) -> Result<()> {
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let c = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(out, "{} {} {} {} {} {}", p.x as f32, p.y as f32, p.z as f32, c.x, c.y, c.z)?;
    }
    Ok(())
}
