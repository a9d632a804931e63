//! Point cloud file formats: PLY (ASCII / binary little-endian) and raw `.xyzf32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Malformed {
        format: "PLY",
        reason: reason.into(),
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let marker = b"end_header";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| malformed("missing end_header"))?;
    let mut body = end + marker.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("non-ASCII header"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(malformed("missing ply signature"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, ..] => return Err(malformed(format!("unsupported format {other}"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed("bad element count"))?,
                props: Vec::new(),
                has_list: false,
            }),
            ["property", "list", ..] => {
                elements.last_mut().ok_or_else(|| malformed("property before element"))?.has_list = true
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| malformed(format!("unknown type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| malformed("missing format line"))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed("no vertex element"))?;
    if elements[..vi].iter().any(|e| e.has_list) {
        return Err(malformed("list element before vertices"));
    }
    let vertex = &elements[vi];
    if vertex.has_list {
        return Err(malformed("list property on vertex element"));
    }
    let col = |n: &str| {
        vertex
            .props
            .iter()
            .position(|(p, _)| p == n)
            .ok_or_else(|| malformed(format!("missing property {n}")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);

    let mut points = Vec::with_capacity(vertex.count);
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(&bytes[body..]).map_err(|_| malformed("non-ASCII body"))?;
            let rows = text.lines().filter(|l| !l.trim().is_empty());
            let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
            for row in rows.skip(skip).take(vertex.count) {
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| malformed("bad number")))
                    .collect::<Result<_>>()?;
                if vals.len() < vertex.props.len() {
                    return Err(malformed("short vertex row"));
                }
                points.push(Point3::new(vals[cx], vals[cy], vals[cz]));
            }
            if points.len() != vertex.count {
                return Err(malformed("fewer vertex rows than declared"));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut offset = body;
            for e in &elements[..vi] {
                offset += e.count * e.props.iter().map(|(_, t)| t.size()).sum::<usize>();
            }
            let offsets: Vec<usize> = vertex
                .props
                .iter()
                .scan(0, |acc, (_, t)| {
                    let o = *acc;
                    *acc += t.size();
                    Some(o)
                })
                .collect();
            let stride: usize = vertex.props.iter().map(|(_, t)| t.size()).sum();
            let need = offset + stride * vertex.count;
            if bytes.len() < need {
                return Err(Error::TruncatedData);
            }
            for i in 0..vertex.count {
                let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
                let get = |c: usize| vertex.props[c].1.read_le(&row[offsets[c]..]);
                points.push(Point3::new(get(cx), get(cy), get(cz)));
            }
        }
    }
    PointCloud::new(points)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .expect("write to vec");
    for p in &cloud.points {
        match format {
            PlyFormat::Ascii => writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32).expect("write to vec"),
            PlyFormat::BinaryLittleEndian => {
                for c in [p.x, p.y, p.z] {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_xyzf32(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_xyzf32(&bytes)
}

pub fn parse_xyzf32(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader);
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() < n.saturating_mul(12) {
        return Err(Error::TruncatedData);
    }
    let points = payload[..n * 12]
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64;
            Point3::new(f(0), f(4), f(8))
        })
        .collect();
    PointCloud::new(points)
}

pub fn write_xyzf32(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Dispatch on extension: `.ply` or `.xyzf32`.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyzf32") => read_xyzf32(path),
        _ => read_ply(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::new(vec![Point3::new(0.5, -1.25, 2.0), Point3::new(3.0, 0.0, -0.125)]).unwrap()
    }

    #[test]
    fn ply_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let p = dir.path().join("c.ply");
            write_ply(&p, &sample(), fmt).unwrap();
            assert_eq!(read_cloud(&p).unwrap(), sample());
        }
    }

    #[test]
    fn binary_ply_with_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment x\nelement vertex 1\nproperty uchar red\nproperty double x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        bytes.push(200);
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&2.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_le_bytes());
        let c = parse_ply(&bytes).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.5, 2.5, -1.0)]);
    }

    #[test]
    fn truncated_binary_ply() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(matches!(parse_ply(&bytes), Err(Error::TruncatedData)));
    }

    #[test]
    fn xyzf32_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.xyzf32");
        write_xyzf32(&p, &sample()).unwrap();
        assert_eq!(read_cloud(&p).unwrap(), sample());
        let bytes = fs::read(&p).unwrap();
        assert!(matches!(parse_xyzf32(&bytes[..bytes.len() - 1]), Err(Error::TruncatedData)));
        assert!(matches!(parse_xyzf32(&bytes[..4]), Err(Error::TruncatedHeader)));
    }
}
