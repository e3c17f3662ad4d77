//! Binary little-endian PLY in the common splat layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;

/// Vertex properties in file order.
pub const PLY_PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Properties the reader requires; normals are optional.
const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

fn row(cloud: &GaussianCloud, i: usize) -> [f64; 17] {
    let p = cloud.positions[i];
    let c = cloud.colors[i];
    let s = cloud.log_scales[i];
    let r = cloud.rotations[i];
    [
        p[0], p[1], p[2], 0.0, 0.0, 0.0, c[0], c[1], c[2], cloud.opacity_logits[i], s[0], s[1], s[2], r[0], r[1],
        r[2], r[3],
    ]
}

pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for name in PLY_PROPERTIES {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * PLY_PROPERTIES.len() * 4);
    for i in 0..cloud.len() {
        for v in row(cloud, i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes `cloud` as float32 PLY; values are rounded to the nearest `f32`.
pub fn export_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ply(cloud)).map_err(|e| Error::io(path, e))
}

pub fn import_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes)
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::parse("header", "no `end_header` line"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse("header", "header is not UTF-8"))?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with("comment"));
    if lines.next() != Some("ply") {
        return Err(Error::parse("header", "missing `ply` magic"));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let loc = || format!("header line {}", n + 2);
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(Error::parse(loc(), format!("unsupported format `{other}`"))),
            ["element", "vertex", c] => {
                if count.is_some() {
                    return Err(Error::parse(loc(), "second vertex element"));
                }
                count = Some(c.parse().map_err(|_| Error::parse(loc(), format!("bad vertex count `{c}`")))?);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(Error::parse(format!("element {name}"), "only a vertex element is supported"));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(Error::parse(loc(), format!("property `{name}` outside the vertex element")));
                }
                let scalar = Scalar::parse(ty).ok_or_else(|| {
                    Error::parse(format!("element vertex, property {name}"), format!("unsupported type `{ty}`"))
                })?;
                props.push((name.to_string(), scalar));
            }
            _ => return Err(Error::parse(loc(), format!("unrecognized line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| Error::parse("header", "no vertex element"))?;
    let mut offsets = Vec::with_capacity(REQUIRED.len());
    for want in REQUIRED {
        let mut offset = 0;
        let mut found = None;
        for (name, scalar) in &props {
            if name == want {
                found = Some((offset, *scalar));
                break;
            }
            offset += scalar.size();
        }
        let found = found.ok_or_else(|| Error::parse("element vertex", format!("missing property `{want}`")))?;
        offsets.push(found);
    }
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    if body.len() != count * stride {
        return Err(Error::parse(
            "element vertex",
            format!(
                "header declares {count} vertices ({} bytes) but {} bytes follow",
                count * stride,
                body.len()
            ),
        ));
    }

    let mut cloud = GaussianCloud::with_capacity(count);
    for i in 0..count {
        let rec = &body[i * stride..(i + 1) * stride];
        let v: Vec<f64> = offsets.iter().map(|&(o, s)| s.read(&rec[o..])).collect();
        cloud.positions.push([v[0], v[1], v[2]]);
        cloud.colors.push([v[3], v[4], v[5]]);
        cloud.opacity_logits.push(v[6]);
        cloud.log_scales.push([v[7], v[8], v[9]]);
        cloud.rotations.push([v[10], v[11], v[12], v[13]]);
    }
    cloud.validate()?;
    Ok(cloud)
}
