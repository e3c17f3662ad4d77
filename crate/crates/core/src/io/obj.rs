//! Wavefront OBJ/MTL export of textured meshes with PNG material maps, and a reader.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mesh::TexturedMesh;
use crate::texture::{MapKind, MaterialMaps};

pub const OBJ_FILE: &str = "mesh.obj";
pub const MTL_FILE: &str = "mesh.mtl";
pub const DIFFUSE_FILE: &str = "diffuse.png";
pub const ROUGHNESS_METALLIC_FILE: &str = "roughness_metallic.png";
pub const NORMAL_FILE: &str = "normal.png";

/// Files written by [`export_mesh`].
#[derive(Clone, Debug)]
pub struct MeshFiles {
    pub obj: PathBuf,
    pub mtl: PathBuf,
    pub diffuse: PathBuf,
    pub roughness_metallic: PathBuf,
    pub normal: PathBuf,
}

/// OBJ text: one `v`/`vn` per vertex, one `vt` per triangle corner, `v` flipped so the origin is bottom-left.
pub fn encode_obj(mesh: &TexturedMesh) -> String {
    let mut s = String::new();
    writeln!(s, "mtllib {MTL_FILE}").unwrap();
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for n in &mesh.normals {
        writeln!(s, "vn {} {} {}", n[0], n[1], n[2]).unwrap();
    }
    for uv in &mesh.uvs {
        writeln!(s, "vt {} {}", uv[0], 1.0 - uv[1]).unwrap();
    }
    writeln!(s, "usemtl material").unwrap();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let c = |k: usize| format!("{0}/{1}/{0}", tri[k] + 1, 3 * t + k + 1);
        writeln!(s, "f {} {} {}", c(0), c(1), c(2)).unwrap();
    }
    s
}

fn encode_mtl() -> String {
    format!(
        "newmtl material\nKa 0 0 0\nKd 1 1 1\nKs 0 0 0\nillum 2\nmap_Kd {DIFFUSE_FILE}\n\
         map_Pr {ROUGHNESS_METALLIC_FILE}\nmap_Pm {ROUGHNESS_METALLIC_FILE}\nnorm {NORMAL_FILE}\n"
    )
}

/// Writes the OBJ, MTL and three 8-bit PNG maps into `dir`, creating it if needed.
pub fn export_mesh(mesh: &TexturedMesh, maps: &MaterialMaps, dir: impl AsRef<Path>) -> Result<MeshFiles> {
    let dir = dir.as_ref();
    if !mesh.has_uvs() {
        return Err(Error::InvalidArgument("mesh has no UVs; unwrap it first".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = MeshFiles {
        obj: dir.join(OBJ_FILE),
        mtl: dir.join(MTL_FILE),
        diffuse: dir.join(DIFFUSE_FILE),
        roughness_metallic: dir.join(ROUGHNESS_METALLIC_FILE),
        normal: dir.join(NORMAL_FILE),
    };
    fs::write(&files.obj, encode_obj(mesh)).map_err(|e| Error::io(&files.obj, e))?;
    fs::write(&files.mtl, encode_mtl()).map_err(|e| Error::io(&files.mtl, e))?;
    maps.to_image(MapKind::Diffuse).save_png(&files.diffuse)?;
    maps.to_image(MapKind::RoughnessMetallic).save_png(&files.roughness_metallic)?;
    maps.to_image(MapKind::Normal).save_png(&files.normal)?;
    Ok(files)
}

/// Contents of an OBJ file restricted to triangles.
/// Zero-based `(v, vt, vn)` indices of one face corner.
pub type Corner = (usize, Option<usize>, Option<usize>);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjData {
    pub positions: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub texcoords: Vec<[f64; 2]>,
    /// Absent indices are `None`.
    pub faces: Vec<[Corner; 3]>,
    pub mtllib: Option<String>,
}

pub fn parse_obj(text: &str) -> Result<ObjData> {
    let mut out = ObjData::default();
    for (n, line) in text.lines().enumerate() {
        let loc = || format!("line {}", n + 1);
        let mut words = line.split_whitespace();
        let Some(tag) = words.next() else { continue };
        let rest: Vec<&str> = words.collect();
        let floats = |k: usize| -> Result<Vec<f64>> {
            if rest.len() < k {
                return Err(Error::parse(loc(), format!("`{tag}` needs {k} numbers")));
            }
            rest[..k]
                .iter()
                .map(|w| w.parse::<f64>().map_err(|_| Error::parse(loc(), format!("bad number `{w}`"))))
                .collect()
        };
        match tag {
            "v" => {
                let f = floats(3)?;
                out.positions.push([f[0], f[1], f[2]]);
            }
            "vn" => {
                let f = floats(3)?;
                out.normals.push([f[0], f[1], f[2]]);
            }
            "vt" => {
                let f = floats(2)?;
                out.texcoords.push([f[0], f[1]]);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::parse(loc(), "only triangles are supported"));
                }
                let mut corners = [(0, None, None); 3];
                for (k, w) in rest.iter().enumerate() {
                    let mut parts = w.split('/');
                    let index = |p: Option<&str>, len: usize| -> Result<Option<usize>> {
                        match p {
                            None | Some("") => Ok(None),
                            Some(p) => {
                                let i: usize = p.parse().map_err(|_| Error::parse(loc(), format!("bad index `{p}`")))?;
                                if i == 0 || i > len {
                                    return Err(Error::parse(loc(), format!("index {i} out of range")));
                                }
                                Ok(Some(i - 1))
                            }
                        }
                    };
                    let v = index(parts.next(), out.positions.len())?
                        .ok_or_else(|| Error::parse(loc(), "face corner without a vertex index"))?;
                    let vt = index(parts.next(), out.texcoords.len())?;
                    let vn = index(parts.next(), out.normals.len())?;
                    corners[k] = (v, vt, vn);
                }
                out.faces.push(corners);
            }
            "mtllib" => out.mtllib = rest.first().map(|s| s.to_string()),
            _ => {}
        }
    }
    Ok(out)
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<ObjData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

fn load_map(path: &Path, size: usize, channels: usize) -> Result<Vec<f64>> {
    let img = Image::load_png(path)?;
    if img.width() != size || img.height() != size {
        return Err(Error::Shape(format!(
            "{} is {}x{}, expected {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img.data().chunks(3).flat_map(|p| p[..channels].to_vec()).collect())
}

/// Reads a directory written by [`export_mesh`]; maps come back 8-bit quantized and charts are not recovered.
pub fn import_mesh(dir: impl AsRef<Path>) -> Result<(TexturedMesh, MaterialMaps)> {
    let dir = dir.as_ref();
    let obj = read_obj(dir.join(OBJ_FILE))?;
    let mut uvs = Vec::with_capacity(obj.faces.len() * 3);
    let mut triangles = Vec::with_capacity(obj.faces.len());
    for (f, face) in obj.faces.iter().enumerate() {
        triangles.push(face.map(|c| c.0 as u32));
        for c in face {
            let vt = c.1.ok_or_else(|| Error::parse(format!("face {}", f + 1), "missing texture coordinate"))?;
            let t = obj.texcoords[vt];
            uvs.push([t[0], 1.0 - t[1]]);
        }
    }
    let normals = if obj.normals.len() == obj.positions.len() {
        obj.normals.clone()
    } else {
        TexturedMesh::from_geometry(obj.positions.clone(), triangles.clone())?.normals
    };
    let diffuse = Image::load_png(dir.join(DIFFUSE_FILE))?;
    let size = diffuse.width();
    let mesh = TexturedMesh {
        vertices: obj.positions,
        triangles,
        normals,
        uvs,
        triangle_charts: Vec::new(),
        charts: Vec::new(),
        atlas_size: size,
    };
    mesh.validate()?;
    let maps = MaterialMaps::from_parts(
        size,
        load_map(&dir.join(DIFFUSE_FILE), size, 3)?,
        load_map(&dir.join(ROUGHNESS_METALLIC_FILE), size, 2)?,
        load_map(&dir.join(NORMAL_FILE), size, 3)?,
    )?;
    Ok((mesh, maps))
}
