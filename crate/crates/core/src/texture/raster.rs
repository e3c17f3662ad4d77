//! Z-buffered triangle rasterization into a geometry buffer.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{CameraPose, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::mesh::TexturedMesh;

const TILE: usize = 16;

/// Surface attributes at the visible point of one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub triangle: u32,
    /// Perspective-correct barycentrics of the triangle's corners.
    pub bary: [f64; 3],
    pub position: [f64; 3],
    /// Interpolated vertex normal, unit length.
    pub normal: [f64; 3],
    /// Unit tangent orthogonal to `normal`, aligned with increasing u.
    pub tangent: [f64; 3],
    /// Unit bitangent completing the frame, aligned with increasing v.
    pub bitangent: [f64; 3],
    pub uv: [f64; 2],
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub eye: [f64; 3],
    pub hits: Vec<Option<Hit>>,
}

impl GBuffer {
    pub fn hit(&self, x: usize, y: usize) -> Option<&Hit> {
        self.hits[y * self.width + x].as_ref()
    }

    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|h| h.is_some()).count()
    }

    /// Unit vector from a surface point towards the camera.
    pub fn view_dir(&self, hit: &Hit) -> [f64; 3] {
        let v = Vector3::from(self.eye) - Vector3::from(hit.position);
        v.normalize().into()
    }
}

struct Projected {
    xy: [f64; 2],
    z: f64,
}

/// Per-triangle tangent and bitangent from positions and UVs, or `None` when the UV map is degenerate.
fn uv_frame(p: [Vector3<f64>; 3], uv: [[f64; 2]; 3]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let (du1, dv1) = (uv[1][0] - uv[0][0], uv[1][1] - uv[0][1]);
    let (du2, dv2) = (uv[2][0] - uv[0][0], uv[2][1] - uv[0][1]);
    let det = du1 * dv2 - du2 * dv1;
    if det.abs() < 1e-300 {
        return None;
    }
    let t = (e1 * dv2 - e2 * dv1) / det;
    let b = (e2 * du1 - e1 * du2) / det;
    Some((t, b))
}

/// Orthonormal frame around `n` whose tangent follows `t` and whose bitangent has the sign of `b`.
fn orthonormal_frame(n: Vector3<f64>, t: Option<(Vector3<f64>, Vector3<f64>)>) -> (Vector3<f64>, Vector3<f64>) {
    let fallback = || {
        let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let t = (a - n * n.dot(&a)).normalize();
        (t, n.cross(&t))
    };
    let Some((t, b)) = t else {
        return fallback();
    };
    let t = t - n * n.dot(&t);
    let len = t.norm();
    if !(len > 1e-12) {
        return fallback();
    }
    let t = t / len;
    let mut bt = n.cross(&t);
    if bt.dot(&b) < 0.0 {
        bt = -bt;
    }
    (t, bt)
}

/// Rasterizes `mesh` as seen from `pose`, keeping the nearest surface per pixel.
///
/// Triangles with a vertex at or behind the near plane are skipped. Both
/// windings are drawn. Equal depths resolve to the lower triangle index.
pub fn rasterize_mesh(mesh: &TexturedMesh, pose: &CameraPose) -> Result<GBuffer> {
    pose.validate()?;
    if !mesh.triangles.is_empty() && !mesh.has_uvs() {
        return Err(Error::InvalidArgument("mesh has no UVs; unwrap it first".into()));
    }
    let (w, h) = (pose.width, pose.height);
    let rotation = pose.rotation();
    let eye = pose.eye();
    let k = pose.intrinsics();
    let projected: Vec<Option<Projected>> = mesh
        .vertices
        .iter()
        .map(|v| {
            let c = pose.to_camera(&rotation, &eye, &Vector3::from(*v));
            (c.z > NEAR_PLANE).then(|| Projected {
                xy: [k.cx + k.fx * c.x / c.z, k.cy + k.fy * c.y / c.z],
                z: c.z,
            })
        })
        .collect();

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (ti, tri) in mesh.triangles.iter().enumerate() {
        let Some(corners) = tri
            .iter()
            .map(|&i| projected[i as usize].as_ref())
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let min_x = corners.iter().map(|c| c.xy[0]).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|c| c.xy[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|c| c.xy[1]).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|c| c.xy[1]).fold(f64::NEG_INFINITY, f64::max);
        // Pixel centers sit at integer + 0.5.
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let y1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                bins[ty * tiles_x + tx].push(ti as u32);
            }
        }
    }

    let frames: Vec<Option<(Vector3<f64>, Vector3<f64>)>> = mesh
        .triangles
        .iter()
        .enumerate()
        .map(|(ti, tri)| {
            let p = tri.map(|i| Vector3::from(mesh.vertices[i as usize]));
            uv_frame(p, [mesh.uvs[3 * ti], mesh.uvs[3 * ti + 1], mesh.uvs[3 * ti + 2]])
        })
        .collect();

    let tile_hits: Vec<Vec<(usize, Hit)>> = bins
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut out = Vec::new();
            if list.is_empty() {
                return out;
            }
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let c = [px as f64 + 0.5, py as f64 + 0.5];
                    let mut best: Option<(f64, u32, [f64; 3])> = None;
                    for &ti in list {
                        let tri = mesh.triangles[ti as usize];
                        let q = tri.map(|i| projected[i as usize].as_ref().expect("binned triangles are in front"));
                        let Some((depth, bary)) = cover(&q, c) else {
                            continue;
                        };
                        if best.is_none_or(|(d, _, _)| depth < d) {
                            best = Some((depth, ti, bary));
                        }
                    }
                    if let Some((depth, ti, bary)) = best {
                        out.push((py * w + px, surface(mesh, &frames, ti, bary, depth)));
                    }
                }
            }
            out
        })
        .collect();

    let mut hits = vec![None; w * h];
    for (idx, hit) in tile_hits.into_iter().flatten() {
        hits[idx] = Some(hit);
    }
    Ok(GBuffer {
        width: w,
        height: h,
        eye: eye.into(),
        hits,
    })
}

/// Depth and perspective-correct barycentrics where the pixel center `c` falls inside the triangle.
fn cover(q: &[&Projected; 3], c: [f64; 2]) -> Option<(f64, [f64; 3])> {
    let cross = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let area = cross(q[0].xy, q[1].xy, q[2].xy);
    if area.abs() < 1e-300 {
        return None;
    }
    let l = [
        cross(q[1].xy, q[2].xy, c) / area,
        cross(q[2].xy, q[0].xy, c) / area,
        cross(q[0].xy, q[1].xy, c) / area,
    ];
    if l.iter().any(|&v| v < 0.0) {
        return None;
    }
    let inv = [l[0] / q[0].z, l[1] / q[1].z, l[2] / q[2].z];
    let inv_z = inv[0] + inv[1] + inv[2];
    let depth = 1.0 / inv_z;
    Some((depth, inv.map(|v| v * depth)))
}

fn surface(
    mesh: &TexturedMesh,
    frames: &[Option<(Vector3<f64>, Vector3<f64>)>],
    ti: u32,
    bary: [f64; 3],
    depth: f64,
) -> Hit {
    let t = ti as usize;
    let tri = mesh.triangles[t];
    let mut position = Vector3::zeros();
    let mut normal = Vector3::zeros();
    let mut uv = [0.0; 2];
    for k in 0..3 {
        let v = tri[k] as usize;
        position += bary[k] * Vector3::from(mesh.vertices[v]);
        normal += bary[k] * Vector3::from(mesh.normals[v]);
        let c = mesh.uvs[3 * t + k];
        uv[0] += bary[k] * c[0];
        uv[1] += bary[k] * c[1];
    }
    let normal = if normal.norm() > 1e-12 {
        normal.normalize()
    } else {
        let p = tri.map(|i| Vector3::from(mesh.vertices[i as usize]));
        (p[1] - p[0]).cross(&(p[2] - p[0])).normalize()
    };
    let (tangent, bitangent) = orthonormal_frame(normal, frames[t]);
    Hit {
        triangle: ti,
        bary,
        position: position.into(),
        normal: normal.into(),
        tangent: tangent.into(),
        bitangent: bitangent.into(),
        uv,
        depth,
    }
}
