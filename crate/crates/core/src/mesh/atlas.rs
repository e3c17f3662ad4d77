use std::collections::HashMap;

use nalgebra::Vector3;

use super::{face_normal, TexturedMesh};
use crate::error::{Error, Result};

/// Gutter between charts and around the atlas border, in texels.
pub const GUTTER: usize = 2;

/// One orthographically projected patch of the atlas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    /// Dominant normal direction: `2·axis` for +axis, `2·axis + 1` for -axis.
    pub direction: u8,
    /// Texel rectangle `[x0, y0, x1, y1)` reserved for the chart.
    pub rect: [usize; 4],
}

impl Chart {
    /// Whether a UV (in `[0,1]²` for an atlas of `size` texels) lies in the rectangle.
    pub fn contains(&self, uv: [f64; 2], size: usize) -> bool {
        let (x, y) = (uv[0] * size as f64, uv[1] * size as f64);
        x >= self.rect[0] as f64 && x <= self.rect[2] as f64 && y >= self.rect[1] as f64 && y <= self.rect[3] as f64
    }
}

fn direction(n: &Vector3<f64>) -> u8 {
    let mut axis = 0;
    for a in 1..3 {
        if n[a].abs() > n[axis].abs() {
            axis = a;
        }
    }
    2 * axis as u8 + u8::from(n[axis] < 0.0)
}

/// In-plane coordinates for a direction, oriented so the chart is not mirrored.
fn project(p: &[f64; 3], dir: u8) -> [f64; 2] {
    let axis = (dir / 2) as usize;
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    if dir.is_multiple_of(2) {
        [p[a], p[b]]
    } else {
        [-p[a], p[b]]
    }
}

/// Shelf placement of `sizes` (in texels) inside a `size`² atlas, or `None`.
fn shelf_pack(sizes: &[[usize; 2]], order: &[usize], size: usize) -> Option<Vec<[usize; 2]>> {
    let mut at = vec![[0, 0]; sizes.len()];
    let (mut x, mut y, mut shelf) = (GUTTER, GUTTER, 0);
    for &c in order {
        let [w, h] = sizes[c];
        if x + w + GUTTER > size {
            y += shelf + GUTTER;
            x = GUTTER;
            shelf = 0;
        }
        if x + w + GUTTER > size || y + h + GUTTER > size {
            return None;
        }
        at[c] = [x, y];
        x += w + GUTTER;
        shelf = shelf.max(h);
    }
    Some(at)
}

/// Splits triangles into charts by dominant normal direction (six bins)
/// and edge connectivity within a bin, projects each chart onto its axis
/// plane, and shelf-packs the charts into a `size`² atlas at the largest
/// uniform scale that fits.
pub fn uv_unwrap(mesh: &TexturedMesh, size: usize) -> Result<TexturedMesh> {
    mesh.validate()?;
    if size < 2 * GUTTER + 1 {
        return Err(Error::InvalidArgument(format!("atlas size {size} is too small")));
    }
    let tri_count = mesh.triangles.len();
    let dirs: Vec<u8> = mesh
        .triangles
        .iter()
        .map(|t| direction(&face_normal(&mesh.vertices, t)))
        .collect();

    let mut parent: Vec<usize> = (0..tri_count).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut edge_owner: HashMap<(u32, u32, u8), usize> = HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            let key = (a.min(b), a.max(b), dirs[t]);
            if let Some(&other) = edge_owner.get(&key) {
                let (ra, rb) = (find(&mut parent, t), find(&mut parent, other));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            } else {
                edge_owner.insert(key, t);
            }
        }
    }
    let mut chart_of_root: HashMap<usize, u32> = HashMap::new();
    let mut triangle_charts = Vec::with_capacity(tri_count);
    let mut chart_dirs = Vec::new();
    for t in 0..tri_count {
        let r = find(&mut parent, t);
        let next = chart_of_root.len() as u32;
        let c = *chart_of_root.entry(r).or_insert_with(|| {
            chart_dirs.push(dirs[t]);
            next
        });
        triangle_charts.push(c);
    }
    let chart_count = chart_dirs.len();

    let mut projected = Vec::with_capacity(3 * tri_count);
    let mut lo = vec![[f64::INFINITY; 2]; chart_count];
    let mut hi = vec![[f64::NEG_INFINITY; 2]; chart_count];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let c = triangle_charts[t] as usize;
        for &v in tri {
            let p = project(&mesh.vertices[v as usize], chart_dirs[c]);
            for a in 0..2 {
                lo[c][a] = lo[c][a].min(p[a]);
                hi[c][a] = hi[c][a].max(p[a]);
            }
            projected.push(p);
        }
    }
    let extents: Vec<[f64; 2]> = (0..chart_count).map(|c| [hi[c][0] - lo[c][0], hi[c][1] - lo[c][1]]).collect();
    let sizes_at = |scale: f64| -> Vec<[usize; 2]> {
        extents
            .iter()
            .map(|e| e.map(|v| ((v * scale).ceil() as usize).max(1)))
            .collect()
    };
    let mut order: Vec<usize> = (0..chart_count).collect();
    order.sort_by(|&a, &b| extents[b][1].total_cmp(&extents[a][1]).then(a.cmp(&b)));

    let largest = extents.iter().flatten().copied().fold(0.0, f64::max);
    let mut hi_scale = if largest > 0.0 { size as f64 / largest } else { 1.0 };
    let mut lo_scale = 0.0;
    let mut best = shelf_pack(&sizes_at(lo_scale), &order, size).map(|p| (lo_scale, p));
    if best.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{chart_count} charts do not fit a {size}x{size} atlas"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo_scale + hi_scale);
        match shelf_pack(&sizes_at(mid), &order, size) {
            Some(p) => {
                lo_scale = mid;
                best = Some((mid, p));
            }
            None => hi_scale = mid,
        }
    }
    let (scale, placement) = best.expect("checked above");
    let sizes = sizes_at(scale);
    let charts: Vec<Chart> = (0..chart_count)
        .map(|c| Chart {
            direction: chart_dirs[c],
            rect: [
                placement[c][0],
                placement[c][1],
                placement[c][0] + sizes[c][0],
                placement[c][1] + sizes[c][1],
            ],
        })
        .collect();
    let inv = 1.0 / size as f64;
    let uvs = projected
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let c = triangle_charts[k / 3] as usize;
            let r = charts[c].rect;
            let u = (r[0] as f64 + ((p[0] - lo[c][0]) * scale).min(sizes[c][0] as f64)) * inv;
            let v = (r[1] as f64 + ((p[1] - lo[c][1]) * scale).min(sizes[c][1] as f64)) * inv;
            [u, v]
        })
        .collect();
    Ok(TexturedMesh {
        uvs,
        triangle_charts,
        charts,
        atlas_size: size,
        ..mesh.clone()
    })
}
