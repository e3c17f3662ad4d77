//! From splats to a triangle mesh: density field, block-culled grid,
//! marching cubes, and a chart-based UV atlas.

mod atlas;
mod tables;

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use atlas::{uv_unwrap, Chart};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;

/// Culled contributions per grid vertex stay below this bound.
pub const CULL_TOLERANCE: f64 = 1e-6;
/// Triangles with smaller area are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

const BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Grid vertices per axis.
    pub resolution: usize,
    pub threshold: f64,
    /// Bounds padding in units of the largest splat standard deviation.
    pub padding_sigmas: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            threshold: 1.0,
            padding_sigmas: 3.0,
        }
    }
}

impl MeshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::config("resolution", "needs at least 2 vertices per axis"));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config("threshold", "must be positive"));
        }
        if !(self.padding_sigmas >= 0.0) {
            return Err(Error::config("padding_sigmas", "must be non-negative"));
        }
        Ok(())
    }
}

/// A splat reduced to what the density field needs.
#[derive(Clone, Copy, Debug)]
struct Kernel {
    mean: Vector3<f64>,
    precision: Matrix3<f64>,
    opacity: f64,
}

impl Kernel {
    #[inline]
    fn eval(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.mean;
        self.opacity * (-0.5 * d.dot(&(self.precision * d))).exp()
    }
}

/// The splat density `d(x) = Σ oᵢ·exp(-½ (x-μᵢ)ᵀ Σᵢ⁻¹ (x-μᵢ))`.
#[derive(Clone, Debug)]
pub struct DensityField {
    kernels: Vec<Kernel>,
    max_sigma: f64,
    total_opacity: f64,
}

impl DensityField {
    pub fn new(cloud: &GaussianCloud) -> Result<Self> {
        cloud.validate()?;
        let mut kernels = Vec::with_capacity(cloud.len());
        let mut max_sigma: f64 = 0.0;
        for i in 0..cloud.len() {
            let s = cloud.effective(i)?;
            let inv = Vector3::new(1.0 / (s.scale.x * s.scale.x), 1.0 / (s.scale.y * s.scale.y), 1.0 / (s.scale.z * s.scale.z));
            let precision = s.rotation * Matrix3::from_diagonal(&inv) * s.rotation.transpose();
            max_sigma = max_sigma.max(s.scale.max());
            kernels.push(Kernel {
                mean: s.mean,
                precision,
                opacity: s.opacity,
            });
        }
        let total_opacity = kernels.iter().map(|k| k.opacity).sum();
        Ok(Self {
            kernels,
            max_sigma,
            total_opacity,
        })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn max_sigma(&self) -> f64 {
        self.max_sigma
    }

    /// Full sum over every splat.
    pub fn density(&self, p: [f64; 3]) -> f64 {
        let p = Vector3::from(p);
        self.kernels.iter().map(|k| k.eval(&p)).sum()
    }

    fn density_of(&self, p: &Vector3<f64>, subset: &[u32]) -> f64 {
        subset.iter().map(|&i| self.kernels[i as usize].eval(p)).sum()
    }

    /// Culling radius in σ units such that every dropped splat together
    /// contributes less than [`CULL_TOLERANCE`] (never below 3).
    pub fn cull_sigmas(&self) -> f64 {
        let needed = (2.0 * (self.total_opacity / CULL_TOLERANCE).ln()).max(0.0).sqrt();
        needed.max(3.0)
    }
}

pub fn density_at(cloud: &GaussianCloud, point: [f64; 3]) -> Result<f64> {
    Ok(DensityField::new(cloud)?.density(point))
}

/// Scalar samples on a regular lattice of vertices, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub resolution: [usize; 3],
    pub bounds: [[f64; 3]; 2],
    pub values: Vec<f64>,
}

impl DensityGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.bounds[1][a] - self.bounds[0][a]) / (self.resolution[a] - 1) as f64)
    }

    /// World position of vertex `(i, j, k)`; the last vertex lands exactly on the upper bound.
    #[inline]
    pub fn position(&self, ijk: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let n = self.resolution[a] - 1;
            if ijk[a] == n {
                self.bounds[1][a]
            } else {
                let f = ijk[a] as f64 / n as f64;
                self.bounds[0][a] + (self.bounds[1][a] - self.bounds[0][a]) * f
            }
        })
    }

    pub fn voxel_diagonal(&self) -> f64 {
        let s = self.spacing();
        (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn empty_grid(resolution: usize) -> Result<()> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution {resolution} is below 2"
        )));
    }
    Ok(())
}

fn grid_bounds(cloud: &GaussianCloud, padding: f64) -> Result<[[f64; 3]; 2]> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot bound an empty cloud".into()));
    }
    if !(padding >= 0.0 && padding.is_finite()) {
        return Err(Error::InvalidArgument(format!("padding {padding} must be finite and non-negative")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Ok([lo.map(|v| v - padding), hi.map(|v| v + padding)])
}

/// Naive grid: every vertex sums every splat.
pub fn build_grid_naive(cloud: &GaussianCloud, resolution: usize, padding: f64) -> Result<DensityGrid> {
    empty_grid(resolution)?;
    let bounds = grid_bounds(cloud, padding)?;
    let field = DensityField::new(cloud)?;
    let mut grid = DensityGrid {
        resolution: [resolution; 3],
        bounds,
        values: vec![0.0; resolution * resolution * resolution],
    };
    let values: Vec<f64> = (0..grid.values.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % resolution, (idx / resolution) % resolution, idx / (resolution * resolution));
            field.density(grid.position([i, j, k]))
        })
        .collect();
    grid.values = values;
    Ok(grid)
}

/// Block-culled grid over the splat bounding box dilated by `padding`.
///
/// Each block of vertices sums only the splats whose mean lies within the
/// block's box dilated by [`DensityField::cull_sigmas`] times the largest σ.
pub fn build_grid(cloud: &GaussianCloud, resolution: usize, padding: f64) -> Result<DensityGrid> {
    empty_grid(resolution)?;
    let bounds = grid_bounds(cloud, padding)?;
    let field = DensityField::new(cloud)?;
    let mut grid = DensityGrid {
        resolution: [resolution; 3],
        bounds,
        values: vec![0.0; resolution * resolution * resolution],
    };
    let reach = field.cull_sigmas() * field.max_sigma();
    let blocks = resolution.div_ceil(BLOCK);
    let results: Vec<(usize, Vec<f64>)> = (0..blocks * blocks * blocks)
        .into_par_iter()
        .map(|b| {
            let (bi, bj, bk) = (b % blocks, (b / blocks) % blocks, b / (blocks * blocks));
            let start = [bi, bj, bk].map(|v| v * BLOCK);
            let end = start.map(|v| (v + BLOCK).min(resolution));
            let lo = grid.position(start);
            let hi = grid.position(end.map(|v| v - 1));
            let subset: Vec<u32> = field
                .kernels
                .iter()
                .enumerate()
                .filter(|(_, k)| (0..3).all(|a| k.mean[a] >= lo[a] - reach && k.mean[a] <= hi[a] + reach))
                .map(|(i, _)| i as u32)
                .collect();
            let mut values = Vec::with_capacity(BLOCK * BLOCK * BLOCK);
            for k in start[2]..end[2] {
                for j in start[1]..end[1] {
                    for i in start[0]..end[0] {
                        let p = Vector3::from(grid.position([i, j, k]));
                        values.push(field.density_of(&p, &subset));
                    }
                }
            }
            (b, values)
        })
        .collect();
    for (b, values) in results {
        let (bi, bj, bk) = (b % blocks, (b / blocks) % blocks, b / (blocks * blocks));
        let start = [bi, bj, bk].map(|v| v * BLOCK);
        let end = start.map(|v| (v + BLOCK).min(resolution));
        let mut it = values.into_iter();
        for k in start[2]..end[2] {
            for j in start[1]..end[1] {
                for i in start[0]..end[0] {
                    let idx = grid.index(i, j, k);
                    grid.values[idx] = it.next().expect("one value per vertex");
                }
            }
        }
    }
    Ok(grid)
}

/// Geometry plus per-corner UVs once unwrapped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// Unit per-vertex normals.
    pub normals: Vec<[f64; 3]>,
    /// Three UVs per triangle, in triangle order; empty before unwrapping.
    pub uvs: Vec<[f64; 2]>,
    /// Chart of each triangle; empty before unwrapping.
    pub triangle_charts: Vec<u32>,
    pub charts: Vec<Chart>,
    /// Atlas side length in texels the UVs were packed for.
    pub atlas_size: usize,
}

impl TexturedMesh {
    /// Builds a mesh from raw geometry with area-weighted vertex normals,
    /// dropping degenerate triangles and unreferenced vertices.
    pub fn from_geometry(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        for t in &triangles {
            if let Some(&bad) = t.iter().find(|&&i| i as usize >= vertices.len()) {
                return Err(Error::IndexOutOfRange {
                    index: bad as usize,
                    len: vertices.len(),
                });
            }
        }
        let kept: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| triangle_area(&vertices, t) >= MIN_TRIANGLE_AREA)
            .collect();
        let mut remap = vec![u32::MAX; vertices.len()];
        let mut compact = Vec::new();
        let triangles: Vec<[u32; 3]> = kept
            .iter()
            .map(|t| {
                t.map(|i| {
                    if remap[i as usize] == u32::MAX {
                        remap[i as usize] = compact.len() as u32;
                        compact.push(vertices[i as usize]);
                    }
                    remap[i as usize]
                })
            })
            .collect();
        let mut mesh = TexturedMesh {
            vertices: compact,
            triangles,
            ..Default::default()
        };
        mesh.recompute_normals();
        Ok(mesh)
    }

    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let n = face_normal(&self.vertices, t);
            for &i in t {
                acc[i as usize] += n;
            }
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    (n / len).into()
                } else {
                    [0.0, 0.0, 1.0]
                }
            })
            .collect();
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn has_uvs(&self) -> bool {
        !self.triangles.is_empty() && self.uvs.len() == 3 * self.triangles.len()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.triangles {
            if let Some(&bad) = t.iter().find(|&&i| i as usize >= self.vertices.len()) {
                return Err(Error::IndexOutOfRange {
                    index: bad as usize,
                    len: self.vertices.len(),
                });
            }
        }
        if self.normals.len() != self.vertices.len() {
            return Err(Error::Shape("one normal per vertex required".into()));
        }
        if !self.uvs.is_empty() && self.uvs.len() != 3 * self.triangles.len() {
            return Err(Error::Shape("three UVs per triangle required".into()));
        }
        Ok(())
    }

    /// Groups of triangles connected through shared vertices.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            let a = find(&mut parent, t[0] as usize);
            for &v in &t[1..] {
                let b = find(&mut parent, v as usize);
                parent[b] = a;
            }
        }
        let mut roots = std::collections::BTreeSet::new();
        for t in &self.triangles {
            roots.insert(find(&mut parent, t[0] as usize));
        }
        roots.len()
    }

    /// Scales every vertex about the origin.
    pub fn scaled(&self, factor: f64) -> TexturedMesh {
        TexturedMesh {
            vertices: self.vertices.iter().map(|v| v.map(|c| c * factor)).collect(),
            ..self.clone()
        }
    }
}

fn face_normal(v: &[[f64; 3]], t: &[u32; 3]) -> Vector3<f64> {
    let a = Vector3::from(v[t[0] as usize]);
    let b = Vector3::from(v[t[1] as usize]);
    let c = Vector3::from(v[t[2] as usize]);
    (b - a).cross(&(c - a))
}

pub(crate) fn triangle_area(v: &[[f64; 3]], t: &[u32; 3]) -> f64 {
    0.5 * face_normal(v, t).norm()
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (3, 2),
    (0, 3),
    (4, 5),
    (5, 6),
    (7, 6),
    (4, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Marching cubes at `threshold`, with the inside where density exceeds it.
/// Vertices on shared lattice edges are welded, so the surface is closed
/// wherever it does not meet the grid boundary. Triangles face outward.
pub fn marching_cubes(grid: &DensityGrid, threshold: f64) -> Result<TexturedMesh> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be positive")));
    }
    let [nx, ny, nz] = grid.resolution;
    if nx < 2 || ny < 2 || nz < 2 || grid.values.len() != nx * ny * nz {
        return Err(Error::Shape("grid needs at least 2 vertices per axis".into()));
    }
    let mut welded: HashMap<u64, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let ijk = CORNERS.map(|c| [i + c[0], j + c[1], k + c[2]]);
                let vals = ijk.map(|c| grid.values[grid.index(c[0], c[1], c[2])]);
                let mut case = 0usize;
                for (bit, v) in vals.iter().enumerate() {
                    if *v < threshold {
                        case |= 1 << bit;
                    }
                }
                let mask = tables::EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut ids = [u32::MAX; 12];
                for (e, &(a, b)) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = (ijk[a], ijk[b]);
                    let axis = (0..3).find(|&x| ca[x] != cb[x]).expect("edge spans one axis");
                    let key = grid.index(ca[0], ca[1], ca[2]) as u64 * 3 + axis as u64;
                    ids[e] = *welded.entry(key).or_insert_with(|| {
                        let (va, vb) = (vals[a], vals[b]);
                        let (pa, pb) = (grid.position(ca), grid.position(cb));
                        let f = ((threshold - va) / (vb - va)).clamp(0.0, 1.0);
                        vertices.push([0, 1, 2].map(|x| pa[x] + f * (pb[x] - pa[x])));
                        (vertices.len() - 1) as u32
                    });
                }
                for tri in tables::TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [ids[tri[0] as usize], ids[tri[1] as usize], ids[tri[2] as usize]];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        triangles.push(t);
                    }
                }
            }
        }
    }
    TexturedMesh::from_geometry(vertices, triangles)
}

/// Grid and surface for `cloud` under `config`.
pub fn extract_mesh(cloud: &GaussianCloud, config: &MeshConfig) -> Result<TexturedMesh> {
    config.validate()?;
    let padding = config.padding_sigmas * cloud.max_scale();
    let grid = build_grid(cloud, config.resolution, padding)?;
    marching_cubes(&grid, config.threshold)
}
