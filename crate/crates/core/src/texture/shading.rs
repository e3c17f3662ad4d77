//! Cook–Torrance GGX shading of a geometry buffer and its texel gradients.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dual::{Dual, Real};
use super::raster::{GBuffer, Hit};
use super::MaterialMaps;
use crate::error::{Error, Result};
use crate::image::Image;

/// Roughness below this is raised to it before squaring into α.
pub const MIN_ROUGHNESS: f64 = 0.05;

const MIN_COSINE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Unit vector pointing from the surface towards the light.
    pub direction: [f64; 3],
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lights {
    pub directional: Vec<DirectionalLight>,
    /// Constant term added as `ambient · k_d · (1 − m)`.
    pub ambient: f64,
}

impl Default for Lights {
    /// Four lights at the corners of a tetrahedron, intensity 1.5, ambient 0.2.
    fn default() -> Self {
        let s = 1.0 / 3f64.sqrt();
        let directional = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
            .map(|d: [f64; 3]| DirectionalLight {
                direction: d.map(|c| c * s),
                intensity: 1.5,
            })
            .to_vec();
        Self { directional, ambient: 0.2 }
    }
}

impl Lights {
    pub fn none() -> Self {
        Self {
            directional: Vec::new(),
            ambient: 0.0,
        }
    }

    /// One light of the given intensity along `direction`, no ambient.
    pub fn single(direction: [f64; 3], intensity: f64) -> Self {
        let n = norm(direction);
        Self {
            directional: vec![DirectionalLight {
                direction: direction.map(|c| c / n),
                intensity,
            }],
            ambient: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ambient.is_finite() && self.ambient >= 0.0) {
            return Err(Error::InvalidArgument("ambient must be finite and non-negative".into()));
        }
        for (i, l) in self.directional.iter().enumerate() {
            if !(l.intensity.is_finite() && l.intensity >= 0.0) {
                return Err(Error::InvalidArgument(format!("light {i} intensity must be finite and non-negative")));
            }
            if !((norm(l.direction) - 1.0).abs() < 1e-6) {
                return Err(Error::InvalidArgument(format!("light {i} direction must be a unit vector")));
            }
        }
        Ok(())
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Four bilinear taps: texel indices and weights.
#[derive(Clone, Copy, Debug)]
pub struct Footprint {
    pub texels: [usize; 4],
    pub weights: [f64; 4],
}

impl Footprint {
    /// Clamp-to-edge bilinear footprint at `uv` on a `size × size` map; texel centers at `(i + 0.5) / size`.
    pub fn at(uv: [f64; 2], size: usize) -> Self {
        let axis = |u: f64| {
            let x = u.clamp(0.0, 1.0) * size as f64 - 0.5;
            let x0 = x.floor();
            let f = x - x0;
            let i0 = (x0 as i64).clamp(0, size as i64 - 1) as usize;
            let i1 = (x0 as i64 + 1).clamp(0, size as i64 - 1) as usize;
            (i0, i1, f)
        };
        let (x0, x1, fx) = axis(uv[0]);
        let (y0, y1, fy) = axis(uv[1]);
        Self {
            texels: [y0 * size + x0, y0 * size + x1, y1 * size + x0, y1 * size + x1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    fn sample<const C: usize>(&self, map: &[f64]) -> [f64; C] {
        let mut out = [0.0; C];
        for (t, w) in self.texels.iter().zip(self.weights) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * map[t * C + c];
            }
        }
        out
    }
}

/// The eight material values at one point: `k_d` (3), roughness, metallic, `k_n` (3).
pub fn sample_material(maps: &MaterialMaps, uv: [f64; 2]) -> ([f64; 8], Footprint) {
    let fp = Footprint::at(uv, maps.size());
    let kd: [f64; 3] = fp.sample(&maps.kd);
    let rm: [f64; 2] = fp.sample(&maps.krm);
    let kn: [f64; 3] = fp.sample(&maps.kn);
    ([kd[0], kd[1], kd[2], rm[0], rm[1], kn[0], kn[1], kn[2]], fp)
}

/// `normalize(T·p.x + B·p.y + N·p.z)` with `p = 2·k_n − 1` in the hit's tangent frame.
pub fn perturbed_normal<T: Real>(kn: [T; 3], hit: &Hit) -> [T; 3] {
    let p = kn.map(|k| T::cst(2.0) * k - T::cst(1.0));
    let n: [T; 3] = std::array::from_fn(|c| {
        p[0] * T::cst(hit.tangent[c]) + p[1] * T::cst(hit.bitangent[c]) + p[2] * T::cst(hit.normal[c])
    });
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max_c(1e-12);
    n.map(|c| c / len)
}

/// Shaded radiance of one surface point; `material` as in [`sample_material`].
pub fn shade_point<T: Real>(material: [T; 8], hit: &Hit, view: [f64; 3], lights: &Lights) -> [T; 3] {
    let kd = [material[0], material[1], material[2]];
    let r = material[3].max_c(MIN_ROUGHNESS);
    let m = material[4];
    let one = T::cst(1.0);

    let n = perturbed_normal([material[5], material[6], material[7]], hit);
    let ndot = |d: [f64; 3]| n[0] * T::cst(d[0]) + n[1] * T::cst(d[1]) + n[2] * T::cst(d[2]);

    let diffuse_weight = one - m;
    let mut out = kd.map(|k| T::cst(lights.ambient) * k * diffuse_weight);
    if lights.directional.is_empty() {
        return out.map(|c| c.clamp_c(0.0, 1.0));
    }

    let ndv = ndot(view).max_c(MIN_COSINE);
    let alpha = r * r;
    let a2 = alpha * alpha;
    let k = (r + one) * (r + one) / T::cst(8.0);
    let g_v = ndv / (ndv * (one - k) + k);
    let f0 = kd.map(|c| T::cst(0.04) * (one - m) + c * m);
    let diffuse = kd.map(|c| c * diffuse_weight / T::cst(PI));

    for light in &lights.directional {
        let ndl = ndot(light.direction);
        if ndl.value() <= 0.0 {
            continue;
        }
        let hv = [0, 1, 2].map(|c| light.direction[c] + view[c]);
        let hl = norm(hv);
        if hl < 1e-12 {
            continue;
        }
        let half = hv.map(|c| c / hl);
        let ndh = ndot(half).max_c(0.0);
        let vdh = dot(view, half).max(0.0);
        let denom = ndh * ndh * (a2 - one) + one;
        let d = a2 / (T::cst(PI) * denom * denom);
        let g_l = ndl / (ndl * (one - k) + k);
        let schlick = T::cst((1.0 - vdh).powi(5));
        let common = d * g_v * g_l / (T::cst(4.0) * ndv * ndl);
        let intensity = T::cst(light.intensity);
        for c in 0..3 {
            let fresnel = f0[c] + (one - f0[c]) * schlick;
            out[c] = out[c] + (diffuse[c] + common * fresnel) * intensity * ndl;
        }
    }
    out.map(|c| c.clamp_c(0.0, 1.0))
}

/// Renders the buffer with the given materials; misses take `background`.
pub fn shade(gbuffer: &GBuffer, maps: &MaterialMaps, lights: &Lights, background: [f64; 3]) -> Image {
    let (w, h) = (gbuffer.width, gbuffer.height);
    let mut data = vec![0.0; w * h * 3];
    data.par_chunks_mut(3).zip(gbuffer.hits.par_iter()).for_each(|(px, hit)| {
        let rgb = match hit {
            None => background,
            Some(hit) => {
                let (material, _) = sample_material(maps, hit.uv);
                shade_point(material, hit, gbuffer.view_dir(hit), lights)
            }
        };
        px.copy_from_slice(&rgb);
    });
    Image::from_vec(w, h, data).expect("buffer sized to the gbuffer")
}

/// Gradients of a scalar loss with respect to every texel of the three maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialGradients {
    pub kd: Vec<f64>,
    pub krm: Vec<f64>,
    pub kn: Vec<f64>,
}

impl MaterialGradients {
    pub fn zeros(size: usize) -> Self {
        Self {
            kd: vec![0.0; size * size * 3],
            krm: vec![0.0; size * size * 2],
            kn: vec![0.0; size * size * 3],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.kd.iter_mut().chain(&mut self.krm).chain(&mut self.kn) {
            *v *= s;
        }
    }

    pub fn add(&mut self, other: &MaterialGradients) {
        for (a, b) in self.kd.iter_mut().zip(&other.kd) {
            *a += b;
        }
        for (a, b) in self.krm.iter_mut().zip(&other.krm) {
            *a += b;
        }
        for (a, b) in self.kn.iter_mut().zip(&other.kn) {
            *a += b;
        }
    }
}

/// Pulls `grad_image` (∂L/∂pixel) back to the texels, holding visibility fixed.
///
/// Per-pixel derivatives are computed in parallel and scattered in pixel order.
pub fn shade_backward(
    gbuffer: &GBuffer,
    maps: &MaterialMaps,
    lights: &Lights,
    grad_image: &Image,
) -> Result<MaterialGradients> {
    if grad_image.width() != gbuffer.width || grad_image.height() != gbuffer.height {
        return Err(Error::Shape(format!(
            "gradient image is {}x{}, gbuffer is {}x{}",
            grad_image.width(),
            grad_image.height(),
            gbuffer.width,
            gbuffer.height
        )));
    }
    let per_pixel: Vec<Option<([f64; 8], Footprint)>> = gbuffer
        .hits
        .par_iter()
        .zip(grad_image.data().par_chunks(3))
        .map(|(hit, g)| {
            let hit = hit.as_ref()?;
            if g.iter().all(|&v| v == 0.0) {
                return None;
            }
            let (material, fp) = sample_material(maps, hit.uv);
            let vars: [Dual<8>; 8] = std::array::from_fn(|i| Dual::var(material[i], i));
            let out = shade_point(vars, hit, gbuffer.view_dir(hit), lights);
            let mut d = [0.0; 8];
            for (c, o) in out.iter().enumerate() {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj += g[c] * o.d[j];
                }
            }
            Some((d, fp))
        })
        .collect();

    let mut grads = MaterialGradients::zeros(maps.size());
    for (d, fp) in per_pixel.iter().flatten() {
        for (&t, &w) in fp.texels.iter().zip(&fp.weights) {
            for c in 0..3 {
                grads.kd[3 * t + c] += w * d[c];
                grads.kn[3 * t + c] += w * d[5 + c];
            }
            grads.krm[2 * t] += w * d[3];
            grads.krm[2 * t + 1] += w * d[4];
        }
    }
    Ok(grads)
}
