//! Differentiable splat rasterization.
//!
//! Splats are projected with the local-affine (EWA) approximation, sorted
//! globally by camera depth (ties broken by splat index) and composited front
//! to back:
//!
//! ```text
//! α_i(p) = min(o_i · exp(-½ dᵀ Σ2d⁻¹ d), α_max),   d = p - μ2d
//! C(p)   = Σ c_i α_i T_i,   T_i = Π_{j<i} (1 - α_j)
//! rgb    = C + T_final · background
//! ```
//!
//! Contributions with `α < alpha_threshold` are skipped in the forward pass
//! and therefore carry no gradient. Tiles only bound the per-pixel work: a
//! splat is binned to every tile its threshold ellipse touches, so the output
//! is identical to testing every splat at every pixel.
//!
//! [`backward`] returns the exact gradient of `⟨grad_rgb, rgb⟩` with respect
//! to every raw parameter of the cloud, chaining through the activations.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::gaussian::{normalize_vjp, rotation_matrix_vjp, EffectiveSplat, GaussianCloud};
use crate::image::Image;

const TILE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Added to the diagonal of every projected covariance, in px².
    pub aa_floor: f64,
    pub alpha_max: f64,
    pub alpha_threshold: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            aa_floor: 0.3,
            alpha_max: 0.99,
            alpha_threshold: 1.0 / 255.0,
        }
    }
}

/// Screen-space footprint of one splat.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` of the influence ellipse, clipped to the image.
    pub bounds: [usize; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Projects a splat, or returns `None` when it is culled (behind the near
/// plane, unable to reach `alpha_threshold`, or with an influence ellipse
/// entirely off-image). The influence ellipse is never smaller than 3σ.
pub fn project_splat(
    splat: &EffectiveSplat,
    pose: &CameraPose,
    config: &RenderConfig,
) -> Option<Projected> {
    let view = pose.rotation();
    let eye = pose.eye();
    project_with(splat, pose, &view, &eye, config)
}

fn project_with(
    splat: &EffectiveSplat,
    pose: &CameraPose,
    view: &Matrix3<f64>,
    eye: &Vector3<f64>,
    config: &RenderConfig,
) -> Option<Projected> {
    let t = view * (splat.mean - eye);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let k = pose.intrinsics();
    let jac = jacobian(k.fx, k.fy, &t);
    let tw = jac * view;
    let cov2d = tw * splat.covariance * tw.transpose() + Matrix2::identity() * config.aa_floor;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let mean2d = [k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy];

    let thr = config.alpha_threshold;
    let reach = if thr > 0.0 {
        if splat.opacity < thr {
            return None;
        }
        (2.0 * (splat.opacity / thr).ln()).sqrt().max(3.0)
    } else {
        f64::INFINITY
    };
    let (w, h) = (pose.width as f64, pose.height as f64);
    let rx = reach * cov2d[(0, 0)].sqrt();
    let ry = reach * cov2d[(1, 1)].sqrt();
    // Pixel centers sit at integer + 0.5.
    let x0 = (mean2d[0] - rx - 0.5).ceil().max(0.0);
    let x1 = (mean2d[0] + rx - 0.5).floor().min(w - 1.0);
    let y0 = (mean2d[1] - ry - 0.5).ceil().max(0.0);
    let y1 = (mean2d[1] + ry - 0.5).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(Projected {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        bounds: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
        opacity: splat.opacity,
        color: splat.color,
    })
}

#[inline]
fn jacobian(fx: f64, fy: f64, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * t.x * iz * iz,
        0.0,
        fy * iz,
        -fy * t.y * iz * iz,
    )
}

/// Gaussian falloff of a projected splat at a pixel center: `(dx, dy, G)`.
#[inline]
fn falloff(p: &Projected, px: usize, py: usize) -> (f64, f64, f64) {
    let dx = px as f64 + 0.5 - p.mean2d[0];
    let dy = py as f64 + 0.5 - p.mean2d[1];
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    (dx, dy, power.exp())
}

/// One composited splat at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub splat: u32,
    /// Position of the splat in its tile's depth-ordered list.
    slot: u32,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct SavedContext {
    pub projections: Vec<Option<Projected>>,
    /// Depth-ordered splat ids binned to each tile.
    tile_lists: Vec<Vec<u32>>,
    /// Per-tile range into `entries`, and per-pixel `(start, len)` into `entries`.
    pixel_ranges: Vec<(usize, usize)>,
    entries: Vec<Contribution>,
    final_transmittance: Vec<f64>,
    tiles_x: usize,
}

impl SavedContext {
    /// Front-to-back contributions recorded at pixel `(x, y)`.
    pub fn contributions(&self, x: usize, y: usize, width: usize) -> &[Contribution] {
        let (s, n) = self.pixel_ranges[y * width + x];
        &self.entries[s..s + n]
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Vec<f64>,
    pub background: [f64; 3],
    pub pose: CameraPose,
    pub config: RenderConfig,
    pub saved_context: SavedContext,
    /// Per-splat gradient of the loss w.r.t. the NDC-space mean, filled by [`backward`].
    pub screen_grad_accum: Vec<[f64; 2]>,
    /// Whether each splat reached at least one pixel.
    pub contributed: Vec<bool>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn splat_count(&self) -> usize {
        self.saved_context.projections.len()
    }
}

/// Raw-parameter gradients, shaped like [`GaussianCloud`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGradients {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// All values in field order: positions, log-scales, rotations, opacities, colors.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len() * 14);
        v.extend(self.positions.iter().flatten());
        v.extend(self.log_scales.iter().flatten());
        v.extend(self.rotations.iter().flatten());
        v.extend(self.opacity_logits.iter());
        v.extend(self.colors.iter().flatten());
        v
    }

    pub fn add_scaled(&mut self, other: &SplatGradients, k: f64) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], k: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for i in 0..N {
                    x[i] += k * y[i];
                }
            }
        }
        add(&mut self.positions, &other.positions, k);
        add(&mut self.log_scales, &other.log_scales, k);
        add(&mut self.rotations, &other.rotations, k);
        add(&mut self.colors, &other.colors, k);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += k * y;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.positions.iter_mut().flatten().for_each(|v| *v *= k);
        self.log_scales.iter_mut().flatten().for_each(|v| *v *= k);
        self.rotations.iter_mut().flatten().for_each(|v| *v *= k);
        self.opacity_logits.iter_mut().for_each(|v| *v *= k);
        self.colors.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

struct TileResult {
    rgb: Vec<[f64; 3]>,
    final_t: Vec<f64>,
    /// Per pixel of the tile (row-major within the tile): entry count.
    counts: Vec<usize>,
    entries: Vec<Contribution>,
}

pub fn render(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
    config: &RenderConfig,
) -> Result<RenderOutput> {
    cloud.validate()?;
    pose.validate()?;
    let (width, height) = (pose.width, pose.height);
    let view = pose.rotation();
    let eye = pose.eye();

    let projections: Vec<Option<Projected>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let splat = cloud.effective(i)?;
            Ok(project_with(&splat, pose, &view, &eye, config))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<u32> = (0..cloud.len() as u32)
        .filter(|&i| projections[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let da = projections[a as usize].as_ref().map_or(0.0, |p| p.depth);
        let db = projections[b as usize].as_ref().map_or(0.0, |p| p.depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &id in &order {
        let p = projections[id as usize].as_ref().expect("sorted splats are visible");
        let [x0, y0, x1, y1] = p.bounds;
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tile_lists[ty * tiles_x + tx].push(id);
            }
        }
    }

    let tiles: Vec<TileResult> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            forward_tile(tx, ty, width, height, list, &projections, background, config)
        })
        .collect();

    let mut rgb = Image::zeros(width, height);
    let mut alpha = vec![0.0; width * height];
    let mut final_t = vec![1.0; width * height];
    let mut pixel_ranges = vec![(0usize, 0usize); width * height];
    let mut entries = Vec::with_capacity(tiles.iter().map(|t| t.entries.len()).sum());
    let mut contributed = vec![false; cloud.len()];
    for (t, tile) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let mut k = 0;
        let mut cursor = entries.len();
        for y in ty * TILE..((ty + 1) * TILE).min(height) {
            for x in tx * TILE..((tx + 1) * TILE).min(width) {
                let pix = y * width + x;
                rgb.set_pixel(x, y, tile.rgb[k]);
                final_t[pix] = tile.final_t[k];
                alpha[pix] = 1.0 - tile.final_t[k];
                pixel_ranges[pix] = (cursor, tile.counts[k]);
                cursor += tile.counts[k];
                k += 1;
            }
        }
        for e in &tile.entries {
            contributed[e.splat as usize] = true;
        }
        entries.extend(tile.entries);
    }

    Ok(RenderOutput {
        rgb,
        alpha,
        background,
        pose: pose.clone(),
        config: config.clone(),
        saved_context: SavedContext {
            projections,
            tile_lists,
            pixel_ranges,
            entries,
            final_transmittance: final_t,
            tiles_x,
        },
        screen_grad_accum: vec![[0.0; 2]; cloud.len()],
        contributed,
    })
}

#[allow(clippy::too_many_arguments)]
fn forward_tile(
    tx: usize,
    ty: usize,
    width: usize,
    height: usize,
    list: &[u32],
    projections: &[Option<Projected>],
    background: [f64; 3],
    config: &RenderConfig,
) -> TileResult {
    let mut out = TileResult {
        rgb: Vec::with_capacity(TILE * TILE),
        final_t: Vec::with_capacity(TILE * TILE),
        counts: Vec::with_capacity(TILE * TILE),
        entries: Vec::new(),
    };
    for y in ty * TILE..((ty + 1) * TILE).min(height) {
        for x in tx * TILE..((tx + 1) * TILE).min(width) {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let before = out.entries.len();
            for (slot, &id) in list.iter().enumerate() {
                let p = projections[id as usize].as_ref().expect("binned splats are visible");
                let [x0, y0, x1, y1] = p.bounds;
                if x < x0 || x > x1 || y < y0 || y > y1 {
                    continue;
                }
                let (_, _, g) = falloff(p, x, y);
                let a = (p.opacity * g).min(config.alpha_max);
                if a < config.alpha_threshold || a <= 0.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] += p.color[k] * a * t;
                }
                out.entries.push(Contribution {
                    splat: id,
                    slot: slot as u32,
                    alpha: a,
                    transmittance: t,
                });
                t *= 1.0 - a;
            }
            out.counts.push(out.entries.len() - before);
            out.final_t.push(t);
            out.rgb.push([0, 1, 2].map(|k| c[k] + t * background[k]));
        }
    }
    out
}

/// Screen-space gradient of one splat, summed over a tile.
#[derive(Clone, Copy, Default)]
struct Grad2d {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

/// Gradient of `⟨grad_rgb, output.rgb⟩` w.r.t. the raw parameters of `cloud`.
///
/// `cloud` must be the cloud that produced `output`. Also fills
/// `output.screen_grad_accum` with the NDC-space positional gradient per splat.
pub fn backward(
    cloud: &GaussianCloud,
    output: &mut RenderOutput,
    grad_rgb: &Image,
) -> Result<SplatGradients> {
    if !grad_rgb.same_shape(&output.rgb) {
        return Err(Error::Shape(format!(
            "grad_rgb is {}x{}, render is {}x{}",
            grad_rgb.width(),
            grad_rgb.height(),
            output.width(),
            output.height()
        )));
    }
    if cloud.len() != output.splat_count() {
        return Err(Error::Shape(format!(
            "cloud has {} splats, render saw {}",
            cloud.len(),
            output.splat_count()
        )));
    }
    let (width, height) = (output.width(), output.height());
    let ctx = &output.saved_context;
    let bg = output.background;
    let alpha_max = output.config.alpha_max;

    let partials: Vec<Vec<Grad2d>> = ctx
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![Grad2d::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (tx, ty) = (t % ctx.tiles_x, t / ctx.tiles_x);
            for y in ty * TILE..((ty + 1) * TILE).min(height) {
                for x in tx * TILE..((tx + 1) * TILE).min(width) {
                    let g = grad_rgb.pixel(x, y);
                    let contribs = ctx.contributions(x, y, width);
                    let mut after = ctx.final_transmittance[y * width + x]
                        * (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
                    for e in contribs.iter().rev() {
                        let p = ctx.projections[e.splat as usize].as_ref().expect("visible");
                        let gc = g[0] * p.color[0] + g[1] * p.color[1] + g[2] * p.color[2];
                        let d_alpha = e.transmittance * gc - after / (1.0 - e.alpha);
                        after += gc * e.alpha * e.transmittance;

                        let slot = &mut acc[e.slot as usize];
                        let w = e.alpha * e.transmittance;
                        for k in 0..3 {
                            slot.color[k] += g[k] * w;
                        }
                        let (dx, dy, gauss) = falloff(p, x, y);
                        if p.opacity * gauss >= alpha_max {
                            continue;
                        }
                        slot.opacity += d_alpha * gauss;
                        let d_power = d_alpha * p.opacity * gauss;
                        let [a, b, c] = p.conic;
                        slot.mean[0] += d_power * (a * dx + b * dy);
                        slot.mean[1] += d_power * (b * dx + c * dy);
                        slot.conic[0] += d_power * (-0.5 * dx * dx);
                        slot.conic[1] += d_power * (-dx * dy);
                        slot.conic[2] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let n = cloud.len();
    let mut screen = vec![Grad2d::default(); n];
    for (list, acc) in ctx.tile_lists.iter().zip(&partials) {
        for (&id, g) in list.iter().zip(acc) {
            let s = &mut screen[id as usize];
            for k in 0..2 {
                s.mean[k] += g.mean[k];
            }
            for k in 0..3 {
                s.conic[k] += g.conic[k];
                s.color[k] += g.color[k];
            }
            s.opacity += g.opacity;
        }
    }

    let pose = &output.pose;
    let view = pose.rotation();
    let eye = pose.eye();
    let intr = pose.intrinsics();
    let per_splat: Vec<Option<SplatGrad>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let proj = ctx.projections[i].as_ref()?;
            let splat = cloud.effective(i).ok()?;
            Some(chain_splat(cloud, i, &splat, proj, &screen[i], &view, &eye, intr.fx, intr.fy))
        })
        .collect();

    let mut grads = SplatGradients::zeros(n);
    for (i, g) in per_splat.into_iter().enumerate() {
        if let Some(g) = g {
            grads.positions[i] = g.position;
            grads.log_scales[i] = g.log_scale;
            grads.rotations[i] = g.rotation;
            grads.opacity_logits[i] = g.opacity_logit;
            grads.colors[i] = g.color;
        }
        output.screen_grad_accum[i] = [
            screen[i].mean[0] * width as f64 / 2.0,
            screen[i].mean[1] * height as f64 / 2.0,
        ];
    }
    Ok(grads)
}

struct SplatGrad {
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    color: [f64; 3],
}

#[allow(clippy::too_many_arguments)]
fn chain_splat(
    cloud: &GaussianCloud,
    i: usize,
    splat: &EffectiveSplat,
    proj: &Projected,
    g2: &Grad2d,
    view: &Matrix3<f64>,
    eye: &Vector3<f64>,
    fx: f64,
    fy: f64,
) -> SplatGrad {
    let t = view * (splat.mean - eye);
    let jac = jacobian(fx, fy, &t);
    let tw = jac * view;

    // conic = cov2d⁻¹; the off-diagonal conic parameter fills both symmetric slots.
    let [ca, cb, cc] = proj.conic;
    let q = Matrix2::new(ca, cb, cb, cc);
    let gq = Matrix2::new(g2.conic[0], 0.5 * g2.conic[1], 0.5 * g2.conic[1], g2.conic[2]);
    let g_cov2d = -(q * gq * q);

    let g_sigma = tw.transpose() * g_cov2d * tw;
    let g_tw = 2.0 * g_cov2d * tw * splat.covariance;
    let g_j = g_tw * view.transpose();

    let (x, y, z) = (t.x, t.y, t.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let [gmx, gmy] = g2.mean;
    let gt = Vector3::new(
        gmx * fx * iz - g_j[(0, 2)] * fx * iz2,
        gmy * fy * iz - g_j[(1, 2)] * fy * iz2,
        -gmx * fx * x * iz2 - gmy * fy * y * iz2 - g_j[(0, 0)] * fx * iz2
            + g_j[(0, 2)] * 2.0 * fx * x * iz3
            - g_j[(1, 1)] * fy * iz2
            + g_j[(1, 2)] * 2.0 * fy * y * iz3,
    );
    let g_pos = view.transpose() * gt;

    let s = splat.scale;
    let m = splat.rotation * Matrix3::from_diagonal(&s);
    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let mut g_r = g_m;
    let mut g_ls = [0.0; 3];
    for j in 0..3 {
        let mut gs = 0.0;
        for r in 0..3 {
            gs += g_m[(r, j)] * splat.rotation[(r, j)];
            g_r[(r, j)] = g_m[(r, j)] * s[j];
        }
        g_ls[j] = gs * s[j];
    }
    let g_unit = rotation_matrix_vjp(splat.quaternion, &g_r);
    let g_rot = normalize_vjp(cloud.rotations[i], g_unit);

    let o = splat.opacity;
    let c = splat.color;
    SplatGrad {
        position: [g_pos.x, g_pos.y, g_pos.z],
        log_scale: g_ls,
        rotation: g_rot,
        opacity_logit: g2.opacity * o * (1.0 - o),
        color: [0, 1, 2].map(|k| g2.color[k] * c[k] * (1.0 - c[k])),
    }
}
