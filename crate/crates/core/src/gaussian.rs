//! Gaussian splat clouds.
//!
//! A [`GaussianCloud`] stores *raw* parameters: positions, log-scales,
//! unnormalized rotation quaternions `(w, x, y, z)`, opacity logits and
//! pre-activation colors. Optimizers update raw values directly and every
//! constraint is enforced by the activation in [`GaussianCloud::effective`]:
//!
//! * scale `s = exp(log_scale)`
//! * rotation `R = R(q / |q|)`
//! * covariance `Σ = R·diag(s)²·Rᵀ`
//! * opacity `o = sigmoid(opacity_logit)`
//! * color `c = sigmoid(raw_color)`

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Activated parameters of a single splat.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveSplat {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub quaternion: [f64; 4],
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Raw values for one splat, used when building clouds by hand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawSplat {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl RawSplat {
    /// An isotropic splat from activated values.
    pub fn isotropic(position: [f64; 3], sigma: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            position,
            log_scale: [sigma.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color: rgb.map(|c| logit(c.clamp(1e-6, 1.0 - 1e-6))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub count: usize,
    pub radius: f64,
    pub opacity: f64,
    pub scale: f64,
    /// Raw colors are drawn uniformly from `[-color_spread, color_spread]`.
    pub color_spread: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            count: 6000,
            radius: 0.5,
            opacity: 0.1,
            scale: 0.02,
            color_spread: 1.0,
        }
    }
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn from_splats(splats: impl IntoIterator<Item = RawSplat>) -> Self {
        let mut cloud = Self::new();
        for s in splats {
            cloud.push(s);
        }
        cloud
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, s: RawSplat) {
        self.positions.push(s.position);
        self.log_scales.push(s.log_scale);
        self.rotations.push(s.rotation);
        self.opacity_logits.push(s.opacity_logit);
        self.colors.push(s.color);
    }

    pub fn raw(&self, i: usize) -> RawSplat {
        RawSplat {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            color: self.colors[i],
        }
    }

    /// Random cloud: positions uniform in a ball, identical small scales and
    /// low opacity, random raw colors. Deterministic for a fixed seed.
    pub fn init_random(seed: u64, config: &InitConfig) -> Result<Self> {
        if config.count == 0 {
            return Err(Error::InvalidArgument("splat count must be at least 1".into()));
        }
        if !(config.radius > 0.0) {
            return Err(Error::InvalidArgument("init radius must be positive".into()));
        }
        if !(config.opacity > 0.0 && config.opacity < 1.0) {
            return Err(Error::InvalidArgument("init opacity must lie in (0, 1)".into()));
        }
        if !(config.scale > 0.0) {
            return Err(Error::InvalidArgument("init scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = Self::with_capacity(config.count);
        let log_scale = config.scale.ln();
        let opacity_logit = logit(config.opacity);
        for _ in 0..config.count {
            let position = loop {
                let p: [f64; 3] = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] < 1.0 {
                    break p.map(|v| v * config.radius);
                }
            };
            let spread = config.color_spread;
            let color = [0; 3].map(|_| {
                if spread > 0.0 {
                    rng.random_range(-spread..spread)
                } else {
                    0.0
                }
            });
            cloud.push(RawSplat {
                position,
                log_scale: [log_scale; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit,
                color,
            });
        }
        Ok(cloud)
    }

    pub fn effective(&self, index: usize) -> Result<EffectiveSplat> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        let q = normalize_quaternion(self.rotations[index]).ok_or(Error::NonFiniteSplat {
            splat: index,
            field: "rotation",
        })?;
        let rotation = quaternion_to_matrix(q);
        let scale = Vector3::from(self.log_scales[index].map(f64::exp));
        let m = rotation * Matrix3::from_diagonal(&scale);
        Ok(EffectiveSplat {
            mean: Vector3::from(self.positions[index]),
            scale,
            rotation,
            quaternion: q,
            covariance: m * m.transpose(),
            opacity: sigmoid(self.opacity_logits[index]),
            color: self.colors[index].map(sigmoid),
        })
    }

    /// Checks array lengths, finiteness and nonzero quaternions.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.colors.len() != n
        {
            return Err(Error::Shape("per-splat arrays have different lengths".into()));
        }
        for i in 0..n {
            let bad = |field| Err(Error::NonFiniteSplat { splat: i, field });
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return bad("position");
            }
            if !self.log_scales[i].iter().all(|v| v.is_finite()) {
                return bad("log_scale");
            }
            if !self.rotations[i].iter().all(|v| v.is_finite())
                || normalize_quaternion(self.rotations[i]).is_none()
            {
                return bad("rotation");
            }
            if !self.opacity_logits[i].is_finite() {
                return bad("opacity");
            }
            if !self.colors[i].iter().all(|v| v.is_finite()) {
                return bad("color");
            }
        }
        Ok(())
    }

    /// Keeps the splats whose flag is set, in order.
    pub fn retain_mask(&self, keep: &[bool]) -> GaussianCloud {
        let mut out = GaussianCloud::with_capacity(self.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.push(self.raw(i));
            }
        }
        out
    }

    /// Rounds every raw value to the nearest `f32`, which is what PLY checkpoints store.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.positions.iter_mut().flatten().for_each(q);
        self.log_scales.iter_mut().flatten().for_each(q);
        self.rotations.iter_mut().flatten().for_each(q);
        self.opacity_logits.iter_mut().for_each(q);
        self.colors.iter_mut().flatten().for_each(q);
    }

    /// Radius of the sphere around the position centroid that contains every splat mean.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        self.positions
            .iter()
            .map(|p| {
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scales
            .iter()
            .flatten()
            .map(|l| l.exp())
            .fold(0.0, f64::max)
    }
}

pub fn normalize_quaternion(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 && n.is_finite() {
        Some(q.map(|v| v / n))
    } else {
        None
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back to the *unit* quaternion.
pub(crate) fn rotation_matrix_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Pulls a gradient w.r.t. `q / |q|` back to the raw quaternion `q`.
pub(crate) fn normalize_vjp(raw: [f64; 4], g: [f64; 4]) -> [f64; 4] {
    let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
    let u = raw.map(|v| v / n);
    let dot = u[0] * g[0] + u[1] * g[1] + u[2] * g[2] + u[3] * g[3];
    [0, 1, 2, 3].map(|k| (g[k] - u[k] * dot) / n)
}
