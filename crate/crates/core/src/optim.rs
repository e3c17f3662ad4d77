//! Adam with per-group learning rates and a linearly decaying position rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::raster::SplatGradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub position_decay_steps: u64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1e-3,
            position_final: 1.6e-6,
            position_decay_steps: 300,
            color: 0.005,
            opacity: 0.05,
            scale: 0.005,
            rotation: 0.001,
        }
    }
}

impl LearningRates {
    /// Linear from `position_init` at step 0 to `position_final` at
    /// `position_decay_steps`, constant afterwards.
    pub fn position_lr(&self, step: u64) -> f64 {
        if self.position_decay_steps == 0 || step >= self.position_decay_steps {
            return self.position_final;
        }
        let f = step as f64 / self.position_decay_steps as f64;
        self.position_init + (self.position_final - self.position_init) * f
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("position_init", self.position_init),
            ("position_final", self.position_final),
            ("color", self.color),
            ("opacity", self.opacity),
            ("scale", self.scale),
            ("rotation", self.rotation),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "learning rate must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// The default positional schedule.
pub fn position_lr(step: u64) -> f64 {
    LearningRates::default().position_lr(step)
}

/// First and second moments for a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam step at 1-based step `t`.
    ///
    /// Moments of every element decay; an element whose gradient is exactly
    /// zero keeps its value.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64, config: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at element {i}")));
        }
        let t = t.max(1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = config.beta1 * self.m[i] + (1.0 - config.beta1) * g;
            let v = config.beta2 * self.v[i] + (1.0 - config.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            if g != 0.0 {
                params[i] -= lr * (m / c1) / ((v / c2).sqrt() + config.epsilon);
            }
        }
        Ok(())
    }

    /// Reorders to a new layout of `width`-element rows; `None` rows start at zero.
    pub fn remap(&self, width: usize, origins: &[Option<usize>]) -> Moments {
        let mut out = Moments::zeros(origins.len() * width);
        for (row, origin) in origins.iter().enumerate() {
            if let Some(src) = *origin {
                out.m[row * width..(row + 1) * width].copy_from_slice(&self.m[src * width..(src + 1) * width]);
                out.v[row * width..(row + 1) * width].copy_from_slice(&self.v[src * width..(src + 1) * width]);
            }
        }
        out
    }
}

/// Parameter groups of a splat cloud, in the order used everywhere else.
pub const GROUPS: [(&str, usize); 5] = [
    ("positions", 3),
    ("log_scales", 3),
    ("rotations", 4),
    ("opacity_logits", 1),
    ("colors", 3),
];

/// Adam state for a [`GaussianCloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplatOptimizer {
    pub config: AdamConfig,
    pub rates: LearningRates,
    /// Number of updates applied so far.
    pub step: u64,
    pub groups: [Moments; 5],
}

fn flat<const N: usize>(v: &mut [[f64; N]]) -> &mut [f64] {
    v.as_flattened_mut()
}

impl SplatOptimizer {
    pub fn new(splats: usize, config: AdamConfig, rates: LearningRates) -> Self {
        Self {
            config,
            rates,
            step: 0,
            groups: GROUPS.map(|(_, w)| Moments::zeros(splats * w)),
        }
    }

    pub fn splat_count(&self) -> usize {
        self.groups[0].len() / 3
    }

    pub fn current_rates(&self) -> [f64; 5] {
        let r = &self.rates;
        [r.position_lr(self.step), r.scale, r.rotation, r.opacity, r.color]
    }

    /// One Adam step on every group; the step counter advances by one.
    pub fn apply_update(&mut self, cloud: &mut GaussianCloud, grads: &SplatGradients) -> Result<()> {
        if cloud.len() != self.splat_count() || grads.len() != cloud.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} splats, cloud has {}, gradients have {}",
                self.splat_count(),
                cloud.len(),
                grads.len()
            )));
        }
        let lrs = self.current_rates();
        let t = self.step + 1;
        let cfg = self.config;
        let [gp, gs, gr, go, gc] = &mut self.groups;
        gp.update(flat(&mut cloud.positions), grads.positions.as_flattened(), lrs[0], t, &cfg)?;
        gs.update(flat(&mut cloud.log_scales), grads.log_scales.as_flattened(), lrs[1], t, &cfg)?;
        gr.update(flat(&mut cloud.rotations), grads.rotations.as_flattened(), lrs[2], t, &cfg)?;
        go.update(&mut cloud.opacity_logits, &grads.opacity_logits, lrs[3], t, &cfg)?;
        gc.update(flat(&mut cloud.colors), grads.colors.as_flattened(), lrs[4], t, &cfg)?;
        self.step = t;
        Ok(())
    }

    /// Follows a structural edit: row `i` of the new cloud came from splat
    /// `origins[i]` of the old one, or is new when `None`.
    pub fn remap(&mut self, origins: &[Option<usize>]) {
        for (g, (_, w)) in self.groups.iter_mut().zip(GROUPS) {
            *g = g.remap(w, origins);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_schedule_endpoints() {
        assert_eq!(position_lr(0), 1e-3);
        assert_eq!(position_lr(300), 1.6e-6);
        assert_eq!(position_lr(10_000), 1.6e-6);
        assert!((position_lr(150) - (1e-3 + 1.6e-6) / 2.0).abs() < 1e-15);
        assert!((position_lr(150) - 5.008e-4).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let cfg = AdamConfig::default();
        for g in [1e-6, 0.3, -42.0] {
            let mut m = Moments::zeros(1);
            let mut p = [1.0];
            m.update(&mut p, &[g], 0.01, 1, &cfg).unwrap();
            let step = (1.0 - p[0]).abs();
            assert!((step - 0.01).abs() < 1e-4, "{g}: {step}");
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut m = Moments::zeros(2);
        let mut p = [0.5, -0.5];
        m.update(&mut p, &[1.0, -2.0], 0.1, 1, &cfg).unwrap();
        let (before, m1) = (p, m.clone());
        m.update(&mut p, &[0.0, 0.0], 0.1, 2, &cfg).unwrap();
        assert_eq!(p, before);
        for i in 0..2 {
            assert_eq!(m.m[i], 0.9 * m1.m[i]);
            assert_eq!(m.v[i], 0.999 * m1.v[i]);
        }
    }

    #[test]
    fn group_rates_scale_updates() {
        let cfg = AdamConfig::default();
        let (mut a, mut b) = (Moments::zeros(1), Moments::zeros(1));
        let (mut pa, mut pb) = ([0.0], [0.0]);
        for (t, g) in [0.7, -0.2, 1.3, 0.05].into_iter().enumerate() {
            a.update(&mut pa, &[g], 0.005, t as u64 + 1, &cfg).unwrap();
            b.update(&mut pb, &[g], 0.05, t as u64 + 1, &cfg).unwrap();
        }
        assert!((pb[0] / pa[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn remap_keeps_survivors_and_zeroes_newcomers() {
        let mut m = Moments::zeros(6);
        m.m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        m.v = m.m.iter().map(|x| x * 10.0).collect();
        let r = m.remap(2, &[Some(2), None, Some(0)]);
        assert_eq!(r.m, vec![5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(r.v, vec![50.0, 60.0, 0.0, 0.0, 10.0, 20.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut m = Moments::zeros(2);
        assert!(m.update(&mut [0.0; 3], &[0.0; 3], 0.1, 1, &AdamConfig::default()).is_err());
    }
}
