//! Adaptive density control: clone, split, prune and opacity reset.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logit, sigmoid, GaussianCloud, RawSplat};
use crate::raster::RenderOutput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpacityReset {
    Never,
    /// Once, after the given step.
    At(u64),
    /// After every positive multiple of the period.
    Every(u64),
}

impl OpacityReset {
    pub fn fires(&self, step: u64) -> bool {
        match *self {
            OpacityReset::Never => false,
            OpacityReset::At(s) => step == s,
            OpacityReset::Every(k) => k > 0 && step > 0 && step.is_multiple_of(k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub interval: u64,
    pub grad_threshold: f64,
    pub opacity_reset: OpacityReset,
    pub prune_opacity: f64,
    /// Fraction of the scene extent below which a splat is cloned instead of split.
    pub split_scale_threshold: f64,
    pub split_factor: f64,
    pub reset_cap: f64,
    /// Densification stops adding splats once the cloud reaches this size.
    pub max_splats: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self::prior()
    }
}

impl DensifyConfig {
    pub fn prior() -> Self {
        Self {
            interval: 55,
            grad_threshold: 0.01,
            opacity_reset: OpacityReset::At(500),
            prune_opacity: 0.005,
            split_scale_threshold: 0.01,
            split_factor: 1.6,
            reset_cap: 0.01,
            max_splats: 100_000,
        }
    }

    pub fn refine() -> Self {
        Self {
            interval: 50,
            opacity_reset: OpacityReset::Every(300),
            ..Self::prior()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("interval", "must be at least 1"));
        }
        for (name, v) in [
            ("grad_threshold", self.grad_threshold),
            ("prune_opacity", self.prune_opacity),
            ("split_scale_threshold", self.split_scale_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.split_factor > 1.0) {
            return Err(Error::config("split_factor", "must exceed 1"));
        }
        if !(self.reset_cap > 0.0 && self.reset_cap < 1.0) {
            return Err(Error::config("reset_cap", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Per-splat screen-space gradient statistics between densification steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub accum_norm: Vec<f64>,
    pub denom: Vec<u64>,
}

impl GradStats {
    pub fn new(splats: usize) -> Self {
        Self {
            accum_norm: vec![0.0; splats],
            denom: vec![0; splats],
        }
    }

    pub fn len(&self) -> usize {
        self.accum_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum_norm.is_empty()
    }

    /// Adds the NDC mean-gradient norm of every splat that reached a pixel.
    pub fn accumulate(&mut self, output: &RenderOutput) -> Result<()> {
        if output.screen_grad_accum.len() != self.len() || output.contributed.len() != self.len() {
            return Err(Error::Shape(format!(
                "statistics track {} splats, render output has {}",
                self.len(),
                output.screen_grad_accum.len()
            )));
        }
        for i in 0..self.len() {
            if output.contributed[i] {
                let [gx, gy] = output.screen_grad_accum[i];
                self.accum_norm[i] += gx.hypot(gy);
                self.denom[i] += 1;
            }
        }
        Ok(())
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.denom[i] == 0 {
            0.0
        } else {
            self.accum_norm[i] / self.denom[i] as f64
        }
    }
}

/// Result of [`densify_and_prune`].
#[derive(Clone, Debug, PartialEq)]
pub struct Densified {
    pub cloud: GaussianCloud,
    /// Old index of each new splat; `None` for clones and split children.
    pub origins: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large splats whose mean gradient reaches the
/// threshold, then drops splats below the opacity floor.
///
/// Output order: surviving originals, then clones, then split children.
pub fn densify_and_prune(
    cloud: &GaussianCloud,
    stats: &GradStats,
    config: &DensifyConfig,
    scene_extent: f64,
    rng: &mut impl Rng,
) -> Result<Densified> {
    if stats.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "statistics track {} splats, cloud has {}",
            stats.len(),
            cloud.len()
        )));
    }
    let n = cloud.len();
    let prune: Vec<bool> = cloud
        .opacity_logits
        .iter()
        .map(|&l| sigmoid(l) < config.prune_opacity)
        .collect();

    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| !prune[i] && stats.mean(i) >= config.grad_threshold)
        .collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    let survivors = prune.iter().filter(|p| !**p).count();
    let mut budget = config.max_splats.saturating_sub(survivors);
    let clone_limit = config.split_scale_threshold * scene_extent;
    let mut clone = vec![false; n];
    let mut split = vec![false; n];
    for i in candidates {
        if budget == 0 {
            break;
        }
        let max_scale = cloud.log_scales[i].iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= clone_limit {
            clone[i] = true;
        } else {
            split[i] = true;
        }
        budget -= 1;
    }

    let mut out = GaussianCloud::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    for i in 0..n {
        if !prune[i] && !split[i] {
            out.push(cloud.raw(i));
            origins.push(Some(i));
        }
    }
    for i in (0..n).filter(|&i| clone[i]) {
        out.push(cloud.raw(i));
        origins.push(None);
    }
    let shrink = config.split_factor.ln();
    for i in (0..n).filter(|&i| split[i]) {
        let parent = cloud.effective(i)?;
        let raw = cloud.raw(i);
        for _ in 0..2 {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            let offset = parent.rotation * parent.scale.component_mul(&z);
            let position = [0, 1, 2].map(|k| raw.position[k] + offset[k]);
            out.push(RawSplat {
                position,
                log_scale: raw.log_scale.map(|l| l - shrink),
                ..raw
            });
            origins.push(None);
        }
    }
    Ok(Densified {
        cloud: out,
        origins,
        cloned: clone.iter().filter(|c| **c).count(),
        split: split.iter().filter(|s| **s).count(),
        pruned: prune.iter().filter(|p| **p).count(),
    })
}

/// Caps every effective opacity at `cap`.
pub fn reset_opacity(cloud: &mut GaussianCloud, cap: f64) -> Result<()> {
    if !(cap > 0.0 && cap < 1.0) {
        return Err(Error::InvalidArgument(format!("opacity cap {cap} outside (0, 1)")));
    }
    let limit = logit(cap);
    for l in &mut cloud.opacity_logits {
        if *l > limit {
            *l = limit;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats_with(means: &[f64]) -> GradStats {
        GradStats {
            accum_norm: means.to_vec(),
            denom: vec![1; means.len()],
        }
    }

    fn cloud(opacities: &[f64], sigma: f64) -> GaussianCloud {
        GaussianCloud::from_splats(
            opacities
                .iter()
                .enumerate()
                .map(|(i, &o)| RawSplat::isotropic([i as f64 * 0.1, 0.0, 0.0], sigma, o, [0.5; 3])),
        )
    }

    #[test]
    fn quiet_cloud_is_unchanged() {
        let c = cloud(&[0.5, 0.2, 0.9], 0.05);
        let d = densify_and_prune(&c, &stats_with(&[0.001, 0.0, 0.0099]), &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.cloud, c);
        assert_eq!(d.origins, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn large_splat_is_split_into_two() {
        let c = cloud(&[0.5], 0.2);
        let d = densify_and_prune(&c, &stats_with(&[0.02]), &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.cloud.len(), 2);
        assert_eq!((d.split, d.cloned), (1, 0));
        for ls in &d.cloud.log_scales {
            assert!((ls[0].exp() - 0.2 / 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn small_splat_is_cloned() {
        let c = cloud(&[0.5], 0.005);
        let d = densify_and_prune(&c, &stats_with(&[0.02]), &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.cloud.len(), 2);
        assert_eq!(d.cloud.raw(0), d.cloud.raw(1));
        assert_eq!(d.origins, vec![Some(0), None]);
    }

    #[test]
    fn faint_splat_is_pruned() {
        let c = cloud(&[0.5, 0.001, 0.7], 0.05);
        let d = densify_and_prune(&c, &stats_with(&[0.0; 3]), &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.cloud.len(), 2);
        assert_eq!(d.origins, vec![Some(0), Some(2)]);
    }

    #[test]
    fn budget_limits_growth() {
        let c = cloud(&[0.5, 0.5, 0.5], 0.005);
        let cfg = DensifyConfig { max_splats: 4, ..Default::default() };
        let d = densify_and_prune(&c, &stats_with(&[0.02, 0.05, 0.03]), &cfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.cloud.len(), 4);
        assert_eq!(d.origins[3], None);
        assert_eq!(d.cloud.positions[3], c.positions[1]);
    }

    #[test]
    fn opacity_reset_caps_and_is_idempotent() {
        let mut c = cloud(&[0.9, 0.005], 0.05);
        reset_opacity(&mut c, 0.01).unwrap();
        assert!((sigmoid(c.opacity_logits[0]) - 0.01).abs() < 1e-12);
        assert!((sigmoid(c.opacity_logits[1]) - 0.005).abs() < 1e-12);
        let once = c.clone();
        reset_opacity(&mut c, 0.01).unwrap();
        assert_eq!(c, once);
    }

    #[test]
    fn reset_schedules() {
        assert!(OpacityReset::At(500).fires(500));
        assert!(!OpacityReset::At(500).fires(1000));
        let every = OpacityReset::Every(300);
        assert_eq!((0..700).filter(|&s| every.fires(s)).collect::<Vec<_>>(), vec![300, 600]);
    }
}
