//! Score distillation: timestep schedules, weighting, and the per-step
//! render → noise → oracle → backpropagate loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::guidance::{
    add_noise, stream_noise, GuidanceOracle, GuidanceRequest, NoiseSchedule, ResponseKind,
};
use crate::image::Image;
use crate::optim::SplatOptimizer;
use crate::raster::{backward, render, RenderConfig, RenderOutput, SplatGradients};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prior,
    Refine,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum TimestepRule {
    /// From `hi` at the first step of the segment to `lo` at its last, inclusive.
    LinearAnneal { hi: f64, lo: f64 },
    UniformRange { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    #[serde(flatten)]
    pub rule: TimestepRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepSchedule {
    pub stage: Stage,
    pub total_steps: u64,
    pub segments: Vec<Segment>,
}

impl TimestepSchedule {
    /// Linear annealing from 0.98 to 0.02 over the whole stage.
    pub fn prior(total_steps: u64) -> Self {
        Self {
            stage: Stage::Prior,
            total_steps,
            segments: vec![Segment {
                start: 0,
                end: total_steps,
                rule: TimestepRule::LinearAnneal { hi: 0.98, lo: 0.02 },
            }],
        }
    }

    /// Annealing, then `U(0.02, 0.98)`, then `U(0.02, 0.50)`, with the
    /// boundaries at steps 200 and 300 of 700 (scaled proportionally for
    /// other lengths).
    pub fn refine(total_steps: u64) -> Self {
        let at = |k: u64| ((total_steps * k) as f64 / 700.0).round() as u64;
        let (a, b) = (at(200), at(300));
        let segments = [
            (0, a, TimestepRule::LinearAnneal { hi: 0.98, lo: 0.02 }),
            (a, b, TimestepRule::UniformRange { lo: 0.02, hi: 0.98 }),
            (b, total_steps, TimestepRule::UniformRange { lo: 0.02, hi: 0.50 }),
        ]
        .into_iter()
        .filter(|(s, e, _)| e > s)
        .map(|(start, end, rule)| Segment { start, end, rule })
        .collect();
        Self {
            stage: Stage::Refine,
            total_steps,
            segments,
        }
    }

    /// `U(0.02, 0.98)` throughout.
    pub fn texture(total_steps: u64) -> Self {
        Self {
            stage: Stage::Texture,
            total_steps,
            segments: vec![Segment {
                start: 0,
                end: total_steps,
                rule: TimestepRule::UniformRange { lo: 0.02, hi: 0.98 },
            }],
        }
    }

    pub fn for_stage(stage: Stage, total_steps: u64) -> Self {
        match stage {
            Stage::Prior => Self::prior(total_steps),
            Stage::Refine => Self::refine(total_steps),
            Stage::Texture => Self::texture(total_steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            let path = format!("segments[{i}]");
            if seg.start != cursor || seg.end <= seg.start {
                return Err(Error::config(path, "segments must tile [0, total_steps) in order"));
            }
            let (lo, hi) = match seg.rule {
                TimestepRule::LinearAnneal { hi, lo } => {
                    if !(hi > lo) {
                        return Err(Error::config(path, "annealing needs hi > lo"));
                    }
                    (lo, hi)
                }
                TimestepRule::UniformRange { lo, hi } => {
                    if !(hi >= lo) {
                        return Err(Error::config(path, "uniform range needs hi >= lo"));
                    }
                    (lo, hi)
                }
            };
            if !(lo > 0.0 && hi < 1.0) {
                return Err(Error::config(path, "timesteps must lie in (0, 1)"));
            }
            cursor = seg.end;
        }
        if cursor != self.total_steps {
            return Err(Error::config("segments", "segments must end at total_steps"));
        }
        Ok(())
    }

    pub fn timestep(&self, step: u64, rng: &mut impl Rng) -> Result<f64> {
        let seg = self
            .segments
            .iter()
            .find(|s| step >= s.start && step < s.end)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "step {step} outside a {}-step schedule",
                    self.total_steps
                ))
            })?;
        Ok(match seg.rule {
            TimestepRule::LinearAnneal { hi, lo } => {
                let len = seg.end - seg.start;
                if len == 1 {
                    hi
                } else {
                    let f = (step - seg.start) as f64 / (len - 1) as f64;
                    hi * (1.0 - f) + lo * f
                }
            }
            TimestepRule::UniformRange { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    #[default]
    Constant,
    SigmaSquared,
}

/// `w(t)`: 1, or `1 - ᾱ(t)`.
pub fn weight(t: f64, strategy: WeightStrategy, schedule: &NoiseSchedule) -> f64 {
    match strategy {
        WeightStrategy::Constant => 1.0,
        WeightStrategy::SigmaSquared => 1.0 - schedule.alpha_bar(t),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPolicy {
    /// A uniformly random gray level per view.
    RandomGray,
    Fixed([f64; 3]),
}

impl BackgroundPolicy {
    pub fn draw(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            BackgroundPolicy::RandomGray => [rng.random_range(0.0..1.0); 3],
            BackgroundPolicy::Fixed(c) => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    pub cfg_scale: f64,
    pub weight: WeightStrategy,
    pub background: BackgroundPolicy,
    pub prompt: String,
    pub negative_prompt: String,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 100.0,
            weight: WeightStrategy::Constant,
            background: BackgroundPolicy::RandomGray,
            prompt: String::new(),
            negative_prompt: String::new(),
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config("cfg_scale", "must be finite and non-negative"));
        }
        if let BackgroundPolicy::Fixed(c) = self.background {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("background", "channels must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// `w·(ε̂ - ε)`.
pub fn sds_image_gradient(eps_pred: &Image, eps: &Image, w: f64) -> Result<Image> {
    eps_pred.check_same_shape(eps, "sds_image_gradient")?;
    let data = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| w * (p - e))
        .collect();
    Image::from_vec(eps.width(), eps.height(), data)
}

/// Turns an oracle tensor into `∂L/∂image`: the weighted residual for noise
/// predictions, the tensor itself for image gradients.
pub fn image_gradient(kind: ResponseKind, tensor: &Image, eps: &Image, w: f64) -> Result<Image> {
    match kind {
        ResponseKind::NoisePrediction => sds_image_gradient(tensor, eps, w),
        ResponseKind::ImageGradient => {
            tensor.check_same_shape(eps, "image_gradient")?;
            Ok(tensor.clone())
        }
    }
}

/// Replaces predictions that match the injected noise to single precision
/// by the noise itself, so a converged view yields an exactly zero residual.
///
/// The comparison scale is that of `ε̂ = (x_t - sqrt(ᾱ)·y)/sqrt(1-ᾱ)`, i.e.
/// `|ε| + |x_t|/sqrt(1-ᾱ)`.
pub fn snap_prediction(eps_pred: &Image, eps: &Image, noised: &Image, alpha_bar: f64) -> Result<Image> {
    eps_pred.check_same_shape(eps, "snap_prediction")?;
    eps_pred.check_same_shape(noised, "snap_prediction")?;
    let inv_n = 1.0 / (1.0 - alpha_bar).sqrt();
    let tol = f32::EPSILON as f64;
    let data = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .zip(noised.data())
        .map(|((&p, &e), &x)| {
            if (p - e).abs() <= tol * (e.abs() + x.abs() * inv_n) {
                e
            } else {
                p
            }
        })
        .collect();
    Image::from_vec(eps.width(), eps.height(), data)
}

/// Fixed inputs shared by every distillation step of a stage.
#[derive(Clone, Debug)]
pub struct SdsContext {
    pub config: SdsConfig,
    pub render: RenderConfig,
    pub noise: NoiseSchedule,
}

impl SdsContext {
    pub fn new(config: SdsConfig) -> Self {
        Self {
            config,
            render: RenderConfig::default(),
            noise: NoiseSchedule::default(),
        }
    }
}

/// What one distillation step saw and produced.
#[derive(Clone, Debug)]
pub struct SdsOutcome {
    pub timestep: f64,
    /// Per-view renders with screen-space gradients filled in.
    pub renders: Vec<RenderOutput>,
    /// Mean over views of the raw-parameter gradients.
    pub gradients: SplatGradients,
}

/// Noises `images` as the oracle requires, queries it and returns one
/// `∂L/∂image` per view.
///
/// Consecutive runs of `group` views share one request: 4 for a multi-view
/// oracle, 1 for a single-view one.
pub fn distill_images(
    images: &[Image],
    poses: &[CameraPose],
    oracle: &mut dyn GuidanceOracle,
    group: usize,
    t: f64,
    ctx: &SdsContext,
    rng: &mut impl Rng,
) -> Result<Vec<Image>> {
    if images.is_empty() || images.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} poses",
            images.len(),
            poses.len()
        )));
    }
    let kind = oracle.kind();
    if group == 0 || !images.len().is_multiple_of(group) {
        return Err(Error::InvalidArgument(format!(
            "{} views do not split into requests of {group}",
            images.len()
        )));
    }
    let groups: Vec<Vec<usize>> = (0..images.len() / group)
        .map(|g| (g * group..(g + 1) * group).collect())
        .collect();
    let w = weight(t, ctx.config.weight, &ctx.noise);
    let alpha_bar = ctx.noise.alpha_bar(t);
    let mut grads: Vec<Option<Image>> = vec![None; images.len()];
    for group in groups {
        let seed: u64 = rng.random();
        let eps: Vec<Image> = group
            .iter()
            .enumerate()
            .map(|(k, &i)| stream_noise(images[i].width(), images[i].height(), seed, k as u64))
            .collect();
        let sent = group
            .iter()
            .zip(&eps)
            .map(|(&i, e)| match kind {
                ResponseKind::NoisePrediction => add_noise(&images[i], e, t, &ctx.noise),
                ResponseKind::ImageGradient => Ok(images[i].clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        let request = GuidanceRequest {
            kind,
            images: sent,
            timestep: t,
            prompt: ctx.config.prompt.clone(),
            negative_prompt: ctx.config.negative_prompt.clone(),
            poses: group.iter().map(|&i| poses[i].clone()).collect(),
            cfg_scale: ctx.config.cfg_scale,
            noise_seed: seed,
        };
        let response = oracle.predict(&request)?;
        response.validate_against(&request)?;
        for (k, (&i, tensor)) in group.iter().zip(&response.tensors).enumerate() {
            let g = match kind {
                ResponseKind::NoisePrediction => {
                    let snapped = snap_prediction(tensor, &eps[k], &request.images[k], alpha_bar)?;
                    sds_image_gradient(&snapped, &eps[k], w)?
                }
                ResponseKind::ImageGradient => image_gradient(kind, tensor, &eps[k], w)?,
            };
            grads[i] = Some(g);
        }
    }
    Ok(grads.into_iter().map(|g| g.expect("every view answered")).collect())
}

/// Renders `poses`, queries the oracle and backpropagates, averaging over views.
pub fn sds_gradients(
    cloud: &GaussianCloud,
    oracle: &mut dyn GuidanceOracle,
    poses: &[CameraPose],
    group: usize,
    t: f64,
    ctx: &SdsContext,
    rng: &mut impl Rng,
) -> Result<SdsOutcome> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("a step needs at least one view".into()));
    }
    let backgrounds: Vec<[f64; 3]> = poses.iter().map(|_| ctx.config.background.draw(rng)).collect();
    let mut renders = poses
        .par_iter()
        .zip(&backgrounds)
        .map(|(pose, bg)| render(cloud, pose, *bg, &ctx.render))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Image> = renders.iter().map(|r| r.rgb.clone()).collect();
    let grads_rgb = distill_images(&images, poses, oracle, group, t, ctx, rng)?;
    let per_view = renders
        .par_iter_mut()
        .zip(&grads_rgb)
        .map(|(out, g)| backward(cloud, out, g))
        .collect::<Result<Vec<_>>>()?;
    let mut gradients = SplatGradients::zeros(cloud.len());
    for g in &per_view {
        gradients.add_scaled(g, 1.0);
    }
    gradients.scale(1.0 / poses.len() as f64);
    Ok(SdsOutcome {
        timestep: t,
        renders,
        gradients,
    })
}

/// One distillation step: draw `t` from the schedule, compute the averaged
/// gradient and apply one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    cloud: &mut GaussianCloud,
    oracle: &mut dyn GuidanceOracle,
    poses: &[CameraPose],
    group: usize,
    schedule: &TimestepSchedule,
    step: u64,
    optimizer: &mut SplatOptimizer,
    ctx: &SdsContext,
    rng: &mut impl Rng,
) -> Result<SdsOutcome> {
    let t = schedule.timestep(step, rng)?;
    let outcome = sds_gradients(cloud, oracle, poses, group, t, ctx, rng)?;
    optimizer.apply_update(cloud, &outcome.gradients)?;
    cloud.validate().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(outcome)
}
