//! Score oracles: the diffusion-model side of score distillation.
//!
//! An oracle receives a batch of images together with the timestep, prompt
//! and camera poses, and answers with either a noise prediction `ε̂` for each
//! noised image (pixel-space models; the engine forms the residual
//! `ε̂ - ε` itself) or a ready-made image-space gradient (latent models that
//! noise, predict and backpropagate through their encoder on their side).

mod analytic;
mod remote;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use analytic::{
    AnalyticOracle, ConstantTarget, FixedTarget, SplatTarget, TargetView, ZeroOracle,
};
pub use remote::{
    decode_tensors, encode_tensors, RemoteOracle, WirePose, WireRequest, WireResponse,
    PREDICT_PATH,
};

use crate::camera::CameraPose;
use crate::error::{Error, OracleError, Result};
use crate::image::Image;

/// Discrete diffusion noise schedule with `ᾱ` looked up at the nearest step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    /// 1000-step scaled-linear schedule, β from 8.5e-4 to 1.2e-2.
    fn default() -> Self {
        Self::scaled_linear(1000, 8.5e-4, 1.2e-2)
    }
}

impl NoiseSchedule {
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let s = a + (b - a) * i as f64 / (steps - 1) as f64;
                acc *= 1.0 - s * s;
                acc
            })
            .collect();
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `t ∈ (0, 1)` maps to step `round(t·(steps-1))`.
    pub fn index(&self, t: f64) -> usize {
        let last = (self.alpha_bar.len() - 1) as f64;
        (t * last).round().clamp(0.0, last) as usize
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        self.alpha_bar[self.index(t)]
    }

    pub fn alpha_bar_at(&self, index: usize) -> f64 {
        self.alpha_bar[index]
    }
}

fn check_timestep(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("timestep {t} outside (0, 1)")))
    }
}

/// `x_t = sqrt(ᾱ(t))·x + sqrt(1-ᾱ(t))·ε`.
pub fn add_noise(image: &Image, epsilon: &Image, t: f64, schedule: &NoiseSchedule) -> Result<Image> {
    image.check_same_shape(epsilon, "add_noise")?;
    check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = image
        .data()
        .iter()
        .zip(epsilon.data())
        .map(|(x, e)| s * x + n * e)
        .collect();
    Image::from_vec(image.width(), image.height(), data)
}

/// Classifier-free guidance: `uncond + scale·(cond - uncond)`.
///
/// Evaluated as `(1-scale)·uncond + scale·cond`, which reproduces either
/// input exactly at `scale` 0 and 1.
pub fn apply_cfg(eps_uncond: &Image, eps_cond: &Image, scale: f64) -> Result<Image> {
    eps_uncond.check_same_shape(eps_cond, "apply_cfg")?;
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| (1.0 - scale) * u + scale * c)
        .collect();
    Image::from_vec(eps_uncond.width(), eps_uncond.height(), data)
}

/// Standard normal noise image, deterministic in `seed`.
pub fn gaussian_noise(width: usize, height: usize, seed: u64) -> Image {
    stream_noise(width, height, seed, 0)
}

/// Noise for view `view` of a batch sharing `seed`: ChaCha8 seeded with
/// `seed` on stream `view`, drawn row-major `H×W×3`.
pub fn stream_noise(width: usize, height: usize, seed: u64, view: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view);
    let data = (0..width * height * 3)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Image::from_vec(width, height, data).expect("sized by construction")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseKind {
    #[default]
    #[serde(rename = "noise")]
    NoisePrediction,
    #[serde(rename = "image_grad")]
    ImageGradient,
}

impl ResponseKind {
    pub fn wire_name(self) -> &'static str {
        match self {
            ResponseKind::NoisePrediction => "noise",
            ResponseKind::ImageGradient => "image_grad",
        }
    }

    pub fn from_wire(name: &str) -> Option<Self> {
        match name {
            "noise" => Some(ResponseKind::NoisePrediction),
            "image_grad" => Some(ResponseKind::ImageGradient),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceRequest {
    pub kind: ResponseKind,
    /// Noised images `x_t` for noise predictions, clean renders for image gradients.
    pub images: Vec<Image>,
    pub timestep: f64,
    pub prompt: String,
    pub negative_prompt: String,
    pub poses: Vec<CameraPose>,
    pub cfg_scale: f64,
    pub noise_seed: u64,
}

impl GuidanceRequest {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.images.is_empty() {
            return Err(OracleError::Protocol("request carries no images".into()));
        }
        if self.images.len() != self.poses.len() {
            return Err(OracleError::Protocol(format!(
                "{} images but {} poses",
                self.images.len(),
                self.poses.len()
            )));
        }
        if !(self.timestep > 0.0 && self.timestep < 1.0) {
            return Err(OracleError::Protocol(format!(
                "timestep {} outside (0, 1)",
                self.timestep
            )));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(OracleError::Protocol("cfg_scale must be non-negative".into()));
        }
        let first = &self.images[0];
        if self.images.iter().any(|im| !im.same_shape(first)) {
            return Err(OracleError::Protocol("images in a batch differ in size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceResponse {
    pub kind: ResponseKind,
    pub tensors: Vec<Image>,
    pub alpha_bar: Option<f64>,
}

impl GuidanceResponse {
    /// Shape and finiteness checks against the request that produced it.
    pub fn validate_against(&self, request: &GuidanceRequest) -> Result<(), OracleError> {
        if self.kind != request.kind {
            return Err(OracleError::Protocol(format!(
                "asked for {} but got {}",
                request.kind.wire_name(),
                self.kind.wire_name()
            )));
        }
        if self.tensors.len() != request.images.len() {
            return Err(OracleError::Protocol(format!(
                "response batch {} does not match request batch {}",
                self.tensors.len(),
                request.images.len()
            )));
        }
        let mut offset = 0;
        for (t, im) in self.tensors.iter().zip(&request.images) {
            if !t.same_shape(im) {
                return Err(OracleError::Protocol(format!(
                    "response tensor is {}x{}, request image is {}x{}",
                    t.width(),
                    t.height(),
                    im.width(),
                    im.height()
                )));
            }
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(OracleError::NonFinite { index: offset + i });
            }
            offset += t.data().len();
        }
        Ok(())
    }
}

/// ε_φ as seen by the engine.
///
/// Implementations are called with one request in flight at a time.
pub trait GuidanceOracle: Send {
    fn kind(&self) -> ResponseKind;

    fn predict(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError>;

    /// Cheap reachability probe run before an optimization stage starts.
    fn check_ready(&self) -> Result<(), OracleError> {
        Ok(())
    }
}

impl<O: GuidanceOracle + ?Sized> GuidanceOracle for Box<O> {
    fn kind(&self) -> ResponseKind {
        (**self).kind()
    }

    fn predict(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError> {
        (**self).predict(request)
    }

    fn check_ready(&self) -> Result<(), OracleError> {
        (**self).check_ready()
    }
}

/// A pixel-space model exposing separate unconditional and conditional predictions.
pub trait ConditionalScoreModel: Send {
    fn predict_pair(&mut self, request: &GuidanceRequest) -> Result<(Vec<Image>, Vec<Image>), OracleError>;
}

/// Applies classifier-free guidance engine-side on top of a [`ConditionalScoreModel`].
pub struct CfgOracle<M> {
    pub model: M,
}

impl<M: ConditionalScoreModel> GuidanceOracle for CfgOracle<M> {
    fn kind(&self) -> ResponseKind {
        ResponseKind::NoisePrediction
    }

    fn predict(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError> {
        let (uncond, cond) = self.model.predict_pair(request)?;
        if uncond.len() != cond.len() {
            return Err(OracleError::Protocol("unconditional/conditional batch mismatch".into()));
        }
        let tensors = uncond
            .iter()
            .zip(&cond)
            .map(|(u, c)| apply_cfg(u, c, request.cfg_scale))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| OracleError::Protocol(e.to_string()))?;
        let response = GuidanceResponse {
            kind: ResponseKind::NoisePrediction,
            tensors,
            alpha_bar: None,
        };
        response.validate_against(request)?;
        Ok(response)
    }
}
