use super::{GuidanceOracle, GuidanceRequest, GuidanceResponse, NoiseSchedule, ResponseKind};
use crate::camera::CameraPose;
use crate::error::{OracleError, Result};
use crate::gaussian::GaussianCloud;
use crate::image::Image;
use crate::raster::{render, RenderConfig};

/// What an [`AnalyticOracle`] wants to see from a given viewpoint.
pub trait TargetView: Send {
    fn target(&self, pose: &CameraPose) -> Result<Image>;
}

/// The same image from every viewpoint.
#[derive(Clone, Debug)]
pub struct FixedTarget(pub Image);

impl TargetView for FixedTarget {
    fn target(&self, pose: &CameraPose) -> Result<Image> {
        if pose.width == self.0.width() && pose.height == self.0.height() {
            Ok(self.0.clone())
        } else {
            Ok(self.0.resize_area(pose.width, pose.height))
        }
    }
}

/// A flat color filling the whole frame.
#[derive(Clone, Copy, Debug)]
pub struct ConstantTarget(pub [f64; 3]);

impl TargetView for ConstantTarget {
    fn target(&self, pose: &CameraPose) -> Result<Image> {
        Ok(Image::filled(pose.width, pose.height, self.0))
    }
}

/// Renders of a reference splat scene, making the oracle photometric:
/// every view is pulled toward the scene as seen from that view.
#[derive(Clone, Debug)]
pub struct SplatTarget {
    pub scene: GaussianCloud,
    pub background: [f64; 3],
    pub config: RenderConfig,
}

impl TargetView for SplatTarget {
    fn target(&self, pose: &CameraPose) -> Result<Image> {
        Ok(render(&self.scene, pose, self.background, &self.config)?.rgb)
    }
}

/// Returns the noise that would make `x_t` a noising of the target:
/// `ε̂ = (x_t - sqrt(ᾱ)·y*) / sqrt(1-ᾱ)`.
///
/// The resulting score-distillation residual is `sqrt(ᾱ/(1-ᾱ))·(x - y*)`,
/// so distillation against this oracle is weighted image matching.
pub struct AnalyticOracle {
    target: Option<Box<dyn TargetView>>,
    schedule: NoiseSchedule,
}

impl AnalyticOracle {
    pub fn new(target: impl TargetView + 'static) -> Self {
        Self {
            target: Some(Box::new(target)),
            schedule: NoiseSchedule::default(),
        }
    }

    /// An oracle without a target; every prediction fails until one is set.
    pub fn unconfigured() -> Self {
        Self {
            target: None,
            schedule: NoiseSchedule::default(),
        }
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn set_target(&mut self, target: impl TargetView + 'static) {
        self.target = Some(Box::new(target));
    }

    /// `sqrt(ᾱ/(1-ᾱ))`, the factor between `x - y*` and the residual.
    pub fn residual_coefficient(alpha_bar: f64) -> f64 {
        (alpha_bar / (1.0 - alpha_bar)).sqrt()
    }
}

impl GuidanceOracle for AnalyticOracle {
    fn kind(&self) -> ResponseKind {
        ResponseKind::NoisePrediction
    }

    fn predict(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError> {
        request.validate()?;
        if request.kind != ResponseKind::NoisePrediction {
            return Err(OracleError::Protocol(
                "analytic oracle only predicts noise".into(),
            ));
        }
        let target = self
            .target
            .as_ref()
            .ok_or_else(|| OracleError::Misconfigured("analytic oracle has no target".into()))?;
        let ab = self.schedule.alpha_bar(request.timestep);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut tensors = Vec::with_capacity(request.images.len());
        for (xt, pose) in request.images.iter().zip(&request.poses) {
            let pose = pose.clone().with_resolution(xt.width(), xt.height());
            let y = target
                .target(&pose)
                .map_err(|e| OracleError::Misconfigured(e.to_string()))?;
            let data = xt
                .data()
                .iter()
                .zip(y.data())
                .map(|(x, t)| (x - s * t) / n)
                .collect();
            tensors.push(Image::from_vec(xt.width(), xt.height(), data).expect("same shape"));
        }
        let response = GuidanceResponse {
            kind: ResponseKind::NoisePrediction,
            tensors,
            alpha_bar: Some(ab),
        };
        response.validate_against(request)?;
        Ok(response)
    }
}

/// Reports a zero image-space gradient for every view.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroOracle;

impl GuidanceOracle for ZeroOracle {
    fn kind(&self) -> ResponseKind {
        ResponseKind::ImageGradient
    }

    fn predict(&mut self, request: &GuidanceRequest) -> Result<GuidanceResponse, OracleError> {
        request.validate()?;
        Ok(GuidanceResponse {
            kind: ResponseKind::ImageGradient,
            tensors: request
                .images
                .iter()
                .map(|im| Image::zeros(im.width(), im.height()))
                .collect(),
            alpha_bar: None,
        })
    }
}
