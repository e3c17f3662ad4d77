//! Stage 3: PBR material maps on a fixed mesh, optimized by score distillation.

mod dual;
mod raster;
mod shading;

pub use dual::{Dual, Real};
pub use raster::{rasterize_mesh, GBuffer, Hit};
pub use shading::{
    perturbed_normal, sample_material, shade, shade_backward, shade_point, DirectionalLight, Footprint, Lights, MaterialGradients,
    MIN_ROUGHNESS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_random_camera, CameraConfig};
use crate::error::{Error, Result};
use crate::guidance::GuidanceOracle;
use crate::image::Image;
use crate::mesh::TexturedMesh;
use crate::optim::{AdamConfig, Moments};
use crate::sds::{distill_images, SdsConfig, SdsContext, TimestepSchedule};

/// Square texel maps, row-major with `v` running down the rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps {
    size: usize,
    /// Diffuse albedo, 3 channels.
    pub kd: Vec<f64>,
    /// Roughness and metallic.
    pub krm: Vec<f64>,
    /// Tangent-space normal, decoded as `2·k_n − 1`.
    pub kn: Vec<f64>,
}

impl MaterialMaps {
    /// Gray diffuse, roughness 0.5, no metal, unperturbed normals.
    pub fn new(size: usize) -> Result<Self> {
        check_size(size)?;
        let texels = size * size;
        Ok(Self {
            size,
            kd: vec![0.5; texels * 3],
            krm: [0.5, 0.0].repeat(texels),
            kn: [0.5, 0.5, 1.0].repeat(texels),
        })
    }

    pub fn from_parts(size: usize, kd: Vec<f64>, krm: Vec<f64>, kn: Vec<f64>) -> Result<Self> {
        check_size(size)?;
        let maps = Self { size, kd, krm, kn };
        maps.validate()?;
        Ok(maps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.size * self.size;
        for (name, map, c) in [("kd", &self.kd, 3), ("krm", &self.krm, 2), ("kn", &self.kn, 3)] {
            if map.len() != t * c {
                return Err(Error::Shape(format!("{name} has {} values, expected {}", map.len(), t * c)));
            }
            if let Some(i) = map.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!("{name} value {i} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn texel_kd(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.size + x);
        [self.kd[i], self.kd[i + 1], self.kd[i + 2]]
    }

    /// One map as an RGB image; two-channel maps get a zero blue channel.
    pub fn to_image(&self, map: MapKind) -> Image {
        let t = self.size * self.size;
        let data = match map {
            MapKind::Diffuse => self.kd.clone(),
            MapKind::Normal => self.kn.clone(),
            MapKind::RoughnessMetallic => (0..t).flat_map(|i| [self.krm[2 * i], self.krm[2 * i + 1], 0.0]).collect(),
        };
        Image::from_vec(self.size, self.size, data).expect("maps are square")
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.kd, &mut self.krm, &mut self.kn]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Diffuse,
    RoughnessMetallic,
    Normal,
}

fn check_size(size: usize) -> Result<()> {
    if !size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("texture size {size} is not a power of two")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub iterations: u64,
    /// Cameras per iteration, each sent as its own request.
    pub batch: usize,
    pub texture_size: usize,
    pub learning_rate: f64,
    /// Camera distribution; its width and height set the render resolution.
    pub camera: CameraConfig,
    pub sds: SdsConfig,
    pub lights: Lights,
    /// Overrides the uniform timestep schedule when set.
    pub schedule: Option<TimestepSchedule>,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 4,
            texture_size: 256,
            learning_rate: 0.01,
            camera: CameraConfig::default(),
            sds: SdsConfig::default(),
            lights: Lights::default(),
            schedule: None,
        }
    }
}

impl TextureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !self.texture_size.is_power_of_two() {
            return Err(Error::config("texture_size", "must be a power of two"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        self.camera.validate().map_err(|e| e.within("camera"))?;
        self.sds.validate().map_err(|e| e.within("sds"))?;
        self.lights.validate().map_err(|e| e.within("lights"))?;
        if let Some(s) = &self.schedule {
            s.validate().map_err(|e| e.within("schedule"))?;
        }
        Ok(())
    }

    pub fn timestep_schedule(&self) -> TimestepSchedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| TimestepSchedule::texture(self.iterations))
    }
}

/// Adam over the three maps with projection back onto `[0, 1]`.
pub struct TextureOptimizer {
    adam: AdamConfig,
    lr: f64,
    step: u64,
    moments: [Moments; 3],
}

impl TextureOptimizer {
    pub fn new(maps: &MaterialMaps, lr: f64) -> Self {
        Self {
            adam: AdamConfig::default(),
            lr,
            step: 0,
            moments: [
                Moments::zeros(maps.kd.len()),
                Moments::zeros(maps.krm.len()),
                Moments::zeros(maps.kn.len()),
            ],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, maps: &mut MaterialMaps, grads: &MaterialGradients) -> Result<()> {
        self.step += 1;
        let gs = [&grads.kd, &grads.krm, &grads.kn];
        for ((params, g), m) in maps.params_mut().into_iter().zip(gs).zip(&mut self.moments) {
            m.update(params, g, self.lr, self.step, &self.adam)?;
            for v in params.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(())
    }
}

/// One iteration: `batch` random views, independent requests, mean gradient, one Adam step.
#[allow(clippy::too_many_arguments)]
pub fn texture_step(
    mesh: &TexturedMesh,
    maps: &mut MaterialMaps,
    oracle: &mut dyn GuidanceOracle,
    config: &TextureConfig,
    ctx: &SdsContext,
    schedule: &TimestepSchedule,
    optimizer: &mut TextureOptimizer,
    rng: &mut impl Rng,
) -> Result<f64> {
    let step = optimizer.step_count();
    let t = schedule.timestep(step, rng)?;
    let poses: Vec<_> = (0..config.batch).map(|_| sample_random_camera(rng, &config.camera)).collect();
    let backgrounds: Vec<[f64; 3]> = poses.iter().map(|_| ctx.config.background.draw(rng)).collect();
    let gbuffers = poses.iter().map(|p| rasterize_mesh(mesh, p)).collect::<Result<Vec<_>>>()?;
    let images: Vec<Image> = gbuffers
        .iter()
        .zip(&backgrounds)
        .map(|(g, bg)| shade(g, maps, &config.lights, *bg))
        .collect();
    let grads_rgb = distill_images(&images, &poses, oracle, 1, t, ctx, rng)?;
    let mut grads = MaterialGradients::zeros(maps.size());
    for (g, gi) in gbuffers.iter().zip(&grads_rgb) {
        grads.add(&shade_backward(g, maps, &config.lights, gi)?);
    }
    grads.scale(1.0 / config.batch as f64);
    optimizer.apply(maps, &grads)?;
    Ok(t)
}

/// Runs the texture stage from the default initialization.
pub fn optimize_texture(
    mesh: &TexturedMesh,
    oracle: &mut dyn GuidanceOracle,
    config: &TextureConfig,
    seed: u64,
) -> Result<MaterialMaps> {
    let maps = MaterialMaps::new(config.texture_size)?;
    optimize_texture_from(mesh, maps, oracle, config, seed)
}

pub fn optimize_texture_from(
    mesh: &TexturedMesh,
    mut maps: MaterialMaps,
    oracle: &mut dyn GuidanceOracle,
    config: &TextureConfig,
    seed: u64,
) -> Result<MaterialMaps> {
    config.validate()?;
    mesh.validate()?;
    maps.validate()?;
    if !mesh.has_uvs() {
        return Err(Error::InvalidArgument("mesh has no UVs; unwrap it first".into()));
    }
    oracle.check_ready()?;
    let ctx = SdsContext::new(config.sds.clone());
    let schedule = config.timestep_schedule();
    let mut optimizer = TextureOptimizer::new(&maps, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.iterations {
        texture_step(mesh, &mut maps, oracle, config, &ctx, &schedule, &mut optimizer, &mut rng)?;
    }
    Ok(maps)
}
