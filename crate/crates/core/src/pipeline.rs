//! Stage orchestration: configuration, the three optimization stages with
//! mesh extraction in between, checkpoints and the exported bundle.
//!
//! Every stage draws from its own random stream derived from the run seed,
//! and clouds are rounded to `f32` at stage boundaries, so a run resumed
//! from a checkpoint continues exactly as the uninterrupted run would.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{sample_mvdream_batch, sample_random_camera, CameraConfig, CameraPose};
use crate::density::{densify_and_prune, reset_opacity, DensifyConfig, GradStats};
use crate::error::{Error, Result};
use crate::eval::{evaluation_poses, fid3d, load_reference_dir, render_views, Asset, FeatureExtractor};
use crate::gaussian::{GaussianCloud, InitConfig, RawSplat};
use crate::guidance::{
    AnalyticOracle, ConstantTarget, FixedTarget, GuidanceOracle, RemoteOracle, ResponseKind, SplatTarget,
    ZeroOracle,
};
use crate::image::Image;
use crate::io::{export_mesh, export_ply, import_mesh, import_ply, save_optimizer, OBJ_FILE};
use crate::mesh::{extract_mesh, uv_unwrap, MeshConfig, TexturedMesh};
use crate::optim::{AdamConfig, LearningRates, SplatOptimizer};
use crate::raster::RenderConfig;
use crate::sds::{sds_step, BackgroundPolicy, SdsConfig, SdsContext, Stage, TimestepSchedule, WeightStrategy};
use crate::texture::{optimize_texture, Lights, MaterialMaps, TextureConfig};

/// Overrides the URL of every remote oracle when set.
pub const ORACLE_URL_ENV: &str = "GAD_ORACLE_URL";

pub const PRIOR_PLY: &str = "prior.ply";
pub const PRIOR_OPTIM: &str = "prior.optim";
pub const REFINE_PLY: &str = "refine.ply";
pub const REFINE_OPTIM: &str = "refine.optim";
pub const ASSET_DIR: &str = "asset";
pub const SPLATS_FILE: &str = "splats.ply";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

/// Reference image for a photometric oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum TargetConfig {
    /// A flat color from every view.
    Constant { rgb: [f64; 3] },
    /// The built-in three-splat scene of [`synthetic_scene`].
    Synthetic,
    /// A splat scene read from a PLY file.
    Ply { path: PathBuf },
    /// One PNG shown from every view.
    Image { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OracleConfig {
    /// A guidance service speaking the HTTP protocol.
    Remote {
        url: String,
        #[serde(default)]
        response: ResponseKind,
    },
    /// Pulls every view toward a known target; needs no network.
    Photometric { target: TargetConfig },
    /// Zero gradient everywhere.
    Zero,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig::Remote {
            url: "http://127.0.0.1:8000".into(),
            response: ResponseKind::NoisePrediction,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OracleConfig::Remote { url, .. } => {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    return Err(Error::config("url", format!("`{url}` is not an http(s) URL")));
                }
            }
            OracleConfig::Photometric { target: TargetConfig::Constant { rgb } } => {
                if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::config("target.rgb", "channels must lie in [0, 1]"));
                }
            }
            OracleConfig::Photometric { .. } | OracleConfig::Zero => {}
        }
        Ok(())
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, OracleConfig::Remote { .. })
    }

    /// Builds the oracle; splat targets are rendered over `background`.
    pub fn build(&self, background: [f64; 3]) -> Result<Box<dyn GuidanceOracle>> {
        Ok(match self {
            OracleConfig::Remote { url, response } => Box::new(RemoteOracle::new(url.clone(), *response)),
            OracleConfig::Zero => Box::new(ZeroOracle),
            OracleConfig::Photometric { target } => match target {
                TargetConfig::Constant { rgb } => Box::new(AnalyticOracle::new(ConstantTarget(*rgb))),
                TargetConfig::Image { path } => Box::new(AnalyticOracle::new(FixedTarget(Image::load_png(path)?))),
                TargetConfig::Synthetic => Box::new(AnalyticOracle::new(SplatTarget {
                    scene: synthetic_scene(),
                    background,
                    config: RenderConfig::default(),
                })),
                TargetConfig::Ply { path } => Box::new(AnalyticOracle::new(SplatTarget {
                    scene: import_ply(path)?,
                    background,
                    config: RenderConfig::default(),
                })),
            },
        })
    }
}

/// Three overlapping anisotropic splats in red, green and blue around the origin.
pub fn synthetic_scene() -> GaussianCloud {
    let splat = |position: [f64; 3], scale: [f64; 3], rotation: [f64; 4], rgb: [f64; 3]| RawSplat {
        log_scale: scale.map(f64::ln),
        rotation,
        ..RawSplat::isotropic(position, 1.0, 0.9, rgb)
    };
    GaussianCloud::from_splats([
        splat([0.0, 0.05, 0.0], [0.30, 0.15, 0.20], [0.95, 0.0, 0.0, 0.31], [0.9, 0.15, 0.1]),
        splat([0.25, -0.2, 0.1], [0.12, 0.25, 0.12], [0.9, 0.3, 0.3, 0.0], [0.1, 0.8, 0.2]),
        splat([-0.25, -0.15, -0.15], [0.18, 0.18, 0.10], [0.8, 0.0, 0.6, 0.0], [0.15, 0.2, 0.9]),
    ])
}

/// Settings of one splat-optimization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplatStageConfig {
    pub steps: u64,
    /// Oracle requests per step.
    pub batch: usize,
    /// Views per request: 4 for a multi-view oracle, 1 for a single-view one.
    pub views_per_request: usize,
    /// Camera distribution; its width and height set the render resolution.
    pub camera: CameraConfig,
    /// Overrides the stage's default timestep schedule when set.
    pub schedule: Option<TimestepSchedule>,
    pub densify: DensifyConfig,
    pub learning_rates: LearningRates,
    pub adam: AdamConfig,
    pub weight: WeightStrategy,
    pub background: BackgroundPolicy,
    pub oracle: OracleConfig,
}

impl SplatStageConfig {
    pub fn prior() -> Self {
        Self {
            steps: 700,
            batch: 1,
            views_per_request: 4,
            camera: CameraConfig::default(),
            schedule: None,
            densify: DensifyConfig::prior(),
            learning_rates: LearningRates::default(),
            adam: AdamConfig::default(),
            weight: WeightStrategy::Constant,
            background: BackgroundPolicy::RandomGray,
            oracle: OracleConfig::default(),
        }
    }

    pub fn refine() -> Self {
        Self {
            batch: 2,
            views_per_request: 1,
            camera: CameraConfig {
                width: 512,
                height: 512,
                ..CameraConfig::default()
            },
            densify: DensifyConfig::refine(),
            ..Self::prior()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !matches!(self.views_per_request, 1 | 4) {
            return Err(Error::config("views_per_request", "must be 1 or 4"));
        }
        self.camera.validate().map_err(|e| e.within("camera"))?;
        if let Some(s) = &self.schedule {
            s.validate().map_err(|e| e.within("schedule"))?;
            if s.total_steps != self.steps {
                return Err(Error::config("schedule.total_steps", "must equal steps"));
            }
        }
        self.densify.validate().map_err(|e| e.within("densify"))?;
        self.learning_rates.validate().map_err(|e| e.within("learning_rates"))?;
        self.adam.validate().map_err(|e| e.within("adam"))?;
        if let BackgroundPolicy::Fixed(c) = self.background {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("background", "channels must lie in [0, 1]"));
            }
        }
        self.oracle.validate().map_err(|e| e.within("oracle"))
    }

    pub fn timestep_schedule(&self, stage: Stage) -> TimestepSchedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| TimestepSchedule::for_stage(stage, self.steps))
    }

    /// Background a photometric splat target is rendered over.
    pub fn target_background(&self) -> [f64; 3] {
        match self.background {
            BackgroundPolicy::Fixed(c) => c,
            BackgroundPolicy::RandomGray => [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureStageConfig {
    pub iterations: u64,
    pub batch: usize,
    pub texture_size: usize,
    pub learning_rate: f64,
    pub camera: CameraConfig,
    pub lights: Lights,
    pub schedule: Option<TimestepSchedule>,
    pub weight: WeightStrategy,
    pub background: BackgroundPolicy,
    pub oracle: OracleConfig,
}

impl Default for TextureStageConfig {
    fn default() -> Self {
        let t = TextureConfig::default();
        Self {
            iterations: t.iterations,
            batch: t.batch,
            texture_size: t.texture_size,
            learning_rate: t.learning_rate,
            camera: t.camera,
            lights: t.lights,
            schedule: None,
            weight: WeightStrategy::Constant,
            background: BackgroundPolicy::RandomGray,
            oracle: OracleConfig::default(),
        }
    }
}

impl TextureStageConfig {
    pub fn target_background(&self) -> [f64; 3] {
        match self.background {
            BackgroundPolicy::Fixed(c) => c,
            BackgroundPolicy::RandomGray => [1.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    #[default]
    Mesh,
    Splats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Scored after export when set.
    pub reference_dir: Option<PathBuf>,
    pub views: usize,
    pub radius: f64,
    pub resolution: usize,
    pub extractor: FeatureExtractor,
    pub source: EvalSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            reference_dir: None,
            views: 10,
            radius: 2.5,
            resolution: 256,
            extractor: FeatureExtractor::default(),
            source: EvalSource::Mesh,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::config("views", "must be at least 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("radius", "must be positive"));
        }
        if let FeatureExtractor::PatchStats { patch } = self.extractor {
            if patch == 0 || patch * 2 > self.resolution {
                return Err(Error::config("extractor.patch", "needs at least two patches per side"));
            }
        }
        if let FeatureExtractor::External { dim: 0, .. } = self.extractor {
            return Err(Error::config("extractor.dim", "must be at least 1"));
        }
        Ok(())
    }
}

/// The whole run. Every default is the published setting, so an empty file is a complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
    pub cfg_scale: f64,
    pub init: InitConfig,
    pub stage1: SplatStageConfig,
    pub stage2: SplatStageConfig,
    pub mesh: MeshConfig,
    pub stage3: TextureStageConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            negative_prompt: String::new(),
            seed: 0,
            cfg_scale: 100.0,
            init: InitConfig::default(),
            stage1: SplatStageConfig::prior(),
            stage2: SplatStageConfig::refine(),
            mesh: MeshConfig::default(),
            stage3: TextureStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Overlays `user` onto `base`, table by table.
fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) if v.is_table() && !is_enum(slot) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

/// Whether a default value is an enum, to be replaced whole so switching
/// variants drops stale fields: internally tagged ones carry a tag key,
/// externally tagged ones are single-key tables, unit variants are strings.
fn is_enum(v: &toml::Value) -> bool {
    match v.as_table() {
        Some(t) => t.len() == 1 || ["kind", "type", "rule"].iter().any(|k| t.contains_key(*k)),
        None => true,
    }
}

impl PipelineConfig {
    /// Parses TOML over the defaults and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "config".into(),
            };
            Error::parse(location, e.message().to_string())
        })?;
        let mut merged = toml::Value::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let config: Self = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config("cfg_scale", "must be finite and non-negative"));
        }
        let i = &self.init;
        if i.count == 0 {
            return Err(Error::config("init.count", "must be at least 1"));
        }
        if !(i.radius > 0.0) {
            return Err(Error::config("init.radius", "must be positive"));
        }
        if !(i.opacity > 0.0 && i.opacity < 1.0) {
            return Err(Error::config("init.opacity", "must lie in (0, 1)"));
        }
        if !(i.scale > 0.0) {
            return Err(Error::config("init.scale", "must be positive"));
        }
        if !(i.color_spread >= 0.0) {
            return Err(Error::config("init.color_spread", "must be non-negative"));
        }
        self.stage1.validate().map_err(|e| e.within("stage1"))?;
        self.stage2.validate().map_err(|e| e.within("stage2"))?;
        self.mesh.validate().map_err(|e| e.within("mesh"))?;
        self.stage3.oracle.validate().map_err(|e| e.within("stage3.oracle"))?;
        self.texture_config().validate().map_err(|e| e.within("stage3"))?;
        self.eval.validate().map_err(|e| e.within("eval"))
    }

    pub fn sds_config(&self, weight: WeightStrategy, background: BackgroundPolicy) -> SdsConfig {
        SdsConfig {
            cfg_scale: self.cfg_scale,
            weight,
            background,
            prompt: self.prompt.clone(),
            negative_prompt: self.negative_prompt.clone(),
        }
    }

    pub fn texture_config(&self) -> TextureConfig {
        let s = &self.stage3;
        TextureConfig {
            iterations: s.iterations,
            batch: s.batch,
            texture_size: s.texture_size,
            learning_rate: s.learning_rate,
            camera: s.camera.clone(),
            sds: self.sds_config(s.weight, s.background),
            lights: s.lights.clone(),
            schedule: s.schedule.clone(),
        }
    }

    /// Points every remote oracle at `url`.
    pub fn override_oracle_url(&mut self, url: &str) {
        for oracle in [&mut self.stage1.oracle, &mut self.stage2.oracle, &mut self.stage3.oracle] {
            if let OracleConfig::Remote { url: u, .. } = oracle {
                *u = url.to_string();
            }
        }
    }

    /// Applies [`ORACLE_URL_ENV`] if it is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ORACLE_URL_ENV) {
            if !url.is_empty() {
                self.override_oracle_url(&url);
            }
        }
    }

    /// Uses the built-in photometric oracle on the synthetic scene everywhere, with fixed white backgrounds.
    pub fn with_synthetic_oracles(mut self) -> Self {
        let oracle = OracleConfig::Photometric { target: TargetConfig::Synthetic };
        for s in [&mut self.stage1, &mut self.stage2] {
            s.oracle = oracle.clone();
            s.background = BackgroundPolicy::Fixed([1.0; 3]);
        }
        self.stage3.oracle = oracle;
        self.stage3.background = BackgroundPolicy::Fixed([1.0; 3]);
        self
    }
}

/// Independent random stream for `stage` of a run seeded with `seed`.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stage {
        Stage::Prior => 1,
        Stage::Refine => 2,
        Stage::Texture => 3,
    });
    rng
}

/// Where the cameras of a splat stage come from.
#[derive(Clone, Debug)]
pub enum ViewSource {
    /// Drawn from the stage's camera distribution.
    Sampled,
    /// Distinct views picked uniformly from a fixed set each step.
    Fixed(Vec<CameraPose>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: u64,
    pub initial_splats: usize,
    pub final_splats: usize,
    pub densifications: usize,
    pub opacity_resets: usize,
}

pub struct SplatStageOutput {
    pub cloud: GaussianCloud,
    pub optimizer: SplatOptimizer,
    pub report: StageReport,
}

fn stage_views(
    config: &SplatStageConfig,
    views: &ViewSource,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CameraPose>> {
    let n = config.batch * config.views_per_request;
    match views {
        ViewSource::Sampled => Ok(if config.views_per_request == 4 {
            (0..config.batch).flat_map(|_| sample_mvdream_batch(rng, &config.camera)).collect()
        } else {
            (0..n).map(|_| sample_random_camera(rng, &config.camera)).collect()
        }),
        ViewSource::Fixed(poses) => {
            if poses.len() < n {
                return Err(Error::InvalidArgument(format!("{} fixed views for {n} per step", poses.len())));
            }
            Ok(sample(rng, poses.len(), n).into_iter().map(|i| poses[i].clone()).collect())
        }
    }
}

/// Runs one splat stage from `cloud` with a fresh optimizer.
///
/// After every `densify.interval` completed steps (but not after the last)
/// the cloud is densified and pruned; opacity resets fire on completed-step
/// counts. The returned cloud is rounded to `f32`.
pub fn run_splat_stage(
    stage: Stage,
    mut cloud: GaussianCloud,
    config: &SplatStageConfig,
    sds: SdsConfig,
    oracle: &mut dyn GuidanceOracle,
    views: &ViewSource,
    rng: &mut ChaCha8Rng,
) -> Result<SplatStageOutput> {
    config.validate()?;
    cloud.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("stage started with an empty cloud".into()));
    }
    oracle.check_ready()?;
    let initial_splats = cloud.len();
    let schedule = config.timestep_schedule(stage);
    let ctx = SdsContext::new(sds);
    let mut optimizer = SplatOptimizer::new(cloud.len(), config.adam, config.learning_rates);
    let mut stats = GradStats::new(cloud.len());
    let extent = cloud.extent().max(1e-6);
    let (mut densifications, mut opacity_resets) = (0, 0);
    for step in 0..config.steps {
        let poses = stage_views(config, views, rng)?;
        let outcome = sds_step(
            &mut cloud,
            oracle,
            &poses,
            config.views_per_request,
            &schedule,
            step,
            &mut optimizer,
            &ctx,
            rng,
        )?;
        for r in &outcome.renders {
            stats.accumulate(r)?;
        }
        let completed = step + 1;
        if completed >= config.steps {
            break;
        }
        if completed % config.densify.interval == 0 {
            let d = densify_and_prune(&cloud, &stats, &config.densify, extent, rng)?;
            info!(
                "{stage:?} step {completed}: cloned {}, split {}, pruned {}, {} splats",
                d.cloned,
                d.split,
                d.pruned,
                d.cloud.len()
            );
            if d.cloud.is_empty() {
                return Err(Error::Numerical(format!("every splat was pruned at step {completed}")));
            }
            cloud = d.cloud;
            optimizer.remap(&d.origins);
            stats = GradStats::new(cloud.len());
            densifications += 1;
        }
        if config.densify.opacity_reset.fires(completed) {
            reset_opacity(&mut cloud, config.densify.reset_cap)?;
            optimizer.groups[3] = crate::optim::Moments::zeros(cloud.len());
            opacity_resets += 1;
        }
    }
    cloud.quantize_f32();
    Ok(SplatStageOutput {
        report: StageReport {
            stage,
            steps: config.steps,
            initial_splats,
            final_splats: cloud.len(),
            densifications,
            opacity_resets,
        },
        cloud,
        optimizer,
    })
}

/// The starting cloud of stage 1.
pub fn initial_cloud(config: &PipelineConfig) -> Result<GaussianCloud> {
    let mut cloud = GaussianCloud::init_random(config.seed, &config.init)?;
    cloud.quantize_f32();
    Ok(cloud)
}

pub fn run_prior(config: &PipelineConfig, cloud: GaussianCloud, oracle: &mut dyn GuidanceOracle) -> Result<SplatStageOutput> {
    let s = &config.stage1;
    let sds = config.sds_config(s.weight, s.background);
    let mut rng = stage_rng(config.seed, Stage::Prior);
    run_splat_stage(Stage::Prior, cloud, s, sds, oracle, &ViewSource::Sampled, &mut rng)
}

pub fn run_refine(config: &PipelineConfig, cloud: GaussianCloud, oracle: &mut dyn GuidanceOracle) -> Result<SplatStageOutput> {
    let s = &config.stage2;
    let sds = config.sds_config(s.weight, s.background);
    let mut rng = stage_rng(config.seed, Stage::Refine);
    run_splat_stage(Stage::Refine, cloud, s, sds, oracle, &ViewSource::Sampled, &mut rng)
}

/// Extracts the surface of `cloud` and unwraps it onto the stage-3 atlas.
pub fn extract_textured_mesh(config: &PipelineConfig, cloud: &GaussianCloud) -> Result<TexturedMesh> {
    let mesh = extract_mesh(cloud, &config.mesh)?;
    if mesh.is_empty() {
        return Err(Error::Numerical(format!(
            "no surface at density threshold {}",
            config.mesh.threshold
        )));
    }
    uv_unwrap(&mesh, config.stage3.texture_size)
}

pub fn run_texture(
    config: &PipelineConfig,
    mesh: &TexturedMesh,
    oracle: &mut dyn GuidanceOracle,
) -> Result<MaterialMaps> {
    // The texture stage seeds its own ChaCha8 generator; derive that seed from the stage stream.
    let seed = rand::Rng::random(&mut stage_rng(config.seed, Stage::Texture));
    optimize_texture(mesh, oracle, &config.texture_config(), seed)
}

/// Where a run starts.
#[derive(Clone, Debug, Default)]
pub enum Resume {
    #[default]
    Start,
    /// Skip stage 1 and refine this cloud.
    AfterPrior(GaussianCloud),
    /// Skip both splat stages and mesh this cloud.
    AfterRefine(GaussianCloud),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub fid: Option<f64>,
    /// SHA-256 over the exported asset directory.
    pub bundle_hash: String,
}

/// Builds the oracles for the stages that will run and probes them before any work starts.
fn ready_oracles(config: &PipelineConfig, resume: &Resume) -> Result<[Option<Box<dyn GuidanceOracle>>; 3]> {
    let run = match resume {
        Resume::Start => [true, true, true],
        Resume::AfterPrior(_) => [false, true, true],
        Resume::AfterRefine(_) => [false, false, true],
    };
    let specs = [
        (&config.stage1.oracle, config.stage1.target_background()),
        (&config.stage2.oracle, config.stage2.target_background()),
        (&config.stage3.oracle, config.stage3.target_background()),
    ];
    let mut out: [Option<Box<dyn GuidanceOracle>>; 3] = [None, None, None];
    for (k, (spec, bg)) in specs.into_iter().enumerate() {
        if run[k] {
            let oracle = spec.build(bg)?;
            oracle.check_ready()?;
            out[k] = Some(oracle);
        }
    }
    Ok(out)
}

fn save_stage(out: &SplatStageOutput, dir: &Path, ply: &str, optim: &str) -> Result<()> {
    export_ply(&out.cloud, dir.join(ply))?;
    save_optimizer(&out.optimizer, dir.join(optim))
}

/// Runs every stage from the beginning, writing checkpoints and the asset under `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<PipelineReport> {
    run_pipeline_from(config, out_dir, Resume::Start)
}

/// Runs the remaining stages. `out_dir` receives `prior.*` and `refine.*`
/// checkpoints as stages finish, then `asset/` (OBJ, MTL, three PNG maps
/// and `splats.ply`), the resolved `config.toml` and `report.json`.
pub fn run_pipeline_from(config: &PipelineConfig, out_dir: impl AsRef<Path>, resume: Resume) -> Result<PipelineReport> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    let [o1, o2, o3] = ready_oracles(config, &resume)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(RESOLVED_CONFIG);
    fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let mut stages = Vec::new();
    let refined = match resume {
        Resume::AfterRefine(cloud) => cloud,
        resume => {
            let prior = match resume {
                Resume::AfterPrior(cloud) => cloud,
                _ => {
                    info!("stage 1: {} steps", config.stage1.steps);
                    let out = run_prior(config, initial_cloud(config)?, o1.expect("built").as_mut())?;
                    save_stage(&out, out_dir, PRIOR_PLY, PRIOR_OPTIM)?;
                    stages.push(out.report);
                    out.cloud
                }
            };
            info!("stage 2: {} steps", config.stage2.steps);
            let out = run_refine(config, prior, o2.expect("built").as_mut())?;
            save_stage(&out, out_dir, REFINE_PLY, REFINE_OPTIM)?;
            stages.push(out.report);
            out.cloud
        }
    };

    info!("extracting mesh");
    let mesh = extract_textured_mesh(config, &refined)?;
    info!("stage 3: {} iterations on {} triangles", config.stage3.iterations, mesh.triangles.len());
    let maps = run_texture(config, &mesh, o3.expect("built").as_mut())?;

    let asset = out_dir.join(ASSET_DIR);
    export_mesh(&mesh, &maps, &asset)?;
    export_ply(&refined, asset.join(SPLATS_FILE))?;
    let fid = match &config.eval.reference_dir {
        Some(refs) => Some(evaluate_asset(&asset, refs, &config.eval, &config.stage3.lights)?),
        None => None,
    };
    let report = PipelineReport {
        stages,
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
        fid,
        bundle_hash: bundle_hash(&asset)?,
    };
    let report_path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

/// Scores an exported asset directory against the PNGs in `refs`.
///
/// The mesh is rendered when the config asks for it and `mesh.obj` exists;
/// otherwise `splats.ply`.
pub fn evaluate_asset(asset: &Path, refs: &Path, eval: &EvalConfig, lights: &Lights) -> Result<f64> {
    eval.validate()?;
    let references = load_reference_dir(refs)?;
    let poses = evaluation_poses(eval.views, eval.radius, eval.resolution)?;
    let renders = if eval.source == EvalSource::Mesh && asset.join(OBJ_FILE).exists() {
        let (mesh, maps) = import_mesh(asset)?;
        render_views(&Asset::Mesh(&mesh, &maps), &poses, lights)?
    } else {
        let cloud = import_ply(asset.join(SPLATS_FILE))?;
        render_views(&Asset::Splats(&cloud), &poses, lights)?
    };
    fid3d(&renders, &references, &eval.extractor)
}

/// SHA-256 over the relative path and bytes of every file under `dir`, in path order.
pub fn bundle_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        let rel = path.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((rel.len() as u64).to_le_bytes());
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
