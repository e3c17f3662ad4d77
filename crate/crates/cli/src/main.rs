use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gad_core::camera::CameraPose;
use gad_core::eval::{render_views, Asset};
use gad_core::io::{export_mesh, export_ply, import_mesh, import_ply, save_optimizer, OBJ_FILE};
use gad_core::mesh::{extract_mesh, uv_unwrap, MeshConfig};
use gad_core::pipeline::{
    evaluate_asset, extract_textured_mesh, initial_cloud, run_pipeline, run_prior, run_refine, run_texture,
    EvalConfig, PipelineConfig, SplatStageOutput, SPLATS_FILE,
};
use gad_core::texture::{Lights, MaterialMaps};
use gad_core::{Error, Result};
use log::info;

#[derive(Parser)]
#[command(name = "gad", version, about = "Text-to-3D generation with Gaussian splats and textured meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and export the asset bundle.
    Generate {
        /// TOML config; omitted fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a single stage between checkpoints.
    Stage {
        #[arg(value_enum)]
        which: StageName,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input PLY; optional for `prior`, which otherwise starts from random splats.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output PLY for `prior`/`refine` (optimizer state goes next to it), directory for `texture`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract and unwrap the surface of a splat PLY with neutral materials.
    ExtractMesh {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = MeshConfig::default().resolution)]
        res: usize,
        #[arg(long, default_value_t = MeshConfig::default().threshold)]
        threshold: f64,
        #[arg(long, default_value_t = 256)]
        texture_size: usize,
    },
    /// Score an asset.
    Evaluate {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Render a PLY or an asset directory from one viewpoint.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        /// Degrees.
        #[arg(long, allow_negative_numbers = true)]
        azimuth: f64,
        /// Degrees.
        #[arg(long, allow_negative_numbers = true)]
        elevation: f64,
        #[arg(long, default_value_t = 2.5)]
        radius: f64,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageName {
    Prior,
    Refine,
    Texture,
}

#[derive(Subcommand)]
enum Metric {
    /// Multi-view Fréchet distance against a directory of reference PNGs.
    Fid {
        #[arg(long)]
        asset: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, default_value_t = 10)]
        views: usize,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut config = match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            Error::Parse { location, message } => Error::Config {
                path: format!("{}: {location}", p.display()),
                message,
            },
            Error::Io { path, source } => Error::Config {
                path: path.display().to_string(),
                message: source.to_string(),
            },
            other => other,
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.apply_env();
    config.validate()?;
    Ok(config)
}

fn save_stage(out: &SplatStageOutput, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    export_ply(&out.cloud, path)?;
    save_optimizer(&out.optimizer, path.with_extension("optim"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let config = load_config(config.as_deref(), seed)?;
            let report = run_pipeline(&config, &out)?;
            println!("wrote {} ({} triangles, bundle {})", out.display(), report.mesh_triangles, report.bundle_hash);
            if let Some(fid) = report.fid {
                println!("fid {fid:.6}");
            }
        }
        Command::Stage {
            which,
            config,
            input,
            out,
            seed,
        } => {
            let config = load_config(config.as_deref(), seed)?;
            let cloud = match (&input, which) {
                (Some(p), _) => Some(import_ply(p)?),
                (None, StageName::Prior) => None,
                (None, _) => return Err(Error::InvalidArgument("--in is required for this stage".into())),
            };
            match which {
                StageName::Prior => {
                    let mut oracle = config.stage1.oracle.build(config.stage1.target_background())?;
                    let start = match cloud {
                        Some(c) => c,
                        None => initial_cloud(&config)?,
                    };
                    let result = run_prior(&config, start, oracle.as_mut())?;
                    save_stage(&result, &out)?;
                    println!("wrote {} ({} splats)", out.display(), result.cloud.len());
                }
                StageName::Refine => {
                    let mut oracle = config.stage2.oracle.build(config.stage2.target_background())?;
                    let result = run_refine(&config, cloud.expect("checked"), oracle.as_mut())?;
                    save_stage(&result, &out)?;
                    println!("wrote {} ({} splats)", out.display(), result.cloud.len());
                }
                StageName::Texture => {
                    let cloud = cloud.expect("checked");
                    let mut oracle = config.stage3.oracle.build(config.stage3.target_background())?;
                    oracle.check_ready()?;
                    let mesh = extract_textured_mesh(&config, &cloud)?;
                    let maps = run_texture(&config, &mesh, oracle.as_mut())?;
                    export_mesh(&mesh, &maps, &out)?;
                    export_ply(&cloud, out.join(SPLATS_FILE))?;
                    println!("wrote {} ({} triangles)", out.display(), mesh.triangles.len());
                }
            }
        }
        Command::ExtractMesh {
            input,
            out,
            res,
            threshold,
            texture_size,
        } => {
            let cloud = import_ply(&input)?;
            let config = MeshConfig {
                resolution: res,
                threshold,
                ..MeshConfig::default()
            };
            let mesh = extract_mesh(&cloud, &config)?;
            if mesh.is_empty() {
                return Err(Error::Numerical(format!("no surface at density threshold {threshold}")));
            }
            let mesh = uv_unwrap(&mesh, texture_size)?;
            export_mesh(&mesh, &MaterialMaps::new(texture_size)?, &out)?;
            export_ply(&cloud, out.join(SPLATS_FILE))?;
            println!("wrote {} ({} vertices, {} triangles)", out.display(), mesh.vertices.len(), mesh.triangles.len());
        }
        Command::Evaluate {
            metric:
                Metric::Fid {
                    asset,
                    refs,
                    views,
                    resolution,
                },
        } => {
            let eval = EvalConfig {
                views,
                resolution,
                ..EvalConfig::default()
            };
            let score = evaluate_asset(&asset, &refs, &eval, &Lights::default())?;
            println!("{score:.6}");
        }
        Command::Render {
            input,
            azimuth,
            elevation,
            radius,
            resolution,
            out,
        } => {
            let pose = CameraPose::new(azimuth.to_radians(), elevation.to_radians(), radius)
                .with_resolution(resolution, resolution);
            pose.validate()?;
            let lights = Lights::default();
            let image = if input.is_dir() && input.join(OBJ_FILE).exists() {
                let (mesh, maps) = import_mesh(&input)?;
                render_views(&Asset::Mesh(&mesh, &maps), &[pose], &lights)?
            } else {
                let ply = if input.is_dir() { input.join(SPLATS_FILE) } else { input.clone() };
                let cloud = import_ply(&ply)?;
                render_views(&Asset::Splats(&cloud), &[pose], &lights)?
            };
            image[0].save_png(&out)?;
            info!("rendered {}", input.display());
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for oracle failures, 4 for numerical failures, 1 otherwise.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Oracle(_) => 3,
        Error::Numerical(_) | Error::NonFiniteSplat { .. } | Error::DegenerateStatistics(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
