use std::path::Path;
use std::process::{Command, Output};

use gad_core::density::OpacityReset;
use gad_core::gaussian::{GaussianCloud, RawSplat};
use gad_core::image::Image;
use gad_core::io::{export_ply, import_mesh, import_ply, load_optimizer, OBJ_FILE};
use gad_core::pipeline::{PipelineConfig, ASSET_DIR, ORACLE_URL_ENV, PRIOR_PLY, REFINE_PLY};

fn gad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gad"))
        .args(args)
        .env_remove(ORACLE_URL_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn desk_config() -> PipelineConfig {
    let mut c = PipelineConfig::default().with_synthetic_oracles();
    c.init.count = 300;
    c.init.opacity = 0.3;
    c.init.scale = 0.05;
    for s in [&mut c.stage1, &mut c.stage2] {
        s.steps = 40;
        s.camera.width = 32;
        s.camera.height = 32;
        s.densify.interval = 20;
        s.densify.max_splats = 1000;
        s.densify.opacity_reset = OpacityReset::Never;
    }
    c.mesh.resolution = 24;
    c.mesh.threshold = 0.5;
    c.stage3.iterations = 20;
    c.stage3.batch = 1;
    c.stage3.texture_size = 32;
    c.stage3.camera.width = 32;
    c.stage3.camera.height = 32;
    c
}

fn write_config(dir: &Path, config: &PipelineConfig) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn blob_ply(dir: &Path) -> String {
    let cloud = GaussianCloud::from_splats([
        RawSplat::isotropic([0.0, 0.0, 0.0], 0.25, 0.9, [0.8, 0.3, 0.2]),
        RawSplat::isotropic([0.2, 0.1, 0.0], 0.15, 0.9, [0.2, 0.3, 0.8]),
    ]);
    let path = dir.join("blob.ply");
    export_ply(&cloud, &path).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn generate_writes_checkpoints_and_the_asset() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &desk_config());
    let out = dir.path().join("run");
    let o = gad(&["generate", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join(PRIOR_PLY).is_file());
    assert!(out.join(REFINE_PLY).is_file());
    let (mesh, maps) = import_mesh(out.join(ASSET_DIR)).unwrap();
    assert!(!mesh.triangles.is_empty());
    assert_eq!(maps.size(), 32);
    assert!(String::from_utf8_lossy(&o.stdout).contains("bundle"));
}

#[test]
fn unreachable_oracle_exits_with_3_and_names_the_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = desk_config();
    config.stage1.oracle = Default::default();
    let config = write_config(dir.path(), &config);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_gad"))
        .args(["generate", "--config", &config, "--out", out.to_str().unwrap()])
        .env(ORACLE_URL_ENV, &url)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains(&url), "{}", stderr(&o));
    assert!(!out.join(PRIOR_PLY).exists());
}

#[test]
fn bad_config_exits_with_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[stage2.densify]\ngrad_threshold = -1.0\n").unwrap();
    let o = gad(&["generate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage2.densify.grad_threshold"), "{}", stderr(&o));

    std::fs::write(&path, "seed = [").unwrap();
    assert_eq!(code(&gad(&["generate", "--config", path.to_str().unwrap()])), 2);
    assert_eq!(code(&gad(&["generate", "--config", "/nonexistent/config.toml"])), 2);
    assert_eq!(code(&gad(&["stage", "sideways", "--out", "x"])), 2);
}

#[test]
fn stage_failure_keeps_earlier_checkpoints_and_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = desk_config();
    config.mesh.threshold = 1e6;
    let config = write_config(dir.path(), &config);
    let out = dir.path().join("run");
    let o = gad(&["generate", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(out.join(PRIOR_PLY).is_file());
    assert!(out.join(REFINE_PLY).is_file());
    assert!(!out.join(ASSET_DIR).exists());
}

#[test]
fn stages_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &desk_config());
    let prior = dir.path().join("p.ply");
    let refine = dir.path().join("r.ply");
    let asset = dir.path().join("asset");
    let o = gad(&["stage", "prior", "--config", &config, "--out", prior.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cloud = import_ply(&prior).unwrap();
    assert_eq!(load_optimizer(prior.with_extension("optim")).unwrap().splat_count(), cloud.len());
    let o = gad(&["stage", "refine", "--config", &config, "--in", prior.to_str().unwrap(), "--out", refine.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gad(&["stage", "texture", "--config", &config, "--in", refine.to_str().unwrap(), "--out", asset.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(asset.join(OBJ_FILE).is_file());

    // The chained stages reproduce the one-shot run.
    let full = dir.path().join("full");
    assert_eq!(code(&gad(&["generate", "--config", &config, "--out", full.to_str().unwrap()])), 0);
    assert_eq!(std::fs::read(full.join(REFINE_PLY)).unwrap(), std::fs::read(&refine).unwrap());
    assert_eq!(
        std::fs::read(full.join(ASSET_DIR).join(OBJ_FILE)).unwrap(),
        std::fs::read(asset.join(OBJ_FILE)).unwrap()
    );

    let o = gad(&["stage", "refine", "--config", &config, "--out", refine.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn extract_render_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ply = blob_ply(dir.path());
    let asset = dir.path().join("asset");
    let o = gad(&["extract-mesh", "--in", &ply, "--out", asset.to_str().unwrap(), "--res", "24", "--threshold", "0.5", "--texture-size", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (mesh, _) = import_mesh(&asset).unwrap();
    assert_eq!(mesh.connected_components(), 1);

    let png = dir.path().join("view.png");
    for input in [ply.as_str(), asset.to_str().unwrap()] {
        let o = gad(&["render", "--in", input, "--azimuth", "30", "--elevation", "-10", "--resolution", "48", "--out", png.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let img = Image::load_png(&png).unwrap();
        assert_eq!((img.width(), img.height()), (48, 48));
        assert!(img.pixel(24, 24) != [1.0; 3]);
        assert_eq!(img.pixel(0, 0), [1.0; 3]);
    }

    let refs = dir.path().join("refs");
    std::fs::create_dir(&refs).unwrap();
    for k in 0..4 {
        let o = gad(&["render", "--in", &ply, "--azimuth", &(k * 90).to_string(), "--elevation", "0", "--resolution", "64", "--out", refs.join(format!("{k}.png")).to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let o = gad(&["evaluate", "fid", "--asset", asset.to_str().unwrap(), "--refs", refs.to_str().unwrap(), "--views", "4", "--resolution", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let score: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!(score.is_finite() && score >= 0.0);

    let o = gad(&["extract-mesh", "--in", &ply, "--out", dir.path().join("none").to_str().unwrap(), "--threshold", "50"]);
    assert_eq!(code(&o), 4);
}
