use std::fs;
use std::time::Instant;

use gad_core::density::OpacityReset;
use gad_core::error::{Error, OracleError};
use gad_core::io::{
    import_mesh, import_ply, load_optimizer, DIFFUSE_FILE, NORMAL_FILE, OBJ_FILE, ROUGHNESS_METALLIC_FILE,
};
use gad_core::pipeline::{
    bundle_hash, run_pipeline, run_pipeline_from, OracleConfig, PipelineConfig, Resume, TargetConfig, ASSET_DIR,
    PRIOR_OPTIM, PRIOR_PLY, REFINE_OPTIM, REFINE_PLY, SPLATS_FILE,
};
use gad_core::sds::BackgroundPolicy;

/// 100/100/100 steps on the synthetic target at thumbnail resolutions.
fn desk_config() -> PipelineConfig {
    let mut c = PipelineConfig::default().with_synthetic_oracles();
    c.seed = 7;
    c.init.count = 400;
    c.init.opacity = 0.3;
    c.init.scale = 0.05;
    for s in [&mut c.stage1, &mut c.stage2] {
        s.steps = 100;
        s.camera.width = 48;
        s.camera.height = 48;
        s.densify.interval = 25;
        s.densify.max_splats = 2000;
    }
    c.stage1.densify.opacity_reset = OpacityReset::At(50);
    c.stage2.densify.opacity_reset = OpacityReset::Never;
    c.mesh.resolution = 32;
    c.mesh.threshold = 0.5;
    c.stage3.iterations = 100;
    c.stage3.batch = 2;
    c.stage3.texture_size = 64;
    c.stage3.camera.width = 48;
    c.stage3.camera.height = 48;
    c
}

#[test]
fn desk_scale_run_exports_the_full_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let report = run_pipeline(&desk_config(), dir.path()).unwrap();
    eprintln!("desk run {:?}: {report:?}", start.elapsed());
    for f in [PRIOR_PLY, PRIOR_OPTIM, REFINE_PLY, REFINE_OPTIM] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let asset = dir.path().join(ASSET_DIR);
    for f in [OBJ_FILE, DIFFUSE_FILE, ROUGHNESS_METALLIC_FILE, NORMAL_FILE, SPLATS_FILE] {
        assert!(asset.join(f).is_file(), "{f}");
    }
    assert_eq!(report.stages.len(), 2);
    assert!(report.mesh_triangles > 0);
    let (mesh, maps) = import_mesh(&asset).unwrap();
    assert_eq!(mesh.triangles.len(), report.mesh_triangles);
    assert_eq!(maps.size(), 64);
    let refined = import_ply(dir.path().join(REFINE_PLY)).unwrap();
    assert_eq!(refined.len(), report.stages[1].final_splats);
    assert_eq!(load_optimizer(dir.path().join(REFINE_OPTIM)).unwrap().splat_count(), refined.len());
}

#[test]
fn repeated_runs_hash_identically() {
    let config = desk_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&config, a.path()).unwrap();
    let rb = run_pipeline(&config, b.path()).unwrap();
    assert_eq!(ra.bundle_hash, rb.bundle_hash);
    assert_eq!(bundle_hash(a.path().join(ASSET_DIR)).unwrap(), ra.bundle_hash);
    assert_eq!(fs::read(a.path().join(REFINE_PLY)).unwrap(), fs::read(b.path().join(REFINE_PLY)).unwrap());

    let mut other = config.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    assert_ne!(run_pipeline(&other, c.path()).unwrap().bundle_hash, ra.bundle_hash);
}

#[test]
fn resuming_from_either_checkpoint_matches_the_full_run() {
    let config = desk_config();
    let full = tempfile::tempdir().unwrap();
    let report = run_pipeline(&config, full.path()).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let cloud = import_ply(full.path().join(REFINE_PLY)).unwrap();
    let r = run_pipeline_from(&config, resumed.path(), Resume::AfterRefine(cloud)).unwrap();
    assert_eq!(r.bundle_hash, report.bundle_hash);
    let obj = |d: &std::path::Path| fs::read(d.join(ASSET_DIR).join(OBJ_FILE)).unwrap();
    assert_eq!(obj(resumed.path()), obj(full.path()));

    let from_prior = tempfile::tempdir().unwrap();
    let cloud = import_ply(full.path().join(PRIOR_PLY)).unwrap();
    let r = run_pipeline_from(&config, from_prior.path(), Resume::AfterPrior(cloud)).unwrap();
    assert_eq!(r.bundle_hash, report.bundle_hash);
    assert_eq!(
        fs::read(from_prior.path().join(REFINE_PLY)).unwrap(),
        fs::read(full.path().join(REFINE_PLY)).unwrap()
    );
}

#[test]
fn unreachable_oracle_fails_before_any_stage() {
    let mut config = desk_config();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    config.stage2.oracle = OracleConfig::Remote {
        url: url.clone(),
        response: Default::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let err = run_pipeline(&config, dir.path()).unwrap_err();
    assert!(start.elapsed().as_secs() < 10);
    match &err {
        Error::Oracle(OracleError::Transport { endpoint, .. }) => assert!(endpoint.starts_with(&url)),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains(&url));
    assert!(!dir.path().join(PRIOR_PLY).exists());
}

#[test]
fn url_override_reaches_every_remote_oracle() {
    let mut config = PipelineConfig::default();
    config.stage2.oracle = OracleConfig::Zero;
    config.override_oracle_url("http://10.0.0.2:9000");
    for o in [&config.stage1.oracle, &config.stage3.oracle] {
        assert!(matches!(o, OracleConfig::Remote { url, .. } if url == "http://10.0.0.2:9000"));
    }
    assert_eq!(config.stage2.oracle, OracleConfig::Zero);
}

#[test]
fn empty_file_gives_the_defaults() {
    let c = PipelineConfig::from_toml_str("").unwrap();
    assert_eq!(c, PipelineConfig::default());
    let round = PipelineConfig::from_toml_str(&c.to_toml()).unwrap();
    assert_eq!(round, c);
}

#[test]
fn partial_tables_keep_their_own_stage_defaults() {
    let c = PipelineConfig::from_toml_str(
        r#"
        seed = 3
        [stage2]
        steps = 50
        [stage2.densify]
        opacity_reset = { at = 20 }
        [stage1.oracle]
        kind = "photometric"
        target = { type = "constant", rgb = [1.0, 0.0, 0.0] }
        "#,
    )
    .unwrap();
    assert_eq!(c.seed, 3);
    assert_eq!(c.stage2.steps, 50);
    assert_eq!(c.stage2.batch, 2);
    assert_eq!(c.stage2.camera.width, 512);
    assert_eq!(c.stage2.densify.interval, 50);
    assert_eq!(c.stage2.densify.opacity_reset, OpacityReset::At(20));
    assert_eq!(c.stage1.steps, 700);
    assert_eq!(
        c.stage1.oracle,
        OracleConfig::Photometric {
            target: TargetConfig::Constant { rgb: [1.0, 0.0, 0.0] }
        }
    );
    assert_eq!(c.stage1.background, BackgroundPolicy::RandomGray);
}

fn config_error(text: &str) -> String {
    match PipelineConfig::from_toml_str(text) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn out_of_range_values_name_their_field() {
    assert_eq!(config_error("[stage1.densify]\ninterval = 0"), "stage1.densify.interval");
    assert_eq!(config_error("[stage2.camera]\nfov_y = 200.0"), "stage2.camera.fov_y");
    assert_eq!(config_error("[stage3]\ntexture_size = 100"), "stage3.texture_size");
    assert_eq!(config_error("[stage2.learning_rates]\ncolor = -1.0"), "stage2.learning_rates.color");
    assert_eq!(config_error("cfg_scale = -2.0"), "cfg_scale");
    assert_eq!(config_error("[init]\nopacity = 1.5"), "init.opacity");
    assert_eq!(config_error("[stage1]\nviews_per_request = 3"), "stage1.views_per_request");
    assert_eq!(config_error("[eval]\nviews = 0"), "eval.views");
    assert_eq!(config_error("[stage3.oracle]\nkind = \"remote\"\nurl = \"ftp://x\""), "stage3.oracle.url");
    assert!(config_error("[stage1]\nstepz = 3").starts_with("stage1"));
    assert_eq!(config_error("[mesh]\nresolution = \"big\""), "mesh.resolution");
}

#[test]
fn malformed_toml_is_a_parse_error() {
    assert!(matches!(
        PipelineConfig::from_toml_str("seed = \n"),
        Err(Error::Parse { .. })
    ));
}
