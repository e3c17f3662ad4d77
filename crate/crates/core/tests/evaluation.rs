use std::thread;

use gad_core::error::Error;
use gad_core::eval::{
    evaluation_poses, extract_features, fid3d, frechet_distance, image_features, load_reference_dir, render_views,
    Asset, FeatureExtractor, FeatureStats, FEATURES_PATH,
};
use gad_core::gaussian::{GaussianCloud, RawSplat};
use gad_core::image::Image;
use gad_core::texture::Lights;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn patches() -> FeatureExtractor {
    FeatureExtractor::PatchStats { patch: 8 }
}

fn noise_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_stats(d: usize, n: usize, seed: u64) -> FeatureStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    FeatureStats::from_samples(&samples).unwrap()
}

fn stats_1d(mean: f64, var: f64) -> FeatureStats {
    FeatureStats::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var), 10).unwrap()
}

#[test]
fn gray_image_patches() {
    let f = image_features(&Image::filled(32, 24, [0.5; 3]), &patches()).unwrap();
    assert_eq!(f.len(), 12);
    for v in &f {
        assert_eq!(v.len(), 9);
        assert_eq!(&v[..3], &[0.5; 3]);
        assert!(v[3..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn empty_input_is_rejected() {
    assert!(extract_features(&[], &patches()).is_err());
}

#[test]
fn identical_images_give_identical_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = noise_image(32, 32, &mut rng);
    let a = image_features(&img, &patches()).unwrap();
    let b = image_features(&img.clone(), &patches()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn half_turn_of_a_symmetric_image_keeps_patch_means() {
    // Symmetric under a half turn by construction: each pixel mirrors its opposite.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (w, h) = (32, 24);
    let mut img = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = (w - 1 - x, h - 1 - y);
            if (y, x) < (oy, ox) {
                let c = [0; 3].map(|_| rng.random_range(0.0..1.0));
                img.set_pixel(x, y, c);
                img.set_pixel(ox, oy, c);
            }
        }
    }
    let turned = img.rotate_180();
    assert_eq!(turned, img);
    let means = |im: &Image| {
        let mut m: Vec<[u64; 3]> = image_features(im, &patches())
            .unwrap()
            .iter()
            .map(|f| [f[0].to_bits(), f[1].to_bits(), f[2].to_bits()])
            .collect();
        m.sort();
        m
    };
    assert_eq!(means(&img), means(&turned));
}

#[test]
fn distance_to_itself_is_zero() {
    let a = random_stats(9, 50, 3);
    assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
}

#[test]
fn one_dimensional_closed_forms() {
    // (μ1 − μ2)² + (σ1 − σ2)².
    let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap();
    assert!((d - 1.0).abs() < 1e-10);
    let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap();
    assert!((d - 1.0).abs() < 1e-10);
    let d = frechet_distance(&stats_1d(0.3, 2.25), &stats_1d(-0.2, 0.25)).unwrap();
    assert!((d - (0.25 + 1.0)).abs() < 1e-10);
}

#[test]
fn dimension_mismatch_is_rejected() {
    assert!(matches!(
        frechet_distance(&random_stats(3, 10, 1), &random_stats(4, 10, 1)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn single_sample_is_degenerate() {
    assert!(matches!(
        FeatureStats::from_samples(&[vec![1.0, 2.0]]),
        Err(Error::DegenerateStatistics(_))
    ));
    // An 8×8 view yields one patch.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let refs: Vec<Image> = (0..3).map(|_| noise_image(8, 8, &mut rng)).collect();
    assert!(matches!(
        fid3d(&[Image::filled(8, 8, [0.5; 3])], &refs, &patches()),
        Err(Error::DegenerateStatistics(_))
    ));
}

proptest! {
    #[test]
    fn symmetric_and_nonnegative(sa in 0u64..1000, sb in 0u64..1000, d in 1usize..6) {
        let a = random_stats(d, 3 + d, sa);
        let b = random_stats(d, 4 + d, sb + 5000);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn commuting_covariances_match_the_frobenius_form(
        va in prop::collection::vec(0.0f64..3.0, 1..6),
        seed in 0u64..1000,
    ) {
        let d = va.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vb: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let ma: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mb: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = FeatureStats::new(DVector::from_vec(ma.clone()), DMatrix::from_diagonal(&DVector::from_vec(va.clone())), 5).unwrap();
        let b = FeatureStats::new(DVector::from_vec(mb.clone()), DMatrix::from_diagonal(&DVector::from_vec(vb.clone())), 5).unwrap();
        let expected: f64 = (0..d).map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum();
        let got = frechet_distance(&a, &b).unwrap();
        prop_assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

fn test_cloud() -> GaussianCloud {
    let mut cloud = GaussianCloud::new();
    for (p, c) in [
        ([0.0, 0.0, 0.0], [2.0, -1.0, -1.0]),
        ([0.3, 0.2, -0.1], [-1.0, 2.0, -1.0]),
        ([-0.2, -0.3, 0.2], [-1.0, -1.0, 2.0]),
    ] {
        cloud.push(RawSplat {
            position: p,
            log_scale: [0.25f64.ln(), 0.15f64.ln(), 0.2f64.ln()],
            rotation: [0.9, 0.1, 0.3, 0.0],
            opacity_logit: 2.0,
            color: c,
        });
    }
    cloud
}

fn asset_renders() -> Vec<Image> {
    let cloud = test_cloud();
    let poses = evaluation_poses(10, 2.5, 64).unwrap();
    render_views(&Asset::Splats(&cloud), &poses, &Lights::default()).unwrap()
}

#[test]
fn self_comparison_is_far_below_unrelated_references() {
    let renders = asset_renders();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let unrelated: Vec<Image> = (0..10).map(|_| noise_image(64, 64, &mut rng)).collect();
    let own = fid3d(&renders, &renders, &patches()).unwrap();
    let other = fid3d(&renders, &unrelated, &patches()).unwrap();
    assert!(own < 0.01 * other, "self {own} vs unrelated {other}");
}

#[test]
fn brightening_increases_the_score() {
    let renders = asset_renders();
    let refs = renders.clone();
    let brighter: Vec<Image> = renders.iter().map(|r| r.map(|v| v + 0.2)).collect();
    let base = fid3d(&renders, &refs, &patches()).unwrap();
    let shifted = fid3d(&brighter, &refs, &patches()).unwrap();
    assert!(shifted > base);
}

#[test]
fn order_of_views_and_references_does_not_matter() {
    let renders = asset_renders();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let refs: Vec<Image> = (0..8).map(|_| noise_image(32, 32, &mut rng).map(|v| 0.5 + 0.5 * v)).collect();
    let base = fid3d(&renders, &refs, &patches()).unwrap();

    let mut refs_perm = refs.clone();
    refs_perm.reverse();
    refs_perm.swap(0, 3);
    assert!((fid3d(&renders, &refs_perm, &patches()).unwrap() - base).abs() < 1e-10);

    let mut views_perm = renders.clone();
    views_perm.rotate_left(3);
    views_perm.swap(1, 7);
    assert_eq!(fid3d(&views_perm, &refs, &patches()).unwrap(), base);
}

#[test]
fn references_load_from_a_directory_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    for (name, v) in [("b.png", 0.2), ("a.png", 0.6), ("c.PNG", 1.0)] {
        Image::filled(4, 3, [v; 3]).save_png(dir.path().join(name)).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let refs = load_reference_dir(dir.path()).unwrap();
    let firsts: Vec<f64> = refs.iter().map(|r| r.data()[0]).collect();
    assert_eq!(firsts, vec![153.0 / 255.0, 51.0 / 255.0, 1.0]);
    assert!(load_reference_dir(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn external_extractor_round_trip() {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let v: serde_json::Value = serde_json::from_str(&body).unwrap();
            let batch = v["batch"].as_u64().unwrap() as usize;
            let dim = if req.url() == FEATURES_PATH { 4 } else { 0 };
            let feats: Vec<Vec<f64>> = (0..batch).map(|b| vec![b as f64; dim]).collect();
            let out = serde_json::json!({ "features": feats }).to_string();
            let _ = req.respond(tiny_http::Response::from_string(out));
        }
    });
    let imgs = vec![Image::zeros(4, 4), Image::filled(4, 4, [1.0; 3])];
    let ok = extract_features(&imgs, &FeatureExtractor::External { endpoint: url.clone(), dim: 4 }).unwrap();
    assert_eq!(ok, vec![vec![vec![0.0; 4]], vec![vec![1.0; 4]]]);
    let bad = extract_features(&imgs, &FeatureExtractor::External { endpoint: url, dim: 5 });
    assert!(matches!(bad, Err(Error::Oracle(_))));
}
