use gad_core::camera::CameraPose;
use gad_core::density::{densify_and_prune, DensifyConfig, GradStats};
use gad_core::gaussian::{GaussianCloud, RawSplat};
use gad_core::guidance::{
    add_noise, apply_cfg, AnalyticOracle, FixedTarget, GuidanceOracle, GuidanceRequest,
    NoiseSchedule, ResponseKind,
};
use gad_core::image::Image;
use gad_core::optim::{AdamConfig, LearningRates, SplatOptimizer};
use gad_core::raster::{backward, render, RenderConfig, SplatGradients};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_splat() -> impl Strategy<Value = RawSplat> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        prop::array::uniform3(-5.0f64..-0.5),
        prop::array::uniform4(-1.0f64..1.0),
        -8.0f64..4.0,
        prop::array::uniform3(-3.0f64..3.0),
    )
        .prop_filter("non-degenerate rotation", |(_, _, q, _, _)| q.iter().map(|v| v * v).sum::<f64>() > 0.01)
        .prop_map(|(position, log_scale, rotation, opacity_logit, color)| RawSplat {
            position,
            log_scale,
            rotation,
            opacity_logit,
            color,
        })
}

fn arb_cloud_and_stats() -> impl Strategy<Value = (GaussianCloud, GradStats)> {
    prop::collection::vec((arb_splat(), 0.0f64..0.05, 0u64..5), 1..40).prop_map(|v| {
        let cloud = GaussianCloud::from_splats(v.iter().map(|(s, _, _)| *s));
        let stats = GradStats {
            accum_norm: v.iter().map(|(_, g, d)| g * *d as f64).collect(),
            denom: v.iter().map(|(_, _, d)| *d).collect(),
        };
        (cloud, stats)
    })
}

fn image(w: usize, h: usize, values: &[f64]) -> Image {
    Image::from_vec(w, h, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn densify_keeps_clouds_valid((cloud, stats) in arb_cloud_and_stats(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = densify_and_prune(&cloud, &stats, &DensifyConfig::default(), cloud.extent(), &mut rng).unwrap();
        prop_assert!(d.cloud.validate().is_ok());
        prop_assert_eq!(d.cloud.len(), d.origins.len());
        prop_assert_eq!(d.cloud.len() + d.pruned, cloud.len() + d.cloned + d.split);
    }

    #[test]
    fn raising_the_threshold_never_densifies_more(
        (cloud, stats) in arb_cloud_and_stats(),
        lo in 0.001f64..0.03,
        bump in 0.0f64..0.03,
    ) {
        let count = |thr: f64| {
            let cfg = DensifyConfig { grad_threshold: thr, ..Default::default() };
            let d = densify_and_prune(&cloud, &stats, &cfg, cloud.extent(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            d.cloned + d.split
        };
        prop_assert!(count(lo + bump) <= count(lo));
    }

    #[test]
    fn adam_survives_adversarial_gradients(
        (cloud, _) in arb_cloud_and_stats(),
        magnitude in 1.0f64..1e6,
        signs in prop::collection::vec(any::<bool>(), 14),
    ) {
        let mut cloud = cloud;
        let mut opt = SplatOptimizer::new(cloud.len(), AdamConfig::default(), LearningRates::default());
        let n = cloud.len();
        let s = |k: usize| if signs[k % 14] { magnitude } else { -magnitude };
        let grads = SplatGradients {
            positions: vec![[s(0), s(1), s(2)]; n],
            log_scales: vec![[s(3), s(4), s(5)]; n],
            rotations: vec![[s(6), s(7), s(8), s(9)]; n],
            opacity_logits: vec![s(10); n],
            colors: vec![[s(11), s(12), s(13)]; n],
        };
        for _ in 0..5 {
            opt.apply_update(&mut cloud, &grads).unwrap();
        }
        prop_assert!(cloud.validate().is_ok());
    }

    #[test]
    fn noising_and_analytic_residual_agree(
        x in prop::collection::vec(0.0f64..1.0, 12),
        y in prop::collection::vec(0.0f64..1.0, 12),
        eps in prop::collection::vec(-3.0f64..3.0, 12),
        t in 0.01f64..0.99,
    ) {
        let schedule = NoiseSchedule::default();
        let (x, y, eps) = (image(2, 2, &x), image(2, 2, &y), image(2, 2, &eps));
        let xt = add_noise(&x, &eps, t, &schedule).unwrap();
        let mut oracle = AnalyticOracle::new(FixedTarget(y.clone()));
        let request = GuidanceRequest {
            kind: ResponseKind::NoisePrediction,
            images: vec![xt],
            timestep: t,
            prompt: String::new(),
            negative_prompt: String::new(),
            poses: vec![CameraPose::new(0.0, 0.0, 2.5).with_resolution(2, 2)],
            cfg_scale: 100.0,
            noise_seed: 0,
        };
        let pred = &oracle.predict(&request).unwrap().tensors[0];
        let ab = schedule.alpha_bar(t);
        let k = (ab / (1.0 - ab)).sqrt();
        for i in 0..12 {
            let residual = pred.data()[i] - eps.data()[i];
            let expected = k * (x.data()[i] - y.data()[i]);
            prop_assert!((residual - expected).abs() < 1e-10, "{} vs {}", residual, expected);
        }
    }

    #[test]
    fn cfg_is_affine_in_both_inputs(
        u1 in prop::collection::vec(-5.0f64..5.0, 3),
        u2 in prop::collection::vec(-5.0f64..5.0, 3),
        c1 in prop::collection::vec(-5.0f64..5.0, 3),
        c2 in prop::collection::vec(-5.0f64..5.0, 3),
        lam in -2.0f64..2.0,
        scale in 0.0f64..150.0,
    ) {
        let mix = |a: &[f64], b: &[f64]| image(1, 1, &a.iter().zip(b).map(|(p, q)| lam * p + (1.0 - lam) * q).collect::<Vec<_>>());
        let lhs = apply_cfg(&mix(&u1, &u2), &mix(&c1, &c2), scale).unwrap();
        let a = apply_cfg(&image(1, 1, &u1), &image(1, 1, &c1), scale).unwrap();
        let b = apply_cfg(&image(1, 1, &u2), &image(1, 1, &c2), scale).unwrap();
        let rhs = mix(a.data(), b.data());
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-9 * (1.0 + l.abs()));
        }
    }
}

#[test]
fn split_children_average_to_the_parent() {
    let parent = RawSplat {
        log_scale: [0.3f64.ln(), 0.1f64.ln(), 0.2f64.ln()],
        rotation: [0.8, 0.3, -0.4, 0.2],
        ..RawSplat::isotropic([0.2, -0.1, 0.4], 0.2, 0.5, [0.5; 3])
    };
    let cloud = GaussianCloud::from_splats([parent]);
    let stats = GradStats { accum_norm: vec![1.0], denom: vec![1] };
    let trials = 4000;
    let mut sum = [0.0; 3];
    for seed in 0..trials {
        let d = densify_and_prune(&cloud, &stats, &DensifyConfig::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for p in &d.cloud.positions {
            for k in 0..3 {
                sum[k] += p[k];
            }
        }
    }
    let samples = 2.0 * trials as f64;
    // Per-axis standard deviation of a child is at most the largest parent scale.
    let tol = 3.0 * 0.3 / samples.sqrt();
    for k in 0..3 {
        let mean = sum[k] / samples;
        assert!((mean - parent.position[k]).abs() < tol, "axis {k}: {mean}");
    }
}

#[test]
fn accumulation_is_additive_and_skips_culled_splats() {
    let pose = CameraPose::new(0.0, 0.0, 2.5).with_resolution(32, 32);
    let eye = pose.eye();
    let cloud = GaussianCloud::from_splats([
        RawSplat::isotropic([0.0, 0.0, 0.0], 0.2, 0.8, [0.9, 0.1, 0.1]),
        // Behind the camera.
        RawSplat::isotropic([eye[0] * 1.5, eye[1] * 1.5, eye[2] * 1.5], 0.2, 0.8, [0.1; 3]),
    ]);
    let cfg = RenderConfig::default();
    let mut out = render(&cloud, &pose, [0.5; 3], &cfg).unwrap();
    let grad = Image::filled(32, 32, [1.0, -0.5, 0.25]);
    backward(&cloud, &mut out, &grad).unwrap();
    let mut stats = GradStats::new(2);
    stats.accumulate(&out).unwrap();
    let once = stats.clone();
    stats.accumulate(&out).unwrap();
    assert_eq!(stats.accum_norm[0], 2.0 * once.accum_norm[0]);
    assert_eq!(stats.denom, vec![2, 0]);

    let mut zero = render(&cloud, &pose, [0.5; 3], &cfg).unwrap();
    backward(&cloud, &mut zero, &Image::zeros(32, 32)).unwrap();
    let before = stats.accum_norm.clone();
    stats.accumulate(&zero).unwrap();
    assert_eq!(stats.accum_norm, before);
    assert!(GradStats::new(3).accumulate(&zero).is_err());
}

#[test]
fn densify_preserves_surviving_moments() {
    let cloud = GaussianCloud::from_splats([
        RawSplat::isotropic([0.0; 3], 0.2, 0.5, [0.5; 3]),
        RawSplat::isotropic([0.1; 3], 0.2, 0.001, [0.5; 3]),
        RawSplat::isotropic([0.2; 3], 0.001, 0.5, [0.5; 3]),
    ]);
    let mut opt = SplatOptimizer::new(3, AdamConfig::default(), LearningRates::default());
    let mut working = cloud.clone();
    let mut grads = SplatGradients::zeros(3);
    grads.positions = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]];
    grads.colors = vec![[1.0; 3], [2.0; 3], [3.0; 3]];
    opt.apply_update(&mut working, &grads).unwrap();
    let before = opt.clone();
    let stats = GradStats { accum_norm: vec![0.0, 0.0, 0.5], denom: vec![1; 3] };
    let d = densify_and_prune(&working, &stats, &DensifyConfig::default(), working.extent(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(d.origins, vec![Some(0), Some(2), None]);
    opt.remap(&d.origins);
    for (g, (b, w)) in opt.groups.iter().zip(before.groups.iter().zip([3, 3, 4, 1, 3])) {
        assert_eq!(&g.m[..w], &b.m[..w]);
        assert_eq!(&g.m[w..2 * w], &b.m[2 * w..3 * w]);
        assert!(g.m[2 * w..].iter().chain(&g.v[2 * w..]).all(|v| *v == 0.0));
    }
}
