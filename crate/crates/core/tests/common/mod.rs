//! Test-only scene builders and finite-difference oracles.
#![allow(dead_code)]

use std::collections::HashMap;

use gad_core::camera::CameraPose;
use gad_core::gaussian::{GaussianCloud, RawSplat};
use gad_core::image::Image;
use gad_core::mesh::{Chart, TexturedMesh};
use gad_core::texture::{rasterize_mesh, shade, shade_backward, GBuffer, Lights, MaterialMaps};
use gad_core::raster::{render, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::Vector3;

pub struct GradScene {
    pub cloud: GaussianCloud,
    pub pose: CameraPose,
    pub background: [f64; 3],
    pub grad_rgb: Image,
}

/// A random scene of at most 16 splats seen at 32×32.
pub fn random_grad_scene(seed: u64) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=16);
    let mut cloud = GaussianCloud::new();
    for _ in 0..n {
        let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        cloud.push(RawSplat {
            position: [0; 3].map(|_| rng.random_range(-0.5..0.5)),
            log_scale: [0; 3].map(|_| rng.random_range(0.08f64..0.35).ln()),
            rotation: if q.iter().map(|v| v * v).sum::<f64>() < 0.05 { [1.0, 0.0, 0.0, 0.0] } else { q },
            opacity_logit: rng.random_range(-2.0..2.0),
            color: [0; 3].map(|_| rng.random_range(-2.0..2.0)),
        });
    }
    let pose = CameraPose::new(
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(-0.3..0.6),
        2.5,
    )
    .with_resolution(32, 32);
    let background = [0; 3].map(|_| rng.random_range(0.0..1.0));
    let data = (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    GradScene {
        cloud,
        pose,
        background,
        grad_rgb: Image::from_vec(32, 32, data).unwrap(),
    }
}

pub fn loss(scene: &GradScene, cloud: &GaussianCloud, config: &RenderConfig) -> f64 {
    let out = render(cloud, &scene.pose, scene.background, config).unwrap();
    out.rgb
        .data()
        .iter()
        .zip(scene.grad_rgb.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Mutable views of every raw parameter in field order, matching `SplatGradients::flatten`.
pub fn raw_param_mut(cloud: &mut GaussianCloud, k: usize) -> &mut f64 {
    let n = cloud.len();
    let mut k = k;
    if k < 3 * n {
        return &mut cloud.positions[k / 3][k % 3];
    }
    k -= 3 * n;
    if k < 3 * n {
        return &mut cloud.log_scales[k / 3][k % 3];
    }
    k -= 3 * n;
    if k < 4 * n {
        return &mut cloud.rotations[k / 4][k % 4];
    }
    k -= 4 * n;
    if k < n {
        return &mut cloud.opacity_logits[k];
    }
    k -= n;
    &mut cloud.colors[k / 3][k % 3]
}

/// Central finite differences of the scene loss over every raw parameter.
pub fn finite_difference_gradient(scene: &GradScene, config: &RenderConfig, step: f64) -> Vec<f64> {
    let count = scene.cloud.len() * 14;
    (0..count)
        .map(|k| {
            let mut plus = scene.cloud.clone();
            *raw_param_mut(&mut plus, k) += step;
            let mut minus = scene.cloud.clone();
            *raw_param_mut(&mut minus, k) -= step;
            (loss(scene, &plus, config) - loss(scene, &minus, config)) / (2.0 * step)
        })
        .collect()
}

/// Fourth-order estimate: Richardson extrapolation of central differences at `step` and `2·step`.
pub fn richardson_gradient(scene: &GradScene, config: &RenderConfig, step: f64) -> Vec<f64> {
    let fine = finite_difference_gradient(scene, config, step);
    let coarse = finite_difference_gradient(scene, config, 2.0 * step);
    fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Unit icosphere with `levels` rounds of 4-way subdivision.
pub fn icosphere(levels: usize) -> TexturedMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ];
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..levels {
        let mut mid = HashMap::new();
        let mut next = Vec::new();
        for t in &f {
            let m = [0, 1, 2].map(|e| {
                let (a, b) = (t[e].min(t[(e + 1) % 3]), t[e].max(t[(e + 1) % 3]));
                *mid.entry((a, b)).or_insert_with(|| {
                    let p = [0, 1, 2].map(|k| (v[a as usize][k] + v[b as usize][k]) / 2.0);
                    v.push(p);
                    v.len() as u32 - 1
                })
            });
            next.extend([[t[0], m[0], m[2]], [t[1], m[1], m[0]], [t[2], m[2], m[1]], [m[0], m[1], m[2]]]);
        }
        f = next;
    }
    let v = v.into_iter().map(|p| Vector3::from(p).normalize().into()).collect();
    TexturedMesh::from_geometry(v, f).unwrap()
}

/// Axis-aligned square in the plane `z`, facing +z, covering `[-h, h]²`.
pub fn quad(h: f64, z: f64) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    (
        vec![[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

/// A quad whose single chart spans the whole `size²` map.
pub fn full_atlas_quad(h: f64, size: usize) -> TexturedMesh {
    let (v, t) = quad(h, 0.0);
    let mut mesh = TexturedMesh::from_geometry(v, t).unwrap();
    let corner = |p: [f64; 3]| [(p[0] + h) / (2.0 * h), (h - p[1]) / (2.0 * h)];
    mesh.uvs = mesh
        .triangles
        .iter()
        .flat_map(|tri| tri.map(|i| corner(mesh.vertices[i as usize])))
        .collect();
    mesh.triangle_charts = vec![0; mesh.triangles.len()];
    mesh.charts = vec![Chart {
        direction: 4,
        rect: [0, 0, size, size],
    }];
    mesh.atlas_size = size;
    mesh
}

pub fn random_maps(size: usize, rng: &mut impl Rng) -> MaterialMaps {
    let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    let t = size * size;
    let kd = draw(3 * t, 0.05, 0.95);
    let krm = (0..t)
        .flat_map(|_| [rng.random_range(0.3..0.95), rng.random_range(0.05..0.95)])
        .collect();
    let kn = (0..t)
        .flat_map(|_| [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.75..1.0)])
        .collect();
    MaterialMaps::from_parts(size, kd, krm, kn).unwrap()
}

pub fn texel_loss(g: &GBuffer, maps: &MaterialMaps, lights: &Lights, weights: &Image) -> f64 {
    let img = shade(g, maps, lights, [0.0; 3]);
    img.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Analytic and central-difference gradients for every texel of a tilted full-atlas quad.
pub fn texel_gradient_pairs(seed: u64, size: usize) -> Vec<(f64, f64)> {
    let h = 1e-6;
    let lights = Lights {
        directional: Lights::default()
            .directional
            .into_iter()
            .map(|mut l| {
                l.intensity = 0.8;
                l
            })
            .collect(),
        ambient: 0.15,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mesh = full_atlas_quad(0.8, size);
    for n in &mut mesh.normals {
        let tilt = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0];
        let len = (tilt[0] * tilt[0] + tilt[1] * tilt[1] + 1.0f64).sqrt();
        *n = tilt.map(|c| c / len);
    }
    let pose = CameraPose::new(rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.4), 2.5).with_resolution(16, 16);
    let g = rasterize_mesh(&mesh, &pose).unwrap();
    assert!(g.hit_count() > 50);
    let maps = random_maps(size, &mut rng);
    let weights = Image::from_vec(16, 16, (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let grads = shade_backward(&g, &maps, &lights, &weights).unwrap();

    let mut pairs = Vec::new();
    for map in 0..3 {
        let len = [maps.kd.len(), maps.krm.len(), maps.kn.len()][map];
        for i in 0..len {
            let perturbed = |d: f64| {
                let mut m = maps.clone();
                [&mut m.kd, &mut m.krm, &mut m.kn][map][i] += d;
                texel_loss(&g, &m, &lights, &weights)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            pairs.push(([&grads.kd, &grads.krm, &grads.kn][map][i], fd));
        }
    }
    pairs
}
