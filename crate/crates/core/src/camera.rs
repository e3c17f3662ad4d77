//! Orbit cameras around a look-at point.
//!
//! World space is right-handed with +Y up. Azimuth is measured in the XZ
//! plane starting at +Z and turning toward +X; positive elevation lifts the
//! camera above the XZ plane. Camera space follows the pinhole convention
//! used by the rasterizers: +X right, +Y down, +Z forward, so a point at
//! camera coordinates `(x, y, z)` lands on pixel
//! `(cx + f·x/z, cy + f·y/z)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NEAR_PLANE: f64 = 0.01;
pub const FAR_PLANE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub look_at: [f64; 3],
    pub width: usize,
    pub height: usize,
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Elevation range in degrees, sampled uniformly.
    pub elevation_range: [f64; 2],
    pub radius: f64,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            elevation_range: [-10.0, 45.0],
            radius: 2.5,
            fov_y: 49.1,
            width: 256,
            height: 256,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.elevation_range;
        if !(lo <= hi && lo > -90.0 && hi < 90.0) {
            return Err(Error::config(
                "elevation_range",
                "must be ordered and inside (-90, 90)",
            ));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("radius", "must be positive"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::config("fov_y", "must lie in (0, 180) degrees"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width", "resolution must be at least 1x1"));
        }
        Ok(())
    }

    fn pose(&self, azimuth: f64, elevation: f64) -> CameraPose {
        CameraPose {
            azimuth: azimuth.rem_euclid(TAU),
            elevation,
            radius: self.radius,
            fov_y: self.fov_y.to_radians(),
            look_at: [0.0; 3],
            width: self.width,
            height: self.height,
        }
    }

    fn sample_elevation(&self, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = self.elevation_range;
        if lo == hi {
            lo.to_radians()
        } else {
            rng.random_range(lo..hi).to_radians()
        }
    }
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Self {
        let d = CameraConfig::default();
        Self {
            azimuth,
            elevation,
            radius,
            fov_y: d.fov_y.to_radians(),
            look_at: [0.0; 3],
            width: d.width,
            height: d.height,
        }
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_fov_y(mut self, fov_y: f64) -> Self {
        self.fov_y = fov_y;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument("camera radius must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            return Err(Error::InvalidArgument("fov_y must lie in (0, π)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("resolution must be at least 1x1".into()));
        }
        if !(self.elevation.abs() < FRAC_PI_2) {
            return Err(Error::InvalidArgument("elevation must lie in (-π/2, π/2)".into()));
        }
        Ok(())
    }

    pub fn eye(&self) -> Vector3<f64> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vector3::from(self.look_at) + self.radius * Vector3::new(ce * sa, se, ce * ca)
    }

    /// World-to-camera rotation; rows are the camera right, down and forward axes.
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = (Vector3::from(self.look_at) - self.eye()).normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.height as f64 / (2.0 * (self.fov_y / 2.0).tan());
        Intrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    /// World to camera coordinates.
    #[inline]
    pub fn to_camera(&self, rotation: &Matrix3<f64>, eye: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        rotation * (p - eye)
    }

    /// `(view, projection)`: the rigid world-to-camera transform and a
    /// perspective matrix mapping camera space to clip space with `w = z`;
    /// after the divide, x and y in `[-1, 1]` cover the image.
    pub fn matrices(&self) -> (Matrix4<f64>, Matrix4<f64>) {
        let r = self.rotation();
        let t = -(r * self.eye());
        let mut view = Matrix4::identity();
        view.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        view.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);

        let tan = (self.fov_y / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let (n, f) = (NEAR_PLANE, FAR_PLANE);
        let projection = Matrix4::new(
            1.0 / (aspect * tan),
            0.0,
            0.0,
            0.0,
            0.0,
            1.0 / tan,
            0.0,
            0.0,
            0.0,
            0.0,
            (f + n) / (f - n),
            -2.0 * f * n / (f - n),
            0.0,
            0.0,
            1.0,
            0.0,
        );
        (view, projection)
    }

    /// Pixel coordinates and depth of a world point; `None` when behind the near plane.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<([f64; 2], f64)> {
        let t = self.to_camera(&self.rotation(), &self.eye(), p);
        if t.z <= NEAR_PLANE {
            return None;
        }
        let k = self.intrinsics();
        Some(([k.cx + k.fx * t.x / t.z, k.cy + k.fy * t.y / t.z], t.z))
    }
}

/// Four views sharing elevation and radius at 90° azimuth increments from a random base.
pub fn sample_mvdream_batch(rng: &mut impl Rng, config: &CameraConfig) -> [CameraPose; 4] {
    let base = rng.random_range(0.0..TAU);
    let elevation = config.sample_elevation(rng);
    [0, 1, 2, 3].map(|k| config.pose(base + k as f64 * FRAC_PI_2, elevation))
}

pub fn sample_random_camera(rng: &mut impl Rng, config: &CameraConfig) -> CameraPose {
    let azimuth = rng.random_range(0.0..TAU);
    let elevation = config.sample_elevation(rng);
    config.pose(azimuth, elevation)
}

/// `n` views evenly spaced in azimuth starting at 0.
pub fn yaw_ring(n: usize, elevation: f64, radius: f64) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Err(Error::InvalidArgument("yaw ring needs at least one view".into()));
    }
    Ok((0..n)
        .map(|i| CameraPose::new(i as f64 * TAU / n as f64, elevation, radius))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn angle_diff(a: f64, b: f64) -> f64 {
        (b - a).rem_euclid(TAU)
    }

    #[test]
    fn mvdream_batch_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CameraConfig::default();
        for _ in 0..50 {
            let b = sample_mvdream_batch(&mut rng, &cfg);
            for k in 0..3 {
                assert!((angle_diff(b[k].azimuth, b[k + 1].azimuth) - FRAC_PI_2).abs() < 1e-12);
                assert_eq!(b[k].elevation, b[k + 1].elevation);
                assert_eq!(b[k].radius, b[k + 1].radius);
            }
            let e = b[0].elevation.to_degrees();
            assert!((-10.0..45.0).contains(&e));
        }
        let a = sample_mvdream_batch(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        let b = sample_mvdream_batch(&mut ChaCha8Rng::seed_from_u64(9), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn random_cameras_cover_the_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = CameraConfig::default();
        let mut az: Vec<f64> = (0..10_000)
            .map(|_| sample_random_camera(&mut rng, &cfg).azimuth.to_degrees())
            .collect();
        az.sort_by(f64::total_cmp);
        let mut max_gap = az[0] + 360.0 - az[az.len() - 1];
        for w in az.windows(2) {
            max_gap = max_gap.max(w[1] - w[0]);
        }
        assert!(max_gap < 10.0, "max gap {max_gap}");
    }

    #[test]
    fn collapsed_elevation_range() {
        let cfg = CameraConfig {
            elevation_range: [15.0, 15.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_random_camera(&mut rng, &cfg).elevation, 15f64.to_radians());
        }
        let p1 = sample_random_camera(&mut ChaCha8Rng::seed_from_u64(3), &cfg);
        let p2 = sample_random_camera(&mut ChaCha8Rng::seed_from_u64(3), &cfg);
        assert_eq!(p1, p2);
    }

    #[test]
    fn yaw_ring_spacing() {
        let ring = yaw_ring(10, 0.0, 2.5).unwrap();
        for (i, p) in ring.iter().enumerate() {
            assert!((p.azimuth.to_degrees() - 36.0 * i as f64).abs() < 1e-9);
        }
        let one = yaw_ring(1, 0.0, 2.5).unwrap();
        assert_eq!(one[0].azimuth, 0.0);
        assert!(yaw_ring(0, 0.0, 1.0).is_err());
    }

    #[test]
    fn ring_of_four_matches_mvdream_geometry() {
        let ring = yaw_ring(4, 0.0, 2.5).unwrap();
        let cfg = CameraConfig {
            elevation_range: [0.0, 0.0],
            ..Default::default()
        };
        for (k, p) in ring.iter().enumerate() {
            let q = cfg.pose(k as f64 * FRAC_PI_2, 0.0);
            let (va, pa) = p.matrices();
            let (vb, pb) = q.matrices();
            assert!((va - vb).abs().max() < 1e-12);
            assert!((pa - pb).abs().max() < 1e-12);
        }
    }

    #[test]
    fn view_matrix_is_rigid_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = CameraConfig::default();
        for _ in 0..100 {
            let p = sample_random_camera(&mut rng, &cfg);
            let (view, _) = p.matrices();
            let r = view.fixed_view::<3, 3>(0, 0).into_owned();
            assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            assert!((p.eye().norm() - p.radius).abs() < 1e-12);
            let (px, depth) = p.project_point(&Vector3::zeros()).unwrap();
            assert!(depth > 0.0);
            assert!((px[0] - p.width as f64 / 2.0).abs() < 1e-9);
            assert!((px[1] - p.height as f64 / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn front_camera_conventions() {
        let p = CameraPose::new(0.0, 0.0, 3.0);
        assert!((p.eye() - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        // +X world appears right of center, +Y world appears above center.
        let (right, _) = p.project_point(&Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let (up, _) = p.project_point(&Vector3::new(0.0, 0.1, 0.0)).unwrap();
        assert!(right[0] > 128.0);
        assert!(up[1] < 128.0);
        // Projection matrix agrees with pixel projection.
        let (view, proj) = p.matrices();
        let w = Vector3::new(0.2, -0.1, 0.3);
        let clip = proj * view * w.push(1.0);
        let ndc = [clip.x / clip.w, clip.y / clip.w];
        let (px, _) = p.project_point(&w).unwrap();
        assert!(((ndc[0] + 1.0) * 128.0 - px[0]).abs() < 1e-9);
        assert!(((ndc[1] + 1.0) * 128.0 - px[1]).abs() < 1e-9);
    }
}
