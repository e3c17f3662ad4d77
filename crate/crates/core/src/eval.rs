//! Multi-view Fréchet distance between an asset's renders and a reference image set.

use std::path::Path;
use std::time::Duration;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{yaw_ring, CameraPose};
use crate::error::{Error, OracleError, Result};
use crate::gaussian::GaussianCloud;
use crate::guidance::encode_tensors;
use crate::image::Image;
use crate::mesh::TexturedMesh;
use crate::raster::{render, RenderConfig};
use crate::texture::{rasterize_mesh, shade, Lights, MaterialMaps};

pub const FEATURES_PATH: &str = "/v1/features";

/// Eigenvalues above `-CLIP_TOLERANCE` count as roundoff and clip to zero.
pub const CLIP_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureExtractor {
    /// Per-patch channel means, variances and gradient energies (9 values).
    PatchStats { patch: usize },
    /// A feature service answering `POST {endpoint}/v1/features`.
    External { endpoint: String, dim: usize },
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::PatchStats { patch: 8 }
    }
}

impl FeatureExtractor {
    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::PatchStats { .. } => 9,
            FeatureExtractor::External { dim, .. } => *dim,
        }
    }
}

/// Statistics of one patch: means, variances, then mean squared forward differences per channel.
fn patch_features(img: &Image, x0: usize, y0: usize, p: usize) -> Vec<f64> {
    let n = (p * p) as f64;
    let mut mean = [0.0; 3];
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            let px = img.pixel(x, y);
            for c in 0..3 {
                mean[c] += px[c] / n;
            }
        }
    }
    let mut var = [0.0; 3];
    let mut grad = [0.0; 3];
    let mut pairs = 0usize;
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            let px = img.pixel(x, y);
            for c in 0..3 {
                var[c] += (px[c] - mean[c]).powi(2) / n;
            }
            if x + 1 < x0 + p {
                let r = img.pixel(x + 1, y);
                for c in 0..3 {
                    grad[c] += (r[c] - px[c]).powi(2);
                }
                pairs += 1;
            }
            if y + 1 < y0 + p {
                let d = img.pixel(x, y + 1);
                for c in 0..3 {
                    grad[c] += (d[c] - px[c]).powi(2);
                }
                pairs += 1;
            }
        }
    }
    if pairs > 0 {
        for g in &mut grad {
            *g /= pairs as f64;
        }
    }
    let mut out = Vec::with_capacity(9);
    out.extend(mean);
    out.extend(var);
    out.extend(grad);
    out
}

/// Feature vectors of one image: one per whole patch (PatchStats) or a single vector (External).
pub fn image_features(img: &Image, extractor: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    Ok(extract_features(std::slice::from_ref(img), extractor)?.remove(0))
}

/// Features for each image; partial patches at the right and bottom edges are skipped.
pub fn extract_features(images: &[Image], extractor: &FeatureExtractor) -> Result<Vec<Vec<Vec<f64>>>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to extract features from".into()));
    }
    match extractor {
        FeatureExtractor::PatchStats { patch } => {
            let p = *patch;
            if p == 0 {
                return Err(Error::InvalidArgument("patch size must be positive".into()));
            }
            Ok(images
                .par_iter()
                .map(|img| {
                    let mut feats = Vec::new();
                    for py in 0..img.height() / p {
                        for px in 0..img.width() / p {
                            feats.push(patch_features(img, px * p, py * p, p));
                        }
                    }
                    feats
                })
                .collect())
        }
        FeatureExtractor::External { endpoint, dim } => {
            let vectors = external_features(endpoint, *dim, images)?;
            Ok(vectors.into_iter().map(|v| vec![v]).collect())
        }
    }
}

#[derive(Serialize)]
struct FeatureRequest<'a> {
    batch: usize,
    height: usize,
    width: usize,
    images_b64: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureResponse {
    features: Vec<Vec<f64>>,
}

fn external_features(endpoint: &str, dim: usize, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|im| im.width() != w || im.height() != h) {
        return Err(Error::Shape("feature requests need images of one resolution".into()));
    }
    let url = format!("{}{FEATURES_PATH}", endpoint.trim_end_matches('/'));
    let payload = encode_tensors(images);
    let body = serde_json::to_string(&FeatureRequest {
        batch: images.len(),
        height: h,
        width: w,
        images_b64: &payload,
    })
    .map_err(|e| OracleError::Protocol(e.to_string()))?;
    let transport = |message: String| OracleError::Transport {
        endpoint: url.clone(),
        attempts: 1,
        message,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(300)))
        .build()
        .into();
    let mut response = agent
        .post(&url)
        .header("Content-Type", "application/json")
        .send(&body)
        .map_err(|e| transport(e.to_string()))?;
    let status = response.status().as_u16();
    let text = response
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .read_to_string()
        .map_err(|e| transport(e.to_string()))?;
    if status != 200 {
        return Err(transport(format!("HTTP {status}: {}", text.trim())).into());
    }
    let parsed: FeatureResponse =
        serde_json::from_str(&text).map_err(|e| OracleError::Protocol(format!("malformed feature response: {e}")))?;
    if parsed.features.len() != images.len() {
        return Err(OracleError::Protocol(format!(
            "{} feature vectors for {} images",
            parsed.features.len(),
            images.len()
        ))
        .into());
    }
    for (i, f) in parsed.features.iter().enumerate() {
        if f.len() != dim {
            return Err(OracleError::Protocol(format!("feature vector {i} has {} values, expected {dim}", f.len())).into());
        }
        if let Some(j) = f.iter().position(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite { index: i * dim + j }.into());
        }
    }
    Ok(parsed.features)
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, sample_count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Shape(format!(
                "covariance is {}x{} for a {d}-dimensional mean",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if sample_count < 2 {
            return Err(Error::DegenerateStatistics(format!("{sample_count} sample(s); need at least 2")));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-9 {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        Ok(Self {
            mean,
            covariance,
            sample_count,
        })
    }

    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::DegenerateStatistics(format!("{n} feature sample(s); need at least 2")));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().position(|s| s.len() != d) {
            return Err(Error::Shape(format!("sample {bad} has {} values, expected {d}", samples[bad].len())));
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix; eigenvalues down to `-CLIP_TOLERANCE` clip to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.amax().max(1.0);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -CLIP_TOLERANCE * scale) {
        return Err(Error::Numerical(format!("matrix is not positive semi-definite (eigenvalue {bad:e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`, with the trace of the cross term taken as
/// `Tr((Σa^½ Σb Σa^½)^½)` so only symmetric decompositions are needed.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.covariance)?;
    let inner = &sa * &b.covariance * &sa;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = diff.norm_squared() + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Mean over views of the distance between each view's patch statistics and the pooled reference statistics.
pub fn fid3d(renders: &[Image], references: &[Image], extractor: &FeatureExtractor) -> Result<f64> {
    let mut d = per_view_distances(renders, references, extractor)?;
    d.sort_by(f64::total_cmp);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

pub fn per_view_distances(renders: &[Image], references: &[Image], extractor: &FeatureExtractor) -> Result<Vec<f64>> {
    if renders.is_empty() {
        return Err(Error::InvalidArgument("no renders to evaluate".into()));
    }
    if references.is_empty() {
        return Err(Error::InvalidArgument("reference set is empty".into()));
    }
    let (w, h) = (renders[0].width(), renders[0].height());
    if renders.iter().any(|r| r.width() != w || r.height() != h) {
        return Err(Error::Shape("renders must share one resolution".into()));
    }
    let refs: Vec<Image> = references
        .iter()
        .map(|r| if r.width() == w && r.height() == h { r.clone() } else { r.resize_area(w, h) })
        .collect();
    let pooled: Vec<Vec<f64>> = extract_features(&refs, extractor)?.into_iter().flatten().collect();
    let reference = FeatureStats::from_samples(&pooled)?;
    let per_view = extract_features(renders, extractor)?;
    per_view
        .par_iter()
        .map(|feats| frechet_distance(&FeatureStats::from_samples(feats)?, &reference))
        .collect()
}

/// What gets rendered for evaluation.
pub enum Asset<'a> {
    Splats(&'a GaussianCloud),
    Mesh(&'a TexturedMesh, &'a MaterialMaps),
}

/// Yaw-ring evaluation views: elevation 0, white background.
pub fn evaluation_poses(views: usize, radius: f64, resolution: usize) -> Result<Vec<CameraPose>> {
    Ok(yaw_ring(views, 0.0, radius)?
        .into_iter()
        .map(|p| p.with_resolution(resolution, resolution))
        .collect())
}

pub fn render_views(asset: &Asset, poses: &[CameraPose], lights: &Lights) -> Result<Vec<Image>> {
    const WHITE: [f64; 3] = [1.0; 3];
    poses
        .iter()
        .map(|pose| match asset {
            Asset::Splats(cloud) => Ok(render(cloud, pose, WHITE, &RenderConfig::default())?.rgb),
            Asset::Mesh(mesh, maps) => Ok(shade(&rasterize_mesh(mesh, pose)?, maps, lights, WHITE)),
        })
        .collect()
}

/// Every PNG in `dir`, in file-name order.
pub fn load_reference_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG files in {}", dir.display())));
    }
    paths.iter().map(Image::load_png).collect()
}
