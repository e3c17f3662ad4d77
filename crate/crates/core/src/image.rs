//! Dense RGB float images, row-major `H×W×3`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for a {width}x{height} RGB image, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Image {
        self.map(|v| v * factor)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "mse")?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        })
    }

    /// Box-filter resample where every output pixel averages the input area it covers.
    pub fn resize_area(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::zeros(width, height);
        for oy in 0..height {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..width {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                let mut acc = [0.0; 3];
                let mut total = 0.0;
                let mut iy = y0.floor() as usize;
                while (iy as f64) < y1 && iy < self.height {
                    let wy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                    let mut ix = x0.floor() as usize;
                    while (ix as f64) < x1 && ix < self.width {
                        let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                        let w = wx * wy;
                        let p = self.pixel(ix, iy);
                        for c in 0..3 {
                            acc[c] += w * p[c];
                        }
                        total += w;
                        ix += 1;
                    }
                    iy += 1;
                }
                if total > 0.0 {
                    out.set_pixel(ox, oy, acc.map(|v| v / total));
                }
            }
        }
        out
    }

    /// Rows flipped and columns reversed.
    pub fn rotate_180(&self) -> Image {
        let mut out = Image::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, self.height - 1 - y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, data)
    }
}

/// `[0,1]` to 8-bit with round-half-up; out-of-range values saturate.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_quantizes_to_128() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(2.0), 255);
    }

    #[test]
    fn area_resize_preserves_mean() {
        let mut img = Image::zeros(6, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 / 7.0;
        }
        let small = img.resize_area(3, 2);
        assert!((small.mean() - img.mean()).abs() < 1e-12);
        let odd = img.resize_area(4, 3);
        assert!((odd.mean() - img.mean()).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = Image::filled(2, 2, [0.3, 0.2, 0.1]);
        assert!(a.psnr(&a).unwrap().is_infinite());
    }
}
