//! Image containers, filtering, resampling and full-reference metrics.
//!
//! Every render, target, noisy sample and noise draw in the lab is an
//! [`Image`]: a row-major `height x width x 3` array of `f64`.

mod filter;
mod metrics;
mod perceptual;
mod ppm;

pub use filter::{gaussian_blur, gaussian_kernel, resample, split_bands};
pub use metrics::{
    high_frequency_energy, mse, psnr, psnr_capped, saturation_metric, ssim, PSNR_CAP_DB,
    SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use perceptual::{perceptual_dist, perceptual_dist_with_grad, PERCEPTUAL_MIN_SIDE};
pub use ppm::{read_ppm, write_ppm};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Black image.
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::dims(width * height * CHANNELS, data.len()));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { width, height, data }
    }

    /// Uniform random values in `[0, 1)`.
    pub fn random_uniform(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let data = (0..width * height * CHANNELS).map(|_| rng.random::<f64>()).collect();
        Self { width, height, data }
    }

    /// Standard normal noise, the `ε` of the forward process.
    pub fn random_normal(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let data = (0..width * height * CHANNELS)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * CHANNELS
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = self.index(row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = self.index(row, col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-sized images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.same_dims(other)?;
        Ok(Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Mean absolute difference, used for loose "close to" checks.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.same_dims(other)?;
        let n = self.data.len() as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
    }

    pub fn crop(&self, patch: &PatchSpec) -> Result<Image> {
        patch.check(self.width, self.height)?;
        let (r0, c0) = patch.origin;
        Ok(Image::from_fn(patch.size, patch.size, |r, c| self.pixel(r0 + r, c0 + c)))
    }

    /// Pixelwise mean of a non-empty list of same-sized images.
    pub fn average(images: &[Image]) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidParameter("cannot average zero images".into()))?;
        let mut acc = vec![0.0; first.data.len()];
        for img in images {
            first.same_dims(img)?;
            for (a, v) in acc.iter_mut().zip(&img.data) {
                *a += v;
            }
        }
        let n = images.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Image::from_vec(first.width, first.height, acc)
    }
}

/// A square sub-window of an image. `origin` is `(row, col)` of the top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: (usize, usize),
    pub size: usize,
}

impl PatchSpec {
    pub fn new(row: usize, col: usize, size: usize) -> Self {
        Self { origin: (row, col), size }
    }

    pub fn full(width: usize, height: usize) -> Self {
        assert_eq!(width, height, "full-image patch needs a square image");
        Self { origin: (0, 0), size: width }
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        let (r, c) = self.origin;
        if self.size == 0 || r + self.size > height || c + self.size > width {
            return Err(Error::PatchOutOfBounds {
                origin: self.origin,
                size: self.size,
                width,
                height,
            });
        }
        Ok(())
    }

    /// Uniformly placed patch of `size` inside a `width x height` image.
    pub fn random(width: usize, height: usize, size: usize, rng: &mut impl Rng) -> Self {
        let size = size.min(width).min(height);
        let r = rng.random_range(0..=height - size);
        let c = rng.random_range(0..=width - size);
        Self::new(r, c, size)
    }
}
