use super::{split_bands, Image, CHANNELS};
use crate::error::{Error, Result};

/// PSNR values written to CSV are capped here; identical images report `+inf`.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean squared difference over all values, after clamping both inputs to `[0, 1]`.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit peak. Identical inputs give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

pub fn psnr_capped(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - half;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable "valid" filtering of one channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * tmp[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), computed
/// over all fully-covered window positions, per channel on clamped values,
/// then averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h, min: SSIM_WINDOW });
    }
    let taps = ssim_taps();
    let mut total = 0.0;
    for ch in 0..CHANNELS {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(CHANNELS).map(|v| v.clamp(0.0, 1.0)).collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(CHANNELS).map(|v| v.clamp(0.0, 1.0)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &taps);
        let my = filter_valid(&y, w, h, &taps);
        let sxx = filter_valid(&xx, w, h, &taps);
        let syy = filter_valid(&yy, w, h, &taps);
        let sxy = filter_valid(&xy, w, h, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / CHANNELS as f64)
}

/// Mean over pixels of `max channel - min channel` on clamped values.
pub fn saturation_metric(img: &Image) -> f64 {
    let n = img.width() * img.height();
    img.data()
        .chunks_exact(CHANNELS)
        .map(|p| {
            let q = p.iter().map(|v| v.clamp(0.0, 1.0));
            let max = q.clone().fold(f64::MIN, f64::max);
            let min = q.fold(f64::MAX, f64::min);
            max - min
        })
        .sum::<f64>()
        / n as f64
}

/// Mean squared value of the high band left after a Gaussian blur at `sigma`.
pub fn high_frequency_energy(img: &Image, sigma: f64) -> f64 {
    let (_, high) = split_bands(img, sigma);
    high.data().iter().map(|v| v * v).sum::<f64>() / high.data().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = Image::filled(12, 12, [0.2, 0.4, 0.6]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        assert_eq!(psnr_capped(psnr(&a, &a).unwrap()), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn mse_clamps_inputs() {
        let a = Image::filled(2, 2, [-3.0; 3]);
        let b = Image::filled(2, 2, [2.0; 3]);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn constant_gray_ssim_is_one() {
        let a = Image::filled(11, 11, [0.5; 3]);
        assert!((ssim(&a, &a.clone()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_black_vs_white_ssim() {
        // Means 0 and 1, zero variance: (C1)(C2) / ((1 + C1)(C2)) = C1 / (1 + C1).
        let a = Image::filled(16, 16, [0.0; 3]);
        let b = Image::filled(16, 16, [1.0; 3]);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_errors() {
        let a = Image::new(10, 20);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
        assert!(ssim(&Image::new(12, 12), &Image::new(13, 12)).is_err());
    }

    #[test]
    fn saturation_extremes() {
        assert_eq!(saturation_metric(&Image::filled(3, 3, [0.4; 3])), 0.0);
        assert_eq!(saturation_metric(&Image::filled(3, 3, [1.0, 0.0, 0.0])), 1.0);
        assert_eq!(saturation_metric(&Image::filled(3, 3, [2.0, -1.0, 0.5])), 1.0);
    }
}
