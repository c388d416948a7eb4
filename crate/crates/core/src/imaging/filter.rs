use super::{Image, CHANNELS};

/// Normalized 1D Gaussian taps covering `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "kernel sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / denom).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    assert!(sigma >= 0.0, "blur sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as i64;
    let (w, h) = img.dims();
    let src = img.data();

    let mut tmp = vec![0.0; src.len()];
    for r in 0..h {
        let row = &src[r * w * CHANNELS..(r + 1) * w * CHANNELS];
        for c in 0..w {
            let mut acc = [0.0; 3];
            for (k, &t) in taps.iter().enumerate() {
                let cc = (c as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                let p = &row[cc * CHANNELS..cc * CHANNELS + 3];
                acc[0] += t * p[0];
                acc[1] += t * p[1];
                acc[2] += t * p[2];
            }
            let o = (r * w + c) * CHANNELS;
            tmp[o..o + 3].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0; 3];
            for (k, &t) in taps.iter().enumerate() {
                let rr = (r as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                let o = (rr * w + c) * CHANNELS;
                acc[0] += t * tmp[o];
                acc[1] += t * tmp[o + 1];
                acc[2] += t * tmp[o + 2];
            }
            let o = (r * w + c) * CHANNELS;
            out[o..o + 3].copy_from_slice(&acc);
        }
    }
    Image { width: w, height: h, data: out }
}

/// Splits `img` into a Gaussian low band and the residual high band.
/// `low + high` reproduces `img` up to one rounding per value.
pub fn split_bands(img: &Image, sigma: f64) -> (Image, Image) {
    let low = gaussian_blur(img, sigma);
    let high = Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().zip(&low.data).map(|(a, l)| a - l).collect(),
    };
    (low, high)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // a + t(b - a) keeps constant inputs exact.
    a + t * (b - a)
}

/// Source coordinate and interpolation fraction for destination index `i`
/// under corner-aligned mapping.
#[inline]
fn source_coord(i: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let x = if dst_len == 1 {
        (src_len as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
    };
    let x0 = (x.floor() as usize).min(src_len - 1);
    let x1 = (x0 + 1).min(src_len - 1);
    (x0, x1, x - x0 as f64)
}

/// Bilinear resampling with corner-aligned sample positions.
pub fn resample(img: &Image, new_w: usize, new_h: usize) -> Image {
    assert!(new_w >= 1 && new_h >= 1, "resample target must be at least 1x1");
    if img.dims() == (new_w, new_h) {
        return img.clone();
    }
    let (w, h) = img.dims();
    let cols: Vec<_> = (0..new_w).map(|c| source_coord(c, w, new_w)).collect();
    Image::from_fn(new_w, new_h, |r, c| {
        let (r0, r1, fy) = source_coord(r, h, new_h);
        let (c0, c1, fx) = cols[c];
        let (p00, p01, p10, p11) = (img.pixel(r0, c0), img.pixel(r0, c1), img.pixel(r1, c0), img.pixel(r1, c1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = lerp(lerp(p00[k], p01[k], fx), lerp(p10[k], p11[k], fx), fy);
        }
        out
    })
}
