use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Footprint, VoxelField};
use crate::error::{Error, Result};
use crate::imaging::{Image, PatchSpec};
use crate::scene::Camera;

/// Ray-marching parameters. Samples sit at the midpoints of `samples_per_ray`
/// equal segments of `[near, far]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Stop marching once transmittance falls below this value (0 disables).
    pub early_stop: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self::for_radius(2.5)
    }
}

impl RenderConfig {
    /// Near/far planes enclosing the bounding cube for a camera at `radius`.
    pub fn for_radius(radius: f64) -> Self {
        let half_diag = 3f64.sqrt();
        Self {
            samples_per_ray: 64,
            near: (radius - half_diag).max(1e-3),
            far: radius + half_diag,
            background: [1.0; 3],
            early_stop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::InvalidParameter("samples_per_ray must be >= 2".into()));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= near < far, got {}..{}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    #[inline]
    fn step(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }
}

/// Front-to-back alpha compositing of `(sigma, color, segment length)` samples
/// over `background`. Returns the pixel color and its opacity `1 - T_final`.
pub fn composite_ray(samples: &[(f64, [f64; 3], f64)], background: [f64; 3]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    for &(sigma, c, delta) in samples {
        let alpha = 1.0 - (-sigma * delta).exp();
        let w = trans * alpha;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        trans *= 1.0 - alpha;
    }
    for k in 0..3 {
        rgb[k] += trans * background[k];
    }
    (rgb, 1.0 - trans)
}

/// Per-sample quantities kept for the backward pass.
#[derive(Clone, Copy)]
struct SampleRec {
    fp: Footprint,
    trans: f64,
    alpha: f64,
    dsigma: f64,
    color: [f64; 3],
    dcolor: [f64; 3],
}

/// Parametric interval where the ray is inside `[-1, 1]^3`.
#[inline]
fn clip_to_cube(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut lo, mut hi) = ((-1.0 - o[a]) * inv, (1.0 - o[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Marches one ray. When `rec` is given, per-sample records are stored for backward.
fn march(
    field: &VoxelField,
    origin: [f64; 3],
    dir: [f64; 3],
    cfg: &RenderConfig,
    mut rec: Option<&mut Vec<SampleRec>>,
) -> ([f64; 3], f64) {
    if let Some(r) = rec.as_deref_mut() {
        r.clear();
    }
    let delta = cfg.step();
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    if let Some((t0, t1)) = clip_to_cube(origin, dir) {
        // Conservative index range; samples outside the cube contribute nothing.
        let lo = ((t0 - cfg.near) / delta - 0.5).floor().max(0.0) as usize;
        let hi_f = ((t1 - cfg.near) / delta - 0.5).ceil();
        if hi_f >= 0.0 {
            let hi = (hi_f as usize).min(cfg.samples_per_ray - 1);
            let act = field.activation;
            for i in lo..=hi {
                let t = cfg.near + (i as f64 + 0.5) * delta;
                let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                let Some(fp) = field.footprint(p) else { continue };
                let raw = field.interp_raw(&fp);
                let (sigma, dsigma) = act.density(raw[0]);
                let (c0, d0) = act.color(raw[1]);
                let (c1, d1) = act.color(raw[2]);
                let (c2, d2) = act.color(raw[3]);
                let alpha = 1.0 - (-sigma * delta).exp();
                let w = trans * alpha;
                rgb[0] += w * c0;
                rgb[1] += w * c1;
                rgb[2] += w * c2;
                if let Some(r) = rec.as_deref_mut() {
                    r.push(SampleRec {
                        fp,
                        trans,
                        alpha,
                        dsigma,
                        color: [c0, c1, c2],
                        dcolor: [d0, d1, d2],
                    });
                }
                trans *= 1.0 - alpha;
                if trans < cfg.early_stop {
                    break;
                }
            }
        }
    }
    for k in 0..3 {
        rgb[k] += trans * cfg.background[k];
    }
    (rgb, 1.0 - trans)
}

/// Backpropagates `grad_rgb` (dL/dpixel) through one marched ray, emitting
/// `(param index, dL/dparam)` pairs in a fixed order.
fn ray_backward(
    recs: &[SampleRec],
    cfg: &RenderConfig,
    grad_rgb: [f64; 3],
    mut emit: impl FnMut(usize, f64),
) {
    let delta = cfg.step();
    let t_final = recs.last().map_or(1.0, |r| r.trans * (1.0 - r.alpha));
    // Color arriving from behind the current sample, weighted by transmittance.
    let mut behind = [
        t_final * cfg.background[0],
        t_final * cfg.background[1],
        t_final * cfg.background[2],
    ];
    for r in recs.iter().rev() {
        let t_next = r.trans * (1.0 - r.alpha);
        let w = r.trans * r.alpha;
        let mut g_sigma = 0.0;
        let mut g_craw = [0.0; 3];
        for k in 0..3 {
            g_sigma += grad_rgb[k] * (t_next * r.color[k] - behind[k]);
            g_craw[k] = grad_rgb[k] * w * r.dcolor[k];
            behind[k] += w * r.color[k];
        }
        let g_draw = g_sigma * delta * r.dsigma;
        for c in 0..8 {
            let b = r.fp.base[c];
            let wt = r.fp.weight[c];
            emit(b, wt * g_draw);
            emit(b + 1, wt * g_craw[0]);
            emit(b + 2, wt * g_craw[1]);
            emit(b + 3, wt * g_craw[2]);
        }
    }
}

/// Renders a full view, one ray through each pixel center.
pub fn render_view(field: &VoxelField, camera: &Camera, cfg: &RenderConfig) -> Image {
    let (w, h) = (camera.image_w, camera.image_h);
    let mut data = vec![0.0; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(row, out)| {
        for col in 0..w {
            let (o, d) = camera.ray(row, col);
            let (rgb, _) = march(field, o, d, cfg, None);
            out[col * 3..col * 3 + 3].copy_from_slice(&rgb);
        }
    });
    Image::from_vec(w, h, data).expect("render buffer has image shape")
}

/// Renders only the pixels inside each patch. Identical, bit for bit, to
/// cropping [`render_view`].
pub fn render_patches(
    field: &VoxelField,
    camera: &Camera,
    cfg: &RenderConfig,
    patches: &[PatchSpec],
) -> Result<Vec<Image>> {
    for p in patches {
        p.check(camera.image_w, camera.image_h)?;
    }
    Ok(patches
        .iter()
        .map(|p| {
            let (r0, c0) = p.origin;
            let mut data = vec![0.0; p.size * p.size * 3];
            data.par_chunks_mut(p.size * 3).enumerate().for_each(|(r, out)| {
                for c in 0..p.size {
                    let (o, d) = camera.ray(r0 + r, c0 + c);
                    let (rgb, _) = march(field, o, d, cfg, None);
                    out[c * 3..c * 3 + 3].copy_from_slice(&rgb);
                }
            });
            Image::from_vec(p.size, p.size, data).expect("patch buffer has image shape")
        })
        .collect())
}

/// Upstream gradient for one rendered patch.
#[derive(Clone, Debug)]
pub struct PatchGrad {
    pub patch: PatchSpec,
    pub grad: Image,
}

const CHUNK_RAYS: usize = 64;

/// Accumulates parameter gradients for a set of pixels into `out`.
///
/// Contributions are added in pixel order regardless of the thread count, so
/// results are bit-identical for any pool size.
fn accumulate(
    field: &VoxelField,
    camera: &Camera,
    cfg: &RenderConfig,
    pixels: &[(usize, usize, [f64; 3])],
    out: &mut [f64],
) {
    let threads = rayon::current_num_threads();
    if threads <= 1 {
        let mut recs = Vec::with_capacity(cfg.samples_per_ray);
        for &(row, col, g) in pixels {
            let (o, d) = camera.ray(row, col);
            march(field, o, d, cfg, Some(&mut recs));
            ray_backward(&recs, cfg, g, |i, v| out[i] += v);
        }
        return;
    }
    for batch in pixels.chunks(CHUNK_RAYS * threads * 2) {
        let partial: Vec<Vec<(u32, f64)>> = batch
            .par_chunks(CHUNK_RAYS)
            .map(|chunk| {
                let mut recs = Vec::with_capacity(cfg.samples_per_ray);
                let mut sparse = Vec::new();
                for &(row, col, g) in chunk {
                    let (o, d) = camera.ray(row, col);
                    march(field, o, d, cfg, Some(&mut recs));
                    ray_backward(&recs, cfg, g, |i, v| sparse.push((i as u32, v)));
                }
                sparse
            })
            .collect();
        for sparse in partial {
            for (i, v) in sparse {
                out[i as usize] += v;
            }
        }
    }
}

/// Exact gradient of `sum(pixel_grads * render_view(field))` with respect to
/// the raw field parameters.
pub fn backward(
    field: &VoxelField,
    camera: &Camera,
    cfg: &RenderConfig,
    pixel_grads: &Image,
) -> Result<Vec<f64>> {
    if pixel_grads.dims() != (camera.image_w, camera.image_h) {
        return Err(Error::dims(
            format!("{}x{}", camera.image_w, camera.image_h),
            format!("{}x{}", pixel_grads.width(), pixel_grads.height()),
        ));
    }
    let mut out = vec![0.0; field.params().len()];
    let pixels: Vec<_> = (0..camera.image_h)
        .flat_map(|r| (0..camera.image_w).map(move |c| (r, c)))
        .map(|(r, c)| (r, c, pixel_grads.pixel(r, c)))
        .filter(|(_, _, g)| g.iter().any(|v| *v != 0.0))
        .collect();
    accumulate(field, camera, cfg, &pixels, &mut out);
    Ok(out)
}

/// Adds the parameter gradients of several patches of one view into `grad`.
pub fn backward_patches(
    field: &VoxelField,
    camera: &Camera,
    cfg: &RenderConfig,
    items: &[PatchGrad],
    grad: &mut [f64],
) -> Result<()> {
    if grad.len() != field.params().len() {
        return Err(Error::dims(field.params().len(), grad.len()));
    }
    let mut pixels = Vec::new();
    for item in items {
        item.patch.check(camera.image_w, camera.image_h)?;
        if item.grad.dims() != (item.patch.size, item.patch.size) {
            return Err(Error::dims(
                format!("{0}x{0}", item.patch.size),
                format!("{}x{}", item.grad.width(), item.grad.height()),
            ));
        }
        let (r0, c0) = item.patch.origin;
        for r in 0..item.patch.size {
            for c in 0..item.patch.size {
                let g = item.grad.pixel(r, c);
                if g.iter().any(|v| *v != 0.0) {
                    pixels.push((r0 + r, c0 + c, g));
                }
            }
        }
    }
    accumulate(field, camera, cfg, &pixels, grad);
    Ok(())
}
