//! Fixed random-feature pyramid used as a perceptual distance.
//!
//! Three levels; each convolves with eight unit-norm 3x3 filters (drawn once
//! from a ChaCha stream seeded with 0), takes the absolute value and average
//! pools by two. The next level consumes the pooled features. The distance is
//! the mean over levels of the mean squared feature difference.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Image, CHANNELS};
use crate::error::{Error, Result};

pub const PERCEPTUAL_MIN_SIDE: usize = 16;
const LEVELS: usize = 3;
const FEATURES: usize = 8;

struct Bank {
    /// `filters[level]` is laid out `[out][in][ky][kx]`.
    filters: Vec<Vec<f64>>,
    inputs: [usize; LEVELS],
}

fn bank() -> &'static Bank {
    static BANK: OnceLock<Bank> = OnceLock::new();
    BANK.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = [CHANNELS, FEATURES, FEATURES];
        let filters = inputs
            .iter()
            .map(|&cin| {
                let per = cin * 9;
                let mut f: Vec<f64> = (0..FEATURES * per).map(|_| rng.sample(StandardNormal)).collect();
                for chunk in f.chunks_exact_mut(per) {
                    let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                    chunk.iter_mut().for_each(|v| *v /= norm);
                }
                f
            })
            .collect();
        Bank { filters, inputs }
    })
}

/// Planar feature map `[channel][row][col]`.
#[derive(Clone)]
struct Planes {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Planes {
    fn from_image(img: &Image) -> Self {
        let (w, h) = img.dims();
        let mut v = vec![0.0; CHANNELS * w * h];
        for (p, px) in img.data().chunks_exact(CHANNELS).enumerate() {
            for ch in 0..CHANNELS {
                v[ch * w * h + p] = px[ch];
            }
        }
        Self { c: CHANNELS, h, w, v }
    }

    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    #[inline]
    fn at(&self, ch: usize, r: usize, c: usize) -> usize {
        (ch * self.h + r) * self.w + c
    }

    fn into_image(self) -> Image {
        let (w, h) = (self.w, self.h);
        Image::from_fn(w, h, |r, c| {
            [self.v[r * w + c], self.v[(h + r) * w + c], self.v[(2 * h + r) * w + c]]
        })
    }
}

#[inline]
fn clamp_idx(i: usize, d: i64, n: usize) -> usize {
    (i as i64 + d).clamp(0, n as i64 - 1) as usize
}

/// Pre-activation convolution at one level.
fn conv(x: &Planes, filt: &[f64]) -> Planes {
    let mut y = Planes::zeros(FEATURES, x.h, x.w);
    for o in 0..FEATURES {
        for i in 0..x.c {
            let k = &filt[(o * x.c + i) * 9..(o * x.c + i + 1) * 9];
            for r in 0..x.h {
                for c in 0..x.w {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let rr = clamp_idx(r, ky as i64 - 1, x.h);
                        for kx in 0..3 {
                            let cc = clamp_idx(c, kx as i64 - 1, x.w);
                            acc += k[ky * 3 + kx] * x.v[x.at(i, rr, cc)];
                        }
                    }
                    let idx = y.at(o, r, c);
                    y.v[idx] += acc;
                }
            }
        }
    }
    y
}

fn conv_backward(x_shape: (usize, usize, usize), filt: &[f64], dy: &Planes) -> Planes {
    let (cin, h, w) = x_shape;
    let mut dx = Planes::zeros(cin, h, w);
    for o in 0..FEATURES {
        for i in 0..cin {
            let k = &filt[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for r in 0..h {
                for c in 0..w {
                    let g = dy.v[dy.at(o, r, c)];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        let rr = clamp_idx(r, ky as i64 - 1, h);
                        for kx in 0..3 {
                            let cc = clamp_idx(c, kx as i64 - 1, w);
                            let idx = dx.at(i, rr, cc);
                            dx.v[idx] += k[ky * 3 + kx] * g;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool(x: &Planes) -> Planes {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Planes::zeros(x.c, h, w);
    for ch in 0..x.c {
        for r in 0..h {
            for c in 0..w {
                let s = x.v[x.at(ch, 2 * r, 2 * c)]
                    + x.v[x.at(ch, 2 * r, 2 * c + 1)]
                    + x.v[x.at(ch, 2 * r + 1, 2 * c)]
                    + x.v[x.at(ch, 2 * r + 1, 2 * c + 1)];
                let idx = y.at(ch, r, c);
                y.v[idx] = 0.25 * s;
            }
        }
    }
    y
}

fn pool_backward(dy: &Planes, into: &mut Planes) {
    for ch in 0..dy.c {
        for r in 0..dy.h {
            for c in 0..dy.w {
                let g = 0.25 * dy.v[dy.at(ch, r, c)];
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = into.at(ch, 2 * r + dr, 2 * c + dc);
                    into.v[idx] += g;
                }
            }
        }
    }
}

struct Trace {
    inputs: Vec<Planes>,
    pre: Vec<Planes>,
    feats: Vec<Planes>,
}

fn forward(img: &Image) -> Trace {
    let bank = bank();
    let mut x = Planes::from_image(img);
    let mut trace = Trace { inputs: Vec::new(), pre: Vec::new(), feats: Vec::new() };
    for level in 0..LEVELS {
        let pre = conv(&x, &bank.filters[level]);
        let feat = Planes { v: pre.v.iter().map(|v| v.abs()).collect(), ..pre.clone() };
        let next = pool(&feat);
        trace.inputs.push(std::mem::replace(&mut x, next));
        trace.pre.push(pre);
        trace.feats.push(feat);
    }
    trace
}

fn check(a: &Image, b: &Image) -> Result<()> {
    a.same_dims(b)?;
    let (w, h) = a.dims();
    if w < PERCEPTUAL_MIN_SIDE || h < PERCEPTUAL_MIN_SIDE {
        return Err(Error::ImageTooSmall { width: w, height: h, min: PERCEPTUAL_MIN_SIDE });
    }
    Ok(())
}

fn level_distances(ta: &Trace, tb: &Trace) -> f64 {
    let mut total = 0.0;
    for (fa, fb) in ta.feats.iter().zip(&tb.feats) {
        let sq: f64 = fa.v.iter().zip(&fb.v).map(|(x, y)| (x - y) * (x - y)).sum();
        total += sq / fa.v.len() as f64;
    }
    total / LEVELS as f64
}

/// Perceptual surrogate distance between two images of side at least 16.
pub fn perceptual_dist(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    Ok(level_distances(&forward(a), &forward(b)))
}

/// Distance and its gradient with respect to `a` (`b` held fixed).
pub fn perceptual_dist_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check(a, b)?;
    let bank = bank();
    let ta = forward(a);
    let tb = forward(b);
    let value = level_distances(&ta, &tb);

    // Gradient flowing into the input of the level being processed.
    let mut carry: Option<Planes> = None;
    for level in (0..LEVELS).rev() {
        let fa = &ta.feats[level];
        let fb = &tb.feats[level];
        let scale = 2.0 / (fa.v.len() as f64 * LEVELS as f64);
        let mut dfeat = Planes {
            v: fa.v.iter().zip(&fb.v).map(|(x, y)| scale * (x - y)).collect(),
            ..fa.clone()
        };
        if let Some(dnext) = carry.take() {
            pool_backward(&dnext, &mut dfeat);
        }
        let pre = &ta.pre[level];
        for (g, p) in dfeat.v.iter_mut().zip(&pre.v) {
            *g *= if *p > 0.0 { 1.0 } else if *p < 0.0 { -1.0 } else { 0.0 };
        }
        let x = &ta.inputs[level];
        debug_assert_eq!(x.c, bank.inputs[level]);
        carry = Some(conv_backward((x.c, x.h, x.w), &bank.filters[level], &dfeat));
    }
    Ok((value, carry.expect("at least one level").into_image()))
}
