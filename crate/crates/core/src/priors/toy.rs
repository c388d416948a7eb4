use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, DenoiserPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{adam_step, AdamConfig, AdamState};
use crate::imaging::Image;
use crate::seeding::{stream_rng, Component};

const MAGIC: &[u8; 8] = b"DLTOYNN1";
pub const TOY_CHANNELS: usize = 8;
pub const TOY_EMBED: usize = 16;
const LEAK: f64 = 0.1;

/// Conv layer shapes `(c_in, c_out)`: encoder 0..=2, decoder 3..=4.
const LAYERS: [(usize, usize); 5] =
    [(3, TOY_CHANNELS), (TOY_CHANNELS, TOY_CHANNELS), (TOY_CHANNELS, TOY_CHANNELS), (TOY_CHANNELS, TOY_CHANNELS), (TOY_CHANNELS, 3)];

#[derive(Clone, Copy, Debug)]
struct Layout {
    conv_w: [usize; 5],
    conv_b: [usize; 5],
    /// Time projection `[TOY_CHANNELS][TOY_EMBED]` plus bias.
    t_w: usize,
    t_b: usize,
    /// View table `[(n_views + 1)][TOY_CHANNELS]`; the last row is the null view.
    views: usize,
    /// Skip gain `s(t) = u . phi(t) + u0`.
    skip_w: usize,
    skip_b: usize,
    len: usize,
}

impl Layout {
    fn new(n_views: usize) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let mut conv_w = [0; 5];
        let mut conv_b = [0; 5];
        for (i, &(ci, co)) in LAYERS.iter().enumerate() {
            conv_w[i] = take(co * ci * 9);
            conv_b[i] = take(co);
        }
        let t_w = take(TOY_CHANNELS * TOY_EMBED);
        let t_b = take(TOY_CHANNELS);
        let views = take((n_views + 1) * TOY_CHANNELS);
        let skip_w = take(TOY_EMBED);
        let skip_b = take(1);
        Self { conv_w, conv_b, t_w, t_b, views, skip_w, skip_b, len: off }
    }
}

/// Channel-planar feature map.
#[derive(Clone, Debug)]
struct Planes {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Planes {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    fn from_image(img: &Image) -> Self {
        let (w, h) = img.dims();
        let mut p = Self::zeros(3, h, w);
        for r in 0..h {
            for c in 0..w {
                let px = img.pixel(r, c);
                for k in 0..3 {
                    p.v[(k * h + r) * w + c] = px[k];
                }
            }
        }
        p
    }

    fn to_image(&self) -> Image {
        Image::from_fn(self.w, self.h, |r, c| {
            [0, 1, 2].map(|k| self.v[(k * self.h + r) * self.w + c])
        })
    }

    #[inline]
    fn at(&self, c: usize, r: usize, x: usize) -> f64 {
        self.v[(c * self.h + r) * self.w + x]
    }
}

/// Zero-padded 3x3 convolution with bias.
fn conv(x: &Planes, w: &[f64], b: &[f64], c_out: usize) -> Planes {
    let (h, wd) = (x.h, x.w);
    let mut y = Planes::zeros(c_out, h, wd);
    for o in 0..c_out {
        let plane = &mut y.v[o * h * wd..(o + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..x.c {
            let k = &w[(o * x.c + i) * 9..(o * x.c + i) * 9 + 9];
            let src = &x.v[i * h * wd..(i + 1) * h * wd];
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        let rr = r as isize + dy as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let cc = c as isize + dx as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            acc += k[dy * 3 + dx] * src[rr as usize * wd + cc as usize];
                        }
                    }
                    plane[r * wd + c] += acc;
                }
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients; returns the input gradient.
fn conv_backward(x: &Planes, w: &[f64], gy: &Planes, gw: &mut [f64], gb: &mut [f64]) -> Planes {
    let (h, wd) = (x.h, x.w);
    let mut gx = Planes::zeros(x.c, h, wd);
    for o in 0..gy.c {
        let g = &gy.v[o * h * wd..(o + 1) * h * wd];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..x.c {
            let base = (o * x.c + i) * 9;
            let src = &x.v[i * h * wd..(i + 1) * h * wd];
            let dst = &mut gx.v[i * h * wd..(i + 1) * h * wd];
            for r in 0..h {
                for c in 0..wd {
                    let gv = g[r * wd + c];
                    if gv == 0.0 {
                        continue;
                    }
                    for dy in 0..3 {
                        let rr = r as isize + dy as isize - 1;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let cc = c as isize + dx as isize - 1;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            let idx = rr as usize * wd + cc as usize;
                            gw[base + dy * 3 + dx] += gv * src[idx];
                            dst[idx] += gv * w[base + dy * 3 + dx];
                        }
                    }
                }
            }
        }
    }
    gx
}

fn add_channel_bias(x: &mut Planes, e: &[f64]) {
    let n = x.h * x.w;
    for c in 0..x.c {
        x.v[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += e[c]);
    }
}

fn leaky(x: &mut Planes) {
    x.v.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAK
        }
    });
}

/// Gradient through leaky ReLU given the pre-activation.
fn leaky_backward(pre: &Planes, g: &mut Planes) {
    for (gv, p) in g.v.iter_mut().zip(&pre.v) {
        if *p < 0.0 {
            *gv *= LEAK;
        }
    }
}

/// 2x2 average pooling; odd edges average the available pixels.
fn pool(x: &Planes) -> Planes {
    let (h2, w2) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut y = Planes::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for r in 0..h2 {
            for q in 0..w2 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for rr in 2 * r..(2 * r + 2).min(x.h) {
                    for qq in 2 * q..(2 * q + 2).min(x.w) {
                        acc += x.at(c, rr, qq);
                        n += 1.0;
                    }
                }
                y.v[(c * h2 + r) * w2 + q] = acc / n;
            }
        }
    }
    y
}

fn pool_backward(gy: &Planes, h: usize, w: usize) -> Planes {
    let mut gx = Planes::zeros(gy.c, h, w);
    for c in 0..gy.c {
        for r in 0..gy.h {
            for q in 0..gy.w {
                let rs = 2 * r..(2 * r + 2).min(h);
                let qs = 2 * q..(2 * q + 2).min(w);
                let n = (rs.len() * qs.len()) as f64;
                let g = gy.at(c, r, q) / n;
                for rr in rs {
                    for qq in qs.clone() {
                        gx.v[(c * h + rr) * w + qq] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor upsampling to `(h, w)` added onto `skip`.
fn up_add(x: &Planes, skip: &Planes) -> Planes {
    let mut y = skip.clone();
    for c in 0..x.c {
        for r in 0..skip.h {
            for q in 0..skip.w {
                y.v[(c * skip.h + r) * skip.w + q] += x.at(c, r / 2, q / 2);
            }
        }
    }
    y
}

fn up_backward(gy: &Planes, small_h: usize, small_w: usize) -> Planes {
    let mut gx = Planes::zeros(gy.c, small_h, small_w);
    for c in 0..gy.c {
        for r in 0..gy.h {
            for q in 0..gy.w {
                gx.v[(c * small_h + r / 2) * small_w + q / 2] += gy.at(c, r, q);
            }
        }
    }
    gx
}

/// Sinusoidal timestep features at octave frequencies.
pub fn time_embedding(t: usize, t_train: usize) -> [f64; TOY_EMBED] {
    let mut out = [0.0; TOY_EMBED];
    let x = t as f64 / t_train as f64 * std::f64::consts::PI;
    for k in 0..TOY_EMBED / 2 {
        let f = x * (1u64 << k) as f64;
        out[2 * k] = f.sin();
        out[2 * k + 1] = f.cos();
    }
    out
}

struct Trace {
    x: Planes,
    pre0: Planes,
    a0: Planes,
    p0: Planes,
    pre1: Planes,
    a1: Planes,
    p1: Planes,
    pre2: Planes,
    a2: Planes,
    u1: Planes,
    pre3: Planes,
    a3: Planes,
    u0: Planes,
    phi: [f64; TOY_EMBED],
    out: Planes,
}

/// Tiny view-conditioned epsilon predictor in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    n_views: usize,
    t_train: usize,
    params: Vec<f64>,
}

impl ToyDenoiser {
    /// He-initialized conv weights; embeddings start small, skip gain at zero.
    pub fn new(n_views: usize, t_train: usize, seed: u64) -> Self {
        let lay = Layout::new(n_views);
        let mut params = vec![0.0; lay.len];
        let mut rng = stream_rng(seed, Component::ToyInit, 0);
        for (i, &(ci, co)) in LAYERS.iter().enumerate() {
            let std = (2.0 / (ci * 9) as f64).sqrt() * if i == 4 { 0.1 } else { 1.0 };
            let d = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[lay.conv_w[i]..lay.conv_w[i] + co * ci * 9] {
                *p = d.sample(&mut rng);
            }
        }
        let small = Normal::new(0.0, 0.1).expect("finite std");
        for p in &mut params[lay.t_w..lay.t_w + TOY_CHANNELS * TOY_EMBED] {
            *p = small.sample(&mut rng);
        }
        for p in &mut params[lay.views..lay.views + (n_views + 1) * TOY_CHANNELS] {
            *p = small.sample(&mut rng);
        }
        Self { n_views, t_train, params }
    }

    pub fn num_views(&self) -> usize {
        self.n_views
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn layout(&self) -> Layout {
        Layout::new(self.n_views)
    }

    fn check(&self, t: usize, view: Option<usize>) -> Result<usize> {
        if t == 0 || t > self.t_train {
            return Err(Error::InvalidTimestep(t));
        }
        match view {
            None => Ok(self.n_views),
            Some(v) if v < self.n_views => Ok(v),
            Some(v) => Err(Error::InvalidParameter(format!("view {v} out of range ({} views)", self.n_views))),
        }
    }

    fn forward(&self, z: &Image, t: usize, slot: usize) -> Trace {
        let lay = self.layout();
        let p = &self.params;
        let phi = time_embedding(t, self.t_train);
        let mut e = [0.0; TOY_CHANNELS];
        for (c, ev) in e.iter_mut().enumerate() {
            let row = &p[lay.t_w + c * TOY_EMBED..lay.t_w + (c + 1) * TOY_EMBED];
            *ev = p[lay.t_b + c]
                + row.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>()
                + p[lay.views + slot * TOY_CHANNELS + c];
        }
        let skip = p[lay.skip_b] + p[lay.skip_w..lay.skip_w + TOY_EMBED].iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
        let layer = |i: usize, x: &Planes| {
            let (ci, co) = LAYERS[i];
            conv(x, &p[lay.conv_w[i]..lay.conv_w[i] + co * ci * 9], &p[lay.conv_b[i]..lay.conv_b[i] + co], co)
        };
        let x = Planes::from_image(z);
        let mut pre0 = layer(0, &x);
        add_channel_bias(&mut pre0, &e);
        let mut a0 = pre0.clone();
        leaky(&mut a0);
        let p0 = pool(&a0);
        let pre1 = layer(1, &p0);
        let mut a1 = pre1.clone();
        leaky(&mut a1);
        let p1 = pool(&a1);
        let mut pre2 = layer(2, &p1);
        add_channel_bias(&mut pre2, &e);
        let mut a2 = pre2.clone();
        leaky(&mut a2);
        let u1 = up_add(&a2, &a1);
        let pre3 = layer(3, &u1);
        let mut a3 = pre3.clone();
        leaky(&mut a3);
        let u0 = up_add(&a3, &a0);
        let mut out = layer(4, &u0);
        for (o, xv) in out.v.iter_mut().zip(&x.v) {
            *o += skip * xv;
        }
        Trace { x, pre0, a0, p0, pre1, a1, p1, pre2, a2, u1, pre3, a3, u0, phi, out }
    }

    /// Accumulates parameter gradients of `sum(g_out * eps_hat)` into `grad`.
    fn backward(&self, tr: &Trace, slot: usize, g_out: &Planes, grad: &mut [f64]) {
        let lay = self.layout();
        let p = &self.params;
        let conv_b = |i: usize, x: &Planes, gy: &Planes, grad: &mut [f64]| -> Planes {
            let (ci, co) = LAYERS[i];
            let (wr, br) = (lay.conv_w[i]..lay.conv_w[i] + co * ci * 9, lay.conv_b[i]..lay.conv_b[i] + co);
            let mut gw = vec![0.0; wr.len()];
            let mut gb = vec![0.0; br.len()];
            let gx = conv_backward(x, &p[wr.clone()], gy, &mut gw, &mut gb);
            for (d, s) in grad[wr].iter_mut().zip(gw) {
                *d += s;
            }
            for (d, s) in grad[br].iter_mut().zip(gb) {
                *d += s;
            }
            gx
        };
        // Skip gain.
        let gskip: f64 = g_out.v.iter().zip(&tr.x.v).map(|(a, b)| a * b).sum();
        grad[lay.skip_b] += gskip;
        for k in 0..TOY_EMBED {
            grad[lay.skip_w + k] += gskip * tr.phi[k];
        }
        let g_u0 = conv_b(4, &tr.u0, g_out, grad);
        // u0 = up(a3) + a0
        let mut g_a3 = up_backward(&g_u0, tr.a3.h, tr.a3.w);
        let mut g_a0 = g_u0;
        leaky_backward(&tr.pre3, &mut g_a3);
        let g_u1 = conv_b(3, &tr.u1, &g_a3, grad);
        let mut g_a2 = up_backward(&g_u1, tr.a2.h, tr.a2.w);
        let mut g_a1 = g_u1;
        leaky_backward(&tr.pre2, &mut g_a2);
        let mut g_e = [0.0; TOY_CHANNELS];
        let n2 = g_a2.h * g_a2.w;
        for c in 0..TOY_CHANNELS {
            g_e[c] += g_a2.v[c * n2..(c + 1) * n2].iter().sum::<f64>();
        }
        let g_p1 = conv_b(2, &tr.p1, &g_a2, grad);
        let gp = pool_backward(&g_p1, tr.a1.h, tr.a1.w);
        for (a, b) in g_a1.v.iter_mut().zip(gp.v) {
            *a += b;
        }
        leaky_backward(&tr.pre1, &mut g_a1);
        let g_p0 = conv_b(1, &tr.p0, &g_a1, grad);
        let gp = pool_backward(&g_p0, tr.a0.h, tr.a0.w);
        for (a, b) in g_a0.v.iter_mut().zip(gp.v) {
            *a += b;
        }
        leaky_backward(&tr.pre0, &mut g_a0);
        let n0 = g_a0.h * g_a0.w;
        for c in 0..TOY_CHANNELS {
            g_e[c] += g_a0.v[c * n0..(c + 1) * n0].iter().sum::<f64>();
        }
        let _ = conv_b(0, &tr.x, &g_a0, grad);
        for c in 0..TOY_CHANNELS {
            grad[lay.t_b + c] += g_e[c];
            grad[lay.views + slot * TOY_CHANNELS + c] += g_e[c];
            for k in 0..TOY_EMBED {
                grad[lay.t_w + c * TOY_EMBED + k] += g_e[c] * tr.phi[k];
            }
        }
    }

    /// Loss `mean((eps - eps_hat)^2)` for one sample, accumulating its gradient.
    fn sample_loss(&self, z: &Image, eps: &Image, t: usize, slot: usize, grad: &mut [f64], weight: f64) -> f64 {
        let tr = self.forward(z, t, slot);
        let target = Planes::from_image(eps);
        let n = target.v.len() as f64;
        let mut g = Planes::zeros(3, tr.out.h, tr.out.w);
        let mut loss = 0.0;
        for ((gv, o), e) in g.v.iter_mut().zip(&tr.out.v).zip(&target.v) {
            let d = o - e;
            loss += d * d;
            *gv = 2.0 * d / n * weight;
        }
        self.backward(&tr, slot, &g, grad);
        loss / n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_views as u32).to_le_bytes());
        out.extend_from_slice(&(self.t_train as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut input: impl Read) -> Result<Self> {
        let mut head = [0u8; 20];
        input.read_exact(&mut head).map_err(|_| Error::BadBlob("truncated toy prior header".into()))?;
        if &head[..8] != MAGIC {
            return Err(Error::BadBlob("not a toy prior blob".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (n_views, t_train, len) = (word(8), word(12), word(16));
        if Layout::new(n_views).len != len || t_train == 0 {
            return Err(Error::BadBlob(format!("toy prior shape mismatch: {len} params for {n_views} views")));
        }
        let mut raw = vec![0u8; 4 * len];
        input.read_exact(&mut raw).map_err(|_| Error::BadBlob("truncated toy prior weights".into()))?;
        let params = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Ok(Self { n_views, t_train, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|source| Error::Write { path: path.into(), source })?;
        f.write_all(&self.to_bytes()).map_err(|source| Error::Write { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|source| Error::Read { path: path.into(), source })?;
        Self::from_bytes(std::io::BufReader::new(f))
    }
}

/// Deterministic forward pass.
pub fn toy_predict_eps(den: &ToyDenoiser, z_t: &Image, t: usize, view: Option<usize>) -> Result<Image> {
    let slot = den.check(t, view)?;
    Ok(den.forward(z_t, t, slot).out.to_image())
}

impl DenoiserPrior for ToyDenoiser {
    fn predict_eps(&self, z_t: &Image, t: usize, view: Option<usize>) -> Result<Image> {
        toy_predict_eps(self, z_t, t, view)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of batches trained on the null view.
    pub null_fraction: f64,
    /// Moving-average window of the reported loss trace.
    pub smoothing: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 4, lr: 1e-3, null_fraction: 0.1, smoothing: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    /// Per-step batch loss.
    pub raw: Vec<f64>,
    /// Running minimum of the trailing moving average of `raw`.
    pub smoothed: Vec<f64>,
}

impl TrainTrace {
    pub fn initial(&self) -> Option<f64> {
        self.smoothed.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

/// Minibatch Adam on `E |eps - eps_hat(z_t, t, view)|^2` with uniform `t` and fresh noise.
pub fn toy_train(
    den: &mut ToyDenoiser,
    dataset: &[(usize, Image)],
    sched: &NoiseSchedule,
    cfg: &ToyTrainConfig,
    seed: u64,
) -> Result<TrainTrace> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("toy_train needs a non-empty dataset".into()));
    }
    if cfg.batch == 0 || cfg.smoothing == 0 {
        return Err(Error::InvalidParameter("batch and smoothing must be >= 1".into()));
    }
    if sched.t_train() != den.t_train {
        return Err(Error::InvalidParameter("schedule length differs from the denoiser's".into()));
    }
    for (v, img) in dataset {
        den.check(1, Some(*v))?;
        img.same_dims(&dataset[0].1)?;
    }
    let mut rng = stream_rng(seed, Component::ToyTrain, 0);
    let mut adam = AdamState::new(den.params.len(), AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let mut raw = Vec::with_capacity(cfg.steps);
    let mut smoothed = Vec::with_capacity(cfg.steps);
    let mut grad = vec![0.0; den.params.len()];
    let (w, h) = dataset[0].1.dims();
    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let null = rng.random::<f64>() < cfg.null_fraction;
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (view, x0) = &dataset[rng.random_range(0..dataset.len())];
            let t = rng.random_range(1..=sched.t_train());
            let eps = Image::from_fn(w, h, |_, _| [0, 1, 2].map(|_| StandardNormal.sample(&mut rng)));
            let z = q_sample(x0, t, &eps, sched)?;
            let slot = if null { den.n_views } else { *view };
            loss += den.sample_loss(&z, &eps, t, slot, &mut grad, 1.0 / cfg.batch as f64);
        }
        adam_step(&mut den.params, &grad, &mut adam)?;
        raw.push(loss / cfg.batch as f64);
        let lo = raw.len().saturating_sub(cfg.smoothing);
        let ma = raw[lo..].iter().sum::<f64>() / (raw.len() - lo) as f64;
        smoothed.push(smoothed.last().map_or(ma, |&m: &f64| m.min(ma)));
    }
    Ok(TrainTrace { raw, smoothed })
}
