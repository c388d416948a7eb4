use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, x0_to_eps, DenoiserPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, resample, Image};
use crate::seeding::{stream_rng, Component};

/// How the oracle forms its estimate of the clean input from `z_t / sqrt(abar)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModel {
    /// Low-pass the noisy input at radius `r(t)`; all detail above `r(t)` is discarded.
    Blurred,
    /// Low-pass the noisy input, then restore the view target's detail band scaled by
    /// the share of it the input already carries (noise-shrunk projection, at most 1).
    /// Detail the input lacks stays missing; noise orthogonal to the detail is dropped.
    DetailMatched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// RMS of the per-view inconsistency field.
    pub amplitude: f64,
    /// Blur sigma of the inconsistency field, pixels at the reference resolution.
    pub smoothness: f64,
    /// Largest input blur radius, pixels at the reference resolution.
    pub r_max: f64,
    /// `r(t) = r_max * min(1, rho^blur_exponent)`.
    pub blur_exponent: f64,
    /// Detail-band trust `w(t) = rho^q / (rho^q + trust_midpoint^q)`.
    pub trust_midpoint: f64,
    /// `q` in the detail-band trust; 1 gives `rho / (rho + trust_midpoint)`.
    pub trust_exponent: f64,
    /// Low-band trust `w_low(t) = rho / (rho + low_band_midpoint)`.
    pub low_band_midpoint: f64,
    pub input_model: InputModel,
    /// Guidance scale at which the guided target equals the per-view target exactly.
    pub guidance_calibration: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.05,
            smoothness: 4.0,
            r_max: 6.0,
            blur_exponent: 0.0,
            trust_midpoint: 1.5,
            trust_exponent: 2.0,
            low_band_midpoint: 0.5,
            input_model: InputModel::DetailMatched,
            guidance_calibration: 19.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("oracle: {m}")));
        if !(self.amplitude >= 0.0) {
            return bad("amplitude must be >= 0");
        }
        if !(self.r_max >= 0.0) || !(self.smoothness >= 0.0) {
            return bad("r_max and smoothness must be >= 0");
        }
        if !(self.blur_exponent >= 0.0) || !(self.trust_midpoint > 0.0) || !(self.trust_exponent > 0.0) || !(self.low_band_midpoint > 0.0) {
            return bad("blur_exponent must be >= 0, trust_exponent and both trust midpoints > 0");
        }
        if !(self.guidance_calibration > 0.0) {
            return bad("guidance_calibration must be > 0");
        }
        Ok(())
    }
}

/// Smooth zero-mean field with RMS `amplitude`; all zero when `amplitude = 0`.
pub fn inconsistency_field(w: usize, h: usize, cfg: &OracleConfig, view: usize) -> Image {
    if cfg.amplitude == 0.0 {
        return Image::new(w, h);
    }
    let mut rng = stream_rng(cfg.seed, Component::OracleInconsistency, view as u64);
    let raw = Image::from_fn(w, h, |_, _| {
        let mut px = [0.0; 3];
        for v in &mut px {
            *v = StandardNormal.sample(&mut rng);
        }
        px
    });
    let smooth = gaussian_blur(&raw, cfg.smoothness);
    let mean = smooth.mean();
    let centered = smooth.map(|v| v - mean);
    let rms = (centered.data().iter().map(|v| v * v).sum::<f64>() / centered.data().len() as f64).sqrt();
    if rms == 0.0 {
        return centered;
    }
    centered.scale(cfg.amplitude / rms)
}

/// Analytic stand-in for a view-conditioned diffusion prior built from ground-truth views.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    cfg: OracleConfig,
    sched: NoiseSchedule,
    /// Per-view inconsistent targets `clamp(g_v + eta_v)` at the reference resolution.
    targets: Vec<Image>,
    mean: Image,
}

impl OracleDenoiser {
    pub fn new(cfg: OracleConfig, gt_views: &[Image], sched: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        if gt_views.is_empty() {
            return Err(Error::InvalidParameter("oracle needs at least one view".into()));
        }
        let mean = Image::average(gt_views)?;
        let (w, h) = mean.dims();
        let targets = gt_views
            .iter()
            .enumerate()
            .map(|(v, g)| Ok(g.add(&inconsistency_field(w, h, &cfg, v))?.clamp01()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, sched, targets, mean })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn num_views(&self) -> usize {
        self.targets.len()
    }

    pub fn reference_width(&self) -> usize {
        self.mean.width()
    }

    /// Detail-band trust weight `w(t)` in the target.
    pub fn trust(&self, t: usize) -> f64 {
        let rho = self.sched.rho(t);
        let q = self.cfg.trust_exponent;
        let a = rho.powf(q);
        a / (a + self.cfg.trust_midpoint.powf(q))
    }

    /// Low-band trust weight `w_low(t)` in the target.
    pub fn low_trust(&self, t: usize) -> f64 {
        let rho = self.sched.rho(t);
        rho / (rho + self.cfg.low_band_midpoint)
    }

    /// Input blur radius at `t`, in pixels of an image `width` wide.
    pub fn blur_radius(&self, t: usize, width: usize) -> f64 {
        let rho = self.sched.rho(t);
        let scale = width as f64 / self.reference_width() as f64;
        self.cfg.r_max * rho.powf(self.cfg.blur_exponent).min(1.0) * scale
    }

    fn fit(&self, img: &Image, w: usize, h: usize) -> Image {
        if img.dims() == (w, h) {
            img.clone()
        } else {
            resample(img, w, h)
        }
    }

    /// The branch target: the view target pulled toward the mean by the calibration,
    /// or the mean image for the unconditional branch.
    pub fn branch_target(&self, view: Option<usize>, w: usize, h: usize) -> Result<Image> {
        let mean = self.fit(&self.mean, w, h);
        match view {
            None => Ok(mean),
            Some(v) => {
                let tv = self.view_target(v, w, h)?;
                let k = self.cfg.guidance_calibration;
                if k == 1.0 {
                    return Ok(tv);
                }
                mean.zip_map(&tv, |m, x| m + (x - m) / k)
            }
        }
    }

    /// Per-view target `clamp(g_v + eta_v)` resampled to `(w, h)`.
    pub fn view_target(&self, view: usize, w: usize, h: usize) -> Result<Image> {
        let tv = self.targets.get(view).ok_or_else(|| {
            Error::InvalidParameter(format!("view {view} out of range ({} views)", self.targets.len()))
        })?;
        Ok(self.fit(tv, w, h))
    }

    /// Share of the template's detail band present in `y`: the projection coefficient
    /// shrunk by its noise variance `rho^2 / |detail|^2` under a unit prior, at most 1.
    /// Always 0 for [`InputModel::Blurred`].
    fn detail_gain(&self, y: &Image, t: usize, low: &Image, detail: &Image) -> f64 {
        if self.cfg.input_model == InputModel::Blurred {
            return 0.0;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for ((yv, lv), d) in y.data().iter().zip(low.data()).zip(detail.data()) {
            num += (yv - lv) * d;
            den += d * d;
        }
        if den > 0.0 {
            let rho = self.sched.rho(t);
            (num / (den + rho * rho)).min(1.0)
        } else {
            0.0
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.sched.t_train() {
            return Err(Error::InvalidTimestep(t));
        }
        Ok(())
    }

    /// Branch prediction
    /// `L(w_low target + (1 - w_low) y) + (w + (1 - w) gain) H(target)`, where `L`
    /// blurs at `r(t)`, `H = 1 - L`, `y = z_t / sqrt(abar)` and `gain` is the share of
    /// the view template's detail band already present in `y`.
    pub fn predict_x0(&self, z_t: &Image, t: usize, view: Option<usize>) -> Result<Image> {
        self.check_t(t)?;
        let (w, h) = z_t.dims();
        let target = self.branch_target(view, w, h)?;
        let template = match view {
            Some(v) => self.view_target(v, w, h)?,
            None => target.clone(),
        };
        let y = z_t.scale(1.0 / self.sched.alpha_bar(t).sqrt());
        let input = self.input(&y, t, &template)?;
        self.combine(&input, t, &target)
    }

    /// Low band of `y` and the detail gain against `template`.
    fn input(&self, y: &Image, t: usize, template: &Image) -> Result<Input> {
        let r = self.blur_radius(t, y.width());
        let low = gaussian_blur(y, r);
        let detail = template.sub(&gaussian_blur(template, r))?;
        let gain = self.detail_gain(y, t, &low, &detail);
        Ok(Input { r, low, gain })
    }

    fn combine(&self, input: &Input, t: usize, target: &Image) -> Result<Image> {
        let wl = self.low_trust(t);
        let wh = self.trust(t);
        let kh = wh + (1.0 - wh) * input.gain;
        let target_low = gaussian_blur(target, input.r);
        let low = target_low.zip_map(&input.low, |x, i| wl * x + (1.0 - wl) * i)?;
        let high = target.sub(&target_low)?;
        low.zip_map(&high, |l, d| l + kh * d)
    }
}

/// Per-call input statistics shared by both guidance branches.
struct Input {
    r: f64,
    low: Image,
    gain: f64,
}

impl DenoiserPrior for OracleDenoiser {
    fn predict_eps(&self, z_t: &Image, t: usize, view: Option<usize>) -> Result<Image> {
        let x0 = self.predict_x0(z_t, t, view)?;
        x0_to_eps(z_t, &x0, t, &self.sched)
    }

    /// Both branches share the view's input statistics; they differ only in the target.
    fn predict_eps_guided(&self, z_t: &Image, t: usize, view: usize, s: f64) -> Result<Image> {
        self.check_t(t)?;
        let (w, h) = z_t.dims();
        let y = z_t.scale(1.0 / self.sched.alpha_bar(t).sqrt());
        let input = self.input(&y, t, &self.view_target(view, w, h)?)?;
        let branch = |target: Image| -> Result<Image> {
            let x0 = self.combine(&input, t, &target)?;
            x0_to_eps(z_t, &x0, t, &self.sched)
        };
        let cond = branch(self.branch_target(Some(view), w, h)?)?;
        if s == 1.0 {
            return Ok(cond);
        }
        let uncond = branch(self.branch_target(None, w, h)?)?;
        cfg_combine(&uncond, &cond, s)
    }
}
