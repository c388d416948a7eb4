//! Forward-process schedule, deterministic DDIM stepping and classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Noise-prediction model queried by [`ddim_run`]; `view = None` is the unconditional branch.
pub trait DenoiserPrior: Sync {
    fn predict_eps(&self, z_t: &Image, t: usize, view: Option<usize>) -> Result<Image>;

    /// Guided prediction for `view` at scale `s`: `cfg_combine` of the two branches.
    /// Implementations may share work between the branches evaluated on the same `z_t`.
    fn predict_eps_guided(&self, z_t: &Image, t: usize, view: usize, s: f64) -> Result<Image> {
        let cond = self.predict_eps(z_t, t, Some(view))?;
        if s == 1.0 {
            return Ok(cond);
        }
        let uncond = self.predict_eps(z_t, t, None)?;
        cfg_combine(&uncond, &cond, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_train: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

/// Linear-beta forward process. Index 0 is the clean image (`alpha_bar[0] = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// `make_schedule` with an explicit config.
pub fn make_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(&ScheduleConfig { t_train, beta_min, beta_max })
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { t_train, beta_min, beta_max } = *cfg;
        if t_train < 1 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={t_train} [{beta_min}, {beta_max}]"
            )));
        }
        let mut betas = vec![0.0; t_train + 1];
        let mut alpha_bar = vec![1.0; t_train + 1];
        for t in 1..=t_train {
            let frac = if t_train == 1 { 0.0 } else { (t - 1) as f64 / (t_train - 1) as f64 };
            betas[t] = beta_min + (beta_max - beta_min) * frac;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len() - 1
    }

    /// `beta_t` for `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Noise-to-signal ratio `sqrt(1 - abar) / sqrt(abar)`.
    pub fn rho(&self, t: usize) -> f64 {
        let a = self.alpha_bar[t];
        ((1.0 - a) / a).sqrt()
    }

    /// Timestep for a continuous noise fraction in `[0, 1]`.
    pub fn timestep_for_fraction(&self, frac: f64) -> usize {
        ((frac.clamp(0.0, 1.0) * self.t_train() as f64).round() as usize).min(self.t_train())
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_train() {
            return Err(Error::InvalidTimestep(t));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

/// Descending DDIM ladder `t_K > ... > t_1 > t_0 = 0` with `t_k = round(k T / K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimPlan {
    steps: Vec<usize>,
}

impl DdimPlan {
    pub fn new(k: usize, t_train: usize) -> Result<Self> {
        if k == 0 || k > t_train {
            return Err(Error::InvalidParameter(format!("DDIM steps must be in 1..={t_train}, got {k}")));
        }
        let steps = (0..=k)
            .rev()
            .map(|i| ((i as f64) * t_train as f64 / k as f64).round() as usize)
            .collect();
        Ok(Self { steps })
    }

    /// Number of denoising steps `K`.
    pub fn k(&self) -> usize {
        self.steps.len() - 1
    }

    /// Full ladder, descending, ending in 0.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Timestep reached after `i` denoising steps from the top (`i = 0` is `t_K`).
    pub fn at(&self, i: usize) -> usize {
        self.steps[i]
    }

    pub fn position(&self, t: usize) -> Result<usize> {
        self.steps.iter().position(|&s| s == t).ok_or(Error::NotOnLadder(t))
    }
}

/// `z_t = sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn q_sample(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t)?;
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(eps, |x, e| sa * x + sn * e)
}

pub fn eps_to_x0(z_t: &Image, eps: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t)?;
    if t == 0 {
        return Err(Error::InvalidTimestep(0));
    }
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.zip_map(eps, |z, e| (z - sn * e) / sa)
}

pub fn x0_to_eps(z_t: &Image, x0: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    sched.check(t)?;
    if t == 0 {
        return Err(Error::InvalidTimestep(0));
    }
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.zip_map(x0, |z, x| (z - sa * x) / sn)
}

/// `eps_u + s (eps_c - eps_u)`; `s = 1` and `s = 0` return the branches exactly.
pub fn cfg_combine(eps_uncond: &Image, eps_cond: &Image, s: f64) -> Result<Image> {
    eps_uncond.same_dims(eps_cond)?;
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_next`.
pub fn ddim_step(z_t: &Image, eps: &Image, t: usize, t_next: usize, sched: &NoiseSchedule) -> Result<Image> {
    if t_next >= t {
        return Err(Error::InvalidParameter(format!("DDIM step must descend, got {t} -> {t_next}")));
    }
    let x0 = eps_to_x0(z_t, eps, t, sched)?;
    if t_next == 0 {
        return Ok(x0);
    }
    q_sample(&x0, t_next, eps, sched)
}

/// Guided noise prediction; skips the unconditional query when `s = 1`.
pub fn guided_eps(
    prior: &dyn DenoiserPrior,
    z_t: &Image,
    t: usize,
    view: Option<usize>,
    s: f64,
) -> Result<Image> {
    match view {
        None => prior.predict_eps(z_t, t, None),
        Some(v) => prior.predict_eps_guided(z_t, t, v, s),
    }
}

/// Runs the ladder from `t_start` to 0 and returns the final clean estimate.
pub fn ddim_run(
    z_start: &Image,
    t_start: usize,
    plan: &DdimPlan,
    prior: &dyn DenoiserPrior,
    view: Option<usize>,
    s: f64,
    sched: &NoiseSchedule,
) -> Result<Image> {
    let start = plan.position(t_start)?;
    if t_start == 0 {
        return Ok(z_start.clone());
    }
    let mut z = z_start.clone();
    for pair in plan.steps()[start..].windows(2) {
        let eps = guided_eps(prior, &z, pair[0], view, s)?;
        z = ddim_step(&z, &eps, pair[0], pair[1], sched)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(make_schedule(1000, 0.0, 0.1).is_err());
        assert!(make_schedule(1000, 0.2, 0.1).is_err());
    }

    #[test]
    fn ladder_shape() {
        let p = DdimPlan::new(100, 1000).unwrap();
        assert_eq!(p.steps().len(), 101);
        assert_eq!((p.at(0), p.at(60), p.at(100)), (1000, 400, 0));
        let p = DdimPlan::new(3, 1000).unwrap();
        assert_eq!(p.steps(), &[1000, 667, 333, 0]);
        assert!(p.position(500).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        let s = NoiseSchedule::default();
        // Find the timestep whose alpha_bar is nearest 0.5 and check the formula there.
        let t = (1..=1000).min_by(|&a, &b| (s.alpha_bar(a) - 0.5).abs().total_cmp(&(s.alpha_bar(b) - 0.5).abs())).unwrap();
        let z = q_sample(&Image::new(2, 2), t, &Image::filled(2, 2, [1.0; 3]), &s).unwrap();
        let want = (1.0 - s.alpha_bar(t)).sqrt();
        assert!(z.data().iter().all(|v| (v - want).abs() < 1e-15));

        let x = Image::filled(2, 2, [0.3, 0.6, 0.9]);
        assert_eq!(q_sample(&x, 0, &Image::filled(2, 2, [5.0; 3]), &s).unwrap(), x);
    }

    #[test]
    fn eps_x0_roundtrip() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Image::random_uniform(5, 4, &mut rng);
        let eps = Image::random_normal(5, 4, &mut rng);
        for t in [1, 17, 500, 1000] {
            let z = q_sample(&x0, t, &eps, &s).unwrap();
            let back = eps_to_x0(&z, &eps, t, &s).unwrap();
            assert!(back.mean_abs_diff(&x0).unwrap() < 1e-9);
            let e2 = x0_to_eps(&z, &back, t, &s).unwrap();
            assert!(e2.mean_abs_diff(&eps).unwrap() < 1e-6);
        }
        assert!(eps_to_x0(&x0, &eps, 0, &s).is_err());
    }

    #[test]
    fn cfg_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Image::random_normal(3, 3, &mut rng);
        let c = Image::random_normal(3, 3, &mut rng);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 19.0).unwrap(), c);
    }

    #[test]
    fn constant_eps_is_step_count_invariant() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Image::random_normal(4, 4, &mut rng);
        let e = Image::random_normal(4, 4, &mut rng);
        let one = ddim_step(&z, &e, 800, 200, &s).unwrap();
        let mid = ddim_step(&z, &e, 800, 450, &s).unwrap();
        let two = ddim_step(&mid, &e, 450, 200, &s).unwrap();
        assert!(one.mean_abs_diff(&two).unwrap() < 1e-12);
        assert!(ddim_step(&z, &e, 200, 200, &s).is_err());
    }
}
