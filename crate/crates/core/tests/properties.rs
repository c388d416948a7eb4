use distillab::diffusion::{cfg_combine, ddim_step, eps_to_x0, q_sample, x0_to_eps, DenoiserPrior, NoiseSchedule};
use distillab::distill::leakage_metric;
use distillab::field::{adam_step, render_patches, render_view, Activation, AdamConfig, AdamState, RenderConfig, VoxelField};
use distillab::harness::ExperimentConfig;
use distillab::imaging::{gaussian_blur, mse, psnr, read_ppm, resample, ssim, write_ppm, Image, PatchSpec};
use distillab::priors::{OracleConfig, OracleDenoiser};
use distillab::scene::{bake_scene, Camera, SceneSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(w: usize, h: usize, seed: u64) -> Image {
    Image::random_uniform(w, h, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn noise(w: usize, h: usize, seed: u64) -> Image {
    Image::random_normal(w, h, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_field(res: usize, seed: u64) -> VoxelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..res * res * res * 4).map(|_| rng.random_range(-3.0..2.0)).collect();
    VoxelField::from_params(res, Activation::SoftplusSigmoid, params).unwrap()
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn forward_noise_and_its_inverses_agree(seed in any::<u64>(), t in 1usize..=1000, dt in 1usize..1000) {
        let sched = NoiseSchedule::default();
        let x0 = image(6, 5, seed);
        let eps = noise(6, 5, seed ^ 1);
        let z = q_sample(&x0, t, &eps, &sched).unwrap();
        prop_assert!(max_abs_diff(&x0_to_eps(&z, &x0, t, &sched).unwrap(), &eps) < 1e-6);
        prop_assert!(max_abs_diff(&eps_to_x0(&z, &eps, t, &sched).unwrap(), &x0) < 1e-6);
        let t_next = t.saturating_sub(dt);
        let stepped = ddim_step(&z, &eps, t, t_next, &sched).unwrap();
        let expect = if t_next == 0 { x0.clone() } else { q_sample(&x0, t_next, &eps, &sched).unwrap() };
        prop_assert!(max_abs_diff(&stepped, &expect) < 1e-6);
    }

    #[test]
    fn guidance_is_affine_in_the_scale(seed in any::<u64>(), s in -5.0f64..30.0) {
        let u = noise(4, 4, seed);
        let c = noise(4, 4, seed ^ 7);
        let g = cfg_combine(&u, &c, s).unwrap();
        let expect = u.zip_map(&c, |a, b| a + s * (b - a)).unwrap();
        prop_assert!(max_abs_diff(&g, &expect) < 1e-12);
    }

    #[test]
    fn blur_keeps_constants_and_bounds(v in 0.0f64..1.0, sigma in 0.0f64..5.0, seed in any::<u64>()) {
        let c = Image::filled(9, 7, [v, v, v]);
        prop_assert!(max_abs_diff(&gaussian_blur(&c, sigma), &c) < 1e-12);
        let x = image(9, 7, seed);
        let b = gaussian_blur(&x, sigma);
        prop_assert!(b.data().iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
    }

    #[test]
    fn resample_keeps_constants(v in 0.0f64..1.0, w in 1usize..20, h in 1usize..20) {
        let c = Image::filled(5, 6, [v, 1.0 - v, v / 2.0]);
        let r = resample(&c, w, h);
        prop_assert_eq!(r.dims(), (w, h));
        prop_assert!(max_abs_diff(&r, &Image::filled(w, h, [v, 1.0 - v, v / 2.0])) < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>()) {
        let x = image(12, 12, a);
        let y = image(12, 12, b);
        prop_assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
        prop_assert!(mse(&x, &y).unwrap() >= 0.0);
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(psnr(&x, &y).unwrap() <= psnr(&x, &x).unwrap());
    }

    #[test]
    fn ppm_roundtrip_is_within_half_a_level(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let x = image(5, 3, seed);
        let p = dir.path().join("x.ppm");
        write_ppm(&x, &p).unwrap();
        prop_assert!(max_abs_diff(&read_ppm(&p).unwrap(), &x) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn adam_ignores_zero_gradients(seed in any::<u64>(), n in 1usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let before = p.clone();
        let mut st = AdamState::new(n, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &vec![0.0; n], &mut st).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn cfg_scale_override_round_trips(s in 0.0f64..100.0) {
        let c = ExperimentConfig::load(None, &[format!("distill.cfg_scale={s:?}")]).unwrap();
        prop_assert_eq!(c.distill.cfg_scale, s);
        prop_assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patches_match_crops_of_the_full_render(seed in any::<u64>(), az in -40.0f64..40.0, el in -30.0f64..30.0) {
        let field = random_field(6, seed);
        let cam = Camera::new(az, el, 2.5, 40.0, 12, 12);
        let cfg = RenderConfig { samples_per_ray: 12, ..RenderConfig::default() };
        let full = render_view(&field, &cam, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let patches: Vec<PatchSpec> = (0..4).map(|_| {
            let size = rng.random_range(1..=12);
            PatchSpec::random(12, 12, size, &mut rng)
        }).collect();
        for (p, img) in patches.iter().zip(render_patches(&field, &cam, &cfg, &patches).unwrap()) {
            let crop = full.crop(p).unwrap();
            prop_assert_eq!(img.data(), crop.data());
        }
    }

    #[test]
    fn renders_stay_in_the_unit_range(seed in any::<u64>(), az in -60.0f64..60.0) {
        let field = random_field(5, seed);
        let img = render_view(&field, &Camera::new(az, 0.0, 2.5, 40.0, 8, 8), &RenderConfig { samples_per_ray: 16, ..RenderConfig::default() });
        prop_assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn leakage_is_nonnegative_and_zero_on_empty_fields(seed in any::<u64>()) {
        let gt = bake_scene(&SceneSpec::generate(seed % 4), 12).unwrap();
        prop_assert!(leakage_metric(&random_field(8, seed), &gt).unwrap() >= 0.0);
        prop_assert_eq!(leakage_metric(&VoxelField::empty_direct(8), &gt).unwrap(), 0.0);
    }

    #[test]
    fn oracle_noise_and_clean_views_agree(seed in any::<u64>(), t in 1usize..=1000, view in 0usize..3) {
        let sched = NoiseSchedule::default();
        let views: Vec<Image> = (0..3).map(|v| image(16, 16, seed ^ v as u64)).collect();
        let oracle = OracleDenoiser::new(OracleConfig::default(), &views, sched.clone()).unwrap();
        let z = noise(16, 16, seed ^ 99);
        let eps = oracle.predict_eps(&z, t, Some(view)).unwrap();
        let x0 = oracle.predict_x0(&z, t, Some(view)).unwrap();
        prop_assert!(max_abs_diff(&eps_to_x0(&z, &eps, t, &sched).unwrap(), &x0) < 1e-9);
        prop_assert_eq!(oracle.predict_eps(&z, t, Some(view)).unwrap(), eps);
    }
}
