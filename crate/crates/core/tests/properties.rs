use drum_core::guidance::{masked_guidance, pigdm_gradient, progressive_mask, REFLECTANCE};
use drum_core::lidar::{gen_toy_scene, project, unproject, Domain, ToySceneConfig};
use drum_core::model::{Architecture, GaussianPrior, NeuralDenoiser, ScoreModel};
use drum_core::rng::stream;
use drum_core::sampler::{drum_translate, finalize_with_mask};
use drum_core::*;
use proptest::prelude::*;

fn tp(t: f64) -> TimePoint {
    TimePoint::new(t).unwrap()
}

fn small_net(seed: u64) -> NeuralDenoiser {
    let arch = Architecture {
        widths: vec![4, 8],
        embed_dim: 8,
        hidden_dim: 8,
    };
    NeuralDenoiser::random(arch, NoiseSchedule::cosine(), seed).unwrap()
}

fn gaussian(seed: u64, shape: [usize; 3]) -> GaussianPrior {
    let mut rng = stream(seed, 7);
    let mu = Tensor::randn(shape, &mut rng).map(|v| 0.3 * v);
    let tau2 = Tensor::randn(shape, &mut rng).map(|v| 0.05 + 0.2 * v.abs());
    GaussianPrior::new(mu, tau2, NoiseSchedule::cosine()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vp_identity(t in 0.0f64..=1.0) {
        let (a, s) = NoiseSchedule::cosine().alpha_sigma(TimePoint::clamped(t));
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tweedie_score_round_trip_is_ulp_close(seed in any::<u64>(), t in 0.01f64..0.99) {
        let sched = NoiseSchedule::cosine();
        let mut rng = stream(seed, 0);
        let x = Tensor::randn([2, 3, 4], &mut rng);
        let e = Tensor::randn([2, 3, 4], &mut rng);
        let t = tp(t);
        let back = sched.score_to_eps(&sched.eps_to_score(&e, t).unwrap(), t).unwrap();
        // the division by σ and multiplication back round independently
        let d = sched.tweedie(&x, &back, t).unwrap().max_abs_diff(&sched.tweedie(&x, &e, t).unwrap());
        prop_assert!(d < 1e-14, "{}", d);
    }

    #[test]
    fn operator_algebra(seed in any::<u64>()) {
        let h = MeasurementOperator::zero_reflectance();
        let mut rng = stream(seed, 0);
        let x = Tensor::randn([2, 4, 5], &mut rng);
        let z = Tensor::randn([2, 4, 5], &mut rng);
        prop_assert_eq!(h.apply(&h.apply(&x)), h.apply(&x));
        prop_assert_eq!(h.projector(&h.projector(&x)), h.projector(&x));
        prop_assert!((h.projector(&x).dot(&z) - x.dot(&h.projector(&z))).abs() < 1e-12);
        prop_assert_eq!(h.pinv_apply(&h.apply(&h.pinv_apply(&z))), h.pinv_apply(&z));
        let p = h.projector(&x);
        prop_assert_eq!(p.channel(0), x.channel(0));
        prop_assert!(p.channel(REFLECTANCE).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_tweedie_is_posterior_mean(seed in any::<u64>(), t in 0.01f64..0.99) {
        let g = gaussian(seed, [2, 2, 3]);
        let mut rng = stream(seed, 1);
        // small states keep the estimate inside the clip range
        let x = Tensor::randn([2, 2, 3], &mut rng).map(|v| 0.2 * v);
        let t = tp(t);
        let x_hat = g.schedule().tweedie(&x, &g.predict_eps(&x, t).unwrap(), t).unwrap();
        let post = g.posterior_mean(&x, t).unwrap();
        prop_assume!(post.data().iter().all(|v| v.abs() < 1.1));
        prop_assert!(x_hat.max_abs_diff(&post) < 1e-10);
    }

    #[test]
    fn masked_pixels_keep_unconditional_eps(seed in any::<u64>(), t in 0.05f64..0.95, eta in -0.5f64..0.5) {
        let model = small_net(seed % 4);
        let mut rng = stream(seed, 2);
        let x = Tensor::randn([2, 8, 16], &mut rng);
        let y = MeasurementOperator::zero_reflectance().apply(&Tensor::randn([2, 8, 16], &mut rng));
        let cfg = GuidanceConfig { eta, ..Default::default() };
        let g = masked_guidance(&x, tp(t), &y, &model, &MeasurementOperator::zero_reflectance(), &cfg).unwrap();
        let plane = x.plane();
        for i in 0..x.len() {
            if !g.mask.get(i % plane) {
                prop_assert_eq!(g.eps_cond.data()[i].to_bits(), g.eps.data()[i].to_bits());
            }
        }
        prop_assert_eq!(&g.mask, &progressive_mask(&g.x_hat, eta));
    }

    #[test]
    fn gradient_is_linear_in_scale(seed in any::<u64>(), k in 0.1f64..5.0) {
        let model = gaussian(seed, [2, 3, 4]);
        let h = MeasurementOperator::zero_reflectance();
        let mut rng = stream(seed, 3);
        let x = Tensor::randn([2, 3, 4], &mut rng);
        let y = h.apply(&Tensor::randn([2, 3, 4], &mut rng));
        let base = GuidanceConfig { guidance_scale: 1.0, ..Default::default() };
        let scaled = GuidanceConfig { guidance_scale: k, ..Default::default() };
        let g1 = pigdm_gradient(&x, tp(0.5), &y, &model, &h, &base).unwrap();
        let gk = pigdm_gradient(&x, tp(0.5), &y, &model, &h, &scaled).unwrap();
        prop_assert!(gk.max_abs_diff(&g1.scale(k)) <= 1e-12 * (1.0 + gk.norm()));
    }

    #[test]
    fn finalize_copies_observed_range(seed in any::<u64>()) {
        let mut rng = stream(seed, 4);
        let x0 = Tensor::randn([2, 3, 5], &mut rng);
        let y = Tensor::randn([2, 3, 5], &mut rng);
        let mask = progressive_mask(&Tensor::randn([2, 3, 5], &mut rng), 0.0);
        let out = finalize_with_mask(&x0, &y, &mask).unwrap();
        for i in 0..15 {
            if mask.get(i) {
                prop_assert_eq!(out.channel(0)[i], y.channel(0)[i]);
                prop_assert_eq!(out.channel(1)[i], x0.channel(1)[i]);
            } else {
                prop_assert_eq!(out.channel(0)[i], -1.0);
                prop_assert_eq!(out.channel(1)[i], -1.0);
            }
        }
    }

    #[test]
    fn sim_scans_have_zero_reflectance(seed in any::<u64>()) {
        let cfg = ToySceneConfig { domain: Domain::Sim, seed, ..Default::default() };
        let img = gen_toy_scene(&cfg, &SensorIntrinsics::default()).unwrap();
        prop_assert!(img.reflectance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_to_points_to_image_is_identity(seed in any::<u64>()) {
        let cfg = ToySceneConfig { domain: Domain::Real, seed, ..Default::default() };
        let img = gen_toy_scene(&cfg, &SensorIntrinsics::default()).unwrap();
        let back = project(&unproject(&img), &img.intrinsics);
        for i in 0..img.range.len() {
            prop_assert_eq!(img.is_drop(i), back.is_drop(i));
            if !img.is_drop(i) {
                prop_assert!((img.range[i] - back.range[i]).abs() <= 1e-9 * img.range[i]);
            }
        }
    }
}

#[test]
fn translation_is_deterministic_given_seed() {
    let model = small_net(0);
    let h = MeasurementOperator::zero_reflectance();
    let mut rng = stream(1, 0);
    let y = h.apply(&Tensor::randn([2, 8, 16], &mut rng).map(|v| v.clamp(-1.0, 1.0)));
    let cfg = SamplerConfig {
        num_steps: 6,
        resample_cycles: 1,
        seed: 9,
        record_trajectory: true,
        ..Default::default()
    };
    let a = drum_translate(&y, &model, &h, &cfg).unwrap();
    let b = drum_translate(&y, &model, &h, &cfg).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.finalized, b.finalized);
    let c = drum_translate(&y, &model, &h, &SamplerConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.x0, c.x0);
}

/// Renoising a forward-noised sample from `s` to `t` has the forward marginal at `t`.
#[test]
fn renoise_of_noised_state_has_forward_marginal() {
    let sched = NoiseSchedule::cosine();
    let (s, t) = (tp(0.3), tp(0.7));
    let x0 = Tensor::from_vec([1, 1, 2], vec![0.6, -0.4]).unwrap();
    let n = 10_000;
    let mut rng = stream(5, 0);
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let eps = Tensor::randn([1, 1, 2], &mut rng);
        let xs = sched.forward_noise(&x0, s, &eps).unwrap();
        let xt = sched.renoise(&xs, s, t, &mut rng).unwrap();
        for k in 0..2 {
            sum[k] += xt.data()[k];
            sq[k] += xt.data()[k] * xt.data()[k];
        }
    }
    let (a, sig) = sched.alpha_sigma(t);
    for k in 0..2 {
        let mean = sum[k] / n as f64;
        let var = sq[k] / n as f64 - mean * mean;
        let se_mean = sig / (n as f64).sqrt();
        let se_var = sig * sig * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - a * x0.data()[k]).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - sig * sig).abs() < 3.0 * se_var, "var {var}");
    }
}
