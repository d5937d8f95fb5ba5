use cmsr_core::denoiser::{consistency_predict, DenoiserModel, GaussianOracle, UNetConfig};
use cmsr_core::samplers::{cm_sample, ddim_sample, ddpm_sample, default_cm_times, q_sample, SamplerRun};
use cmsr_core::schedule::{BoundaryScalings, NoiseSchedule, TimestepMap};
use cmsr_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn moments(t: &Tensor) -> (f64, f64) {
    let m = t.mean();
    let v = t.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (t.numel() - 1) as f64;
    (m, v.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_marginal_moments(t in 1usize..=1000, x in -1.0f64..1.0, seed in any::<u64>()) {
        let s = schedule();
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Tensor::randn(&[n], &mut rng);
        let xt = q_sample(&Tensor::full(&[n], x), t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        let (m, sd) = moments(&xt);
        let want_sd = (1.0 - ab).sqrt();
        // six standard errors of the sample mean and deviation
        prop_assert!((m - ab.sqrt() * x).abs() < 6.0 * want_sd / (n as f64).sqrt());
        prop_assert!((sd - want_sd).abs() < 6.0 * want_sd / (2.0 * n as f64).sqrt());
    }

    #[test]
    fn even_maps_increase_and_end_at_t(count in 1usize..=1000) {
        let s = schedule();
        let map = TimestepMap::even(&s, count).unwrap();
        prop_assert_eq!(map.len(), count);
        prop_assert!(map.boundaries().windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*map.boundaries().last().unwrap(), 1000);
        prop_assert!(map.boundaries()[0] >= 1);
    }

    #[test]
    fn strided_maps_visit_every_stride(stride in 1usize..=1000) {
        let s = schedule();
        let map = TimestepMap::strided(&s, stride).unwrap();
        prop_assert_eq!(*map.boundaries().last().unwrap(), 1000);
        prop_assert_eq!(map.len(), 1000usize.div_ceil(stride));
    }

    #[test]
    fn alpha_bar_strictly_decreasing(lo in 1e-5f64..1e-3, hi in 2e-3f64..0.05, steps in 2usize..2000) {
        let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn consistency_function_is_identity_at_zero(model_seed in any::<u64>(), seed in any::<u64>(), scale in 0.1f64..4.0) {
        let s = schedule();
        let cfg = UNetConfig { channels: 3, base_channels: 4, depth: 2, time_embed_dim: 8 };
        let mut model = DenoiserModel::new(cfg, model_seed).unwrap();
        model.randomize_output_layer(model_seed ^ 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 3, 8, 8], &mut rng).map(|v| scale * v);
        let cond = Tensor::randn(&[2, 3, 2, 2], &mut rng);
        let out = consistency_predict(&model, &x, &cond, 0, &BoundaryScalings::default(), &s).unwrap();
        prop_assert_eq!(out, x);
    }
}

#[test]
fn oracle_ddpm_and_ddim_recover_data_moments() {
    let s = schedule();
    let oracle = GaussianOracle::new(0.3, 0.2, s.clone());
    let cond = Tensor::zeros(&[1]);
    let ddpm = ddpm_sample(&oracle, &cond, &[4000], &s, &SamplerRun::new(11)).unwrap();
    let tau = TimestepMap::even(&s, 50).unwrap();
    let ddim = ddim_sample(&oracle, &cond, &[4000], &s, &tau, &SamplerRun::new(12)).unwrap();
    for (name, out) in [("ddpm", &ddpm), ("ddim", &ddim)] {
        let (m, sd) = moments(&out.sample);
        assert!((m - 0.3).abs() < 0.02, "{name} mean {m}");
        assert!((sd / 0.2 - 1.0).abs() < 0.15, "{name} std {sd}");
    }
    assert_eq!((ddpm.evaluations, ddim.evaluations), (1000, 50));
}

#[test]
fn stochastic_ddim_also_recovers_moments() {
    let s = schedule();
    let oracle = GaussianOracle::new(-0.2, 0.3, s.clone());
    let tau = TimestepMap::strided(&s, 10).unwrap();
    let out = ddim_sample(&oracle, &Tensor::zeros(&[1]), &[4000], &s, &tau, &SamplerRun::new(2).with_eta(1.0)).unwrap();
    let (m, sd) = moments(&out.sample);
    assert!((m + 0.2).abs() < 0.02, "{m}");
    assert!((sd / 0.3 - 1.0).abs() < 0.15, "{sd}");
}

#[test]
fn sampler_runs_depend_only_on_seed() {
    let s = schedule();
    let oracle = GaussianOracle::new(0.0, 0.5, s.clone());
    let cond = Tensor::zeros(&[1]);
    let times = default_cm_times(&s, 4).unwrap();
    let a = cm_sample(&oracle, &cond, &[64], &s, &times, &SamplerRun::new(1)).unwrap();
    let b = cm_sample(&oracle, &cond, &[64], &s, &times, &SamplerRun::new(1)).unwrap();
    let c = cm_sample(&oracle, &cond, &[64], &s, &times, &SamplerRun::new(2)).unwrap();
    assert_eq!(a.sample, b.sample);
    assert_ne!(a.sample, c.sample);
}
