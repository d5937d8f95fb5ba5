use cmsr_core::metrics::{frechet_distance, proxy_fid, psnr, FeatureStats, ProxyExtractor};
use cmsr_core::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Tensor::uniform(&[3, 8, 8], 1.0, &mut rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_dimensional_frechet_closed_form(m1 in -5.0f64..5.0, m2 in -5.0f64..5.0, s1 in 0.01f64..3.0, s2 in 0.01f64..3.0) {
        let a = FeatureStats::new(vec![m1], DMatrix::from_element(1, 1, s1 * s1), 2).unwrap();
        let b = FeatureStats::new(vec![m2], DMatrix::from_element(1, 1, s2 * s2), 2).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        prop_assert!((d - want).abs() <= 1e-9 * want.max(1.0), "{} vs {}", d, want);
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_error(seed in any::<u64>(), k in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let noise = Tensor::randn(&[3, 4, 4], &mut rng);
        let b = a.zip_map(&noise, |x, n| x + k * n).unwrap();
        let c = a.zip_map(&noise, |x, n| x + 2.0 * k * n).unwrap();
        let p = psnr(&a, &b, 2.0).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, 2.0).unwrap());
        prop_assert!(psnr(&a, &c, 2.0).unwrap() < p);
    }
}

#[test]
fn identical_sets_have_zero_distance() {
    let ex = ProxyExtractor::default();
    let x = images(40, 1);
    assert!(proxy_fid(&x, &x, &ex).unwrap().abs() < 1e-8);
    let y = images(40, 2);
    let d = proxy_fid(&x, &y, &ex).unwrap();
    assert!(d > 0.0 && (d - proxy_fid(&y, &x, &ex).unwrap()).abs() < 1e-8 * d.max(1.0));
}

#[test]
fn distance_grows_with_added_noise() {
    let ex = ProxyExtractor::default();
    let clean = images(200, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut last = 0.0;
    for sigma in [0.05, 0.1, 0.2, 0.4] {
        let noisy: Vec<Tensor> = clean
            .iter()
            .map(|x| x.zip_map(&Tensor::randn(x.shape(), &mut rng), |v, n| v + sigma * n).unwrap())
            .collect();
        let d = proxy_fid(&clean, &noisy, &ex).unwrap();
        assert!(d > last, "sigma {sigma}: {d} <= {last}");
        last = d;
    }
}
