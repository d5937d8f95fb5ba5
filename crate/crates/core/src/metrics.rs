//! PSNR, a fixed seeded feature extractor, Fréchet distance between feature
//! Gaussians, and the model-versus-baseline improvement report.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{kernels, Tensor};

/// Seed of the proxy extractor's weights. Changing it invalidates every
/// stored proxy-FID value.
pub const PROXY_SEED: u64 = 0x5eed_f1d0_c0ff_ee00;

/// Pooled feature dimension of [`ProxyExtractor`].
pub const PROXY_DIM: usize = 64;

const PROXY_CHANNELS: [usize; 4] = [3, 16, 32, PROXY_DIM];

/// `10·log10(max² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr of {:?} against {:?}", a.shape(), b.shape()));
    }
    if !(max_value > 0.0) {
        return Err(Error::Config(format!("max_value must be positive, got {max_value}")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// PSNR of two `[-1, 1]` images after mapping both to `[0, 1]`.
pub fn psnr_unit(a: &Tensor, b: &Tensor) -> Result<f64> {
    let to01 = |t: &Tensor| t.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    psnr(&to01(a), &to01(b), 1.0)
}

/// A frozen random network: three stride-2 3×3 convolutions with SiLU,
/// then global average pooling to [`PROXY_DIM`] features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl Default for ProxyExtractor {
    fn default() -> Self {
        Self::new(PROXY_SEED)
    }
}

impl ProxyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = PROXY_CHANNELS
            .windows(2)
            .map(|w| {
                let fan_in = (w[0] * 9) as f64;
                let weight = Tensor::uniform(&[w[1], w[0], 3, 3], (6.0 / fan_in).sqrt(), &mut rng);
                (weight, Tensor::zeros(&[w[1]]))
            })
            .collect();
        Self { layers }
    }

    /// Features of an `(N, 3, H, W)` batch as `N` rows.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, c, _, _) = images.dims4()?;
        if c != PROXY_CHANNELS[0] {
            return Err(shape_err!("proxy extractor expects 3 channels, got {:?}", images.shape()));
        }
        let mut h = images.clone();
        for (w, b) in &self.layers {
            h = kernels::add_channel_bias(&kernels::conv2d(&h, w, 2, 1)?, b)?;
            h = h.map(kernels::silu);
        }
        let (_, d, hh, ww) = h.dims4()?;
        let area = hh * ww;
        Ok((0..n)
            .map(|i| {
                (0..d)
                    .map(|ch| {
                        let start = (i * d + ch) * area;
                        h.data()[start..start + area].iter().sum::<f64>() / area as f64
                    })
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of feature rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "feature statistics need at least 2 samples, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape_err!("feature rows have differing lengths"));
        }
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        Ok(Self { mean, cov, count: rows.len() })
    }

    /// Statistics given directly; the covariance is checked for symmetry and
    /// positive semi-definiteness.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(shape_err!("covariance {}x{} for mean of length {d}", cov.nrows(), cov.ncols()));
        }
        if count < 2 {
            return Err(Error::InsufficientData(format!("count must be at least 2, got {count}")));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::Contract("covariance is not symmetric".into()));
        }
        if SymmetricEigen::new(cov.clone()).eigenvalues.min() < -1e-9 {
            return Err(Error::Contract("covariance is not positive semi-definite".into()));
        }
        Ok(Self { mean: DVector::from_vec(mean), cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Stacks `(3, H, W)` or `(1, 3, H, W)` images into batches of at most `chunk`.
fn batches(images: &[Tensor], chunk: usize) -> impl Iterator<Item = Result<Tensor>> + '_ {
    images.chunks(chunk).map(|group| {
        let lifted = group
            .iter()
            .map(|t| match *t.shape() {
                [c, h, w] => t.clone().reshape(&[1, c, h, w]),
                [1, _, _, _] => Ok(t.clone()),
                _ => Err(shape_err!("expected a single image, got {:?}", t.shape())),
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&lifted)
    })
}

/// Pooled-feature statistics of an image set.
pub fn feature_stats(images: &[Tensor], extractor: &ProxyExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let mut rows = Vec::with_capacity(images.len());
    for batch in batches(images, 64) {
        rows.extend(extractor.features(&batch?)?);
    }
    FeatureStats::from_features(&rows)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, clamped at zero.
///
/// The trace of the square root is taken as that of
/// `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`, which shares its eigenvalues and is symmetric.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(shape_err!("feature dimensions differ: {} vs {}", s1.dim(), s2.dim()));
    }
    let diff = (&s1.mean - &s2.mean).norm_squared();
    let root1 = psd_sqrt(&s1.cov);
    let inner = &root1 * &s2.cov * &root1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff + s1.cov.trace() + s2.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance evaluated to {d}")));
    }
    Ok(d.max(0.0))
}

/// Proxy-FID between two image sets.
pub fn proxy_fid(a: &[Tensor], b: &[Tensor], extractor: &ProxyExtractor) -> Result<f64> {
    frechet_distance(&feature_stats(a, extractor)?, &feature_stats(b, extractor)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub index: usize,
    /// `None` stands for an exact reconstruction (infinite PSNR).
    pub psnr_model: Option<f64>,
    pub psnr_baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub images: Vec<ImageScore>,
    pub mean_psnr_model: f64,
    pub mean_psnr_baseline: f64,
    /// Fraction of images where the model beats the baseline by more than 3 dB.
    pub gain_over_3db_fraction: f64,
    /// Fraction of images where the model PSNR is at least the baseline's.
    pub model_not_worse_fraction: f64,
    pub proxy_fid_model: f64,
    pub proxy_fid_baseline: f64,
    /// Images per set behind each proxy-FID value.
    pub fid_samples: usize,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn gain(model: f64, baseline: f64) -> f64 {
    if model == baseline {
        0.0
    } else {
        model - baseline
    }
}

/// Scores model outputs and a baseline against aligned references.
pub fn improvement_report(
    reference: &[Tensor],
    upscaled: &[Tensor],
    baseline: &[Tensor],
    extractor: &ProxyExtractor,
) -> Result<MetricReport> {
    if reference.len() != upscaled.len() || reference.len() != baseline.len() {
        return Err(shape_err!(
            "report needs aligned sets, got {} references, {} outputs, {} baselines",
            reference.len(),
            upscaled.len(),
            baseline.len()
        ));
    }
    let count = reference.len();
    let mut images = Vec::with_capacity(count);
    let (mut over3, mut not_worse) = (0usize, 0usize);
    let (mut sum_m, mut sum_b) = (0.0, 0.0);
    for (i, ((r, m), b)) in reference.iter().zip(upscaled).zip(baseline).enumerate() {
        let pm = psnr_unit(m, r)?;
        let pb = psnr_unit(b, r)?;
        let g = gain(pm, pb);
        over3 += usize::from(g > 3.0);
        not_worse += usize::from(g >= 0.0);
        sum_m += pm;
        sum_b += pb;
        images.push(ImageScore { index: i, psnr_model: finite_or_none(pm), psnr_baseline: finite_or_none(pb) });
    }
    let n = count.max(1) as f64;
    Ok(MetricReport {
        count,
        images,
        mean_psnr_model: sum_m / n,
        mean_psnr_baseline: sum_b / n,
        gain_over_3db_fraction: over3 as f64 / n,
        model_not_worse_fraction: not_worse as f64 / n,
        proxy_fid_model: proxy_fid(upscaled, reference, extractor)?,
        proxy_fid_baseline: proxy_fid(baseline, reference, extractor)?,
        fid_samples: count,
    })
}

impl MetricReport {
    pub fn summary_table(&self) -> String {
        let row = |name: &str, value: String| format!("{name:<34}{value:>14}\n");
        let mut s = String::new();
        s += &row("images", self.count.to_string());
        s += &row("mean PSNR model (dB)", format!("{:.3}", self.mean_psnr_model));
        s += &row("mean PSNR baseline (dB)", format!("{:.3}", self.mean_psnr_baseline));
        s += &row("gain > 3 dB fraction", format!("{:.3}", self.gain_over_3db_fraction));
        s += &row("model >= baseline fraction", format!("{:.3}", self.model_not_worse_fraction));
        s += &row("proxy-FID model", format!("{:.5}", self.proxy_fid_model));
        s += &row("proxy-FID baseline", format!("{:.5}", self.proxy_fid_baseline));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats::new(vec![mean], DMatrix::from_element(1, 1, var), 10).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::zeros(&[4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor::full(&[4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let c = Tensor::full(&[4], 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-12);
        assert!(matches!(psnr(&a, &Tensor::zeros(&[5]), 1.0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn frechet_closed_forms_in_one_dimension() {
        assert!((frechet_distance(&one_d(0.0, 1.0), &one_d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-8);
        assert!((frechet_distance(&one_d(0.0, 1.0), &one_d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
        let s = one_d(0.3, 2.0);
        assert!(frechet_distance(&s, &s).unwrap() < 1e-8);
    }

    #[test]
    fn stats_need_two_samples_and_matching_dimension() {
        assert!(matches!(FeatureStats::from_features(&[vec![1.0]]), Err(Error::InsufficientData(_))));
        let two = FeatureStats::from_features(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert!(matches!(frechet_distance(&two, &one_d(0.0, 1.0)), Err(Error::InvalidShape(_))));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(FeatureStats::new(vec![0.0, 0.0], bad, 3).is_err());
    }

    #[test]
    fn extractor_is_seeded_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform(&[2, 3, 32, 32], 1.0, &mut rng);
        let f = ProxyExtractor::default().features(&img).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].len(), PROXY_DIM);
        assert_eq!(ProxyExtractor::default(), ProxyExtractor::new(PROXY_SEED));
        assert_ne!(ProxyExtractor::new(1), ProxyExtractor::default());
    }

    #[test]
    fn duplicates_and_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = ProxyExtractor::default();
        let one = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let same = feature_stats(&vec![one.clone(); 5], &ex).unwrap();
        assert!(same.cov.amax() < 1e-20);

        let set: Vec<Tensor> = (0..6).map(|_| Tensor::uniform(&[3, 16, 16], 1.0, &mut rng)).collect();
        let a = feature_stats(&set, &ex).unwrap();
        let mut rev = set.clone();
        rev.reverse();
        let b = feature_stats(&rev, &ex).unwrap();
        assert!((&a.mean - &b.mean).amax() < 1e-12);
        assert!((&a.cov - &b.cov).amax() < 1e-12);
        let doubled: Vec<Tensor> = set.iter().chain(&set).cloned().collect();
        let c = feature_stats(&doubled, &ex).unwrap();
        assert!((&a.mean - &c.mean).amax() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn report_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = ProxyExtractor::default();
        let refs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[3, 8, 8], 1.0, &mut rng)).collect();
        let base: Vec<Tensor> = refs.iter().map(|t| t.map(|v| v * 0.5)).collect();

        let perfect = improvement_report(&refs, &refs, &base, &ex).unwrap();
        assert!(perfect.proxy_fid_model < 1e-8);
        assert_eq!(perfect.gain_over_3db_fraction, 1.0);
        assert!(perfect.images.iter().all(|s| s.psnr_model.is_none()));

        let same = improvement_report(&refs, &base, &base, &ex).unwrap();
        assert_eq!(same.gain_over_3db_fraction, 0.0);
        assert_eq!(same.model_not_worse_fraction, 1.0);
        assert!(same.proxy_fid_model.is_finite());
        assert!(serde_json::to_string(&same).is_ok());
        assert!(same.summary_table().contains("proxy-FID"));

        assert!(improvement_report(&refs, &refs[..3], &base, &ex).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform(&[3, 16, 16], 0.5, &mut rng);
        let z = Tensor::randn(&[3, 16, 16], &mut rng);
        let mut last = f64::INFINITY;
        for s in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = img.zip_map(&z, |a, b| a + s * b).unwrap();
            let p = psnr(&img, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn frechet_is_symmetric(
            m in proptest::collection::vec(-2.0f64..2.0, 6),
            a in proptest::collection::vec(-1.0f64..1.0, 9),
            b in proptest::collection::vec(-1.0f64..1.0, 9),
        ) {
            let spd = |v: &[f64]| {
                let l = DMatrix::from_row_slice(3, 3, v);
                &l * l.transpose() + DMatrix::identity(3, 3) * 1e-3
            };
            let s1 = FeatureStats::new(m[..3].to_vec(), spd(&a), 5).unwrap();
            let s2 = FeatureStats::new(m[3..].to_vec(), spd(&b), 5).unwrap();
            let d12 = frechet_distance(&s1, &s2).unwrap();
            let d21 = frechet_distance(&s2, &s1).unwrap();
            prop_assert!((d12 - d21).abs() < 1e-8 * d12.max(1.0));
            prop_assert!(d12 >= 0.0);
        }
    }
}
