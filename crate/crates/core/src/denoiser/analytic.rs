use super::EpsPredictor;
use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Exact noise predictor for data drawn i.i.d. per element from `N(mu0, sigma0²)`.
///
/// For `x_t = √ᾱ·x₀ + √(1−ᾱ)·ε` with independent Gaussian `x₀` and `ε`, the pair
/// `(ε, x_t)` is jointly Gaussian with `Cov(ε, x_t) = √(1−ᾱ)` and
/// `Var(x_t) = ᾱσ₀² + 1 − ᾱ`, so the posterior mean is
/// `E[ε | x_t] = √(1−ᾱ)·(x_t − √ᾱ·μ₀) / (ᾱσ₀² + 1 − ᾱ)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mu0: f64,
    pub sigma0: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mu0: f64, sigma0: f64, schedule: NoiseSchedule) -> Self {
        Self { mu0, sigma0, schedule }
    }

    pub fn eps(&self, x_t: &Tensor, t: usize) -> Tensor {
        analytic_gaussian_eps(x_t, t, self.mu0, self.sigma0, &self.schedule)
    }
}

pub fn analytic_gaussian_eps(
    x_t: &Tensor,
    t: usize,
    mu0: f64,
    sigma0: f64,
    schedule: &NoiseSchedule,
) -> Tensor {
    let ab = schedule.alpha_bar(t);
    let noise_std = (1.0 - ab).sqrt();
    let mean = ab.sqrt() * mu0;
    let var = ab * sigma0 * sigma0 + 1.0 - ab;
    x_t.map(|x| noise_std * (x - mean) / var)
}

impl EpsPredictor for GaussianOracle {
    fn predict_eps(&self, x_t: &Tensor, _cond: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.eps(x_t, t))
    }
}
