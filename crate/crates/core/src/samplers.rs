//! Forward noising and the three reverse processes: ancestral DDPM, strided
//! DDIM and few-step consistency sampling.
//!
//! Every sampler draws its initial noise and any fresh per-step noise from a
//! single ChaCha stream seeded by [`SamplerRun::seed`], so a run is a pure
//! function of `(model, condition, seed)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{
    consistency_predict, DenoiserModel, EpsPredictor, GaussianOracle,
};
use crate::error::{Error, Result};
use crate::schedule::{BoundaryScalings, NoiseSchedule, TimestepMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerRun {
    pub seed: u64,
    /// DDIM stochasticity; 0 is fully deterministic.
    pub eta: f64,
    pub log_trajectory: bool,
}

impl SamplerRun {
    pub fn new(seed: u64) -> Self {
        Self { seed, eta: 0.0, log_trajectory: false }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_trajectory(mut self) -> Self {
        self.log_trajectory = true;
        self
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub sample: Tensor,
    /// Number of denoiser evaluations spent.
    pub evaluations: usize,
    /// States after each reverse step, when requested.
    pub trajectory: Vec<Tensor>,
}

/// Variance of the fresh noise added by an ancestral step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AncestralVariance {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β̃_t = β_t·(1 − ᾱ_{t−1}) / (1 − ᾱ_t)`, the forward posterior variance.
    PosteriorBeta,
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One ancestral step `x_t → x_{t−1}`. `z` is ignored at `t = 1`.
pub fn ddpm_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: &Tensor,
    variance: AncestralVariance,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    let alpha = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let sigma = if t == 1 {
        0.0
    } else {
        match variance {
            AncestralVariance::Beta => schedule.beta(t).sqrt(),
            AncestralVariance::PosteriorBeta => {
                (schedule.beta(t) * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab)).sqrt()
            }
        }
    };
    let inv = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))?;
    mean.zip_map(z, |m, zv| m + sigma * zv)
}

/// One DDIM step from `t` to an earlier `t_prev` (`t_prev = 0` lands on data).
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "DDIM step must move to an earlier time, got {t} -> {t_prev}"
        )));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (inv_sqrt_ab, noise_std) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    let sqrt_ab_prev = ab_prev.sqrt();
    let mut out = x_t.zip_map(eps_hat, |x, e| {
        let x0 = (x - noise_std * e) * inv_sqrt_ab;
        sqrt_ab_prev * x0 + dir * e
    })?;
    if sigma > 0.0 {
        let z = z.ok_or_else(|| Error::Contract("stochastic DDIM step needs noise".into()))?;
        out = out.zip_map(z, |o, zv| o + sigma * zv)?;
    }
    Ok(out)
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite state at timestep {step}")))
    }
}

/// Full ancestral chain `t = T, …, 1` with `σ_t² = β_t`.
pub fn ddpm_sample(
    model: &dyn EpsPredictor,
    cond: &Tensor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    run: &SamplerRun,
) -> Result<SampleOutput> {
    ddpm_sample_with(model, cond, shape, schedule, run, AncestralVariance::Beta)
}

pub fn ddpm_sample_with(
    model: &dyn EpsPredictor,
    cond: &Tensor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    run: &SamplerRun,
    variance: AncestralVariance,
) -> Result<SampleOutput> {
    let mut rng = run.rng();
    let mut x = Tensor::randn(shape, &mut rng);
    let mut trajectory = Vec::new();
    let mut evaluations = 0;
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_eps(&x, cond, t)?;
        evaluations += 1;
        let z = if t > 1 { Tensor::randn(shape, &mut rng) } else { Tensor::zeros(shape) };
        x = ddpm_step(&x, &eps, t, &z, variance, schedule)?;
        check_finite(&x, t)?;
        if run.log_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(SampleOutput { sample: x, evaluations, trajectory })
}

/// DDIM over the sub-sequence `tau`, visited from `T` down to `tau[0]` and then to data.
pub fn ddim_sample(
    model: &dyn EpsPredictor,
    cond: &Tensor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    tau: &TimestepMap,
    run: &SamplerRun,
) -> Result<SampleOutput> {
    if *tau.boundaries().last().unwrap_or(&0) != schedule.steps() {
        return Err(Error::Config("DDIM sub-sequence must end at T".into()));
    }
    if !(0.0..=1.0).contains(&run.eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {}", run.eta)));
    }
    let mut rng = run.rng();
    let mut x = Tensor::randn(shape, &mut rng);
    let mut trajectory = Vec::new();
    let times = tau.boundaries();
    for (i, &t) in times.iter().enumerate().rev() {
        let t_prev = if i == 0 { 0 } else { times[i - 1] };
        let eps = model.predict_eps(&x, cond, t)?;
        let z = (run.eta > 0.0).then(|| Tensor::randn(shape, &mut rng));
        x = ddim_step(&x, &eps, t, t_prev, run.eta, z.as_ref(), schedule)?;
        check_finite(&x, t)?;
        if run.log_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(SampleOutput { sample: x, evaluations: times.len(), trajectory })
}

/// A map from a point on a diffusion trajectory to its clean endpoint.
pub trait ConsistencyFn {
    fn denoise(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor>;
}

/// A distilled student evaluated through [`consistency_predict`].
pub struct Student<'a> {
    pub model: &'a DenoiserModel,
    pub scalings: BoundaryScalings,
    pub schedule: &'a NoiseSchedule,
}

impl ConsistencyFn for Student<'_> {
    fn denoise(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        consistency_predict(self.model, x_t, cond, t, &self.scalings, self.schedule)
    }
}

impl ConsistencyFn for GaussianOracle {
    /// The exact deterministic (probability-flow) map for Gaussian data: it
    /// sends the standardized `x_t` to the standardized `x₀`.
    fn denoise(&self, x_t: &Tensor, _cond: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t);
        let (mean, std) = (ab.sqrt() * self.mu0, (ab * self.sigma0 * self.sigma0 + 1.0 - ab).sqrt());
        Ok(x_t.map(|x| self.mu0 + self.sigma0 * (x - mean) / std))
    }
}

/// `[T, T/2, T/5, T/20]` rounded and truncated to `steps` entries.
pub fn default_cm_times(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    if !(1..=4).contains(&steps) {
        return Err(Error::Config(format!("consistency sampling takes 1 to 4 steps, got {steps}")));
    }
    let t = schedule.steps() as f64;
    let mut times: Vec<usize> = [1.0, 2.0, 5.0, 20.0]
        .iter()
        .map(|d| ((t / d).round() as usize).max(1))
        .collect();
    times.dedup();
    times.truncate(steps);
    Ok(times)
}

/// Few-step consistency sampling: denoise from pure noise at `T`, then
/// alternately re-noise to each later entry of `step_times` and denoise again.
pub fn cm_sample(
    f: &dyn ConsistencyFn,
    cond: &Tensor,
    shape: &[usize],
    schedule: &NoiseSchedule,
    step_times: &[usize],
    run: &SamplerRun,
) -> Result<SampleOutput> {
    let Some(&first) = step_times.first() else {
        return Err(Error::Config("consistency sampling needs at least one step time".into()));
    };
    if step_times.len() > 4 {
        return Err(Error::Config(format!(
            "consistency sampling takes 1 to 4 steps, got {}",
            step_times.len()
        )));
    }
    if first != schedule.steps() {
        return Err(Error::Config(format!(
            "first step time must be T = {}, got {first}",
            schedule.steps()
        )));
    }
    if step_times.windows(2).any(|w| w[0] <= w[1]) || step_times.contains(&0) {
        return Err(Error::Config(format!(
            "step times must be strictly decreasing and positive: {step_times:?}"
        )));
    }
    let mut rng = run.rng();
    let x_t = Tensor::randn(shape, &mut rng);
    let mut x = f.denoise(&x_t, cond, first)?;
    check_finite(&x, first)?;
    let mut trajectory = Vec::new();
    if run.log_trajectory {
        trajectory.push(x.clone());
    }
    for &t in &step_times[1..] {
        let z = Tensor::randn(shape, &mut rng);
        let x_t = q_sample(&x, t, &z, schedule)?;
        x = f.denoise(&x_t, cond, t)?;
        check_finite(&x, t)?;
        if run.log_trajectory {
            trajectory.push(x.clone());
        }
    }
    Ok(SampleOutput { sample: x, evaluations: step_times.len(), trajectory })
}
