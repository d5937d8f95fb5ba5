//! Teacher training with the ε-prediction objective and consistency
//! distillation of a student against an EMA target network.

mod adam;
mod cd;
mod teacher;

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use cd::{
    cd_loss, consistency_distance, distill, distill_steps, ema_update, teacher_ode_step, CdBatch,
    CdContext, TrainState,
};
pub use teacher::{teacher_loss, train_teacher, TeacherState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    #[default]
    Huber,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Adam learning rate.
    pub lr: f64,
    pub loss_type: LossType,
    /// Number of boundaries `N` in the distillation timestep map.
    pub boundaries: usize,
    /// Diffusion length `T`.
    pub timesteps: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub timestep_scaling: f64,
    pub huber_delta: f64,
    /// EMA rate of the target network.
    pub mu: f64,
    pub adam: AdamConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            loss_type: LossType::Huber,
            boundaries: 50,
            timesteps: 1000,
            batch_size: 12,
            image_size: 32,
            timestep_scaling: 10.0,
            huber_delta: 1.0,
            mu: 0.95,
            adam: AdamConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("timestep_scaling", self.timestep_scaling),
            ("huber_delta", self.huber_delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.batch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("batch_size and image_size must be positive".into()));
        }
        if self.boundaries < 2 || self.boundaries >= self.timesteps {
            return Err(Error::Config(format!(
                "need 2 <= N < T, got N = {} and T = {}",
                self.boundaries, self.timesteps
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// One point of a loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

/// The random stream for training step `step`. Keying by step makes a
/// resumed run draw exactly what an uninterrupted one would have.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Forward noising with a separate timestep for every batch item.
pub fn q_sample_items(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    x0.expect_same_shape(eps)?;
    let n = x0.shape().first().copied().unwrap_or(0);
    if ts.len() != n {
        return Err(shape_err!("{} timesteps for a batch of {n}", ts.len()));
    }
    let stride = if n == 0 { 0 } else { x0.numel() / n };
    let mut data = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_timestep(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * stride..(i + 1) * stride;
        data.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(x0.shape(), data)
}

fn gradients(vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect()
}

fn check_loss(loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at step {step}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::q_sample;

    #[test]
    fn defaults_validate() {
        HyperParams::default().validate().unwrap();
        let bad = HyperParams { boundaries: 1000, ..HyperParams::default() };
        assert!(bad.validate().is_err());
        let bad = HyperParams { lr: 0.0, ..HyperParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn per_item_noising_matches_single_timestep() {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = step_rng(0, 0);
        let x0 = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let eps = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let both = q_sample_items(&x0, &[10, 700], &eps, &schedule).unwrap();
        for (i, t) in [10, 700].into_iter().enumerate() {
            let one = q_sample(&x0.batch_item(i).unwrap(), t, &eps.batch_item(i).unwrap(), &schedule).unwrap();
            assert_eq!(both.batch_item(i).unwrap(), one);
        }
    }

    #[test]
    fn step_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = step_rng(1, 5).random();
        let b: u64 = step_rng(1, 5).random();
        let c: u64 = step_rng(1, 6).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
