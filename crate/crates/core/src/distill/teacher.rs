use rand::Rng;

use super::{adam_step, check_loss, gradients, q_sample_items, step_rng, AdamMoments, HyperParams, LossRecord};
use crate::data::Dataset;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub model: DenoiserModel,
    pub moments: AdamMoments,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TeacherState {
    pub fn new(model: DenoiserModel) -> Self {
        let moments = AdamMoments::zeros_like(&model.params);
        Self { model, moments, step: 0 }
    }
}

/// Per-element mean of `‖ε − ε_θ(x_t, cond, t)‖²` with per-item timesteps.
pub fn teacher_loss(
    model: &DenoiserModel,
    params: &[Var],
    x0: &Tensor,
    cond: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let x_t = q_sample_items(x0, ts, eps, schedule)?;
    let pred = model.forward_eps(params, &Var::constant(x_t), &Var::constant(cond.clone()), ts)?;
    Ok(pred.sub(&Var::constant(eps.clone()))?.square().mean())
}

/// Runs teacher updates until `state.step == until_step`.
///
/// Each step draws a batch with replacement, a timestep per item uniformly
/// from `1..=T` and Gaussian noise, all from [`step_rng`]`(seed, step)`.
pub fn train_teacher(
    state: &mut TeacherState,
    data: &Dataset,
    schedule: &NoiseSchedule,
    hp: &HyperParams,
    until_step: u64,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("teacher training needs at least one record".into()));
    }
    let mut curve = Vec::new();
    while state.step < until_step {
        let mut rng = step_rng(seed, state.step);
        let idx: Vec<usize> = (0..hp.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let ts: Vec<usize> = (0..hp.batch_size).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let (x0, cond) = data.batch(&idx)?;
        let eps = Tensor::randn(x0.shape(), &mut rng);

        let params = state.model.params.bind(true);
        let loss = teacher_loss(&state.model, &params, &x0, &cond, &ts, &eps, schedule)?;
        let value = loss.value().item();
        check_loss(value, state.step)?;
        loss.backward()?;
        let grads = gradients(&params);
        drop(params);
        adam_step(&mut state.model.params, &grads, &mut state.moments, hp.lr, &hp.adam)?;
        state.step += 1;
        curve.push(LossRecord { step: state.step, loss: value });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageRecord;
    use crate::denoiser::UNetConfig;

    fn tiny() -> (DenoiserModel, NoiseSchedule, HyperParams) {
        let cfg = UNetConfig { channels: 3, base_channels: 4, depth: 2, time_embed_dim: 8 };
        let hp = HyperParams { batch_size: 4, image_size: 8, lr: 1e-3, ..HyperParams::default() };
        (DenoiserModel::new(cfg, 3).unwrap(), NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), hp)
    }

    fn point_mass() -> Dataset {
        let px = Tensor::new(&[3, 8, 8], (0..192).map(|i| ((i % 7) as f64 - 3.0) / 4.0).collect()).unwrap();
        Dataset::new(vec![ImageRecord::new("p", px, None).unwrap()]).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_unit_initial_loss() {
        let (model, schedule, mut hp) = tiny();
        hp.batch_size = 64;
        let mut state = TeacherState::new(model);
        let curve = train_teacher(&mut state, &point_mass(), &schedule, &hp, 1, 0).unwrap();
        // mean of 64·192 squared standard normals
        assert!((curve[0].loss - 1.0).abs() < 0.05, "{}", curve[0].loss);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical_and_resumable() {
        let (model, schedule, hp) = tiny();
        let data = point_mass();
        let mut a = TeacherState::new(model.clone());
        let ca = train_teacher(&mut a, &data, &schedule, &hp, 6, 9).unwrap();
        let mut b = TeacherState::new(model);
        let mut cb = train_teacher(&mut b, &data, &schedule, &hp, 3, 9).unwrap();
        cb.extend(train_teacher(&mut b, &data, &schedule, &hp, 6, 9).unwrap());
        assert_eq!(ca, cb);
        assert_eq!(a, b);
        assert_eq!(ca.last().unwrap().step, 6);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (model, schedule, hp) = tiny();
        let mut s = TeacherState::new(model);
        assert!(matches!(
            train_teacher(&mut s, &Dataset::default(), &schedule, &hp, 1, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let (mut model, schedule, hp) = tiny();
        model.params.get_mut("conv_out.bias").unwrap().data_mut()[0] = f64::NAN;
        let mut s = TeacherState::new(model);
        match train_teacher(&mut s, &point_mass(), &schedule, &hp, 2, 0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
