use rand::Rng;

use super::{
    adam_step, check_loss, gradients, q_sample_items, step_rng, AdamMoments, HyperParams, LossRecord, LossType,
};
use crate::data::Dataset;
use crate::denoiser::{consistency_forward, DenoiserModel, EpsPredictor};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::samplers::ddim_step;
use crate::schedule::{BoundaryScalings, NoiseSchedule, TimestepMap};
use crate::tensor::{Tensor, Var};

/// Student parameters, their EMA target and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ParamSet,
    pub theta_minus: ParamSet,
    pub moments: AdamMoments,
    /// Completed optimizer steps.
    pub step: u64,
    pub mu: f64,
    pub lr: f64,
}

impl TrainState {
    /// Student and target both start as copies of the teacher.
    pub fn from_teacher(teacher: &DenoiserModel, hp: &HyperParams) -> Self {
        Self {
            theta: teacher.params.clone(),
            theta_minus: teacher.params.clone(),
            moments: AdamMoments::zeros_like(&teacher.params),
            step: 0,
            mu: hp.mu,
            lr: hp.lr,
        }
    }

    /// The student as a standalone model with the teacher's architecture.
    pub fn student(&self, teacher: &DenoiserModel) -> DenoiserModel {
        DenoiserModel { config: teacher.config, params: self.theta.clone() }
    }
}

/// One deterministic DDIM step `t_next → t_cur` driven by the teacher.
pub fn teacher_ode_step(
    teacher: &dyn EpsPredictor,
    x_next: &Tensor,
    t_next: usize,
    t_cur: usize,
    cond: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_cur >= t_next {
        return Err(Error::Contract(format!("solver step must go to an earlier time, got {t_next} -> {t_cur}")));
    }
    let eps = teacher.predict_eps(x_next, cond, t_next)?;
    ddim_step(x_next, &eps, t_next, t_cur, 0.0, None, schedule)
}

fn teacher_ode_step_items(
    teacher: &DenoiserModel,
    x_next: &Tensor,
    t_next: &[usize],
    t_cur: &[usize],
    cond: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let eps = teacher.predict(x_next, cond, t_next)?;
    let items = (0..t_next.len())
        .map(|i| {
            if t_cur[i] >= t_next[i] {
                return Err(Error::Contract(format!(
                    "solver step must go to an earlier time, got {} -> {}",
                    t_next[i], t_cur[i]
                )));
            }
            ddim_step(&x_next.batch_item(i)?, &eps.batch_item(i)?, t_next[i], t_cur[i], 0.0, None, schedule)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

/// `d(pred, target)` averaged over elements: Huber with the given delta, or squared error.
pub fn consistency_distance(pred: &Var, target: &Var, loss: LossType, delta: f64) -> Result<Var> {
    let r = pred.sub(target)?;
    Ok(match loss {
        LossType::Huber => r.huber(delta).mean(),
        LossType::Mse => r.square().mean(),
    })
}

/// Everything fixed across distillation steps.
#[derive(Clone, Copy)]
pub struct CdContext<'a> {
    /// Frozen teacher; its architecture is shared by student and target.
    pub teacher: &'a DenoiserModel,
    pub map: &'a TimestepMap,
    pub schedule: &'a NoiseSchedule,
    pub scalings: &'a BoundaryScalings,
    pub hp: &'a HyperParams,
}

/// One batch of distillation inputs. `n[i]` is a 1-based map index in `1..N`.
pub struct CdBatch<'a> {
    pub x0: &'a Tensor,
    pub cond: &'a Tensor,
    pub n: &'a [usize],
    pub eps: &'a Tensor,
}

/// Consistency distillation loss
/// `d(f_θ(x_{t_{n+1}}, t_{n+1}), f_{θ⁻}(x̃_{t_n}, t_n))` with `x̃_{t_n}` one
/// teacher solver step from `x_{t_{n+1}}`.
///
/// `theta_minus` is detached before use, so no gradient ever reaches it.
pub fn cd_loss(ctx: &CdContext, theta: &[Var], theta_minus: &[Var], batch: &CdBatch) -> Result<Var> {
    let nmax = ctx.map.len();
    let items = batch.x0.shape().first().copied().unwrap_or(0);
    if batch.n.len() != items {
        return Err(shape_err!("{} map indices for a batch of {items}", batch.n.len()));
    }
    if let Some(&bad) = batch.n.iter().find(|&&n| n == 0 || n >= nmax) {
        return Err(Error::Contract(format!("map index must lie in 1..{nmax}, got {bad}")));
    }
    let t_hi: Vec<usize> = batch.n.iter().map(|&n| ctx.map.at(n + 1)).collect();
    let t_lo: Vec<usize> = batch.n.iter().map(|&n| ctx.map.at(n)).collect();
    let x_hi = q_sample_items(batch.x0, &t_hi, batch.eps, ctx.schedule)?;
    let x_lo = teacher_ode_step_items(ctx.teacher, &x_hi, &t_hi, &t_lo, batch.cond, ctx.schedule)?;

    let cond = Var::constant(batch.cond.clone());
    let frozen: Vec<Var> = theta_minus.iter().map(Var::detach).collect();
    let target = consistency_forward(
        ctx.teacher,
        &frozen,
        &Var::constant(x_lo),
        &cond,
        &t_lo,
        ctx.scalings,
        ctx.schedule,
    )?
    .detach();
    let pred = consistency_forward(
        ctx.teacher,
        theta,
        &Var::constant(x_hi),
        &cond,
        &t_hi,
        ctx.scalings,
        ctx.schedule,
    )?;
    consistency_distance(&pred, &target, ctx.hp.loss_type, ctx.hp.huber_delta)
}

/// `θ⁻ ← μ·θ⁻ + (1 − μ)·θ`.
pub fn ema_update(state: &mut TrainState) -> Result<()> {
    state.theta_minus.check_layout(&state.theta)?;
    let mu = state.mu;
    for (target, online) in state.theta_minus.tensors_mut().zip(state.theta.tensors()) {
        for (a, &b) in target.data_mut().iter_mut().zip(online.data()) {
            *a = mu * *a + (1.0 - mu) * b;
        }
    }
    Ok(())
}

/// Runs distillation steps until `state.step == until_step`: sample a batch,
/// a map index per item and noise from [`step_rng`]`(seed, step)`, take an
/// Adam step on θ, then move θ⁻ towards θ.
pub fn distill_steps(
    state: &mut TrainState,
    ctx: &CdContext,
    data: &Dataset,
    until_step: u64,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    ctx.hp.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("distillation needs at least one record".into()));
    }
    state.theta.check_layout(&ctx.teacher.params)?;
    let b = ctx.hp.batch_size;
    let mut curve = Vec::new();
    while state.step < until_step {
        let mut rng = step_rng(seed, state.step);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let n: Vec<usize> = (0..b).map(|_| rng.random_range(1..ctx.map.len())).collect();
        let (x0, cond) = data.batch(&idx)?;
        let eps = Tensor::randn(x0.shape(), &mut rng);

        let theta = state.theta.bind(true);
        let theta_minus = state.theta_minus.bind(false);
        let batch = CdBatch { x0: &x0, cond: &cond, n: &n, eps: &eps };
        let loss = cd_loss(ctx, &theta, &theta_minus, &batch)?;
        let value = loss.value().item();
        check_loss(value, state.step)?;
        loss.backward()?;
        let grads = gradients(&theta);
        drop(theta);
        adam_step(&mut state.theta, &grads, &mut state.moments, state.lr, &ctx.hp.adam)?;
        ema_update(state)?;
        state.step += 1;
        curve.push(LossRecord { step: state.step, loss: value });
    }
    Ok(curve)
}

/// Fresh distillation from the teacher for `steps` steps.
pub fn distill(ctx: &CdContext, data: &Dataset, steps: u64, seed: u64) -> Result<(TrainState, Vec<LossRecord>)> {
    let mut state = TrainState::from_teacher(ctx.teacher, ctx.hp);
    let curve = distill_steps(&mut state, ctx, data, steps, seed)?;
    Ok((state, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianOracle, UNetConfig};
    use crate::samplers::{ddim_sample, SamplerRun};
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        teacher: DenoiserModel,
        map: TimestepMap,
        schedule: NoiseSchedule,
        scalings: BoundaryScalings,
        hp: HyperParams,
    }

    impl Fixture {
        fn new() -> Self {
            let cfg = UNetConfig { channels: 3, base_channels: 4, depth: 2, time_embed_dim: 8 };
            let mut teacher = DenoiserModel::new(cfg, 5).unwrap();
            teacher.randomize_output_layer(6);
            let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
            let map = TimestepMap::even(&schedule, 50).unwrap();
            let hp = HyperParams { batch_size: 2, image_size: 8, ..HyperParams::default() };
            Self { teacher, map, schedule, scalings: BoundaryScalings::default(), hp }
        }

        fn ctx(&self) -> CdContext<'_> {
            CdContext {
                teacher: &self.teacher,
                map: &self.map,
                schedule: &self.schedule,
                scalings: &self.scalings,
                hp: &self.hp,
            }
        }
    }

    fn inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::uniform(&[2, 3, 8, 8], 0.9, &mut rng);
        let cond = Tensor::uniform(&[2, 3, 2, 2], 0.9, &mut rng);
        let eps = Tensor::randn(&[2, 3, 8, 8], &mut rng);
        (x0, cond, eps)
    }

    #[test]
    fn ema_update_formula() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut state = TrainState {
            theta: p.clone(),
            theta_minus: p.clone(),
            moments: AdamMoments::zeros_like(&p),
            step: 0,
            mu: 0.95,
            lr: 1.0,
        };
        state.theta.get_mut("w").unwrap().data_mut()[0] = 1.0;
        ema_update(&mut state).unwrap();
        assert!((state.theta_minus.get("w").unwrap().item() - 0.05).abs() < 1e-15);

        state.mu = 1.0;
        ema_update(&mut state).unwrap();
        assert!((state.theta_minus.get("w").unwrap().item() - 0.05).abs() < 1e-15);

        state.mu = 0.0;
        ema_update(&mut state).unwrap();
        assert_eq!(state.theta_minus, state.theta);
    }

    #[test]
    fn degenerate_solver_pair_rejected() {
        let f = Fixture::new();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let c = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(
            teacher_ode_step(&f.teacher, &x, 40, 40, &c, &f.schedule),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn solver_steps_compose_into_ddim() {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let oracle = GaussianOracle::new(0.3, 0.2, schedule.clone());
        let map = TimestepMap::even(&schedule, 50).unwrap();
        let cond = Tensor::zeros(&[1, 1]);
        let run = SamplerRun::new(12);
        let reference = ddim_sample(&oracle, &cond, &[64], &schedule, &map, &run).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut x = Tensor::randn(&[64], &mut rng);
        let times = map.boundaries();
        for i in (0..times.len()).rev() {
            let t_cur = if i == 0 { 0 } else { times[i - 1] };
            x = teacher_ode_step(&oracle, &x, times[i], t_cur, &cond, &schedule).unwrap();
            assert!(x.all_finite());
        }
        assert_eq!(x, reference.sample);
    }

    #[test]
    fn identical_branches_give_zero_distance() {
        let f = Fixture::new();
        let (x0, cond, _) = inputs(1);
        let p = f.teacher.params.bind(true);
        let frozen = f.teacher.params.bind(false);
        let (x, c) = (Var::constant(x0), Var::constant(cond));
        let a = consistency_forward(&f.teacher, &p, &x, &c, &[300], &f.scalings, &f.schedule).unwrap();
        let b = consistency_forward(&f.teacher, &frozen, &x, &c, &[300], &f.scalings, &f.schedule).unwrap();
        let d = consistency_distance(&a, &b, LossType::Huber, 1.0).unwrap();
        assert_eq!(d.value().item(), 0.0);
    }

    #[test]
    fn map_index_range_enforced() {
        let f = Fixture::new();
        let (x0, cond, eps) = inputs(2);
        let p = f.teacher.params.bind(true);
        for n in [[0, 1], [1, 50]] {
            let batch = CdBatch { x0: &x0, cond: &cond, n: &n, eps: &eps };
            assert!(matches!(cd_loss(&f.ctx(), &p, &p, &batch), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn target_branch_receives_no_gradient() {
        let f = Fixture::new();
        let (x0, cond, eps) = inputs(3);
        let theta = f.teacher.params.bind(true);
        let theta_minus = f.teacher.params.bind(true);
        let batch = CdBatch { x0: &x0, cond: &cond, n: &[10, 30], eps: &eps };
        let loss = cd_loss(&f.ctx(), &theta, &theta_minus, &batch).unwrap();
        loss.backward().unwrap();
        assert!(theta_minus.iter().all(|v| v.grad().is_none()));
        assert!(theta.iter().any(|v| v.grad().is_some_and(|g| g.data().iter().any(|&x| x != 0.0))));
    }

    #[test]
    fn perturbing_the_target_changes_the_value() {
        let f = Fixture::new();
        let (x0, cond, eps) = inputs(4);
        let theta = f.teacher.params.bind(false);
        let mut shifted = f.teacher.params.clone();
        shifted.get_mut("conv_out.bias").unwrap().data_mut()[0] += 0.3;
        let batch = CdBatch { x0: &x0, cond: &cond, n: &[20, 20], eps: &eps };
        let a = cd_loss(&f.ctx(), &theta, &f.teacher.params.bind(false), &batch).unwrap();
        let b = cd_loss(&f.ctx(), &theta, &shifted.bind(false), &batch).unwrap();
        assert_ne!(a.value().item(), b.value().item());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut f = Fixture::new();
        f.hp.loss_type = LossType::Huber;
        let (x0, cond, eps) = inputs(5);
        let mut target = f.teacher.params.clone();
        for t in target.tensors_mut() {
            *t = t.map(|v| v * 0.9);
        }
        let frozen = target.bind(false);
        let ctx = f.ctx();
        let args: Vec<Tensor> = f.teacher.params.tensors().cloned().collect();
        let err = grad_check_params(
            |theta| {
                let batch = CdBatch { x0: &x0, cond: &cond, n: &[5, 40], eps: &eps };
                cd_loss(&ctx, theta, &frozen, &batch)
            },
            &args,
            1e-6,
            Some(4),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn distill_is_reproducible_and_starts_at_teacher() {
        let f = Fixture::new();
        let records = crate::data::synth_textures(2, 8, 4, 1).unwrap();
        let data = Dataset::new(records).unwrap();
        let (a, ca) = distill(&f.ctx(), &data, 3, 7).unwrap();
        let (b, cb) = distill(&f.ctx(), &data, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(a.step, 3);
        assert_ne!(a.theta, f.teacher.params);

        let mut resumed = TrainState::from_teacher(&f.teacher, &f.hp);
        let mut cr = distill_steps(&mut resumed, &f.ctx(), &data, 1, 7).unwrap();
        cr.extend(distill_steps(&mut resumed, &f.ctx(), &data, 3, 7).unwrap());
        assert_eq!(cr, ca);
        assert_eq!(resumed, a);
    }
}
