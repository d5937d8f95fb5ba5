use super::DenoiserModel;
use crate::error::{shape_err, Error, Result};
use crate::schedule::{BoundaryScalings, NoiseSchedule};
use crate::tensor::{Tensor, Var};

/// Builds a full-shape tensor holding `per_item[b]` across batch item `b`.
fn per_item(shape: &[usize], per_item: &[f64]) -> Tensor {
    let stride: usize = shape[1..].iter().product();
    let data = per_item.iter().flat_map(|&v| std::iter::repeat_n(v, stride)).collect();
    Tensor::new(shape, data).expect("per-item coefficients cover the batch")
}

/// Consistency function `f_θ(x, t)`.
///
/// At `t = 0` this is the identity, returning `x` itself. For `t ≥ 1` the
/// ε-prediction is turned into a clean-image estimate
/// `x̂₀ = (x − √(1−ᾱ_t)·ε_θ) / √ᾱ_t` and blended with `x` using the boundary
/// scalings at normalized time `t/T`, with weights renormalized to sum to one,
/// then clamped to the data range `[-1, 1]`.
pub fn consistency_forward(
    model: &DenoiserModel,
    params: &[Var],
    x: &Var,
    cond: &Var,
    timesteps: &[usize],
    scalings: &BoundaryScalings,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    model.check_inputs(x.shape(), cond.shape())?;
    let n = x.shape()[0];
    let ts: Vec<usize> = match timesteps.len() {
        1 => vec![timesteps[0]; n],
        len if len == n => timesteps.to_vec(),
        len => return Err(shape_err!("{len} timesteps for a batch of {n}")),
    };
    if ts.iter().all(|&t| t == 0) {
        return Ok(x.clone());
    }
    if ts.contains(&0) {
        return Err(Error::Contract(
            "a batch may not mix the boundary time 0 with later timesteps".into(),
        ));
    }
    for &t in &ts {
        schedule.check_timestep(t)?;
    }

    let eps = model.forward_eps(params, x, cond, &ts)?;
    let mut inv_sqrt_ab = Vec::with_capacity(n);
    let mut noise_ratio = Vec::with_capacity(n);
    let mut w_skip = Vec::with_capacity(n);
    let mut w_out = Vec::with_capacity(n);
    for &t in &ts {
        let ab = schedule.alpha_bar(t);
        inv_sqrt_ab.push(1.0 / ab.sqrt());
        noise_ratio.push(-(1.0 - ab).sqrt() / ab.sqrt());
        let (c_skip, c_out) = scalings.at_timestep(t, schedule);
        w_skip.push(c_skip / (c_skip + c_out));
        w_out.push(c_out / (c_skip + c_out));
    }
    let shape = x.shape().to_vec();
    let x0_hat = x
        .mul_const(&per_item(&shape, &inv_sqrt_ab))?
        .add(&eps.mul_const(&per_item(&shape, &noise_ratio))?)?;
    let blended = x
        .mul_const(&per_item(&shape, &w_skip))?
        .add(&x0_hat.mul_const(&per_item(&shape, &w_out))?)?;
    Ok(blended.clamp(-1.0, 1.0))
}

/// Inference-only [`consistency_forward`] at a single timestep.
pub fn consistency_predict(
    model: &DenoiserModel,
    x: &Tensor,
    cond: &Tensor,
    t: usize,
    scalings: &BoundaryScalings,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let params = model.params.bind(false);
    let out = consistency_forward(
        model,
        &params,
        &Var::constant(x.clone()),
        &Var::constant(cond.clone()),
        &[t],
        scalings,
        schedule,
    )?;
    Ok(out.value().clone())
}
