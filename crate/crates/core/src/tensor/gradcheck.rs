use super::{Tensor, Var};
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn eval_scalar(out: Result<Var>) -> Result<f64> {
    let out = out?;
    if !out.value().is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.value().item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value is {v}")));
    }
    Ok(v)
}

/// Largest relative disagreement between the reverse-mode gradient of `f` at
/// `x` and a central finite difference with the given step.
pub fn grad_check(f: impl Fn(&Var) -> Result<Var>, x: &Tensor, step: f64) -> Result<f64> {
    grad_check_params(|vars| f(&vars[0]), std::slice::from_ref(x), step, None)
}

/// Multi-argument form of [`grad_check`].
///
/// With `max_coords` set, only that many evenly spaced coordinates of each
/// argument are probed numerically; the analytic gradient is still computed
/// in full.
pub fn grad_check_params(
    f: impl Fn(&[Var]) -> Result<Var>,
    args: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let leaves: Vec<Var> = args.iter().cloned().map(Var::leaf).collect();
    let out = f(&leaves)?;
    eval_scalar(Ok(out.clone()))?;
    out.backward()?;

    let mut worst: f64 = 0.0;
    for (a, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        if !analytic.all_finite() {
            return Err(Error::Numeric(format!("non-finite analytic gradient for argument {a}")));
        }
        let n = args[a].numel();
        let probes = max_coords.map_or(n, |m| m.min(n)).max(1);
        for p in 0..probes {
            let i = p * n / probes;
            let eval_at = |delta: f64| {
                let vars: Vec<Var> = args
                    .iter()
                    .enumerate()
                    .map(|(b, t)| {
                        let mut t = t.clone();
                        if b == a {
                            t.data_mut()[i] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                eval_scalar(f(&vars))
            };
            let numeric = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
