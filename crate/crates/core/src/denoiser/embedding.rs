use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal timestep features, interleaved as `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]`.
///
/// Frequencies are geometric from `1` down to `10⁻⁴`, so wavelengths span
/// `[1, 10⁴]` (up to `2π`).
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 { 1.0 } else { 10f64.powf(-4.0 * i as f64 / (half - 1) as f64) };
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Stacks [`time_embedding`] rows for a batch of timesteps into `[B, dim]`.
pub fn time_embedding_batch(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        data.extend(time_embedding(t as f64, dim)?);
    }
    Tensor::new(&[timesteps.len(), dim], data)
}
