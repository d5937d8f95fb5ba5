//! Image-conditioned U-Net noise predictor, the analytic Gaussian oracle and
//! the consistency-function wrapper.
//!
//! The network sees `concat(upsample₄(lowres), noisy)` on the channel axis and
//! predicts the noise that was mixed into `noisy`. The timestep enters through
//! a sinusoidal embedding and a small MLP whose output is projected and added
//! as a per-channel bias inside every residual block.

mod analytic;
mod consistency;
mod embedding;

pub use analytic::{analytic_gaussian_eps, GaussianOracle};
pub use consistency::{consistency_forward, consistency_predict};
pub use embedding::{time_embedding, time_embedding_batch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Tensor, Var};

/// Per-axis ratio between the target resolution and the conditioning image.
pub const UPSCALE: usize = 4;

/// Anything that predicts the noise in `x_t` given the low-resolution condition.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Image channels `C`; the network input has `2·C`.
    pub channels: usize,
    pub base_channels: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { channels: 3, base_channels: 16, depth: 2, time_embed_dim: 32 }
    }
}

impl UNetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "channels, base_channels and depth must be positive: {self:?}"
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn check_image_size(&self, size: usize) -> Result<()> {
        let unit = UPSCALE.max(1 << (self.depth - 1));
        if size == 0 || size % unit != 0 || size % UPSCALE != 0 {
            return Err(Error::Config(format!(
                "image size {size} must be divisible by {UPSCALE} and by 2^(depth-1) = {}",
                1 << (self.depth - 1)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub config: UNetConfig,
    pub params: ParamSet,
}

fn conv_param(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    params.insert(format!("{name}.weight"), Tensor::uniform(&[c_out, c_in, k, k], bound, rng))?;
    params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))
}

fn linear_param(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_out: usize, d_in: usize) -> Result<()> {
    let bound = 1.0 / (d_in as f64).sqrt();
    params.insert(format!("{name}.weight"), Tensor::uniform(&[d_out, d_in], bound, rng))?;
    params.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))
}

fn res_block_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, ch: usize, embed: usize) -> Result<()> {
    conv_param(params, rng, &format!("{name}.conv1"), ch, ch, 3)?;
    linear_param(params, rng, &format!("{name}.time_proj"), ch, embed)?;
    conv_param(params, rng, &format!("{name}.conv2"), ch, ch, 3)
}

impl DenoiserModel {
    /// Builds a model with seed-deterministic fan-in uniform weights, zero
    /// biases and an all-zero output layer.
    ///
    /// Parameter order: `time.fc`, `conv_in`, then per level `down.{i}.res`
    /// (and `down.{i}.to_next` below the bottom level), then from the second
    /// deepest level upwards `up.{i}.merge` and `up.{i}.res`, then `conv_out`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let embed = config.time_embed_dim;
        linear_param(&mut p, &mut rng, "time.fc", embed, embed)?;
        conv_param(&mut p, &mut rng, "conv_in", config.level_channels(0), config.in_channels(), 3)?;
        for level in 0..config.depth {
            let ch = config.level_channels(level);
            res_block_params(&mut p, &mut rng, &format!("down.{level}.res"), ch, embed)?;
            if level + 1 < config.depth {
                conv_param(&mut p, &mut rng, &format!("down.{level}.to_next"), config.level_channels(level + 1), ch, 3)?;
            }
        }
        for level in (0..config.depth.saturating_sub(1)).rev() {
            let ch = config.level_channels(level);
            let merged = ch + config.level_channels(level + 1);
            conv_param(&mut p, &mut rng, &format!("up.{level}.merge"), ch, merged, 1)?;
            res_block_params(&mut p, &mut rng, &format!("up.{level}.res"), ch, embed)?;
        }
        p.insert("conv_out.weight", Tensor::zeros(&[config.channels, config.level_channels(0), 3, 3]))?;
        p.insert("conv_out.bias", Tensor::zeros(&[config.channels]))?;
        Ok(Self { config, params: p })
    }

    /// Re-draws the output layer with fan-in uniform weights. Useful when a
    /// non-degenerate map is needed without training.
    pub fn randomize_output_layer(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.params.get_mut("conv_out.weight").expect("conv_out.weight exists");
        let fan_in = w.shape()[1] * 9;
        *w = Tensor::uniform(w.shape(), 1.0 / (fan_in as f64).sqrt(), &mut rng);
    }

    /// Checks the pairing of a noisy batch and its low-resolution condition.
    pub fn check_inputs(&self, noisy: &[usize], cond: &[usize]) -> Result<()> {
        let (&[n, c, h, w], &[cn, cc, ch, cw]) = (noisy, cond) else {
            return Err(shape_err!("expected NCHW noisy {noisy:?} and condition {cond:?}"));
        };
        if c != self.config.channels || cc != c {
            return Err(shape_err!(
                "model expects {} channels, got noisy {noisy:?} and condition {cond:?}",
                self.config.channels
            ));
        }
        if cn != n || ch * UPSCALE != h || cw * UPSCALE != w {
            return Err(shape_err!(
                "condition {cond:?} must be 1/{UPSCALE} of noisy {noisy:?} per spatial axis"
            ));
        }
        self.config.check_image_size(h)?;
        self.config.check_image_size(w)
    }

    /// Differentiable ε-prediction through bound parameters.
    ///
    /// `timesteps` holds one entry per batch item, or a single entry shared by
    /// the whole batch.
    pub fn forward_eps(&self, params: &[Var], noisy: &Var, cond: &Var, timesteps: &[usize]) -> Result<Var> {
        self.check_inputs(noisy.shape(), cond.shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let n = noisy.shape()[0];
        let ts: Vec<usize> = match timesteps.len() {
            1 => vec![timesteps[0]; n],
            len if len == n => timesteps.to_vec(),
            len => return Err(shape_err!("{len} timesteps for a batch of {n}")),
        };
        let net = Net { model: self, params };

        let temb = Var::constant(time_embedding_batch(&ts, self.config.time_embed_dim)?);
        let temb = net.linear("time.fc", &temb)?.silu();

        let up = cond.upsample_nearest(UPSCALE)?;
        let mut h = net.conv("conv_in", &Var::concat_channels(&[&up, noisy])?, 1)?;
        let mut skips = Vec::new();
        for level in 0..self.config.depth {
            h = net.res_block(&format!("down.{level}.res"), &h, &temb)?;
            if level + 1 < self.config.depth {
                skips.push(h.clone());
                h = net.conv(&format!("down.{level}.to_next"), &h.downsample_average(2)?, 1)?;
            }
        }
        for level in (0..self.config.depth.saturating_sub(1)).rev() {
            let skip = skips.pop().expect("one skip per upper level");
            let merged = Var::concat_channels(&[&h.upsample_nearest(2)?, &skip])?;
            h = net.conv(&format!("up.{level}.merge"), &merged, 0)?;
            h = net.res_block(&format!("up.{level}.res"), &h, &temb)?;
        }
        net.conv("conv_out", &h.silu(), 1)
    }

    /// Inference-only ε-prediction.
    pub fn predict(&self, noisy: &Tensor, cond: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let params = self.params.bind(false);
        let out = self.forward_eps(
            &params,
            &Var::constant(noisy.clone()),
            &Var::constant(cond.clone()),
            timesteps,
        )?;
        Ok(out.value().clone())
    }
}

impl EpsPredictor for DenoiserModel {
    fn predict_eps(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        self.predict(x_t, cond, &[t])
    }
}

struct Net<'a> {
    model: &'a DenoiserModel,
    params: &'a [Var],
}

impl Net<'_> {
    fn param(&self, name: &str) -> &Var {
        let i = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} is part of the architecture"));
        &self.params[i]
    }

    fn conv(&self, name: &str, x: &Var, padding: usize) -> Result<Var> {
        x.conv2d(self.param(&format!("{name}.weight")), 1, padding)?
            .add_channel_bias(self.param(&format!("{name}.bias")))
    }

    fn linear(&self, name: &str, x: &Var) -> Result<Var> {
        x.linear(
            self.param(&format!("{name}.weight")),
            Some(self.param(&format!("{name}.bias"))),
        )
    }

    fn res_block(&self, name: &str, x: &Var, temb: &Var) -> Result<Var> {
        let h = self.conv(&format!("{name}.conv1"), &x.silu(), 1)?;
        let h = h.add_channel_bias(&self.linear(&format!("{name}.time_proj"), temb)?)?;
        let h = self.conv(&format!("{name}.conv2"), &h.silu(), 1)?;
        x.add(&h)
    }
}
