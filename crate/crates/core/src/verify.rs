//! Finite-difference verification of every differentiable primitive and of
//! the full denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{consistency_forward, DenoiserModel, UNetConfig};
use crate::error::Result;
use crate::schedule::{BoundaryScalings, NoiseSchedule};
use crate::tensor::{grad_check_params, Tensor, Var};

/// Relative-error threshold for a passing check.
pub const GRAD_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_relative_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_TOLERANCE
    }
}

/// Contracts an arbitrary output with fixed random weights so the check
/// exercises every output coordinate.
fn probe(out: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(out.shape(), &mut rng);
    Ok(out.mul_const(&w)?.sum())
}

/// Inputs kept at least `margin` away from `kinks`, where a few primitives
/// are not differentiable.
fn away_from(shape: &[usize], kinks: &[f64], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng).map(|v| {
        let mut v = 1.5 * v;
        for &k in kinks {
            if (v - k).abs() < margin {
                v = k + if v >= k { margin } else { -margin };
            }
        }
        v
    })
}

type Check = (&'static str, Vec<Tensor>, Box<dyn Fn(&[Var]) -> Result<Var>>);

fn primitive_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_6164);
    let mut r = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    let a = r(&[2, 3, 4, 4]);
    let b = r(&[2, 3, 4, 4]);
    let c = r(&[2, 3, 4, 4]);
    let img = r(&[2, 3, 6, 6]);
    let k3 = r(&[4, 3, 3, 3]);
    let k1 = r(&[2, 3, 1, 1]);
    let bias = r(&[3]);
    let nbias = r(&[2, 3]);
    let x = r(&[3, 5]);
    let w = r(&[4, 5]);
    let lb = r(&[4]);
    let low = r(&[2, 3, 2, 2]);
    let mut krng = ChaCha8Rng::seed_from_u64(0x6b69_6e6b);
    let huber_in = away_from(&[2, 3, 4, 4], &[-1.0, 1.0], 0.05, &mut krng);
    let clamp_in = away_from(&[2, 3, 4, 4], &[-1.0, 1.0], 0.05, &mut krng);

    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|v: &[Var]| probe(&v[0].add(&v[1])?, 1))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|v: &[Var]| probe(&v[0].sub(&v[1])?, 2))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|v: &[Var]| probe(&v[0].mul(&v[1])?, 3))),
        ("scale", vec![a.clone()], Box::new(|v: &[Var]| probe(&v[0].scale(-1.7), 4))),
        ("add_scalar", vec![a.clone()], Box::new(|v: &[Var]| probe(&v[0].add_scalar(0.3), 5))),
        ("mul_const", vec![a.clone()], Box::new(move |v: &[Var]| probe(&v[0].mul_const(&c)?, 6))),
        ("silu", vec![a.clone()], Box::new(|v: &[Var]| probe(&v[0].silu(), 7))),
        ("huber", vec![huber_in], Box::new(|v: &[Var]| probe(&v[0].huber(1.0), 8))),
        ("square", vec![a.clone()], Box::new(|v: &[Var]| probe(&v[0].square(), 9))),
        ("clamp", vec![clamp_in], Box::new(|v: &[Var]| probe(&v[0].clamp(-1.0, 1.0), 10))),
        ("sum", vec![a.clone()], Box::new(|v: &[Var]| Ok(v[0].square().sum()))),
        ("mean", vec![a.clone()], Box::new(|v: &[Var]| Ok(v[0].square().mean()))),
        (
            "concat_channels",
            vec![a.clone(), b.clone()],
            Box::new(|v: &[Var]| probe(&Var::concat_channels(&[&v[0], &v[1]])?, 11)),
        ),
        ("upsample_nearest", vec![low], Box::new(|v: &[Var]| probe(&v[0].upsample_nearest(2)?, 12))),
        ("downsample_average", vec![a.clone()], Box::new(|v: &[Var]| probe(&v[0].downsample_average(2)?, 13))),
        (
            "conv2d 3x3 stride 1",
            vec![img.clone(), k3.clone()],
            Box::new(|v: &[Var]| probe(&v[0].conv2d(&v[1], 1, 1)?, 14)),
        ),
        (
            "conv2d 3x3 stride 2",
            vec![img.clone(), k3],
            Box::new(|v: &[Var]| probe(&v[0].conv2d(&v[1], 2, 1)?, 15)),
        ),
        ("conv2d 1x1", vec![img, k1], Box::new(|v: &[Var]| probe(&v[0].conv2d(&v[1], 1, 0)?, 16))),
        (
            "channel_bias",
            vec![a.clone(), bias],
            Box::new(|v: &[Var]| probe(&v[0].add_channel_bias(&v[1])?, 17)),
        ),
        (
            "channel_bias per item",
            vec![a, nbias],
            Box::new(|v: &[Var]| probe(&v[0].add_channel_bias(&v[1])?, 18)),
        ),
        (
            "linear",
            vec![x, w, lb],
            Box::new(|v: &[Var]| probe(&v[0].linear(&v[1], Some(&v[2]))?, 19)),
        ),
    ]
}

/// Gradient checks of every primitive on small random inputs.
pub fn primitive_suite() -> Result<Vec<GradReport>> {
    primitive_checks()
        .into_iter()
        .map(|(name, args, f)| {
            let err = grad_check_params(f, &args, STEP, None)?;
            Ok(GradReport { name: name.to_owned(), max_relative_error: err })
        })
        .collect()
}

/// Gradient checks of the ε-prediction loss and the consistency function of a
/// model with the given configuration, with respect to every parameter tensor
/// (at `coords` coordinates each) and the noisy input.
pub fn model_suite(config: UNetConfig, image_size: usize, coords: usize) -> Result<Vec<GradReport>> {
    config.check_image_size(image_size)?;
    let mut model = DenoiserModel::new(config, 0x6d6f_6465)?;
    model.randomize_output_layer(0x6f75_74);
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let scalings = BoundaryScalings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x696e_7075);
    let lo = image_size / crate::denoiser::UPSCALE;
    let noisy = Tensor::randn(&[2, config.channels, image_size, image_size], &mut rng);
    let cond = Var::constant(Tensor::uniform(&[2, config.channels, lo, lo], 0.9, &mut rng));
    let target = Var::constant(Tensor::randn(noisy.shape(), &mut rng));

    let mut args: Vec<Tensor> = model.params.tensors().cloned().collect();
    args.push(noisy);
    let split = |v: &[Var]| -> (Vec<Var>, Var) { (v[..v.len() - 1].to_vec(), v[v.len() - 1].clone()) };

    let eps_loss = |v: &[Var]| {
        let (p, x) = split(v);
        let out = model.forward_eps(&p, &x, &cond, &[17, 640])?;
        Ok(out.sub(&target)?.square().mean())
    };
    let cm_loss = |v: &[Var]| {
        let (p, x) = split(v);
        // small inputs keep the output clear of the clamp at ±1
        let x = x.scale(0.05);
        let out = consistency_forward(&model, &p, &x, &cond, &[5, 300], &scalings, &schedule)?;
        Ok(out.sub(&target.detach().scale(0.05))?.huber(1.0).mean())
    };
    Ok(vec![
        GradReport {
            name: "denoiser eps loss".into(),
            max_relative_error: grad_check_params(eps_loss, &args, STEP, Some(coords))?,
        },
        GradReport {
            name: "consistency function".into(),
            max_relative_error: grad_check_params(cm_loss, &args, STEP, Some(coords))?,
        },
    ])
}
