use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ImageRecord;
use crate::denoiser::UPSCALE;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GaussianSamples {
    pub samples: Vec<Tensor>,
    /// Fraction of drawn values that fell outside `[-1, 1]` and were clipped.
    pub clip_fraction: f64,
}

/// `count` tensors of `shape` with i.i.d. `N(mu0, sigma0²)` entries clipped to `[-1, 1]`.
pub fn synth_gaussian(mu0: f64, sigma0: f64, shape: &[usize], count: usize, seed: u64) -> Result<GaussianSamples> {
    if !(sigma0 >= 0.0) || !mu0.is_finite() || !sigma0.is_finite() {
        return Err(Error::Config(format!("need finite mu0 and sigma0 >= 0, got ({mu0}, {sigma0})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let mut clipped = 0usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = mu0 + sigma0 * z;
                if !(-1.0..=1.0).contains(&v) {
                    clipped += 1;
                }
                v.clamp(-1.0, 1.0)
            })
            .collect();
        samples.push(Tensor::new(shape, data)?);
    }
    let total = (numel * count).max(1);
    Ok(GaussianSamples { samples, clip_fraction: clipped as f64 / total as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Checkerboard,
    Gradient,
    Blobs,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [TextureKind::Checkerboard, TextureKind::Gradient, TextureKind::Blobs];

    fn name(self) -> &'static str {
        match self {
            TextureKind::Checkerboard => "checker",
            TextureKind::Gradient => "gradient",
            TextureKind::Blobs => "blobs",
        }
    }
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(-0.9..=0.9))
}

fn render(kind: TextureKind, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut data = vec![0.0; 3 * size * size];
    let mut put = |x: usize, y: usize, c: [f64; 3]| {
        for (ch, v) in c.into_iter().enumerate() {
            data[(ch * size + y) * size + x] = v.clamp(-1.0, 1.0);
        }
    };
    match kind {
        TextureKind::Checkerboard => {
            let cell = if rng.random_bool(0.5) { 4 } else { 8 };
            let (px, py) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let (a, b) = (colour(rng), colour(rng));
            for y in 0..size {
                for x in 0..size {
                    let even = ((x + px) / cell + (y + py) / cell) % 2 == 0;
                    put(x, y, if even { a } else { b });
                }
            }
        }
        TextureKind::Gradient => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (a, b) = (colour(rng), colour(rng));
            let (cos, sin) = (angle.cos(), angle.sin());
            let half = (size as f64 - 1.0) / 2.0;
            let reach = half * std::f64::consts::SQRT_2;
            for y in 0..size {
                for x in 0..size {
                    let proj = (x as f64 - half) * cos + (y as f64 - half) * sin;
                    let u = 0.5 + 0.5 * proj / reach;
                    put(x, y, std::array::from_fn(|c| a[c] + (b[c] - a[c]) * u));
                }
            }
        }
        TextureKind::Blobs => {
            let bg = colour(rng);
            let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let centre = [rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)];
                    let radius = rng.random_range(0.1..0.25) * size as f64;
                    (centre, radius, colour(rng))
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let mut c = bg;
                    for (centre, r, col) in &blobs {
                        let d2 = (x as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2);
                        let w = (-d2 / (2.0 * r * r)).exp();
                        for ch in 0..3 {
                            c[ch] += (col[ch] - bg[ch]) * w;
                        }
                    }
                    put(x, y, c);
                }
            }
        }
    }
    data
}

/// Procedural `size × size` textures cycling through the first `modes` of
/// [`TextureKind::ALL`]. Record `i` depends only on `(seed, i)`, so a larger
/// `count` extends a smaller one.
pub fn synth_textures(modes: usize, size: usize, count: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if !(1..=TextureKind::ALL.len()).contains(&modes) {
        return Err(Error::Config(format!("texture modes must be 1 to 3, got {modes}")));
    }
    if size == 0 || size % UPSCALE != 0 {
        return Err(shape_err!("texture size must be a positive multiple of {UPSCALE}, got {size}"));
    }
    (0..count)
        .map(|i| {
            let kind = TextureKind::ALL[i % modes];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let pixels = Tensor::new(&[3, size, size], render(kind, size, &mut rng))?;
            ImageRecord::new(format!("{}-{i:06}", kind.name()), pixels, None)
        })
        .collect()
}
