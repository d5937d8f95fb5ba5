//! Forward and adjoint kernels for the primitive tensor operations.
//!
//! Everything here works on plain [`Tensor`] values; the graph bookkeeping
//! lives in the autodiff module. All loops run in a fixed order so results are
//! bitwise reproducible.

use super::Tensor;
use crate::error::{shape_err, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Half-open range of output positions whose tap `k` lands inside the input.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if size + padding <= k {
        return (0, 0);
    }
    let hi = ((size - 1 + padding - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_geometry(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    let (&[n, c_in, h, w], &[c_out, k_in, kh, kw]) = (input, kernel) else {
        return Err(shape_err!(
            "conv2d expects NCHW input and OIKK kernel, got input {input:?} and kernel {kernel:?}"
        ));
    };
    if c_in != k_in || kh != kw {
        return Err(shape_err!(
            "conv2d input {input:?} is incompatible with kernel {kernel:?}"
        ));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d stride must be at least 1"));
    }
    let (Some(oh), Some(ow)) = (
        conv_out_extent(h, kh, stride, padding),
        conv_out_extent(w, kw, stride, padding),
    ) else {
        return Err(shape_err!(
            "conv2d kernel {kernel:?} does not fit input {input:?} with padding {padding}"
        ));
    };
    Ok(ConvGeom { n, c_in, h, w, c_out, k: kh, oh, ow, stride, padding })
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, padding)?;
    let x = input.data();
    let wt = kernel.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + oc) * plane_out..][..plane_out];
            for ic in 0..g.c_in {
                let src = &x[(n * g.c_in + ic) * plane_in..][..plane_in];
                let taps = &wt[(oc * g.c_in + ic) * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(g.h, g.oh, ky, g.stride, g.padding);
                    for kx in 0..g.k {
                        let wv = taps[ky * g.k + kx];
                        let (ox_lo, ox_hi) = valid_range(g.w, g.ow, kx, g.stride, g.padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_out = &mut dst[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                let row_in = &src[iy * g.w + ix0..][..row_out.len()];
                                for (o, &i) in row_out.iter_mut().zip(row_in) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in row_out.iter_mut().enumerate() {
                                    *o += wv * src[iy * g.w + ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.c_out, g.oh, g.ow], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input_shape, kernel.shape(), stride, padding)?;
    let go = grad_out.data();
    let wt = kernel.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gin = vec![0.0; g.n * g.c_in * plane_in];
    for n in 0..g.n {
        for ic in 0..g.c_in {
            let dst = &mut gin[(n * g.c_in + ic) * plane_in..][..plane_in];
            for oc in 0..g.c_out {
                let src = &go[(n * g.c_out + oc) * plane_out..][..plane_out];
                let taps = &wt[(oc * g.c_in + ic) * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = valid_range(g.h, g.oh, ky, g.stride, g.padding);
                    for kx in 0..g.k {
                        let wv = taps[ky * g.k + kx];
                        let (ox_lo, ox_hi) = valid_range(g.w, g.ow, kx, g.stride, g.padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_go = &src[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                let row_in = &mut dst[iy * g.w + ix0..][..row_go.len()];
                                for (i, &o) in row_in.iter_mut().zip(row_go) {
                                    *i += wv * o;
                                }
                            } else {
                                for (j, &o) in row_go.iter().enumerate() {
                                    dst[iy * g.w + ix0 + j * g.stride] += wv * o;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, gin)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), kernel_shape, stride, padding)?;
    let go = grad_out.data();
    let x = input.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gk = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    for oc in 0..g.c_out {
        for ic in 0..g.c_in {
            let taps = &mut gk[(oc * g.c_in + ic) * g.k * g.k..][..g.k * g.k];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(g.h, g.oh, ky, g.stride, g.padding);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = valid_range(g.w, g.ow, kx, g.stride, g.padding);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let src_go = &go[(n * g.c_out + oc) * plane_out..][..plane_out];
                        let src_in = &x[(n * g.c_in + ic) * plane_in..][..plane_in];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_go = &src_go[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                let row_in = &src_in[iy * g.w + ix0..][..row_go.len()];
                                acc += row_go.iter().zip(row_in).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for (j, &o) in row_go.iter().enumerate() {
                                    acc += o * src_in[iy * g.w + ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                    taps[ky * g.k + kx] += acc;
                }
            }
        }
    }
    Tensor::new(kernel_shape, gk)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err!("concat_channels needs at least one input"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(shape_err!(
                "concat_channels: {:?} does not match {:?} outside the channel axis",
                p.shape(),
                first.shape()
            ));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, total, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != total {
        return Err(shape_err!("split_channels: {channels:?} does not sum to {total}"));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    let data = grad.data();
    for b in 0..n {
        let mut offset = b * total * plane;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&data[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::new(&[n, c, h, w], d))
        .collect()
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(shape_err!("upsample factor must be at least 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane_in, plane_out) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for oy in 0..oh {
            let row_in = &plane_in[(oy / factor) * w..][..w];
            let row_out = &mut plane_out[oy * ow..][..ow];
            for (ox, o) in row_out.iter_mut().enumerate() {
                *o = row_in[ox / factor];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Sums each `factor`×`factor` block; the adjoint of [`upsample_nearest`].
pub fn block_sum(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!(
            "spatial extents of {:?} are not divisible by {factor}",
            x.shape()
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane_in, plane_out) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..h {
            let row_in = &plane_in[y * w..][..w];
            let row_out = &mut plane_out[(y / factor) * ow..][..ow];
            for (xx, &v) in row_in.iter().enumerate() {
                row_out[xx / factor] += v;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn downsample_average(x: &Tensor, factor: usize) -> Result<Tensor> {
    let inv = 1.0 / (factor * factor) as f64;
    Ok(block_sum(x, factor)?.map(|v| v * inv))
}

/// `x[n, c, :, :] + bias[c]` or `x[n, c, :, :] + bias[n, c]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let per_sample = match bias.shape() {
        [bc] if *bc == c => false,
        [bn, bc] if *bn == n && *bc == c => true,
        other => {
            return Err(shape_err!(
                "channel bias {other:?} does not fit tensor {:?}",
                x.shape()
            ))
        }
    };
    let plane = h * w;
    let b = bias.data();
    let mut out = x.data().to_vec();
    for (idx, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let (bn, bc) = (idx / c, idx % c);
        let v = if per_sample { b[bn * c + bc] } else { b[bc] };
        for o in chunk {
            *o += v;
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Adjoint of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad(grad: &Tensor, bias_shape: &[usize]) -> Result<Tensor> {
    let (_, c, h, w) = grad.dims4()?;
    let per_sample = bias_shape.len() == 2;
    let mut out = vec![0.0; bias_shape.iter().product()];
    for (idx, chunk) in grad.data().chunks_exact(h * w).enumerate() {
        let (bn, bc) = (idx / c, idx % c);
        let slot = if per_sample { bn * c + bc } else { bc };
        out[slot] += chunk.iter().sum::<f64>();
    }
    Tensor::new(bias_shape, out)
}

/// `x [B, in] · wᵀ [in, out] (+ b [out])`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (&[b, d_in], &[d_out, w_in]) = (x.shape(), weight.shape()) else {
        return Err(shape_err!(
            "linear expects [B, in] input and [out, in] weight, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        ));
    };
    if d_in != w_in {
        return Err(shape_err!(
            "linear input {:?} does not match weight {:?}",
            x.shape(),
            weight.shape()
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [d_out] {
            return Err(shape_err!("linear bias {:?} should be [{d_out}]", bias.shape()));
        }
    }
    let mut out = vec![0.0; b * d_out];
    for (row_x, row_out) in x.data().chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        for (o, (slot, row_w)) in row_out.iter_mut().zip(weight.data().chunks_exact(d_in)).enumerate() {
            let dot: f64 = row_x.iter().zip(row_w).map(|(a, w)| a * w).sum();
            *slot = dot + bias.map_or(0.0, |bv| bv.data()[o]);
        }
    }
    Tensor::new(&[b, d_out], out)
}

/// Adjoints of [`linear`]: (input, weight, bias).
pub fn linear_grads(grad: &Tensor, x: &Tensor, weight: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = weight.shape()[0];
    let g = grad.data();
    let mut gx = vec![0.0; b * d_in];
    let mut gw = vec![0.0; d_out * d_in];
    let mut gb = vec![0.0; d_out];
    for row in 0..b {
        let xr = &x.data()[row * d_in..][..d_in];
        let gxr = &mut gx[row * d_in..][..d_in];
        for o in 0..d_out {
            let go = g[row * d_out + o];
            gb[o] += go;
            let wr = &weight.data()[o * d_in..][..d_in];
            let gwr = &mut gw[o * d_in..][..d_in];
            for i in 0..d_in {
                gxr[i] += go * wr[i];
                gwr[i] += go * xr[i];
            }
        }
    }
    (
        Tensor { shape: x.shape().to_vec(), data: gx },
        Tensor { shape: weight.shape().to_vec(), data: gw },
        Tensor { shape: vec![d_out], data: gb },
    )
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn silu_derivative(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Elementwise Huber penalty with threshold `delta`.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Textbook six-loop convolution used as the oracle for the fast kernel.
    fn conv_reference(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Tensor {
        let (n, ci, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = k.dims4().unwrap();
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * ci + i) * h + iy as usize) * w + ix as usize];
                                    let kv = k.data()[((o * ci + i) * kh + ky) * kw + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding, ksize) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5), (1, 0, 1)] {
            let x = Tensor::randn(&[2, 3, 7, 6], &mut rng);
            let k = Tensor::randn(&[4, 3, ksize, ksize], &mut rng);
            let fast = conv2d(&x, &k, stride, padding).unwrap();
            let slow = conv_reference(&x, &k, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} padding {padding}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_ones_kernel_on_constant_image() {
        let x = Tensor::full(&[1, 1, 5, 5], 2.0);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 4, 5], &mut rng);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_output_extent_formula() {
        assert_eq!(conv_out_extent(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_extent(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_extent(7, 3, 3, 2), Some(3));
        assert_eq!(conv_out_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let msg = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn downsample_block_mean() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(downsample_average(&x, 2).unwrap().data(), &[4.0]);
        assert!(downsample_average(&Tensor::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let b = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 3, 3]);
        let parts = split_channels(&cat, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn huber_piecewise_values() {
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(-2.0, 1.0), 1.5);
    }
}
