//! Forward and backward kernels for the layer set used by the U-Net.
//!
//! Every kernel is a pure function of its inputs. Work is split across batch
//! samples with rayon; any reduction over samples (weight and bias gradients)
//! is summed afterwards in ascending sample order so results do not depend on
//! scheduling.

use rayon::prelude::*;

use super::scalar::{matmul, Mat};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding for odd square kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("convolution channel counts must be positive"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config("convolution kernel and stride must be >= 1"));
        }
        Ok(())
    }

    /// Output extents for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |size: usize, pad: usize, k: usize, s: usize, axis: &str| {
            let padded = size + 2 * pad;
            if padded < k {
                return Err(Error::config(format!(
                    "{axis} extent {size} with padding {pad} is smaller than kernel {k}"
                )));
            }
            if (padded - k) % s != 0 {
                return Err(Error::config(format!(
                    "{axis}: ({size} + 2*{pad} - {k}) is not divisible by stride {s}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            extent(h, self.padding.0, self.kernel.0, self.stride.0, "height")?,
            extent(w, self.padding.1, self.kernel.1, self.stride.1, "width")?,
        ))
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output row `oy` and kernel row `ky`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, s: usize, p: usize, limit: usize) -> Option<usize> {
        let pos = (o * s + k) as isize - p as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let p = self.cols();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.src(oy, ky, self.sh, self.ph, self.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &input[(c * self.h + iy) * self.w..][..self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.sw, self.pw, self.w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], grad_in: &mut [T]) {
        let p = self.cols();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.sh, self.ph, self.h) else {
                            continue;
                        };
                        let dst = &mut grad_in[(c * self.h + iy) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.sw, self.pw, self.w) {
                                dst[ix] = dst[ix] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, ConvGeom)> {
    spec.validate()?;
    let (n, ci, h, w) = input.dims4()?;
    if ci != spec.in_channels {
        return Err(Error::config(format!(
            "conv2d expects {} input channels, got {ci}",
            spec.in_channels
        )));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::config(format!(
            "conv2d weight shape {:?} does not match {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::config(format!(
            "conv2d bias shape {:?} does not match [{}]",
            bias.shape(),
            spec.out_channels
        )));
    }
    let (ho, wo) = spec.output_size(h, w)?;
    Ok((
        n,
        ConvGeom {
            ci,
            h,
            w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            ho,
            wo,
        },
    ))
}

/// Cross-correlation `out[n,o] = bias[o] + sum_c weight[o,c] * input[n,c]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, g) = conv_geom(input, spec, weight, bias)?;
    let co = spec.out_channels;
    let p = g.cols();
    let mut out = vec![T::zero(); n * co * p];
    let wmat = Mat::new(weight.data(), co, g.rows());
    out.par_chunks_mut(co * p)
        .enumerate()
        .for_each(|(i, dst)| {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[o]);
            }
            let src = input.sample(i);
            if g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0 {
                matmul(wmat, Mat::new(src, g.ci, p), dst, T::one());
            } else {
                let mut cols = vec![T::zero(); g.rows() * p];
                g.im2col(src, &mut cols);
                matmul(wmat, Mat::new(&cols, g.rows(), p), dst, T::one());
            }
        });
    Ok(Tensor::from_parts_unchecked(vec![n, co, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, g) = conv_geom(input, spec, weight, bias)?;
    let co = spec.out_channels;
    let p = g.cols();
    if grad_out.shape() != [n, co, g.ho, g.wo] {
        return Err(Error::config("conv2d upstream gradient has the wrong shape"));
    }
    let rows = g.rows();
    let wmat = Mat::new(weight.data(), co, rows);
    let direct = g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gout = Mat::new(grad_out.sample(i), co, p);
            let src = input.sample(i);
            let mut gw = vec![T::zero(); co * rows];
            let mut gin = vec![T::zero(); g.ci * g.h * g.w];
            if direct {
                matmul(gout, Mat::new(src, rows, p).t(), &mut gw, T::zero());
                matmul(wmat.t(), gout, &mut gin, T::zero());
            } else {
                let mut cols = vec![T::zero(); rows * p];
                g.im2col(src, &mut cols);
                matmul(gout, Mat::new(&cols, rows, p).t(), &mut gw, T::zero());
                matmul(wmat.t(), gout, &mut cols, T::zero());
                g.col2im(&cols, &mut gin);
            }
            let gb = grad_out
                .sample(i)
                .chunks(p)
                .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            (gin, gw, gb)
        })
        .collect();

    let mut gin = Vec::with_capacity(input.len());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); co];
    for (si, sw, sb) in per_sample {
        gin.extend_from_slice(&si);
        add_into(&mut gw, &sw);
        add_into(&mut gb, &sb);
    }
    Ok((
        Tensor::from_parts_unchecked(input.shape().to_vec(), gin),
        Tensor::from_parts_unchecked(weight.shape().to_vec(), gw),
        Tensor::from_parts_unchecked(vec![co], gb),
    ))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn tconv_check<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, ci, h, w) = input.dims4()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != ci || ws[2] != 2 || ws[3] != 2 {
        return Err(Error::config(format!(
            "transposed conv weight shape {ws:?} must be [{ci}, Co, 2, 2]"
        )));
    }
    let co = ws[1];
    if bias.shape() != [co] {
        return Err(Error::config(format!(
            "transposed conv bias shape {:?} does not match [{co}]",
            bias.shape()
        )));
    }
    Ok((n, ci, h, w, co))
}

/// 2x2 stride-2 transposed convolution; doubles both spatial extents.
///
/// `out[n, o, 2y+a, 2x+b] = bias[o] + sum_c input[n, c, y, x] * weight[c, o, a, b]`
pub fn transposed_conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, ci, h, w, co) = tconv_check(input, weight, bias)?;
    let p = h * w;
    let (h2, w2) = (2 * h, 2 * w);
    let wmat = Mat::new(weight.data(), ci, co * 4);
    let mut out = vec![T::zero(); n * co * h2 * w2];
    out.par_chunks_mut(co * h2 * w2)
        .enumerate()
        .for_each(|(i, dst)| {
            let mut y = vec![T::zero(); co * 4 * p];
            matmul(wmat.t(), Mat::new(input.sample(i), ci, p), &mut y, T::zero());
            for o in 0..co {
                let b = bias.data()[o];
                for ab in 0..4 {
                    let (a, bb) = (ab / 2, ab % 2);
                    let row = &y[(o * 4 + ab) * p..][..p];
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[(o * h2 + 2 * yy + a) * w2 + 2 * xx + bb] = row[yy * w + xx] + b;
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts_unchecked(vec![n, co, h2, w2], out))
}

/// Gradients of [`transposed_conv2d`] with respect to input, weight and bias.
pub fn transposed_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, ci, h, w, co) = tconv_check(input, weight, bias)?;
    let p = h * w;
    let (h2, w2) = (2 * h, 2 * w);
    if grad_out.shape() != [n, co, h2, w2] {
        return Err(Error::config(
            "transposed conv upstream gradient has the wrong shape",
        ));
    }
    let wmat = Mat::new(weight.data(), ci, co * 4);
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let go = grad_out.sample(i);
            let mut gathered = vec![T::zero(); co * 4 * p];
            let mut gb = vec![T::zero(); co];
            for o in 0..co {
                for ab in 0..4 {
                    let (a, bb) = (ab / 2, ab % 2);
                    let row = &mut gathered[(o * 4 + ab) * p..][..p];
                    for yy in 0..h {
                        for xx in 0..w {
                            row[yy * w + xx] = go[(o * h2 + 2 * yy + a) * w2 + 2 * xx + bb];
                        }
                    }
                }
                gb[o] = go[o * h2 * w2..(o + 1) * h2 * w2]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v);
            }
            let gmat = Mat::new(&gathered, co * 4, p);
            let mut gin = vec![T::zero(); ci * p];
            matmul(wmat, gmat, &mut gin, T::zero());
            let mut gw = vec![T::zero(); ci * co * 4];
            matmul(Mat::new(input.sample(i), ci, p), gmat.t(), &mut gw, T::zero());
            (gin, gw, gb)
        })
        .collect();

    let mut gin = Vec::with_capacity(input.len());
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); co];
    for (si, sw, sb) in per_sample {
        gin.extend_from_slice(&si);
        add_into(&mut gw, &sw);
        add_into(&mut gb, &sb);
    }
    Ok((
        Tensor::from_parts_unchecked(input.shape().to_vec(), gin),
        Tensor::from_parts_unchecked(weight.shape().to_vec(), gw),
        Tensor::from_parts_unchecked(vec![co], gb),
    ))
}

/// 2x2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element. Ties go to the
/// first element of the window in row-major order.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "max pooling needs even extents, got {h} x {w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let len = n * c * ho * wo;
    let mut out = Vec::with_capacity(len);
    let mut argmax = Vec::with_capacity(len);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![n, c, ho, wo], out), argmax))
}

pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gin = vec![T::zero(); input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gin[idx] = gin[idx] + g;
    }
    Tensor::from_parts_unchecked(input_shape.to_vec(), gin)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts_unchecked(input.shape().to_vec(), data)
}

/// Softmax over the channel axis of an `N x C x H x W` tensor.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let p = h * w;
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..n {
        let base = i * c * p;
        for px in 0..p {
            let at = |k: usize| base + k * p + px;
            let max = (0..c).fold(T::neg_infinity(), |m, k| m.max(src[at(k)]));
            let mut sum = T::zero();
            for k in 0..c {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..c {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), out))
}

/// Vector-Jacobian product of the channel softmax given its output `probs`.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let y = probs.data();
    let g = grad_out.data();
    let mut gin = vec![T::zero(); y.len()];
    for i in 0..n {
        let base = i * c * p;
        for px in 0..p {
            let at = |k: usize| base + k * p + px;
            let dot = (0..c).fold(T::zero(), |acc, k| acc + y[at(k)] * g[at(k)]);
            for k in 0..c {
                gin[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts_unchecked(s.to_vec(), gin)
}

/// Lower clamp applied to probabilities before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

fn check_targets(n: usize, k: usize, p: usize, target: &[u8], weights: &[f64]) -> Result<()> {
    if target.len() != n * p || weights.len() != n * p {
        return Err(Error::data(format!(
            "targets/weights must have {} entries (N*H*W), got {} and {}",
            n * p,
            target.len(),
            weights.len()
        )));
    }
    if let Some(i) = target.iter().position(|&t| t as usize >= k) {
        return Err(Error::data(format!(
            "target class {} at pixel {i} is out of range for {k} classes",
            target[i]
        )));
    }
    if let Some(i) = weights.iter().position(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::data(format!(
            "pixel weight {} at {i} must be finite and >= 0",
            weights[i]
        )));
    }
    Ok(())
}

/// Normalised weighted cross-entropy of probabilities:
/// `-sum(w * ln max(p_target, 1e-12)) / sum(w)`; zero when all weights are zero.
pub fn weighted_cross_entropy<T: Real>(
    probs: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
) -> Result<T> {
    let (n, k, h, w) = probs.dims4()?;
    let p = h * w;
    check_targets(n, k, p, target, weights)?;
    let wsum: f64 = weights.iter().sum();
    if wsum == 0.0 {
        return Ok(T::zero());
    }
    let mut acc = 0.0f64;
    for i in 0..n {
        for px in 0..p {
            let t = target[i * p + px] as usize;
            let pt = probs.data()[(i * k + t) * p + px].as_f64().max(LOG_CLAMP);
            acc += weights[i * p + px] * pt.ln();
        }
    }
    Ok(T::from_f64(-acc / wsum))
}

pub fn weighted_cross_entropy_backward<T: Real>(
    probs: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
    grad_loss: T,
) -> Tensor<T> {
    let s = probs.shape();
    let (k, p) = (s[1], s[2] * s[3]);
    let wsum: f64 = weights.iter().sum();
    let mut g = vec![T::zero(); probs.len()];
    if wsum > 0.0 {
        for (pix, (&t, &wt)) in target.iter().zip(weights).enumerate() {
            let (i, px) = (pix / p, pix % p);
            let idx = (i * k + t as usize) * p + px;
            let pt = probs.data()[idx].as_f64();
            if pt > LOG_CLAMP {
                g[idx] = grad_loss * T::from_f64(-wt / (wsum * pt));
            }
        }
    }
    Tensor::from_parts_unchecked(s.to_vec(), g)
}

/// Fused channel softmax + normalised weighted cross-entropy on logits.
/// Returns the loss and the softmax probabilities (kept for the backward pass).
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
) -> Result<(T, Tensor<T>)> {
    let probs = softmax_channels(logits)?;
    let loss = weighted_cross_entropy(&probs, target, weights)?;
    Ok((loss, probs))
}

/// Gradient of the fused loss with respect to the logits:
/// `w / sum(w) * (p - onehot(target))`.
pub fn softmax_cross_entropy_backward<T: Real>(
    probs: &Tensor<T>,
    target: &[u8],
    weights: &[f64],
    grad_loss: T,
) -> Tensor<T> {
    let s = probs.shape();
    let (k, p) = (s[1], s[2] * s[3]);
    let wsum: f64 = weights.iter().sum();
    let mut g = vec![T::zero(); probs.len()];
    if wsum > 0.0 {
        for (pix, (&t, &wt)) in target.iter().zip(weights).enumerate() {
            let (i, px) = (pix / p, pix % p);
            let scale = grad_loss * T::from_f64(wt / wsum);
            for c in 0..k {
                let idx = (i * k + c) * p + px;
                let onehot = if c == t as usize { T::one() } else { T::zero() };
                g[idx] = scale * (probs.data()[idx] - onehot);
            }
        }
    }
    Tensor::from_parts_unchecked(s.to_vec(), g)
}

/// Concatenates two 4-D tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (n2, cb, h2, w2) = b.dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::config(format!(
            "cannot concatenate {:?} with {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(a.sample(i));
        out.extend_from_slice(b.sample(i));
    }
    Ok(Tensor::from_parts_unchecked(vec![n, ca + cb, h, w], out))
}

pub fn concat_channels_backward<T: Real>(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let n = a_shape[0];
    let sa: usize = a_shape[1..].iter().product();
    let sb: usize = b_shape[1..].iter().product();
    let mut ga = Vec::with_capacity(n * sa);
    let mut gb = Vec::with_capacity(n * sb);
    for i in 0..n {
        let s = grad_out.sample(i);
        ga.extend_from_slice(&s[..sa]);
        gb.extend_from_slice(&s[sa..]);
    }
    (
        Tensor::from_parts_unchecked(a_shape.to_vec(), ga),
        Tensor::from_parts_unchecked(b_shape.to_vec(), gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (0, 0),
        };
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::zeros(vec![1]).unwrap();
        let y = conv2d(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn pointwise_conv_is_affine() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let spec = ConvSpec::same(1, 1, 1);
        let y = conv2d(&x, &spec, &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4, 4], |i| (i as f64).sin()).unwrap();
        let spec = ConvSpec::same(3, 3, 1);
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let y = conv2d(&x, &spec, &w, &Tensor::zeros(vec![3]).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_keeps_extent_and_strided_output_rule() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 8, 6]).unwrap();
        let spec = ConvSpec::same(2, 5, 3);
        let y = conv2d(
            &x,
            &spec,
            &Tensor::zeros(spec.weight_shape().to_vec()).unwrap(),
            &Tensor::full(vec![5], 0.5).unwrap(),
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 6]);
        assert!(y.data().iter().all(|&v| v == 0.5));

        let strided = ConvSpec {
            stride: (2, 2),
            padding: (0, 0),
            ..spec
        };
        assert_eq!(strided.output_size(7, 9).unwrap(), (3, 4));
        assert_eq!(strided.output_size(8, 9).unwrap_err().category(), "config");
    }

    #[test]
    fn conv_rejects_bad_weight_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]).unwrap();
        let spec = ConvSpec::same(2, 3, 3);
        let err = conv2d(
            &x,
            &spec,
            &Tensor::zeros(vec![3, 1, 3, 3]).unwrap(),
            &Tensor::zeros(vec![3]).unwrap(),
        )
        .unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn maxpool_picks_max_and_breaks_ties_first() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(x.shape(), &arg, &t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let c = Tensor::<f64>::full(vec![1, 1, 4, 4], 7.0).unwrap();
        let (y, arg) = maxpool2d(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 3, 4]).unwrap();
        assert_eq!(maxpool2d(&x).unwrap_err().category(), "config");
    }

    #[test]
    fn transposed_conv_spreads_each_input() {
        let x = t(&[1, 1, 1, 1], &[5.0]);
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0).unwrap();
        let y = transposed_conv2d(&x, &w, &Tensor::zeros(vec![1]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0; 4]);

        let z = Tensor::<f64>::zeros(vec![2, 3, 2, 2]).unwrap();
        let w = Tensor::<f64>::from_fn(vec![3, 2, 2, 2], |i| i as f64).unwrap();
        let y = transposed_conv2d(&z, &w, &t(&[2], &[0.25, -1.5])).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4, 4]);
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / 16) % 2;
            assert_eq!(v, [0.25, -1.5][ch]);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <tconv(x), y> == <x, conv_s2(y)> with the same kernel and zero bias.
        let x = Tensor::<f64>::from_fn(vec![1, 3, 3, 3], |i| ((i * 7) % 11) as f64 - 5.0).unwrap();
        let y = Tensor::<f64>::from_fn(vec![1, 2, 6, 6], |i| ((i * 5) % 13) as f64 * 0.1).unwrap();
        let w = Tensor::<f64>::from_fn(vec![3, 2, 2, 2], |i| (i as f64 * 0.37).cos()).unwrap();
        let up = transposed_conv2d(&x, &w, &Tensor::zeros(vec![2]).unwrap()).unwrap();
        let lhs: f64 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // conv weight [Co=3, Ci=2, 2, 2] is the same storage as [3, 2, 2, 2].
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: (2, 2),
            stride: (2, 2),
            padding: (0, 0),
        };
        let down = conv2d(&y, &spec, &w, &Tensor::zeros(vec![3]).unwrap()).unwrap();
        let rhs: f64 = down.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::full(vec![1, 6, 2, 2], 3.3).unwrap();
        let p = softmax_channels(&x).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let uniform = Tensor::<f64>::full(vec![1, 6, 2, 2], 1.0 / 6.0).unwrap();
        let loss = weighted_cross_entropy(&uniform, &[0, 1, 2, 5], &[1.0; 4]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.7918).abs() < 1e-4);

        let mut perfect = Tensor::<f64>::zeros(vec![1, 2, 1, 1]).unwrap();
        perfect.data_mut()[1] = 1.0 - 1e-12;
        let loss = weighted_cross_entropy(&perfect, &[1], &[1.0]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let p = Tensor::<f32>::full(vec![1, 6, 1, 1], 1.0 / 6.0).unwrap();
        let err = weighted_cross_entropy(&p, &[6], &[1.0]).unwrap_err();
        assert_eq!(err.category(), "data");
    }

    #[test]
    fn doubling_weights_leaves_loss_unchanged() {
        let logits = Tensor::<f64>::from_fn(vec![2, 6, 3, 3], |i| ((i * 31) % 17) as f64 * 0.2).unwrap();
        let target: Vec<u8> = (0..18).map(|i| (i % 6) as u8).collect();
        let w: Vec<f64> = (0..18).map(|i| 0.5 + (i % 4) as f64).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        // Direct evaluation of the defining sum.
        let probs = softmax_channels(&logits).unwrap();
        let direct = |w: &[f64]| {
            let mut num = 0.0;
            for (pix, &t) in target.iter().enumerate() {
                let (i, px) = (pix / 9, pix % 9);
                num += w[pix] * probs.data()[(i * 6 + t as usize) * 9 + px].ln();
            }
            -num / w.iter().sum::<f64>()
        };
        let (l1, _) = softmax_cross_entropy(&logits, &target, &w).unwrap();
        let (l2, _) = softmax_cross_entropy(&logits, &target, &w2).unwrap();
        assert!((l1 - direct(&w)).abs() < 1e-12);
        assert!((l2 - direct(&w2)).abs() < 1e-12);
        assert!((l1 - l2).abs() < 1e-12);
    }
}
