//! Layer kernels: dilated convolution, linear maps, activations, pooling and
//! loss primitives. Forward and backward passes operate on plain tensors; the
//! [`crate::autograd::Graph`] wires them together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// 3×3 convolution with padding equal to the dilation, which keeps the
    /// spatial extent at stride 1.
    pub fn same3x3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(DesError::shape("conv2d", "channel counts must be positive"));
        }
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(DesError::shape(
                "conv2d",
                "kernel, stride and dilation must be positive",
            ));
        }
        Ok(())
    }

    /// Output extent for an input extent, or an error when it would be < 1.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(DesError::shape(
                "conv2d",
                format!(
                    "input extent {input} with padding {} is smaller than the dilated kernel span {span}",
                    self.padding
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearSpec {
    pub fn weight_shape(&self) -> [usize; 2] {
        [self.out_dim, self.in_dim]
    }
}

/// Xavier (Glorot) uniform initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

pub fn xavier_conv<R: Rng>(spec: &ConvSpec, rng: &mut R) -> Tensor {
    let k2 = spec.kernel * spec.kernel;
    xavier_uniform(
        &spec.weight_shape(),
        spec.in_channels * k2,
        spec.out_channels * k2,
        rng,
    )
}

pub fn xavier_linear<R: Rng>(spec: &LinearSpec, rng: &mut R) -> Tensor {
    xavier_uniform(&spec.weight_shape(), spec.in_dim, spec.out_dim, rng)
}

/// `c = a·b + beta·c` for row-major operands, where `a` is `m×k` (or its
/// transpose is stored when `a_t`) and `b` is `k×n` (likewise `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let l = oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * l];
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for y in 0..oh {
                    let iy = (y * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[y * ow..(y + 1) * ow];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let ix = (xo * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let l = oh * ow;
    let mut x = vec![0.0; spec.in_channels * h * w];
    for c in 0..spec.in_channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for y in 0..oh {
                    let iy = (y * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for xo in 0..ow {
                        let ix = (xo * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
    x
}

fn check_conv_operands(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (c, h, w) = x.chw()?;
    if c != spec.in_channels {
        return Err(DesError::shape(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(DesError::shape(
            "conv2d",
            format!("weight shape {:?}, expected {:?}", weight.shape(), spec.weight_shape()),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(DesError::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{}]", bias.shape(), spec.out_channels),
        ));
    }
    let oh = spec.output_extent(h)?;
    let ow = spec.output_extent(w)?;
    Ok((h, w, oh, ow))
}

/// Cross-correlation with holes:
/// `out[o,y,x] = b[o] + Σ W[o,c,i,j]·in[c, y·s − p + i·d, x·s − p + j·d]`,
/// zero outside the input.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_forward(x, weight, bias, spec).map(|(out, _)| out)
}

/// Forward pass that also returns the unfolded input for reuse in backward.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let (h, w, oh, ow) = check_conv_operands(x, weight, bias, spec)?;
    let l = oh * ow;
    let mut out = vec![0.0; spec.out_channels * l];
    for (o, chunk) in out.chunks_mut(l).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    let cols = if spec.is_pointwise() {
        None
    } else {
        Some(im2col(x.data(), h, w, spec, oh, ow))
    };
    let patches = cols.as_deref().unwrap_or(x.data());
    gemm(
        spec.out_channels,
        spec.patch_len(),
        l,
        weight.data(),
        false,
        patches,
        false,
        1.0,
        &mut out,
    );
    Ok((Tensor::new([spec.out_channels, oh, ow], out)?, cols))
}

pub(crate) struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    cols: Option<&[f64]>,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let (_, h, w) = x.chw()?;
    let (_, oh, ow) = upstream.chw()?;
    let l = oh * ow;
    let patch = spec.patch_len();
    let owned;
    let patches = match cols {
        Some(c) => c,
        None if spec.is_pointwise() => x.data(),
        None => {
            owned = im2col(x.data(), h, w, spec, oh, ow);
            &owned
        }
    };

    let mut dw = vec![0.0; spec.out_channels * patch];
    gemm(spec.out_channels, l, patch, upstream.data(), false, patches, true, 0.0, &mut dw);

    let db: Vec<f64> = upstream.data().chunks(l).map(|c| c.iter().sum()).collect();

    let mut dcols = vec![0.0; patch * l];
    gemm(patch, spec.out_channels, l, weight.data(), true, upstream.data(), false, 0.0, &mut dcols);
    let dx = if spec.is_pointwise() {
        dcols
    } else {
        col2im(&dcols, h, w, spec, oh, ow)
    };

    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(spec.weight_shape().to_vec(), dw)?,
        bias: Tensor::new([spec.out_channels], db)?,
    })
}

/// `W·x + b`, treating `x` as a flat vector of `in_dim` values.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: &LinearSpec) -> Result<Tensor> {
    if x.numel() != spec.in_dim || weight.shape() != spec.weight_shape() || bias.shape() != [spec.out_dim] {
        return Err(DesError::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?} for {}→{}",
                x.shape(),
                weight.shape(),
                bias.shape(),
                spec.in_dim,
                spec.out_dim
            ),
        ));
    }
    let mut out = bias.data().to_vec();
    gemm(spec.out_dim, spec.in_dim, 1, weight.data(), false, x.data(), false, 1.0, &mut out);
    Tensor::new([spec.out_dim], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-location softmax over the channel axis of a `K×H×W` tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (k, h, w) = x.chw()?;
    if k < 2 {
        return Err(DesError::shape("softmax_channels", "need at least 2 channels"));
    }
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..plane {
        let m = (0..k).map(|c| src[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = (src[c * plane + p] - m).exp();
            out[c * plane + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * plane + p] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise log-softmax of an `R×K` matrix.
pub fn log_softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index that won (first maximum in scan order).
pub fn maxpool2_with_argmax(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DesError::shape(
            "maxpool2",
            format!("spatial extents must be even, got {h}×{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = ch * h * w;
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xo + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([c, oh, ow], out)?, arg))
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    maxpool2_with_argmax(x).map(|(t, _)| t)
}

pub fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// `Σ smooth_l1(pred − target)` over all elements.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "smooth_l1")?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| smooth_l1_scalar(p - t))
        .sum())
}
