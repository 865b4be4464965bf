//! Layer kernels and their exact reverse-mode gradients.
//!
//! All feature maps are `(N, H, W, C)`. Convolution uses cross-correlation
//! (no kernel flip); `same` padding follows the usual asymmetric rule where
//! any odd pixel of padding goes to the bottom/right.

use super::flops;
use super::Padding;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output size and leading padding along one spatial axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn new(
        op: &'static str,
        input: &[usize],
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(op, format!("input must be (N,H,W,C), got {input:?}")));
        }
        let (n, h, w, c) = (input[0], input[1], input[2], input[3]);
        let (kh, kw) = kernel;
        let (oh, pad_top) = conv_out_dim(h, kh, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("kernel {kh} does not fit height {h}")))?;
        let (ow, pad_left) = conv_out_dim(w, kw, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("kernel {kw} does not fit width {w}")))?;
        Ok(Geometry {
            n,
            h,
            w,
            c,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn padded_h(&self) -> usize {
        (self.oh - 1) * self.stride + self.kh
    }

    fn padded_w(&self) -> usize {
        (self.ow - 1) * self.stride + self.kw
    }

    /// Zero-padded copy of the input covering exactly the receptive fields.
    fn pad<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let (ph, pw, c) = (self.padded_h(), self.padded_w(), self.c);
        let mut out = vec![T::zero(); self.n * ph * pw * c];
        for n in 0..self.n {
            for i in 0..ph {
                let Some(si) = (i).checked_sub(self.pad_top).filter(|&v| v < self.h) else {
                    continue;
                };
                for j in 0..pw {
                    let Some(sj) = (j).checked_sub(self.pad_left).filter(|&v| v < self.w) else {
                        continue;
                    };
                    let src = ((n * self.h + si) * self.w + sj) * c;
                    let dst = ((n * ph + i) * pw + j) * c;
                    out[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
        out
    }

    /// Inverse of [`Geometry::pad`] for gradients: crops the padded buffer.
    fn crop<T: Scalar>(&self, padded: &[T]) -> Vec<T> {
        let (ph, pw, c) = (self.padded_h(), self.padded_w(), self.c);
        let mut out = vec![T::zero(); self.n * self.h * self.w * c];
        for n in 0..self.n {
            for i in 0..ph {
                let Some(si) = (i).checked_sub(self.pad_top).filter(|&v| v < self.h) else {
                    continue;
                };
                for j in 0..pw {
                    let Some(sj) = (j).checked_sub(self.pad_left).filter(|&v| v < self.w) else {
                        continue;
                    };
                    let dst = ((n * self.h + si) * self.w + sj) * c;
                    let src = ((n * ph + i) * pw + j) * c;
                    out[dst..dst + c].copy_from_slice(&padded[src..src + c]);
                }
            }
        }
        out
    }
}

/// Standard convolution: input `(N,H,W,C)`, weights `(kh,kw,C,K)`, bias `(K)`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 4 {
        return Err(Error::shape("conv2d", format!("weights must be (kh,kw,C,K), got {ws:?}")));
    }
    let g = Geometry::new("conv2d", input.shape(), (ws[0], ws[1]), stride, padding)?;
    if ws[2] != g.c {
        return Err(Error::shape(
            "conv2d",
            format!("weights expect {} input channels, input has {}", ws[2], g.c),
        ));
    }
    let k = ws[3];
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs {k} filters", b.shape())));
        }
    }
    let padded = g.pad(input.data());
    let (ph, pw, c) = (g.padded_h(), g.padded_w(), g.c);
    let wd = weights.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * k];
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let o = ((n * g.oh + oi) * g.ow + oj) * k;
                let acc = &mut out[o..o + k];
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let p = ((n * ph + oi * g.stride + di) * pw + oj * g.stride + dj) * c;
                        for ci in 0..c {
                            let x = padded[p + ci];
                            let wrow = &wd[((di * g.kw + dj) * c + ci) * k..][..k];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += x * wv;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    for (a, &bv) in acc.iter_mut().zip(b.data()) {
                        *a += bv;
                    }
                }
            }
        }
    }
    let locations = (g.n * g.oh * g.ow) as u64;
    flops::record(locations * 2 * (g.kh * g.kw * c * k) as u64);
    if bias.is_some() {
        flops::record(locations * k as u64);
    }
    Tensor::new(vec![g.n, g.oh, g.ow, k], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let ws = weights.shape();
    let g = Geometry::new("conv2d_backward", input.shape(), (ws[0], ws[1]), stride, padding)?;
    let k = ws[3];
    if grad_out.shape() != [g.n, g.oh, g.ow, k] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?}", grad_out.shape()),
        ));
    }
    let padded = g.pad(input.data());
    let (ph, pw, c) = (g.padded_h(), g.padded_w(), g.c);
    let wd = weights.data();
    let gd = grad_out.data();
    let mut gpad = vec![T::zero(); padded.len()];
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); k];
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let o = ((n * g.oh + oi) * g.ow + oj) * k;
                let up = &gd[o..o + k];
                for (b, &u) in gb.iter_mut().zip(up) {
                    *b += u;
                }
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let p = ((n * ph + oi * g.stride + di) * pw + oj * g.stride + dj) * c;
                        for ci in 0..c {
                            let woff = ((di * g.kw + dj) * c + ci) * k;
                            let x = padded[p + ci];
                            let mut gx = T::zero();
                            for kk in 0..k {
                                gw[woff + kk] += x * up[kk];
                                gx += wd[woff + kk] * up[kk];
                            }
                            gpad[p + ci] += gx;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), g.crop(&gpad))?,
        weights: Tensor::new(ws.to_vec(), gw)?,
        bias: if has_bias { Some(Tensor::new(vec![k], gb)?) } else { None },
    })
}

/// Depthwise convolution: one `kh×kw` filter per channel, weights `(kh,kw,C)`.
pub fn depthwise_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 3 {
        return Err(Error::shape("depthwise_conv2d", format!("weights must be (kh,kw,C), got {ws:?}")));
    }
    let g = Geometry::new("depthwise_conv2d", input.shape(), (ws[0], ws[1]), stride, padding)?;
    let c = g.c;
    if ws[2] != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("weights have {} channels, input has {c}", ws[2]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::shape("depthwise_conv2d", format!("bias {:?}", b.shape())));
        }
    }
    let padded = g.pad(input.data());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let wd = weights.data();
    let mut out = vec![T::zero(); g.n * g.oh * g.ow * c];
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let o = ((n * g.oh + oi) * g.ow + oj) * c;
                let acc = &mut out[o..o + c];
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let p = ((n * ph + oi * g.stride + di) * pw + oj * g.stride + dj) * c;
                        let wrow = &wd[(di * g.kw + dj) * c..][..c];
                        for ((a, &x), &wv) in acc.iter_mut().zip(&padded[p..p + c]).zip(wrow) {
                            *a += x * wv;
                        }
                    }
                }
                if let Some(b) = bias {
                    for (a, &bv) in acc.iter_mut().zip(b.data()) {
                        *a += bv;
                    }
                }
            }
        }
    }
    let locations = (g.n * g.oh * g.ow) as u64;
    flops::record(locations * 2 * (g.kh * g.kw * c) as u64);
    if bias.is_some() {
        flops::record(locations * c as u64);
    }
    Tensor::new(vec![g.n, g.oh, g.ow, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let ws = weights.shape();
    let g = Geometry::new("depthwise_conv2d_backward", input.shape(), (ws[0], ws[1]), stride, padding)?;
    let c = g.c;
    if grad_out.shape() != [g.n, g.oh, g.ow, c] {
        return Err(Error::shape(
            "depthwise_conv2d_backward",
            format!("upstream gradient {:?}", grad_out.shape()),
        ));
    }
    let padded = g.pad(input.data());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let wd = weights.data();
    let gd = grad_out.data();
    let mut gpad = vec![T::zero(); padded.len()];
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); c];
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let o = ((n * g.oh + oi) * g.ow + oj) * c;
                let up = &gd[o..o + c];
                for (b, &u) in gb.iter_mut().zip(up) {
                    *b += u;
                }
                for di in 0..g.kh {
                    for dj in 0..g.kw {
                        let p = ((n * ph + oi * g.stride + di) * pw + oj * g.stride + dj) * c;
                        let woff = (di * g.kw + dj) * c;
                        for ci in 0..c {
                            gw[woff + ci] += padded[p + ci] * up[ci];
                            gpad[p + ci] += wd[woff + ci] * up[ci];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), g.crop(&gpad))?,
        weights: Tensor::new(ws.to_vec(), gw)?,
        bias: if has_bias { Some(Tensor::new(vec![c], gb)?) } else { None },
    })
}

/// Affine map `(N,D) · (D,M) + (M)`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] || bias.shape() != [ws[1]] {
        return Err(Error::shape(
            "dense",
            format!("input {is:?}, weights {ws:?}, bias {:?}", bias.shape()),
        ));
    }
    let (n, d, m) = (is[0], is[1], ws[1]);
    let (x, w) = (input.data(), weights.data());
    let mut out = Vec::with_capacity(n * m);
    for row in 0..n {
        let mut acc = bias.data().to_vec();
        for (di, &xv) in x[row * d..(row + 1) * d].iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&w[di * m..(di + 1) * m]) {
                *a += xv * wv;
            }
        }
        out.extend(acc);
    }
    flops::record((n * 2 * d * m) as u64);
    Tensor::new(vec![n, m], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weights.shape()[1];
    if grad_out.shape() != [n, m] {
        return Err(Error::shape("dense_backward", format!("upstream gradient {:?}", grad_out.shape())));
    }
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![T::zero(); n * d];
    let mut gw = vec![T::zero(); d * m];
    let mut gb = vec![T::zero(); m];
    for row in 0..n {
        let up = &g[row * m..(row + 1) * m];
        for (b, &u) in gb.iter_mut().zip(up) {
            *b += u;
        }
        for di in 0..d {
            let xv = x[row * d + di];
            let mut acc = T::zero();
            for mi in 0..m {
                gw[di * m + mi] += xv * up[mi];
                acc += w[di * m + mi] * up[mi];
            }
            gx[row * d + di] = acc;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, d], gx)?,
        weights: Tensor::new(vec![d, m], gw)?,
        bias: Tensor::new(vec![m], gb)?,
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu gradient shape")
}

/// Spatial mean per channel: `(N,H,W,C) → (N,C)`.
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_average_pool", format!("expected (N,H,W,C), got {s:?}")));
    }
    let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
    let x = input.data();
    let count = T::from_usize(hw);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            for (a, &v) in acc.iter_mut().zip(&x[(b * hw + p) * c..][..c]) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / count;
        }
    }
    flops::record((n * (hw * c + c)) as u64);
    Tensor::new(vec![n, c], out)
}

pub fn global_average_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, hw, c) = (input_shape[0], input_shape[1] * input_shape[2], input_shape[3]);
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("global_average_pool_backward", format!("{:?}", grad_out.shape())));
    }
    let inv = T::one() / T::from_usize(hw);
    let g = grad_out.data();
    let mut out = Vec::with_capacity(n * hw * c);
    for b in 0..n {
        for _ in 0..hw {
            out.extend(g[b * c..(b + 1) * c].iter().map(|&v| v * inv));
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnOutput<T> {
    pub output: Tensor<T>,
    pub cache: BnCache<T>,
    /// Updated running mean / variance (train mode only).
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

/// Batch normalization over the last axis.
///
/// Train mode normalizes with the biased batch variance over every
/// non-feature axis and returns the updated running statistics
/// `momentum·running + (1 − momentum)·batch`; infer mode uses the stored
/// running statistics.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<'_, T>,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> Result<BnOutput<T>> {
    let f = *input.shape().last().unwrap();
    for (name, t) in [
        ("gamma", params.gamma),
        ("beta", params.beta),
        ("running_mean", params.running_mean),
        ("running_var", params.running_var),
    ] {
        if t.shape() != [f] {
            return Err(Error::shape("batchnorm", format!("{name} {:?} vs {f} features", t.shape())));
        }
    }
    let rows = input.len() / f;
    let x = input.data();
    let eps = T::from_f64(eps);
    let (mean, var, running) = match mode {
        BnMode::Train => {
            if rows == 0 {
                return Err(Error::ZeroBatch);
            }
            let count = T::from_usize(rows);
            let mut mean = vec![T::zero(); f];
            for r in 0..rows {
                for (m, &v) in mean.iter_mut().zip(&x[r * f..(r + 1) * f]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            let mut var = vec![T::zero(); f];
            for r in 0..rows {
                for ((s, &v), &m) in var.iter_mut().zip(&x[r * f..(r + 1) * f]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = *s / count);
            let mom = T::from_f64(momentum);
            let keep = T::one() - mom;
            let rm = params
                .running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| mom * r + keep * b)
                .collect();
            let rv = params
                .running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| mom * r + keep * b)
                .collect();
            (mean, var, Some((Tensor::new(vec![f], rm)?, Tensor::new(vec![f], rv)?)))
        }
        BnMode::Infer => (
            params.running_mean.data().to_vec(),
            params.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    for r in 0..rows {
        for j in 0..f {
            let xh = (x[r * f + j] - mean[j]) * inv_std[j];
            normalized.push(xh);
            out.push(gamma[j] * xh + beta[j]);
        }
    }
    flops::record(2 * x.len() as u64);
    Ok(BnOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        cache: BnCache {
            mode,
            normalized: Tensor::new(input.shape().to_vec(), normalized)?,
            inv_std,
        },
        running,
    })
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(gamma: &Tensor<T>, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    let f = gamma.len();
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape("batchnorm_backward", format!("{:?}", grad_out.shape())));
    }
    let rows = grad_out.len() / f;
    let (g, xh) = (grad_out.data(), cache.normalized.data());
    let mut dgamma = vec![T::zero(); f];
    let mut dbeta = vec![T::zero(); f];
    for r in 0..rows {
        for j in 0..f {
            dgamma[j] += g[r * f + j] * xh[r * f + j];
            dbeta[j] += g[r * f + j];
        }
    }
    let gd = gamma.data();
    let mut dx = Vec::with_capacity(g.len());
    match cache.mode {
        BnMode::Train => {
            let m = T::from_usize(rows);
            for r in 0..rows {
                for j in 0..f {
                    let scale = gd[j] * cache.inv_std[j] / m;
                    let v = m * g[r * f + j] - dbeta[j] - xh[r * f + j] * dgamma[j];
                    dx.push(scale * v);
                }
            }
        }
        BnMode::Infer => {
            for r in 0..rows {
                for j in 0..f {
                    dx.push(g[r * f + j] * gd[j] * cache.inv_std[j]);
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![f], dgamma)?,
        beta: Tensor::new(vec![f], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, reduce, ReduceOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn same_and_valid_output_sizes() {
        assert_eq!(conv_out_dim(32, 3, 1, Padding::Same), Some((32, 1)));
        assert_eq!(conv_out_dim(32, 3, 2, Padding::Same), Some((16, 0)));
        assert_eq!(conv_out_dim(5, 3, 1, Padding::Valid), Some((3, 0)));
        assert_eq!(conv_out_dim(2, 3, 1, Padding::Valid), None);
        for stride in [1, 2] {
            for input in 1..=64 {
                for k in [1, 3] {
                    let (out, _) = conv_out_dim(input, k, stride, Padding::Same).unwrap();
                    assert_eq!(out, input.div_ceil(stride));
                }
            }
        }
    }

    #[test]
    fn identity_pointwise_conv_is_noop() {
        let x = random(&[2, 3, 3, 4], 1);
        let w = Tensor::from_fn(&[1, 1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[4]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_all_ones_sums_window() {
        let c = 0.7;
        let x = Tensor::<f64>::full(&[1, 5, 5, 2], c);
        let w = Tensor::full(&[3, 3, 2], 1.0);
        let y = depthwise_conv2d_forward(&x, &w, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 2]);
        for &v in y.data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_naive_seven_loop() {
        let x = random(&[1, 5, 5, 2], 2);
        let w = random(&[3, 3, 2, 3], 3);
        let b = random(&[3], 4);
        for (padding, stride) in [(Padding::Same, 1), (Padding::Valid, 1), (Padding::Same, 2)] {
            let y = conv2d_forward(&x, &w, Some(&b), stride, padding).unwrap();
            let (oh, pt) = conv_out_dim(5, 3, stride, padding).unwrap();
            assert_eq!(y.shape(), &[1, oh, oh, 3]);
            for n in 0..1 {
                for i in 0..oh {
                    for j in 0..oh {
                        for k in 0..3 {
                            let mut acc = b.at(&[k]);
                            for di in 0..3 {
                                for dj in 0..3 {
                                    for c in 0..2 {
                                        let si = (i * stride + di) as isize - pt as isize;
                                        let sj = (j * stride + dj) as isize - pt as isize;
                                        if si < 0 || sj < 0 || si >= 5 || sj >= 5 {
                                            continue;
                                        }
                                        acc += x.at(&[n, si as usize, sj as usize, c]) * w.at(&[di, dj, c, k]);
                                    }
                                }
                            }
                            assert!(rel_close(y.at(&[n, i, j, k]), acc, 1e-6));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random(&[1, 4, 4, 3], 0);
        let w = random(&[3, 3, 2, 1], 0);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_cases() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 1], &[1., 1.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1], &[0.5]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[3.5]);

        let id = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let x = random(&[4, 3], 9);
        assert_eq!(dense_forward(&x, &id, &Tensor::zeros(&[3])).unwrap(), x);

        let w = random(&[3, 5], 10);
        let b = random(&[5], 11);
        let y = dense_forward(&x, &w, &b).unwrap();
        let oracle = matmul(&x, &w).unwrap();
        for r in 0..4 {
            for m in 0..5 {
                assert!(rel_close(y.at(&[r, m]), oracle.at(&[r, m]) + b.at(&[m]), 1e-12));
            }
        }
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        let x = random(&[3, 4], 5);
        let w = random(&[4, 2], 6);
        let up = random(&[3, 2], 7);
        let g = dense_backward(&x, &w, &up).unwrap();
        let xt = Tensor::from_fn(&[4, 3], |i| x.at(&[i % 3, i / 3]));
        assert_eq!(g.weights, matmul(&xt, &up).unwrap());
        let zero = dense_backward(&x, &w, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(zero.weights.data().iter().chain(zero.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn gap_cases() {
        let x = Tensor::<f64>::full(&[2, 3, 3, 4], 2.5);
        assert!(global_average_pool(&x).unwrap().data().iter().all(|&v| v == 2.5));
        let x = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[1., 3.]).unwrap();
        assert_eq!(global_average_pool(&x).unwrap().data(), &[2.0]);
        let x = random(&[2, 3, 4, 5], 8);
        let y = global_average_pool(&x).unwrap();
        let oracle = reduce(ReduceOp::Mean, &x, &[1, 2]).unwrap();
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!(rel_close(*a, *b, 1e-12));
        }
    }

    fn bn_params(f: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[f], 1.0), Tensor::zeros(&[f]), Tensor::zeros(&[f]), Tensor::full(&[f], 1.0))
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let x = random(&[8, 2, 2, 3], 12).map(|v| 3.0 * v + 1.0);
        let (g, b, rm, rv) = bn_params(3);
        let p = BatchNormParams { gamma: &g, beta: &b, running_mean: &rm, running_var: &rv };
        let out = batchnorm_forward(&x, &p, BnMode::Train, 0.9, 1e-5).unwrap();
        let y = out.output.reshape(&[32, 3]).unwrap();
        let mean = reduce(ReduceOp::Mean, &y, &[0]).unwrap();
        let sq = y.map(|v| v * v);
        let var = reduce(ReduceOp::Mean, &sq, &[0]).unwrap();
        for j in 0..3 {
            assert!(mean.data()[j].abs() < 1e-5);
            assert!((var.data()[j] - 1.0).abs() < 1e-3, "{}", var.data()[j]);
        }
        let (rm2, _) = out.running.unwrap();
        let xm = reduce(ReduceOp::Mean, &x.reshape(&[32, 3]).unwrap(), &[0]).unwrap();
        for j in 0..3 {
            assert!((rm2.data()[j] - 0.1 * xm.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_infer_identity_and_constant_batch() {
        let x = random(&[4, 5], 13);
        let (g, b, rm, rv) = bn_params(5);
        let p = BatchNormParams { gamma: &g, beta: &b, running_mean: &rm, running_var: &rv };
        let out = batchnorm_forward(&x, &p, BnMode::Infer, 0.9, 1e-5).unwrap();
        for (a, b) in out.output.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12));
        }
        assert!(out.running.is_none());

        let c = Tensor::full(&[6, 5], 4.2);
        let out = batchnorm_forward(&c, &p, BnMode::Train, 0.9, 1e-5).unwrap();
        assert!(out.output.data().iter().all(|&v| v.abs() < 1e-9 && v.is_finite()));
    }
}
