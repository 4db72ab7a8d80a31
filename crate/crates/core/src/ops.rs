//! Layer kernels. Conv2d and linear layers run either in float or through a
//! multiplier table on symmetric per-tensor int8 operands; every other layer
//! is exact float.
//!
//! Operand order for table lookups is `(activation, weight)`. Padded input
//! positions are fed to the table as code 0, so the number of lookups always
//! equals the layer's MAC count.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::axmul::AxMultiplier;
use crate::error::{bail, Result};
use crate::graph::LayerKind;
use crate::quant::{checked_acc, quantize_slice};
use crate::tensor::Tensor;

/// Arithmetic used by approximable layers.
#[derive(Debug, Clone, Copy)]
pub enum Arithmetic<'a> {
    Float,
    Lut(&'a AxMultiplier),
}

fn bump(counter: Option<&AtomicU64>, n: u64) {
    if let Some(c) = counter {
        c.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn from_kind(kind: &LayerKind) -> Option<Self> {
        match *kind {
            LayerKind::Conv2d {
                c_in,
                c_out,
                k_h,
                k_w,
                stride,
                padding,
                groups,
                ..
            } => Some(Self {
                c_in,
                c_out,
                k_h,
                k_w,
                stride,
                padding,
                groups,
            }),
            _ => None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.k_h) / self.stride + 1,
            (w + 2 * self.padding - self.k_w) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k_h, self.k_w]
    }

    fn check(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.c_in {
            bail!(Shape, "conv2d expects [{}, H, W], got {s:?}", self.c_in);
        }
        if w.shape() != self.weight_shape() {
            bail!(Shape, "conv2d weight {:?}, expected {:?}", w.shape(), self.weight_shape());
        }
        if let Some(b) = bias {
            if b.shape() != [self.c_out] {
                bail!(Shape, "conv2d bias {:?}, expected [{}]", b.shape(), self.c_out);
            }
        }
        if s[1] + 2 * self.padding < self.k_h || s[2] + 2 * self.padding < self.k_w {
            bail!(Shape, "conv2d kernel larger than padded input {s:?}");
        }
        Ok((s[1], s[2]))
    }

    /// MACs for one `[c_in, h, w]` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        (self.c_out * ho * wo * (self.c_in / self.groups) * self.k_h * self.k_w) as u64
    }
}

/// 2-D convolution of one `[C, H, W]` sample.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeom,
    arith: Arithmetic<'_>,
    counter: Option<&AtomicU64>,
) -> Result<Tensor> {
    let (h, wd) = g.check(x, w, bias)?;
    let (ho, wo) = g.out_hw(h, wd);
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let (kh, kw, s, p) = (g.k_h, g.k_w, g.stride, g.padding);
    let mut out = vec![0f32; g.c_out * ho * wo];
    let xd = x.data();
    let wdat = w.data();
    match arith {
        Arithmetic::Float => {
            for co in 0..g.c_out {
                let grp = co / cout_g;
                let b = bias.map_or(0.0, |b| b.data()[co]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0f32;
                        for ci in 0..cin_g {
                            let cin = grp * cin_g + ci;
                            for ky in 0..kh {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[(cin * h + iy as usize) * wd + ix as usize]
                                        * wdat[((co * cin_g + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[(co * ho + oy) * wo + ox] = acc + b;
                    }
                }
            }
        }
        Arithmetic::Lut(m) => {
            let (xq, sx) = quantize_slice(xd)?;
            let (wq, sw) = quantize_slice(wdat)?;
            let zero_row = m.row(0);
            let scale = sx * sw;
            let mut lookups = 0u64;
            for co in 0..g.c_out {
                let grp = co / cout_g;
                let b = bias.map_or(0.0, |b| b.data()[co]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc: i32 = 0;
                        for ci in 0..cin_g {
                            let cin = grp * cin_g + ci;
                            for ky in 0..kh {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let row_ok = iy >= 0 && iy < h as isize;
                                for kx in 0..kw {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    let wq_v = wq[((co * cin_g + ci) * kh + ky) * kw + kx];
                                    let row = if row_ok && ix >= 0 && ix < wd as isize {
                                        m.row(xq[(cin * h + iy as usize) * wd + ix as usize])
                                    } else {
                                        zero_row
                                    };
                                    acc = checked_acc(acc, row[(wq_v as i16 + 128) as usize])?;
                                    lookups += 1;
                                }
                            }
                        }
                        out[(co * ho + oy) * wo + ox] = acc as f32 * scale + b;
                    }
                }
            }
            bump(counter, lookups);
        }
    }
    Tensor::new(vec![g.c_out, ho, wo], out)
}

/// Float gradients of a convolution: `(dx, dw, db)`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, g: &ConvGeom, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, wd) = g.check(x, w, None)?;
    let (ho, wo) = g.out_hw(h, wd);
    if dy.shape() != [g.c_out, ho, wo] {
        bail!(Shape, "conv2d output gradient {:?}, expected [{}, {ho}, {wo}]", dy.shape(), g.c_out);
    }
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let (kh, kw, s, p) = (g.k_h, g.k_w, g.stride, g.padding);
    let mut dx = vec![0f32; x.len()];
    let mut dw = vec![0f32; w.len()];
    let mut db = vec![0f32; g.c_out];
    let (xd, wdat, dyd) = (x.data(), w.data(), dy.data());
    for co in 0..g.c_out {
        let grp = co / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let gy = dyd[(co * ho + oy) * wo + ox];
                if gy == 0.0 {
                    continue;
                }
                db[co] += gy;
                for ci in 0..cin_g {
                    let cin = grp * cin_g + ci;
                    for ky in 0..kh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (cin * h + iy as usize) * wd + ix as usize;
                            let wi = ((co * cin_g + ci) * kh + ky) * kw + kx;
                            dw[wi] += gy * xd[xi];
                            dx[xi] += gy * wdat[wi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 {
        bail!(Shape, "linear weight must be [out, in], got {:?}", w.shape());
    }
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    if x.shape().last() != Some(&in_f) {
        bail!(Shape, "linear expects last axis {in_f}, got {:?}", x.shape());
    }
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            bail!(Shape, "linear bias {:?}, expected [{out_f}]", b.shape());
        }
    }
    Ok((x.len() / in_f, in_f, out_f))
}

/// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
pub fn linear_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    arith: Arithmetic<'_>,
    counter: Option<&AtomicU64>,
) -> Result<Tensor> {
    let (rows, in_f, out_f) = linear_dims(x, w, bias)?;
    let mut out = vec![0f32; rows * out_f];
    match arith {
        Arithmetic::Float => {
            for (xr, yr) in x.data().chunks_exact(in_f).zip(out.chunks_exact_mut(out_f)) {
                for (o, y) in yr.iter_mut().enumerate() {
                    let wr = &w.data()[o * in_f..(o + 1) * in_f];
                    *y = xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f32>() + bias.map_or(0.0, |b| b.data()[o]);
                }
            }
        }
        Arithmetic::Lut(m) => {
            let (xq, sx) = quantize_slice(x.data())?;
            let (wq, sw) = quantize_slice(w.data())?;
            let scale = sx * sw;
            for (xr, yr) in xq.chunks_exact(in_f).zip(out.chunks_exact_mut(out_f)) {
                for (o, y) in yr.iter_mut().enumerate() {
                    let wr = &wq[o * in_f..(o + 1) * in_f];
                    let mut acc: i32 = 0;
                    for (&a, &b) in xr.iter().zip(wr) {
                        acc = checked_acc(acc, m.row(a)[(b as i16 + 128) as usize])?;
                    }
                    *y = acc as f32 * scale + bias.map_or(0.0, |b| b.data()[o]);
                }
            }
            bump(counter, (rows * in_f * out_f) as u64);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_f;
    Tensor::new(shape, out)
}

/// Float gradients of a linear layer: `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, in_f, out_f) = linear_dims(x, w, None)?;
    if dy.len() != rows * out_f {
        bail!(Shape, "linear output gradient {:?} does not match {rows}x{out_f}", dy.shape());
    }
    let mut dx = vec![0f32; x.len()];
    let mut dw = vec![0f32; w.len()];
    let mut db = vec![0f32; out_f];
    for r in 0..rows {
        let xr = &x.data()[r * in_f..(r + 1) * in_f];
        let gr = &dy.data()[r * out_f..(r + 1) * out_f];
        let dxr = &mut dx[r * in_f..(r + 1) * in_f];
        for (o, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w.data()[o * in_f..(o + 1) * in_f];
            let dwr = &mut dw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![out_f], db)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// GELU, tanh form.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_grad(v: f32) -> f32 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

/// Softmax along the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| crate::error::Error::Shape("softmax of a scalar".into()))?;
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient through a softmax row given its output `p` and upstream `dp`.
pub fn softmax_backward_row(p: &[f32], dp: &[f32], dz: &mut [f32]) {
    let dot: f32 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((z, &pi), &gi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (gi - dot);
    }
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub mean: &'a [f32],
    pub var: &'a [f32],
    pub eps: f32,
}

/// Inference-mode batch norm of a `[C, H, W]` sample with running statistics.
pub fn batchnorm2d(x: &Tensor, p: &BatchNormParams<'_>) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || [p.gamma.len(), p.beta.len(), p.mean.len(), p.var.len()].iter().any(|&l| l != s[0]) {
        bail!(Shape, "batchnorm2d parameters do not match input {s:?}");
    }
    let hw = s[1] * s[2];
    let mut out = x.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(hw.max(1)).enumerate() {
        let inv = 1.0 / (p.var[c] + p.eps).sqrt();
        for v in chunk {
            *v = p.gamma[c] * (*v - p.mean[c]) * inv + p.beta[c];
        }
    }
    Ok(out)
}

/// Layer norm over the last axis.
pub fn layernorm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let f = *x.shape().last().unwrap_or(&0);
    if f == 0 || gamma.len() != f || beta.len() != f {
        bail!(Shape, "layernorm parameters do not match input {:?}", x.shape());
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(f) {
        let mean = row.iter().sum::<f32>() / f as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / f as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[i] + beta[i];
        }
    }
    Ok(out)
}

/// Gradients of layer norm: `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(x: &Tensor, gamma: &[f32], eps: f32, dy: &Tensor) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let f = gamma.len();
    if dy.shape() != x.shape() || x.shape().last() != Some(&f) {
        bail!(Shape, "layernorm gradient shape mismatch");
    }
    let mut dx = vec![0f32; x.len()];
    let mut dg = vec![0f32; f];
    let mut dbt = vec![0f32; f];
    for ((xr, gr), dxr) in x.data().chunks_exact(f).zip(dy.data().chunks_exact(f)).zip(dx.chunks_exact_mut(f)) {
        let mean = xr.iter().sum::<f32>() / f as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / f as f32;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f32> = xr.iter().map(|v| (v - mean) * inv).collect();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..f {
            let gh = gr[i] * gamma[i];
            dg[i] += gr[i] * xhat[i];
            dbt[i] += gr[i];
            sum_g += gh;
            sum_gx += gh * xhat[i];
        }
        for i in 0..f {
            let gh = gr[i] * gamma[i];
            dxr[i] = inv * (gh - sum_g / f as f32 - xhat[i] * sum_gx / f as f32);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dg, dbt))
}

fn pool_dims(x: &Tensor, k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || k == 0 || stride == 0 || s[1] < k || s[2] < k {
        bail!(Shape, "pool {k}/{stride} does not fit {s:?}");
    }
    Ok((s[0], s[1], s[2], (s[1] - k) / stride + 1, (s[2] - k) / stride + 1))
}

pub fn avgpool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w, ho, wo) = pool_dims(x, k, stride)?;
    let mut out = vec![0f32; c * ho * wo];
    let inv = 1.0 / (k * k) as f32;
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x.data()[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn avgpool_backward(x_shape: &[usize], k: usize, stride: usize, dy: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut dx = vec![0f32; c * h * w];
    let inv = 1.0 / (k * k) as f32;
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy.data()[(ch * ho + oy) * wo + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        dx[(ch * h + oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Max pooling; also returns the flat input index of each maximum.
pub fn maxpool(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w, ho, wo) = pool_dims(x, k, stride)?;
    let mut out = vec![0f32; c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            bi = i;
                        }
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    Ok((Tensor::new(vec![c, ho, wo], out)?, arg))
}

pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        bail!(Shape, "global pooling expects [C, H, W], got {s:?}");
    }
    let hw = (s[1] * s[2]).max(1);
    Ok(Tensor::from_vec(
        x.data().chunks_exact(hw).map(|c| c.iter().sum::<f32>() / hw as f32).collect(),
    ))
}

/// Multi-head self-attention core over packed `[T, 3F]` q/k/v rows.
///
/// With `lut` set, the score and value products are computed through the
/// table on per-tensor quantized q, k, attention weights and v.
pub fn attention(qkv: &Tensor, heads: usize, lut: Option<&AxMultiplier>, counter: Option<&AtomicU64>) -> Result<Tensor> {
    let s = qkv.shape();
    if s.len() != 2 || !s[1].is_multiple_of(3) || heads == 0 || !(s[1] / 3).is_multiple_of(heads) {
        bail!(Shape, "attention with {heads} heads cannot split {s:?}");
    }
    let (t, f) = (s[0], s[1] / 3);
    let d = f / heads;
    let at = |r: usize, part: usize, h: usize, j: usize| qkv.data()[r * 3 * f + part * f + h * d + j];
    let inv_sqrt = 1.0 / (d as f32).sqrt();
    let mut out = vec![0f32; t * f];
    let mut lookups = 0u64;
    let quant = match lut {
        Some(_) => {
            let q: Vec<f32> = (0..t).flat_map(|r| (0..f).map(move |c| (r, c))).map(|(r, c)| at(r, 0, 0, c)).collect();
            let k: Vec<f32> = (0..t).flat_map(|r| (0..f).map(move |c| (r, c))).map(|(r, c)| at(r, 1, 0, c)).collect();
            let v: Vec<f32> = (0..t).flat_map(|r| (0..f).map(move |c| (r, c))).map(|(r, c)| at(r, 2, 0, c)).collect();
            Some((quantize_slice(&q)?, quantize_slice(&k)?, quantize_slice(&v)?))
        }
        None => None,
    };
    for h in 0..heads {
        let mut scores = vec![0f32; t * t];
        for i in 0..t {
            for j in 0..t {
                scores[i * t + j] = match (lut, &quant) {
                    (Some(m), Some(((qq, sq), (kq, sk), _))) => {
                        let mut acc = 0i32;
                        for c in 0..d {
                            acc = checked_acc(acc, m.mul(qq[i * f + h * d + c], kq[j * f + h * d + c]))?;
                        }
                        lookups += d as u64;
                        acc as f32 * sq * sk
                    }
                    _ => (0..d).map(|c| at(i, 0, h, c) * at(j, 1, h, c)).sum::<f32>(),
                } * inv_sqrt;
            }
        }
        for row in scores.chunks_exact_mut(t) {
            softmax_in_place(row);
        }
        match (lut, &quant) {
            (Some(m), Some((_, _, (vq, sv)))) => {
                let (pq, sp) = quantize_slice(&scores)?;
                for i in 0..t {
                    for c in 0..d {
                        let mut acc = 0i32;
                        for j in 0..t {
                            acc = checked_acc(acc, m.mul(pq[i * t + j], vq[j * f + h * d + c]))?;
                        }
                        out[i * f + h * d + c] = acc as f32 * sp * sv;
                    }
                }
                lookups += (t * t * d) as u64;
            }
            _ => {
                for i in 0..t {
                    for c in 0..d {
                        out[i * f + h * d + c] = (0..t).map(|j| scores[i * t + j] * at(j, 2, h, c)).sum();
                    }
                }
            }
        }
    }
    bump(counter, lookups);
    Tensor::new(vec![t, f], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axmul::build_exact_multiplier;

    fn geom(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> ConvGeom {
        ConvGeom {
            c_in,
            c_out,
            k_h: k,
            k_w: k,
            stride,
            padding,
            groups: 1,
        }
    }

    #[test]
    fn identity_kernel_with_exact_table() {
        let m = build_exact_multiplier();
        let x = Tensor::new(vec![1, 3, 3], vec![0.1, -0.5, 0.9, 1.3, -1.1, 0.0, 0.25, 0.7, -0.05]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, &geom(1, 1, 1, 1, 0), Arithmetic::Lut(&m), None).unwrap();
        let sx = 1.3 / 127.0;
        let sw = 1.0 / 127.0;
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= sx * 0.5 + sx * sw * 0.5 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn lut_invocations_equal_conv_macs() {
        let m = build_exact_multiplier();
        let g = geom(3, 16, 3, 1, 1);
        let x = Tensor::full(&[3, 32, 32], 0.5);
        let w = Tensor::full(&g.weight_shape(), 0.1);
        let counter = AtomicU64::new(0);
        conv2d_forward(&x, &w, None, &g, Arithmetic::Lut(&m), Some(&counter)).unwrap();
        assert_eq!(counter.load(Ordering::Relaxed), 442_368);
        assert_eq!(g.macs(32, 32), 442_368);
    }

    #[test]
    fn linear_counts_and_float_oracle() {
        let x = Tensor::from_vec((0..64).map(|i| (i as f32 * 0.37).sin()).collect());
        let w = Tensor::new(vec![100, 64], (0..6400).map(|i| (i as f32 * 0.11).cos() * 0.1).collect()).unwrap();
        let b = Tensor::from_vec((0..100).map(|i| i as f32 * 0.01).collect());
        let y = linear_forward(&x, &w, Some(&b), Arithmetic::Float, None).unwrap();
        for o in 0..100 {
            // products summed in index order, bias added last
            let mut want = 0.0f32;
            for i in 0..64 {
                want += x.data()[i] * w.data()[o * 64 + i];
            }
            assert_eq!(y.data()[o], want + b.data()[o]);
        }
        let m = build_exact_multiplier();
        let c = AtomicU64::new(0);
        linear_forward(&x, &w, Some(&b), Arithmetic::Lut(&m), Some(&c)).unwrap();
        assert_eq!(c.load(Ordering::Relaxed), 6_400);
    }

    #[test]
    fn identity_matrix_with_exact_table() {
        let m = build_exact_multiplier();
        let x = Tensor::from_vec(vec![0.3, -0.8, 0.55, 1.0]);
        let mut w = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let y = linear_forward(&x, &w, None, Arithmetic::Lut(&m), None).unwrap();
        let sx = 1.0 / 127.0;
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= sx * 0.5 + 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let g = geom(3, 4, 3, 1, 1);
        let w = Tensor::zeros(&g.weight_shape());
        assert!(conv2d_forward(&Tensor::zeros(&[2, 5, 5]), &w, None, &g, Arithmetic::Float, None).is_err());
        let lw = Tensor::zeros(&[3, 4]);
        assert!(linear_forward(&Tensor::zeros(&[5]), &lw, None, Arithmetic::Float, None).is_err());
        assert!(residual_add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn exact_layer_examples() {
        let r = relu(&Tensor::from_vec(vec![-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);
        let s = softmax(&Tensor::from_vec(vec![0.3; 7])).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-7));
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f32 - 3.5).collect()).unwrap();
        let ones = [1.0, 1.0];
        let zeros = [0.0, 0.0];
        let bn = batchnorm2d(
            &x,
            &BatchNormParams {
                gamma: &ones,
                beta: &zeros,
                mean: &zeros,
                var: &ones,
                eps: 0.0,
            },
        )
        .unwrap();
        assert_eq!(bn, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f32 * 1.7).sin() * 20.0).collect()).unwrap();
        let s = softmax(&x).unwrap();
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        // zero queries give uniform attention, so every output row is the mean of v
        let (t, f) = (4, 4);
        let mut qkv = Tensor::zeros(&[t, 3 * f]);
        for r in 0..t {
            for c in 0..f {
                qkv.data_mut()[r * 3 * f + 2 * f + c] = (r * f + c) as f32;
            }
        }
        let y = attention(&qkv, 2, None, None).unwrap();
        for r in 0..t {
            for c in 0..f {
                let mean = (0..t).map(|j| (j * f + c) as f32).sum::<f32>() / t as f32;
                assert!((y.data()[r * f + c] - mean).abs() < 1e-5);
            }
        }
        let m = build_exact_multiplier();
        let counter = AtomicU64::new(0);
        attention(&qkv, 2, Some(&m), Some(&counter)).unwrap();
        assert_eq!(counter.load(Ordering::Relaxed), (2 * t * t * f) as u64);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &v in &[-3.0f32, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-3;
            let f = |x: f32| gelu(&Tensor::from_vec(vec![x])).data()[0];
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-3);
        }
    }
}
