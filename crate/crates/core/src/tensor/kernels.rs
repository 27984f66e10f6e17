//! Forward and backward kernels for the dense ops.
//!
//! These are plain functions over tensors; [`super::tape::Tape`] wires them
//! into the reverse-mode graph.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    beta: Real,
    c: &mut [Real],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass buffers sized for the given extents/strides.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn check_kernel(x: &Tensor, w: &Tensor, ksize: usize) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, wd) = x.chw()?;
    match w.shape()[..] {
        [cout, wcin, kh, kw] if wcin == cin && kh == ksize && kw == ksize => Ok((cout, cin, h, wd)),
        _ => Err(Error::shape(format!(
            "kernel {:?} incompatible with input {:?} ({}x{} expected)",
            w.shape(),
            x.shape(),
            ksize,
            ksize
        ))),
    }
}

fn check_bias(b: Option<&Tensor>, cout: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != cout => Err(Error::shape(format!(
            "bias of {} elements for {} output channels",
            b.len(),
            cout
        ))),
        _ => Ok(()),
    }
}

/// Unfolds a `[C, H, W]` input into `[C*9, H*W]` columns for a 3x3 kernel with
/// zero padding 1.
fn im2col3(x: &[Real], c: usize, h: usize, w: usize) -> Vec<Real> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[Real], c: usize, h: usize, w: usize) -> Vec<Real> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// 3x3 cross-correlation, zero padding 1, stride 1.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (cout, cin, h, wd) = check_kernel(x, w, 3)?;
    check_bias(b, cout)?;
    let hw = h * wd;
    let cols = im2col3(x.data(), cin, h, wd);
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = b {
        for (o, row) in out.chunks_mut(hw).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    let kk = cin * 9;
    gemm(
        cout,
        kk,
        hw,
        1.0,
        w.data(),
        kk as isize,
        1,
        &cols,
        hw as isize,
        1,
        if b.is_some() { 1.0 } else { 0.0 },
        &mut out,
        hw as isize,
        1,
    );
    Tensor::new(&[cout, h, wd], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
/// The input gradient is skipped (returned as `None`) unless `need_input`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (cout, cin, h, wd) = check_kernel(x, w, 3)?;
    let hw = h * wd;
    let kk = cin * 9;
    let cols = im2col3(x.data(), cin, h, wd);
    let mut gw = vec![0.0; cout * kk];
    // gw = gy · colsᵀ
    gemm(
        cout,
        hw,
        kk,
        1.0,
        gy.data(),
        hw as isize,
        1,
        &cols,
        1,
        hw as isize,
        0.0,
        &mut gw,
        kk as isize,
        1,
    );
    drop(cols);
    let gb: Vec<Real> = gy.data().chunks(hw).map(|r| r.iter().sum()).collect();
    let gw = Tensor::new(w.shape(), gw)?;
    let gb = Tensor::new(&[cout], gb)?;
    if !need_input {
        return Ok((None, gw, gb));
    }
    let mut gcols = vec![0.0; kk * hw];
    // gcols = wᵀ · gy
    gemm(
        kk,
        cout,
        hw,
        1.0,
        w.data(),
        1,
        kk as isize,
        gy.data(),
        hw as isize,
        1,
        0.0,
        &mut gcols,
        hw as isize,
        1,
    );
    let gx = col2im3(&gcols, cin, h, wd);
    Ok((Some(Tensor::new(&[cin, h, wd], gx)?), gw, gb))
}

/// Per-pixel linear map of channel vectors, optionally with bias.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (cout, cin, h, wd) = check_kernel(x, w, 1)?;
    check_bias(b, cout)?;
    let hw = h * wd;
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = b {
        for (o, row) in out.chunks_mut(hw).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    gemm(
        cout,
        cin,
        hw,
        1.0,
        w.data(),
        cin as isize,
        1,
        x.data(),
        hw as isize,
        1,
        if b.is_some() { 1.0 } else { 0.0 },
        &mut out,
        hw as isize,
        1,
    );
    Tensor::new(&[cout, h, wd], out)
}

pub fn conv1x1_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (cout, cin, h, wd) = check_kernel(x, w, 1)?;
    let hw = h * wd;
    let mut gw = vec![0.0; cout * cin];
    gemm(
        cout,
        hw,
        cin,
        1.0,
        gy.data(),
        hw as isize,
        1,
        x.data(),
        1,
        hw as isize,
        0.0,
        &mut gw,
        cin as isize,
        1,
    );
    let mut gx = vec![0.0; cin * hw];
    gemm(
        cin,
        cout,
        hw,
        1.0,
        w.data(),
        1,
        cin as isize,
        gy.data(),
        hw as isize,
        1,
        0.0,
        &mut gx,
        hw as isize,
        1,
    );
    let gb: Vec<Real> = gy.data().chunks(hw).map(|r| r.iter().sum()).collect();
    Ok((
        Tensor::new(&[cin, h, wd], gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[cout], gb)?,
    ))
}

/// Max over disjoint 2x2 windows. Returns the output and, per output element,
/// the flat input index that won (first in row-major scan order on ties).
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even extents, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[u32], gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(gy.data()) {
        g[i as usize] += v;
    }
    gx
}

pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let hw = (h * w) as Real;
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<Real>() / hw)
        .collect();
    Tensor::new(&[c, 1, 1], out)
}

pub fn global_avgpool_backward(input_shape: &[usize], gy: &Tensor) -> Tensor {
    let hw: usize = input_shape[1..].iter().product();
    let scale = 1.0 / hw as Real;
    let mut gx = Tensor::zeros(input_shape);
    for (plane, g) in gx.data_mut().chunks_mut(hw).zip(gy.data()) {
        plane.fill(g * scale);
    }
    gx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Values saved by [`batchnorm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: BnMode,
    pub xhat: Vec<Tensor>,
    pub inv_std: Vec<Real>,
}

/// Batch normalization over a list of `[C, H, W]` samples. Train mode
/// normalizes with the batch statistics (biased variance) and updates
/// `stats` with the unbiased variance; infer mode reads `stats`.
pub fn batchnorm(
    xs: &[&Tensor],
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<(Vec<Tensor>, BnCache)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("batchnorm on an empty batch".into()))?;
    let (c, h, w) = first.chw()?;
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::shape(format!(
                "batchnorm batch mixes shapes {:?} and {:?}",
                first.shape(),
                x.shape()
            )));
        }
    }
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c {
        return Err(Error::shape(format!(
            "batchnorm parameters sized for {} channels, input has {}",
            gamma.len(),
            c
        )));
    }
    let hw = h * w;
    let count = (xs.len() * hw) as Real;
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for x in xs {
                    s += x.data()[ch * hw..(ch + 1) * hw].iter().sum::<Real>();
                }
                let m = s / count;
                let mut v = 0.0;
                for x in xs {
                    v += x.data()[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|a| (a - m) * (a - m))
                        .sum::<Real>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            let unbias = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                stats.var[ch] =
                    (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
            (mean, var)
        }
        BnMode::Infer => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut outs = Vec::with_capacity(xs.len());
    let mut xhats = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xhat = vec![0.0; c * hw];
        let mut y = vec![0.0; c * hw];
        for ch in 0..c {
            let (g, b, m, s) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            let src = &x.data()[ch * hw..(ch + 1) * hw];
            for i in 0..hw {
                let n = (src[i] - m) * s;
                xhat[ch * hw + i] = n;
                y[ch * hw + i] = g * n + b;
            }
        }
        outs.push(Tensor::new(x.shape(), y)?);
        xhats.push(Tensor::new(x.shape(), xhat)?);
    }
    Ok((
        outs,
        BnCache {
            mode,
            xhat: xhats,
            inv_std,
        },
    ))
}

/// Gradients of [`batchnorm`] with respect to every input sample, `gamma` and
/// `beta`. Train-mode gradients include the batch-statistic terms.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    gys: &[Tensor],
) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
    let shape = cache.xhat[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let count = (gys.len() * hw) as Real;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for (gy, xh) in gys.iter().zip(&cache.xhat) {
        for ch in 0..c {
            let g = &gy.data()[ch * hw..(ch + 1) * hw];
            let n = &xh.data()[ch * hw..(ch + 1) * hw];
            gbeta[ch] += g.iter().sum::<Real>();
            ggamma[ch] += g.iter().zip(n).map(|(a, b)| a * b).sum::<Real>();
        }
    }
    let mut gxs = Vec::with_capacity(gys.len());
    for (gy, xh) in gys.iter().zip(&cache.xhat) {
        let mut gx = vec![0.0; c * hw];
        for ch in 0..c {
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            let g = &gy.data()[ch * hw..(ch + 1) * hw];
            let n = &xh.data()[ch * hw..(ch + 1) * hw];
            let dst = &mut gx[ch * hw..(ch + 1) * hw];
            match cache.mode {
                BnMode::Train => {
                    let mg = gbeta[ch] / count;
                    let mgn = ggamma[ch] / count;
                    for i in 0..hw {
                        dst[i] = scale * (g[i] - mg - n[i] * mgn);
                    }
                }
                BnMode::Infer => {
                    for i in 0..hw {
                        dst[i] = scale * g[i];
                    }
                }
            }
        }
        gxs.push(Tensor::new(&shape, gx)?);
    }
    Ok((gxs, Tensor::new(&[c], ggamma)?, Tensor::new(&[c], gbeta)?))
}
