//! Catmull-Rom bicubic resampling (a = -0.5) with edge clamping.

use super::{Real, Tensor};
use crate::error::{Error, Result};

const A: f64 = -0.5;

fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: the four clamped source taps and their weights.
fn axis_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * ratio - 0.5;
            let base = pos.floor();
            let frac = pos - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, src as isize - 1) as usize;
                wts[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Output extent for `extent * num / den`, rounded, minimum 1.
pub fn scaled_extent(extent: usize, num: usize, den: usize) -> usize {
    (((extent * num) as f64 / den as f64).round() as usize).max(1)
}

/// Resizes a `[C, H, W]` image by the rational factor `num / den`.
pub fn resize_bicubic(x: &Tensor, num: usize, den: usize) -> Result<Tensor> {
    if num == 0 || den == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize scale {}/{}",
            num, den
        )));
    }
    let (_, h, w) = x.chw()?;
    resize_bicubic_to(x, scaled_extent(h, num, den), scaled_extent(w, num, den))
}

/// Resizes a `[C, H, W]` image to exactly `out_h x out_w`.
pub fn resize_bicubic_to(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(
            "resize to or from an empty image".into(),
        ));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    // horizontal pass into [C, H, out_w], then vertical
    let mut tmp = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &x.data()[(ch * h + y) * w..][..w];
            for (ox, (idx, wts)) in tx.iter().enumerate() {
                let mut s = 0.0;
                for k in 0..4 {
                    s += wts[k] * row[idx[k]] as f64;
                }
                tmp[(ch * h + y) * out_w + ox] = s;
            }
        }
    }
    let mut out = vec![0.0 as Real; c * out_h * out_w];
    for ch in 0..c {
        for (oy, (idx, wts)) in ty.iter().enumerate() {
            for ox in 0..out_w {
                let mut s = 0.0;
                for k in 0..4 {
                    s += wts[k] * tmp[(ch * h + idx[k]) * out_w + ox];
                }
                out[(ch * out_h + oy) * out_w + ox] = s as Real;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
