//! Backward warping with bilinear sampling.
//!
//! `warp(image, h, ...)` produces `out(x) = image(h(x))`: the homography maps
//! OUTPUT coordinates to INPUT coordinates. Under this convention
//! `warp(warp(I, A), B) == warp(I, A * B)`, so a cascade of per-level
//! estimates accumulates as the left-to-right product.

use super::{Homography, Point};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Border {
    /// Taps outside the image read 0.
    #[default]
    Zero,
    /// Taps outside the image read the nearest edge pixel; points outside
    /// the pixel-edge domain still produce 0.
    Clamp,
}

#[inline]
fn lerp(a: Real, b: Real, t: Real) -> Real {
    a + t * (b - a)
}

/// Bilinear sample of channel plane `plane` (`h x w`) at `p`.
#[inline]
pub(crate) fn sample(plane: &[Real], h: usize, w: usize, p: Point, border: Border) -> Real {
    let (x, y) = (p[0], p[1]);
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return 0.0;
    }
    if border == Border::Clamp
        && !(x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5)
    {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as Real;
    let fy = (y - y0) as Real;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |xi: isize, yi: isize| -> Real {
        match border {
            Border::Zero => {
                if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                    0.0
                } else {
                    plane[yi as usize * w + xi as usize]
                }
            }
            Border::Clamp => {
                let xc = xi.clamp(0, w as isize - 1) as usize;
                let yc = yi.clamp(0, h as isize - 1) as usize;
                plane[yc * w + xc]
            }
        }
    };
    let top = lerp(tap(x0, y0), tap(x0 + 1, y0), fx);
    let bottom = lerp(tap(x0, y0 + 1), tap(x0 + 1, y0 + 1), fx);
    lerp(top, bottom, fy)
}

/// Backward warp with zero fill outside the input.
pub fn warp(image: &Tensor, h: &Homography, out_h: usize, out_w: usize) -> Result<Tensor> {
    warp_with(image, h, out_h, out_w, Border::Zero)
}

pub fn warp_with(
    image: &Tensor,
    h: &Homography,
    out_h: usize,
    out_w: usize,
    border: Border,
) -> Result<Tensor> {
    let (c, ih, iw) = image.chw()?;
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let hw_in = ih * iw;
    let hw_out = out_h * out_w;
    for y in 0..out_h {
        for x in 0..out_w {
            let Ok(p) = h.apply([x as f64, y as f64]) else {
                continue;
            };
            for ch in 0..c {
                let plane = &image.data()[ch * hw_in..(ch + 1) * hw_in];
                out.data_mut()[ch * hw_out + y * out_w + x] = sample(plane, ih, iw, p, border);
            }
        }
    }
    Ok(out)
}

/// Per-pixel flag: whether `h` maps the output pixel strictly inside the
/// input so that all four bilinear taps are real pixels.
pub fn valid_mask(
    h: &Homography,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<bool> {
    let mut mask = vec![false; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            if let Ok(p) = h.apply([x as f64, y as f64]) {
                mask[y * out_w + x] = p[0] >= 0.0
                    && p[1] >= 0.0
                    && p[0] <= (in_w - 1) as f64
                    && p[1] <= (in_h - 1) as f64;
            }
        }
    }
    mask
}
