//! Alignment metrics: corner error, PSNR and SSIM.

use super::{Homography, Point};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean Euclidean distance between the corners mapped by `est` and by `gt`.
pub fn corner_error(est: &Homography, gt: &Homography, base: &[Point; 4]) -> Result<f64> {
    let mut total = 0.0;
    for c in base {
        let a = est.apply(*c)?;
        let b = gt.apply(*c)?;
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; `+inf` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_masked(a, b, None)
}

/// PSNR restricted to the pixels where `mask` (one flag per `H x W`
/// position, shared across channels) is set.
pub fn psnr_masked(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.chw()?;
    let hw = h * w;
    if let Some(m) = mask {
        if m.len() != hw {
            return Err(Error::shape(format!(
                "mask of {} for {}x{} image",
                m.len(),
                h,
                w
            )));
        }
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ch in 0..c {
        for p in 0..hw {
            if mask.is_none_or(|m| m[p]) {
                let d = (a.data()[ch * hw + p] - b.data()[ch * hw + p]) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("PSNR over an empty mask".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WIN, w + 1 - SSIM_WIN);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            tmp[y * ow + j] = (0..SSIM_WIN).map(|k| g[k] * x[y * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03)
/// for images in `[0, 1]`, averaged over channels. The statistics are taken
/// over window positions that lie fully inside the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.chw()?;
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (K1 * 1.0).powi(2);
    let c2 = (K2 * 1.0).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &g);
        let (my, _, _) = filter_valid(&y, h, w, &g);
        let (sxx, _, _) = filter_valid(&xx, h, w, &g);
        let (syy, _, _) = filter_valid(&yy, h, w, &g);
        let (sxy, _, _) = filter_valid(&xy, h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Real;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn texture() -> Tensor {
        Tensor::from_fn(&[3, 32, 32], |i| {
            let (c, p) = (i / 1024, i % 1024);
            let (y, x) = ((p / 32) as Real, (p % 32) as Real);
            0.5 + 0.3 * ((x * 0.4 + c as Real).sin() * (y * 0.3).cos())
        })
    }

    #[test]
    fn equal_homographies_have_zero_corner_error() {
        let h = Homography::translation(1.5, -2.0);
        let base = super::super::rect_corners(128, 128);
        assert_eq!(corner_error(&h, &h, &base).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let base = super::super::rect_corners(128, 128);
        let e = corner_error(
            &Homography::translation(3.0, 4.0),
            &Homography::IDENTITY,
            &base,
        )
        .unwrap();
        assert!((e - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_self_is_one_and_psnr_is_infinite() {
        let t = texture();
        assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_and_ssim_fall_with_noise() {
        let t = texture();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut last_psnr = f64::INFINITY;
        let mut last_ssim = 1.0;
        for sigma in [0.01, 0.03, 0.1] {
            let n = Normal::new(0.0, sigma).unwrap();
            let mut noisy = t.clone();
            noisy
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += n.sample(&mut rng) as Real);
            let p = psnr(&t, &noisy).unwrap();
            let s = ssim(&t, &noisy).unwrap();
            assert!(p < last_psnr && s < last_ssim, "sigma {sigma}: {p} {s}");
            last_psnr = p;
            last_ssim = s;
        }
    }

    #[test]
    fn masked_psnr_ignores_unmasked_pixels() {
        let a = Tensor::zeros(&[1, 2, 2]);
        let b = Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = [true, true, true, false];
        assert_eq!(psnr_masked(&a, &b, Some(&m)).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }
}
