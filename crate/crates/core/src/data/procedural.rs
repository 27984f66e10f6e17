use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::resize::resize_bicubic_to;
use crate::tensor::{Real, Tensor};

/// Soft step of half-width `edge` around 0 (negative inside).
fn soft_inside(d: f64, edge: f64) -> f64 {
    let t = (0.5 - d / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited random field: coarse lattice noise, bicubically upsampled.
fn lattice_noise(rng: &mut ChaCha8Rng, cell: usize, h: usize, w: usize) -> Tensor {
    let gh = h / cell + 3;
    let gw = w / cell + 3;
    let coarse = Tensor::from_fn(&[3, gh, gw], |_| rng.random_range(-1.0..1.0));
    let fine = resize_bicubic_to(&coarse, gh * cell, gw * cell).expect("positive extents");
    fine.crop(cell, cell, w, h).expect("lattice covers image")
}

/// Deterministic textured RGB image in `[0, 1]`: colour gradients, soft
/// rectangles and ellipses, and two octaves of smooth noise.
pub fn procedural_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; 3 * h * w];
    let (fh, fw) = (h as f64, w as f64);
    for c in 0..3 {
        let a: f64 = rng.random_range(0.25..0.75);
        let bx: f64 = rng.random_range(-0.3..0.3);
        let by: f64 = rng.random_range(-0.3..0.3);
        for y in 0..h {
            for x in 0..w {
                img[(c * h + y) * w + x] =
                    a + bx * (x as f64 / fw - 0.5) + by * (y as f64 / fh - 0.5);
            }
        }
    }
    let shapes = rng.random_range(8..16);
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..fw);
        let cy = rng.random_range(0.0..fh);
        let rx = rng.random_range(0.05..0.25) * fw;
        let ry = rng.random_range(0.05..0.25) * fh;
        let ellipse = rng.random_bool(0.5);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let opacity = rng.random_range(0.4..0.8);
        let edge = 3.0;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let d = if ellipse {
                    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
                } else {
                    ((dx.abs() - 1.0) * rx).max((dy.abs() - 1.0) * ry)
                };
                let alpha = opacity * soft_inside(d, edge);
                if alpha > 0.0 {
                    for (c, col) in color.iter().enumerate() {
                        let v = &mut img[(c * h + y) * w + x];
                        *v += alpha * (col - *v);
                    }
                }
            }
        }
    }
    let coarse = lattice_noise(&mut rng, 24, h, w);
    let fine = lattice_noise(&mut rng, 10, h, w);
    for (i, v) in img.iter_mut().enumerate() {
        *v += 0.12 * coarse.data()[i] as f64 + 0.05 * fine.data()[i] as f64;
    }
    Tensor::new(
        &[3, h, w],
        img.into_iter().map(|v| v.clamp(0.0, 1.0) as Real).collect(),
    )
    .expect("sized")
}
