//! Grid stitching of high-resolution local views onto a low-resolution
//! global view, with neighbour-averaged cell corners.
//!
//! The canvas is the global image bicubically upsampled by an integer
//! factor. Cell `(i, j)` covers a `cell_w x cell_h` block of the canvas and
//! its local image has the same pixel size. Cell corners sit on pixel
//! EDGES (`-0.5` and `extent - 0.5`) so that neighbouring cells share them
//! exactly.

use super::warp::{sample, Border};
use super::{dlt, CornerOffsets, Homography, Point};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::resize::resize_bicubic;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LocalTile {
    pub image: Tensor,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StitchOptions {
    pub rows: usize,
    pub cols: usize,
    /// Canvas upsampling factor applied to the global image.
    pub scale: usize,
}

/// Final per-cell corners in canvas coordinates.
#[derive(Clone, Debug)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; offsets are relative to the nominal cell corners.
    pub cells: Vec<CornerOffsets>,
    /// Cells whose estimate failed and fell back to the nominal corners.
    pub fallback: Vec<bool>,
}

/// Edge corners of a `w x h` image: TL, TR, BR, BL.
pub fn edge_corners(w: usize, h: usize) -> [Point; 4] {
    let (x1, y1) = (w as f64 - 0.5, h as f64 - 0.5);
    [[-0.5, -0.5], [x1, -0.5], [x1, y1], [-0.5, y1]]
}

/// Vertex-grid indices of the four corners of cell `(i, j)`.
fn cell_vertices(i: usize, j: usize, cols: usize) -> [usize; 4] {
    let v = |a: usize, b: usize| a * (cols + 1) + b;
    [v(i, j), v(i, j + 1), v(i + 1, j + 1), v(i + 1, j)]
}

/// Replaces every grid vertex by the mean of its estimates from all
/// incident cells (single pass). `quads` is row-major, one quad per cell.
pub fn average_corners(rows: usize, cols: usize, quads: &[[Point; 4]]) -> Result<Vec<[Point; 4]>> {
    if quads.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} quads for a {rows}x{cols} grid",
            quads.len()
        )));
    }
    let nv = (rows + 1) * (cols + 1);
    let mut sum = vec![[0.0f64; 2]; nv];
    let mut count = vec![0usize; nv];
    for i in 0..rows {
        for j in 0..cols {
            for (c, &v) in cell_vertices(i, j, cols).iter().enumerate() {
                let p = quads[i * cols + j][c];
                sum[v][0] += p[0];
                sum[v][1] += p[1];
                count[v] += 1;
            }
        }
    }
    let mean: Vec<Point> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64])
        .collect();
    Ok((0..rows * cols)
        .map(|cell| cell_vertices(cell / cols, cell % cols, cols).map(|v| mean[v]))
        .collect())
}

/// Stitches `locals` onto the upsampled `global`.
///
/// `estimate(cell, target, local)` returns `H` with
/// `target(x) ~ local(H x)` in the pixel coordinates of the two
/// equally-sized images, where `target` is the canvas crop of the cell.
pub fn grid_stitch<E>(
    global: &Tensor,
    locals: &[LocalTile],
    opts: StitchOptions,
    estimate: E,
) -> Result<(Tensor, GridLayout)>
where
    E: Fn(usize, &Tensor, &Tensor) -> Result<Homography> + Sync + Send,
{
    let StitchOptions { rows, cols, scale } = opts;
    if rows == 0 || cols == 0 || scale == 0 {
        return Err(Error::InvalidArgument(
            "grid and scale must be positive".into(),
        ));
    }
    let canvas = resize_bicubic(global, scale, 1)?;
    let (c, ch_, cw_) = canvas.chw()?;
    if ch_ % rows != 0 || cw_ % cols != 0 {
        return Err(Error::shape(format!(
            "canvas {cw_}x{ch_} does not split into a {rows}x{cols} grid"
        )));
    }
    let (cell_h, cell_w) = (ch_ / rows, cw_ / cols);
    let mut by_cell: Vec<Option<&Tensor>> = vec![None; rows * cols];
    for t in locals {
        if t.row >= rows || t.col >= cols {
            return Err(Error::InvalidArgument(format!(
                "tile ({}, {}) outside grid",
                t.row, t.col
            )));
        }
        let (tc, th, tw) = t.image.chw()?;
        if tc != c || th != cell_h || tw != cell_w {
            return Err(Error::shape(format!(
                "tile ({}, {}) is {tc}x{th}x{tw}, cells are {c}x{cell_h}x{cell_w}",
                t.row, t.col
            )));
        }
        by_cell[t.row * cols + t.col] = Some(&t.image);
    }
    let q = edge_corners(cell_w, cell_h);
    let origin = |cell: usize| -> Point {
        [
            ((cell % cols) * cell_w) as f64,
            ((cell / cols) * cell_h) as f64,
        ]
    };
    let nominal = |cell: usize| -> [Point; 4] {
        let o = origin(cell);
        q.map(|p| [o[0] + p[0], o[1] + p[1]])
    };

    let estimates: Vec<Option<[Point; 4]>> = parallel::map_indexed(rows * cols, |cell| {
        let local = by_cell[cell]?;
        let o = origin(cell);
        let target = canvas
            .crop(o[0] as usize, o[1] as usize, cell_w, cell_h)
            .ok()?;
        let inv = estimate(cell, &target, local)
            .and_then(|h| h.inverse())
            .ok()?;
        let mut quad = [[0.0; 2]; 4];
        for k in 0..4 {
            let p = inv.apply(q[k]).ok()?;
            quad[k] = [o[0] + p[0], o[1] + p[1]];
        }
        let co = CornerOffsets {
            base: nominal(cell),
            offsets: [[0.0; 2]; 4],
        };
        let disp = CornerOffsets {
            offsets: std::array::from_fn(|k| {
                [quad[k][0] - co.base[k][0], quad[k][1] - co.base[k][1]]
            }),
            ..co
        };
        disp.is_convex().then_some(quad)
    });
    let fallback: Vec<bool> = estimates
        .iter()
        .zip(&by_cell)
        .map(|(e, l)| l.is_some() && e.is_none())
        .collect();
    let quads: Vec<[Point; 4]> = estimates
        .iter()
        .enumerate()
        .map(|(cell, e)| e.unwrap_or_else(|| nominal(cell)))
        .collect();
    let averaged = average_corners(rows, cols, &quads)?;

    let mut mosaic = canvas.clone();
    let plane = cw_ * ch_;
    let local_plane = cell_w * cell_h;
    for cell in 0..rows * cols {
        let Some(local) = by_cell[cell] else { continue };
        let quad = averaged[cell];
        let place = dlt(&quad, &q)?;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &quad {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let xs = (x0.ceil().max(0.0) as usize)..=(x1.floor().min(cw_ as f64 - 1.0) as usize);
        let ys = (y0.ceil().max(0.0) as usize)..=(y1.floor().min(ch_ as f64 - 1.0) as usize);
        for y in ys {
            for x in xs.clone() {
                let Ok(u) = place.apply([x as f64, y as f64]) else {
                    continue;
                };
                if u[0] < -0.5
                    || u[1] < -0.5
                    || u[0] > cell_w as f64 - 0.5
                    || u[1] > cell_h as f64 - 0.5
                {
                    continue;
                }
                for k in 0..c {
                    let src = &local.data()[k * local_plane..(k + 1) * local_plane];
                    mosaic.data_mut()[k * plane + y * cw_ + x] =
                        sample(src, cell_h, cell_w, u, Border::Clamp);
                }
            }
        }
    }
    let cells = averaged
        .iter()
        .enumerate()
        .map(|(cell, quad)| {
            let base = nominal(cell);
            CornerOffsets {
                base,
                offsets: std::array::from_fn(|k| {
                    [quad[k][0] - base[k][0], quad[k][1] - base[k][1]]
                }),
            }
        })
        .collect();
    Ok((
        mosaic,
        GridLayout {
            rows,
            cols,
            cells,
            fallback,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homography::psnr;
    use crate::tensor::Real;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn consistent_estimates_are_unchanged() {
        let quads: Vec<[Point; 4]> = (0..4)
            .map(|cell| {
                let (i, j) = ((cell / 2) as f64, (cell % 2) as f64);
                [[j, i], [j + 1.0, i], [j + 1.0, i + 1.0], [j, i + 1.0]]
            })
            .collect();
        assert_eq!(average_corners(2, 2, &quads).unwrap(), quads);
    }

    #[test]
    fn shared_edge_corners_average() {
        // 2x1 grid: cells stacked vertically share the middle edge.
        let top = [[0.0, 0.0], [10.0, 0.0], [12.0, 10.0], [2.0, 10.0]];
        let bottom = [[0.0, 10.0], [10.0, 10.0], [10.0, 20.0], [0.0, 20.0]];
        let avg = average_corners(2, 1, &[top, bottom]).unwrap();
        assert_eq!(avg[0][3], [1.0, 10.0]);
        assert_eq!(avg[0][2], [11.0, 10.0]);
        assert_eq!(avg[1][0], avg[0][3]);
        assert_eq!(avg[0][0], top[0]);
    }

    fn smooth(x: f64, y: f64, ch: usize) -> f64 {
        0.5 + 0.2 * (0.045 * x + ch as f64).sin() * (0.037 * y).cos()
            + 0.15 * (0.02 * (x + y) + 0.7 * ch as f64).sin()
    }

    fn sample_fn(h: usize, w: usize, f: impl Fn(f64, f64, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            f((p % w) as f64, (p / w) as f64, c) as Real
        })
    }

    #[test]
    fn synthetic_three_by_three_reaches_35db() {
        let (rows, cols, scale) = (3usize, 3usize, 4usize);
        let (gh, gw) = (24usize, 24usize);
        let (ch, cw) = (gh * scale, gw * scale);
        let (cell_h, cell_w) = (ch / rows, cw / cols);
        // global image: F at canvas resolution, area-consistent downsample
        let global = sample_fn(gh, gw, |x, y, c| {
            smooth(
                (x + 0.5) * scale as f64 - 0.5,
                (y + 0.5) * scale as f64 - 0.5,
                c,
            )
        });
        let truth = sample_fn(ch, cw, smooth);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vertices: Vec<Point> = Vec::new();
        for a in 0..=rows {
            for b in 0..=cols {
                let mut p = [(b * cell_w) as f64 - 0.5, (a * cell_h) as f64 - 0.5];
                if a > 0 && a < rows && b > 0 && b < cols {
                    p[0] += rng.random_range(-4.0..4.0);
                    p[1] += rng.random_range(-4.0..4.0);
                }
                vertices.push(p);
            }
        }
        let q = edge_corners(cell_w, cell_h);
        let mut tiles = Vec::new();
        let mut truths = Vec::new();
        for cell in 0..rows * cols {
            let (i, j) = (cell / cols, cell % cols);
            let quad = cell_vertices(i, j, cols).map(|v| vertices[v]);
            // local pixel u shows canvas point P(u)
            let p = dlt(&q, &quad).unwrap();
            let image = sample_fn(cell_h, cell_w, |x, y, c| {
                let s = p.apply([x, y]).unwrap();
                smooth(s[0], s[1], c)
            });
            let o = Homography::translation((j * cell_w) as f64, (i * cell_h) as f64);
            truths.push(p.inverse().unwrap().compose(&o).unwrap());
            tiles.push(LocalTile {
                image,
                row: i,
                col: j,
            });
        }
        let opts = StitchOptions { rows, cols, scale };
        let (mosaic, layout) =
            grid_stitch(&global, &tiles, opts, |cell, _, _| Ok(truths[cell])).unwrap();
        assert!(layout.fallback.iter().all(|f| !f));
        let db = psnr(&mosaic, &truth).unwrap();
        assert!(db >= 35.0, "mosaic PSNR {db}");
        let nominal =
            grid_stitch(&global, &tiles, opts, |_, _, _| Ok(Homography::IDENTITY)).unwrap();
        assert!(psnr(&nominal.0, &truth).unwrap() < db);
    }

    #[test]
    fn failing_estimator_falls_back() {
        let global = Tensor::full(&[3, 8, 4], 0.25);
        let tiles = vec![LocalTile {
            image: Tensor::full(&[3, 8, 8], 0.75),
            row: 0,
            col: 0,
        }];
        let opts = StitchOptions {
            rows: 2,
            cols: 1,
            scale: 2,
        };
        let (mosaic, layout) = grid_stitch(&global, &tiles, opts, |_, _, _| {
            Err(Error::Degenerate("no".into()))
        })
        .unwrap();
        assert_eq!(layout.fallback, vec![true, false]);
        assert_eq!(mosaic.at(0, 3, 3), 0.75);
        assert!((mosaic.at(0, 12, 3) - 0.25).abs() < 1e-12);
    }
}
