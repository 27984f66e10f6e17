//! Projective geometry: 4-point DLT, composition, inversion and the
//! 4-corner offset parameterization.
//!
//! Coordinates follow the pixel-centre convention: pixel `(x, y)` has its
//! centre at integer coordinates, origin top-left, `x` to the right and `y`
//! downwards.

pub mod imageio;
pub mod metrics;
pub mod stitch;
pub mod warp;

pub use metrics::{corner_error, psnr, psnr_masked, ssim};
pub use stitch::{grid_stitch, GridLayout, LocalTile, StitchOptions};
pub use warp::{warp, warp_with, Border};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Points with `w` at or below this are treated as lying on the line at
/// infinity.
pub const MIN_W: f64 = 1e-12;

const MIN_DET: f64 = 1e-12;

/// A non-degenerate 3x3 projective map normalized so that `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Default for Homography {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Normalizes `m` to `m[2][2] == 1` and rejects singular matrices.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < MIN_W {
            return Err(Error::Degenerate(format!(
                "homography with h33 = {s} cannot be normalized"
            )));
        }
        let mut n = m;
        for row in &mut n {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        n[2][2] = 1.0;
        let d = det3(&n);
        if !d.is_finite() || d.abs() < MIN_DET || n.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "singular homography (det = {d:e})"
            )));
        }
        Ok(Homography { m: n })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Axis-aligned scaling followed by a translation: `(sx x + tx, sy y + ty)`.
    pub fn scale_translate(sx: f64, sy: f64, tx: f64, ty: f64) -> Result<Self> {
        Homography::new([[sx, 0.0, tx], [0.0, sy, ty], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Matrix product `self * other`: applying the result equals applying
    /// `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Homography::new(m)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let d = det3(m);
        if d.abs() < MIN_DET {
            return Err(Error::Degenerate("inverse of a singular homography".into()));
        }
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
            [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
            [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = adj[i][j] / d;
            }
        }
        Homography::new(inv)
    }

    /// Maps a point with homogeneous division.
    pub fn apply(&self, p: Point) -> Result<Point> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.is_nan() || w <= MIN_W {
            return Err(Error::Degenerate(format!(
                "point ({}, {}) maps to the line at infinity (w = {w:e})",
                p[0], p[1]
            )));
        }
        let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
        let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
        if w == 1.0 {
            return Ok([x, y]);
        }
        Ok([x / w, y / w])
    }

    /// Nine numbers, row-major, on one line with 17 significant digits.
    pub fn to_text(&self) -> String {
        self.m
            .iter()
            .flatten()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_text(s: &str) -> Result<Homography> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("not a number: {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::InvalidArgument(format!(
                "homography needs 9 numbers, found {}",
                vals.len()
            )));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, v) in vals.into_iter().enumerate() {
            m[i / 3][i % 3] = v;
        }
        Homography::new(m)
    }
}

/// Twice the signed area of triangle `abc`.
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn has_collinear_triple(p: &[Point; 4]) -> bool {
    let scale = p
        .iter()
        .flat_map(|q| q.iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * scale;
    (0..4).any(|skip| {
        let t: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| p[i]).collect();
        cross(t[0], t[1], t[2]).abs() <= tol
    })
}

/// Solves for the homography mapping each `src[i]` to `dst[i]` (gauge
/// `h33 = 1`) by Gaussian elimination with partial pivoting on the 8x8
/// system.
pub fn dlt(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return Err(Error::Degenerate(
            "three of the four points are collinear".into(),
        ));
    }
    if src == dst {
        return Ok(Homography::IDENTITY);
    }
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Degenerate("singular DLT system".into()));
        }
        a.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0f64; 8];
    for row in (0..8).rev() {
        let mut s = a[row][8];
        for k in row + 1..8 {
            s -= a[row][k] * h[k];
        }
        h[row] = s / a[row][row];
    }
    Homography::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

/// Displacements of four reference corners, ordered top-left, top-right,
/// bottom-right, bottom-left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerOffsets {
    pub base: [Point; 4],
    pub offsets: [Point; 4],
}

/// Pixel-centre corners of a `width x height` image.
pub fn rect_corners(width: usize, height: usize) -> [Point; 4] {
    let (x1, y1) = (width as f64 - 1.0, height as f64 - 1.0);
    [[0.0, 0.0], [x1, 0.0], [x1, y1], [0.0, y1]]
}

impl CornerOffsets {
    pub fn zero(base: [Point; 4]) -> Self {
        CornerOffsets {
            base,
            offsets: [[0.0; 2]; 4],
        }
    }

    /// `[dx0, dy0, dx1, dy1, dx2, dy2, dx3, dy3]`.
    pub fn from_vec8(base: [Point; 4], v: &[f64]) -> Self {
        let mut offsets = [[0.0; 2]; 4];
        for i in 0..4 {
            offsets[i] = [v[2 * i], v[2 * i + 1]];
        }
        CornerOffsets { base, offsets }
    }

    pub fn to_vec8(&self) -> [f64; 8] {
        let mut v = [0.0; 8];
        for i in 0..4 {
            v[2 * i] = self.offsets[i][0];
            v[2 * i + 1] = self.offsets[i][1];
        }
        v
    }

    pub fn displaced(&self) -> [Point; 4] {
        let mut d = self.base;
        for i in 0..4 {
            d[i][0] += self.offsets[i][0];
            d[i][1] += self.offsets[i][1];
        }
        d
    }

    /// `dlt(base, base + offsets)`.
    pub fn to_homography(&self) -> Result<Homography> {
        dlt(&self.base, &self.displaced())
    }

    /// Offsets `h(c) - c` of every base corner.
    pub fn from_homography(h: &Homography, base: [Point; 4]) -> Result<Self> {
        let mut offsets = [[0.0; 2]; 4];
        for i in 0..4 {
            let p = h.apply(base[i])?;
            offsets[i] = [p[0] - base[i][0], p[1] - base[i][1]];
        }
        Ok(CornerOffsets { base, offsets })
    }

    /// Mean Euclidean length of the four displacements.
    pub fn mean_displacement(&self) -> f64 {
        self.offsets
            .iter()
            .map(|o| (o[0] * o[0] + o[1] * o[1]).sqrt())
            .sum::<f64>()
            / 4.0
    }

    /// Whether the displaced quad is strictly convex with the base winding.
    pub fn is_convex(&self) -> bool {
        let q = self.displaced();
        let signs: Vec<f64> = (0..4)
            .map(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4]))
            .collect();
        signs.iter().all(|&s| s > 0.0) || signs.iter().all(|&s| s < 0.0)
    }
}

/// Maps pixel coordinates of a `dst` sized image onto the `src` sized image
/// it was resampled from (half-pixel centre alignment).
pub fn resize_map(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Result<Homography> {
    if src_w == dst_w && src_h == dst_h {
        return Ok(Homography::IDENTITY);
    }
    let sx = src_w as f64 / dst_w as f64;
    let sy = src_h as f64 / dst_h as f64;
    Homography::scale_translate(sx, sy, 0.5 * sx - 0.5, 0.5 * sy - 0.5)
}
