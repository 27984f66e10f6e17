//! Local Attention Kernel.
//!
//! Attention restricted to a `(2r+1) x (2r+1)` window around every query
//! position, split into three differentiable steps:
//!
//! 1. [`local_attention_logits`]: `M'(x, u) = <q(x), k(x + u)>`
//! 2. [`softmax_local`]: `M = softmax(M' / sqrt(C))` over each window
//! 3. [`local_attention_conv`]: `h(x) = sum_u M(x, u) v(x + u)`, i.e. a
//!    convolution whose kernel varies with the position `x`.
//!
//! Maps are stored as `[H, W, S, S]` with `S = 2r + 1`; entry `(i, j, a, b)`
//! pairs query `(i, j)` with key `(i + a - r, j + b - r)` (row, column).
//!
//! [`lak_fused`] runs all three in row blocks, and [`global_attention`] is the
//! quadratic reference used to validate the local path.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::kernels::gemm;
use crate::tensor::{Real, Tensor};

/// Rows of query positions processed together by the blocked kernels.
pub const BLOCK_ROWS: usize = 8;

/// Default element budget for [`global_attention`]'s `HW x HW` map.
pub const DEFAULT_GLOBAL_BUDGET: usize = 1 << 26;

/// How windows that leave the feature map are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Boundary {
    /// Out-of-bounds entries are excluded from the softmax and stay zero.
    #[default]
    Mask,
    /// Out-of-bounds keys and values are zero vectors: their logit is 0 and
    /// they take part in the softmax.
    ZeroPad,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Boundary::Mask),
            "zero-pad" | "zeropad" => Ok(Boundary::ZeroPad),
            _ => Err(Error::InvalidArgument(format!(
                "unknown boundary rule {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Boundary::Mask => "mask",
            Boundary::ZeroPad => "zero-pad",
        })
    }
}

/// Per-position local attention weights `[H, W, 2r+1, 2r+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttentionMap {
    pub data: Tensor,
    pub radius: usize,
    pub normalized: bool,
    pub boundary: Boundary,
}

impl LocalAttentionMap {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// `(H, W)` of the query grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[0], self.data.shape()[1])
    }

    /// Weight pairing query `(i, j)` with the key displaced by `(dy, dx)`.
    pub fn get(&self, i: usize, j: usize, dy: isize, dx: isize) -> Real {
        let s = self.side();
        let (_, w) = self.grid();
        let a = (dy + self.radius as isize) as usize;
        let b = (dx + self.radius as isize) as usize;
        self.data.data()[((i * w + j) * s + a) * s + b]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCostReport {
    pub multiply_accumulate_count: u64,
    pub attention_map_elements: u64,
}

impl std::ops::AddAssign for OpCostReport {
    fn add_assign(&mut self, rhs: Self) {
        self.multiply_accumulate_count += rhs.multiply_accumulate_count;
        self.attention_map_elements += rhs.attention_map_elements;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Local,
    Global,
}

/// Analytic cost of one attention pass (map generation plus aggregation).
pub fn cost_report(h: usize, w: usize, c: usize, r: usize, mode: AttentionMode) -> OpCostReport {
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let s2 = ((2 * r + 1) * (2 * r + 1)) as u64;
    match mode {
        AttentionMode::Local => OpCostReport {
            multiply_accumulate_count: 2 * h * w * s2 * c,
            attention_map_elements: h * w * s2,
        },
        AttentionMode::Global => OpCostReport {
            multiply_accumulate_count: 2 * h * h * w * w * c,
            attention_map_elements: h * h * w * w,
        },
    }
}

thread_local! {
    static COUNTER: Cell<OpCostReport> = const { Cell::new(OpCostReport {
        multiply_accumulate_count: 0,
        attention_map_elements: 0,
    }) };
}

fn count(macs: u64, map_elements: u64) {
    COUNTER.with(|c| {
        let mut v = c.get();
        v.multiply_accumulate_count += macs;
        v.attention_map_elements += map_elements;
        c.set(v);
    });
}

/// Clears this thread's forward-pass counters.
pub fn reset_counters() {
    COUNTER.with(|c| c.set(OpCostReport::default()));
}

/// Multiply-accumulates and attention-map elements produced by forward passes
/// issued from this thread since the last [`reset_counters`].
pub fn counters() -> OpCostReport {
    COUNTER.with(|c| c.get())
}

/// Raw window geometry shared by every kernel.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    s: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, r: usize) -> Self {
        Geom {
            c,
            h,
            w,
            r,
            s: 2 * r + 1,
        }
    }

    fn slots(&self) -> usize {
        self.s * self.s
    }

    /// In-bounds slot range `[lo, hi)` along one axis for query coordinate `p`.
    #[inline]
    fn range(&self, p: usize, extent: usize) -> (usize, usize) {
        let lo = self.r.saturating_sub(p);
        let hi = (extent + self.r - p).min(self.s);
        (lo, hi)
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        (0..self.h)
            .step_by(BLOCK_ROWS)
            .map(|i0| (i0, (i0 + BLOCK_ROWS).min(self.h)))
            .collect()
    }
}

fn feature_geom(q: &Tensor, k: &Tensor, r: usize) -> Result<Geom> {
    let (c, h, w) = q.chw()?;
    if k.shape() != q.shape() {
        return Err(Error::shape(format!(
            "query {:?} and key {:?} differ",
            q.shape(),
            k.shape()
        )));
    }
    if r == 0 {
        return Err(Error::InvalidArgument(
            "window radius must be at least 1".into(),
        ));
    }
    Ok(Geom::new(c, h, w, r))
}

fn map_geom(map: &Tensor, v: &Tensor, r: usize) -> Result<Geom> {
    let (c, h, w) = v.chw()?;
    let s = 2 * r + 1;
    if map.shape() != [h, w, s, s] {
        return Err(Error::shape(format!(
            "map {:?} does not match values {:?} at radius {}",
            map.shape(),
            v.shape(),
            r
        )));
    }
    Ok(Geom::new(c, h, w, r))
}

/// `[C, H, W]` to position-major `[H*W, C]`.
fn to_hwc(x: &[Real], c: usize, hw: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    out
}

fn from_hwc(x: &[Real], c: usize, hw: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = x[p * c + ch];
        }
    }
    out
}

#[inline]
fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(dst: &mut [Real], alpha: Real, src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

/// Raw logits for query rows `[i0, i1)` written into `out` (block-local).
fn logits_rows(g: &Geom, qt: &[Real], kt: &[Real], i0: usize, i1: usize, out: &mut [Real]) {
    let (c, w, s, r) = (g.c, g.w, g.s, g.r);
    for i in i0..i1 {
        let (alo, ahi) = g.range(i, g.h);
        for j in 0..w {
            let (blo, bhi) = g.range(j, w);
            let qv = &qt[(i * w + j) * c..][..c];
            let slot = &mut out[((i - i0) * w + j) * s * s..][..s * s];
            for a in alo..ahi {
                let ki = i + a - r;
                for b in blo..bhi {
                    let kj = j + b - r;
                    slot[a * s + b] = dot(qv, &kt[(ki * w + kj) * c..][..c]);
                }
            }
        }
    }
}

/// In-place scaled softmax over each window of a block of positions.
fn softmax_rows(g: &Geom, boundary: Boundary, scale: Real, i0: usize, i1: usize, m: &mut [Real]) {
    let (w, s) = (g.w, g.s);
    for i in i0..i1 {
        let (alo, ahi) = match boundary {
            Boundary::Mask => g.range(i, g.h),
            Boundary::ZeroPad => (0, s),
        };
        for j in 0..w {
            let (blo, bhi) = match boundary {
                Boundary::Mask => g.range(j, w),
                Boundary::ZeroPad => (0, s),
            };
            let slot = &mut m[((i - i0) * w + j) * s * s..][..s * s];
            let mut max = Real::NEG_INFINITY;
            for a in alo..ahi {
                for b in blo..bhi {
                    max = max.max(slot[a * s + b] * scale);
                }
            }
            let mut z = 0.0;
            for a in alo..ahi {
                for b in blo..bhi {
                    let e = (slot[a * s + b] * scale - max).exp();
                    slot[a * s + b] = e;
                    z += e;
                }
            }
            let inv = 1.0 / z;
            for a in 0..s {
                for b in 0..s {
                    if (alo..ahi).contains(&a) && (blo..bhi).contains(&b) {
                        slot[a * s + b] *= inv;
                    } else {
                        slot[a * s + b] = 0.0;
                    }
                }
            }
        }
    }
}

/// `h(x) = sum_u M(x,u) v(x+u)` for rows `[i0, i1)`; `m` is block-local and
/// `out` is the block-local slice of the position-major output.
fn conv_rows(g: &Geom, m: &[Real], vt: &[Real], i0: usize, i1: usize, out: &mut [Real]) {
    let (c, w, s, r) = (g.c, g.w, g.s, g.r);
    for i in i0..i1 {
        let (alo, ahi) = g.range(i, g.h);
        for j in 0..w {
            let (blo, bhi) = g.range(j, w);
            let slot = &m[((i - i0) * w + j) * s * s..][..s * s];
            let dst = &mut out[((i - i0) * w + j) * c..][..c];
            for a in alo..ahi {
                let vi = i + a - r;
                for b in blo..bhi {
                    let vj = j + b - r;
                    axpy(dst, slot[a * s + b], &vt[(vi * w + vj) * c..][..c]);
                }
            }
        }
    }
}

/// Gradient of the softmax for a block: `gl = scale * p * (g - sum(p g))`.
fn softmax_backward_rows(
    g: &Geom,
    boundary: Boundary,
    scale: Real,
    i0: usize,
    i1: usize,
    p: &[Real],
    gm: &mut [Real],
) {
    let (w, s) = (g.w, g.s);
    for i in i0..i1 {
        let (alo, ahi) = match boundary {
            Boundary::Mask => g.range(i, g.h),
            Boundary::ZeroPad => (0, s),
        };
        for j in 0..w {
            let (blo, bhi) = match boundary {
                Boundary::Mask => g.range(j, w),
                Boundary::ZeroPad => (0, s),
            };
            let base = ((i - i0) * w + j) * s * s;
            let ps = &p[base..base + s * s];
            let gs = &mut gm[base..base + s * s];
            let mut inner = 0.0;
            for a in alo..ahi {
                for b in blo..bhi {
                    inner += ps[a * s + b] * gs[a * s + b];
                }
            }
            for a in 0..s {
                for b in 0..s {
                    let k = a * s + b;
                    gs[k] = if (alo..ahi).contains(&a) && (blo..bhi).contains(&b) {
                        scale * ps[k] * (gs[k] - inner)
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Halo-extended row range of keys touched by query rows `[i0, i1)`.
fn halo(g: &Geom, i0: usize, i1: usize) -> (usize, usize) {
    (i0.saturating_sub(g.r), (i1 + g.r).min(g.h))
}

/// Accumulates `gq` rows and a halo-local `gk` partial for a block from the
/// block-local logit gradient `gl`.
fn logits_backward_rows(
    g: &Geom,
    qt: &[Real],
    kt: &[Real],
    i0: usize,
    i1: usize,
    gl: &[Real],
    gq_rows: &mut [Real],
    gk_halo: &mut [Real],
) {
    let (c, w, s, r) = (g.c, g.w, g.s, g.r);
    let (h0, _) = halo(g, i0, i1);
    for i in i0..i1 {
        let (alo, ahi) = g.range(i, g.h);
        for j in 0..w {
            let (blo, bhi) = g.range(j, w);
            let qv = &qt[(i * w + j) * c..][..c];
            let slot = &gl[((i - i0) * w + j) * s * s..][..s * s];
            let gqv = &mut gq_rows[((i - i0) * w + j) * c..][..c];
            for a in alo..ahi {
                let ki = i + a - r;
                for b in blo..bhi {
                    let kj = j + b - r;
                    let gv = slot[a * s + b];
                    if gv == 0.0 {
                        continue;
                    }
                    axpy(gqv, gv, &kt[(ki * w + kj) * c..][..c]);
                    axpy(&mut gk_halo[((ki - h0) * w + kj) * c..][..c], gv, qv);
                }
            }
        }
    }
}

/// Gradients of the aggregation step for a block: block-local `gm` and a
/// halo-local `gv` partial.
fn conv_backward_rows(
    g: &Geom,
    m: &[Real],
    vt: &[Real],
    ght: &[Real],
    i0: usize,
    i1: usize,
    gm: &mut [Real],
    gv_halo: &mut [Real],
) {
    let (c, w, s, r) = (g.c, g.w, g.s, g.r);
    let (h0, _) = halo(g, i0, i1);
    for i in i0..i1 {
        let (alo, ahi) = g.range(i, g.h);
        for j in 0..w {
            let (blo, bhi) = g.range(j, w);
            let go = &ght[(i * w + j) * c..][..c];
            let base = ((i - i0) * w + j) * s * s;
            for a in alo..ahi {
                let vi = i + a - r;
                for b in blo..bhi {
                    let vj = j + b - r;
                    let k = base + a * s + b;
                    gm[k] = dot(go, &vt[(vi * w + vj) * c..][..c]);
                    axpy(&mut gv_halo[((vi - h0) * w + vj) * c..][..c], m[k], go);
                }
            }
        }
    }
}

/// Adds halo-local partials into the full position-major buffer, in block
/// order.
fn merge_halos(g: &Geom, parts: Vec<((usize, usize), Vec<Real>)>, full: &mut [Real]) {
    let row = g.w * g.c;
    for ((h0, _), part) in parts {
        axpy(&mut full[h0 * row..h0 * row + part.len()], 1.0, &part);
    }
}

/// Raw local correlation `M'(x, u) = <q(x), k(x+u)>`; out-of-bounds entries
/// are zero.
pub fn local_attention_logits(q: &Tensor, k: &Tensor, r: usize) -> Result<LocalAttentionMap> {
    let g = feature_geom(q, k, r)?;
    let hw = g.h * g.w;
    let qt = to_hwc(q.data(), g.c, hw);
    let kt = to_hwc(k.data(), g.c, hw);
    let mut out = vec![0.0; hw * g.slots()];
    let row = g.w * g.slots();
    parallel::for_each_chunk_mut(&mut out, BLOCK_ROWS * row, |bi, chunk| {
        let i0 = bi * BLOCK_ROWS;
        let i1 = (i0 + BLOCK_ROWS).min(g.h);
        logits_rows(&g, &qt, &kt, i0, i1, chunk);
    });
    count((hw * g.slots() * g.c) as u64, (hw * g.slots()) as u64);
    Ok(LocalAttentionMap {
        data: Tensor::new(&[g.h, g.w, g.s, g.s], out)?,
        radius: r,
        normalized: false,
        boundary: Boundary::Mask,
    })
}

/// Gradients of [`local_attention_logits`] with respect to `q` and `k`.
pub fn local_attention_logits_backward(
    q: &Tensor,
    k: &Tensor,
    r: usize,
    gmap: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = feature_geom(q, k, r)?;
    let hw = g.h * g.w;
    let qt = to_hwc(q.data(), g.c, hw);
    let kt = to_hwc(k.data(), g.c, hw);
    let slots = g.slots();
    let blocks = g.blocks();
    let parts = parallel::map_indexed(blocks.len(), |bi| {
        let (i0, i1) = blocks[bi];
        let gl = &gmap.data()[i0 * g.w * slots..i1 * g.w * slots];
        let (h0, h1) = halo(&g, i0, i1);
        let mut gq = vec![0.0; (i1 - i0) * g.w * g.c];
        let mut gk = vec![0.0; (h1 - h0) * g.w * g.c];
        logits_backward_rows(&g, &qt, &kt, i0, i1, gl, &mut gq, &mut gk);
        (gq, ((h0, h1), gk))
    });
    let mut gqt = Vec::with_capacity(hw * g.c);
    let mut halos = Vec::with_capacity(parts.len());
    for (gq, hk) in parts {
        gqt.extend_from_slice(&gq);
        halos.push(hk);
    }
    let mut gkt = vec![0.0; hw * g.c];
    merge_halos(&g, halos, &mut gkt);
    Ok((
        Tensor::new(q.shape(), from_hwc(&gqt, g.c, hw))?,
        Tensor::new(k.shape(), from_hwc(&gkt, g.c, hw))?,
    ))
}

/// Scaled softmax `softmax(M' / sqrt(channels))` over every window.
pub fn softmax_local(raw: &LocalAttentionMap, channels: usize) -> Result<LocalAttentionMap> {
    softmax_local_with(raw, channels, raw.boundary)
}

pub fn softmax_local_with(
    raw: &LocalAttentionMap,
    channels: usize,
    boundary: Boundary,
) -> Result<LocalAttentionMap> {
    if raw.normalized {
        return Err(Error::InvalidArgument("map is already normalized".into()));
    }
    if channels == 0 {
        return Err(Error::InvalidArgument(
            "channel count must be positive".into(),
        ));
    }
    let (h, w) = raw.grid();
    let g = Geom::new(channels, h, w, raw.radius);
    let scale = 1.0 / (channels as Real).sqrt();
    let mut out = raw.data.clone();
    let row = g.w * g.slots();
    parallel::for_each_chunk_mut(out.data_mut(), BLOCK_ROWS * row, |bi, chunk| {
        let i0 = bi * BLOCK_ROWS;
        let i1 = (i0 + BLOCK_ROWS).min(g.h);
        softmax_rows(&g, boundary, scale, i0, i1, chunk);
    });
    Ok(LocalAttentionMap {
        data: out,
        radius: raw.radius,
        normalized: true,
        boundary,
    })
}

/// Gradient of [`softmax_local`] given its output `p`.
pub fn softmax_local_backward(
    p: &LocalAttentionMap,
    channels: usize,
    gmap: &Tensor,
) -> Result<Tensor> {
    let (h, w) = p.grid();
    let g = Geom::new(channels, h, w, p.radius);
    let scale = 1.0 / (channels as Real).sqrt();
    let mut out = gmap.clone();
    let row = g.w * g.slots();
    let pd = p.data.data();
    parallel::for_each_chunk_mut(out.data_mut(), BLOCK_ROWS * row, |bi, chunk| {
        let i0 = bi * BLOCK_ROWS;
        let i1 = (i0 + BLOCK_ROWS).min(g.h);
        let pb = &pd[i0 * row..i1 * row];
        softmax_backward_rows(&g, p.boundary, scale, i0, i1, pb, chunk);
    });
    Ok(out)
}

/// Position-varying convolution `h(x) = sum_u M(x,u) v(x+u)`; out-of-bounds
/// values contribute zero.
pub fn local_attention_conv(map: &LocalAttentionMap, v: &Tensor) -> Result<Tensor> {
    let g = map_geom(&map.data, v, map.radius)?;
    let hw = g.h * g.w;
    let vt = to_hwc(v.data(), g.c, hw);
    let mut out = vec![0.0; hw * g.c];
    let row = g.w * g.slots();
    let md = map.data.data();
    parallel::for_each_chunk_mut(&mut out, BLOCK_ROWS * g.w * g.c, |bi, chunk| {
        let i0 = bi * BLOCK_ROWS;
        let i1 = (i0 + BLOCK_ROWS).min(g.h);
        conv_rows(&g, &md[i0 * row..i1 * row], &vt, i0, i1, chunk);
    });
    count((hw * g.slots() * g.c) as u64, 0);
    Tensor::new(v.shape(), from_hwc(&out, g.c, hw))
}

/// Gradients of [`local_attention_conv`] with respect to the map and `v`.
pub fn local_attention_conv_backward(
    map: &LocalAttentionMap,
    v: &Tensor,
    gh: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = map_geom(&map.data, v, map.radius)?;
    let hw = g.h * g.w;
    let vt = to_hwc(v.data(), g.c, hw);
    let ght = to_hwc(gh.data(), g.c, hw);
    let row = g.w * g.slots();
    let md = map.data.data();
    let blocks = g.blocks();
    let parts = parallel::map_indexed(blocks.len(), |bi| {
        let (i0, i1) = blocks[bi];
        let (h0, h1) = halo(&g, i0, i1);
        let mut gm = vec![0.0; (i1 - i0) * row];
        let mut gv = vec![0.0; (h1 - h0) * g.w * g.c];
        conv_backward_rows(
            &g,
            &md[i0 * row..i1 * row],
            &vt,
            &ght,
            i0,
            i1,
            &mut gm,
            &mut gv,
        );
        (gm, ((h0, h1), gv))
    });
    let mut gm_all = Vec::with_capacity(hw * g.slots());
    let mut halos = Vec::with_capacity(parts.len());
    for (gm, hv) in parts {
        gm_all.extend_from_slice(&gm);
        halos.push(hv);
    }
    let mut gvt = vec![0.0; hw * g.c];
    merge_halos(&g, halos, &mut gvt);
    Ok((
        Tensor::new(map.data.shape(), gm_all)?,
        Tensor::new(v.shape(), from_hwc(&gvt, g.c, hw))?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LakOptions {
    pub radius: usize,
    pub boundary: Boundary,
    /// Process row blocks end to end so raw logits exist for one block at a
    /// time.
    pub low_memory: bool,
}

impl LakOptions {
    pub fn new(radius: usize) -> Self {
        LakOptions {
            radius,
            boundary: Boundary::Mask,
            low_memory: true,
        }
    }
}

/// `h = softmax(<q, k> / sqrt(C)) (x) v`. Returns the attended features and
/// the normalized map.
pub fn lak_fused(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    opts: LakOptions,
) -> Result<(Tensor, LocalAttentionMap)> {
    let g = feature_geom(q, k, opts.radius)?;
    if v.shape() != q.shape() {
        return Err(Error::shape(format!(
            "values {:?} differ from queries {:?}",
            v.shape(),
            q.shape()
        )));
    }
    if !opts.low_memory {
        let raw = local_attention_logits(q, k, opts.radius)?;
        let map = softmax_local_with(&raw, g.c, opts.boundary)?;
        drop(raw);
        let h = local_attention_conv(&map, v)?;
        return Ok((h, map));
    }
    let hw = g.h * g.w;
    let qt = to_hwc(q.data(), g.c, hw);
    let kt = to_hwc(k.data(), g.c, hw);
    let vt = to_hwc(v.data(), g.c, hw);
    let scale = 1.0 / (g.c as Real).sqrt();
    let row = g.w * g.slots();
    let mut map = vec![0.0; hw * g.slots()];
    let mut out = vec![0.0; hw * g.c];
    let blocks = g.blocks();
    {
        let mut map_chunks: Vec<&mut [Real]> = map.chunks_mut(BLOCK_ROWS * row).collect();
        let mut out_chunks: Vec<&mut [Real]> = out.chunks_mut(BLOCK_ROWS * g.w * g.c).collect();
        let work: Vec<(usize, &mut [Real], &mut [Real])> = map_chunks
            .drain(..)
            .zip(out_chunks.drain(..))
            .enumerate()
            .map(|(i, (m, o))| (i, m, o))
            .collect();
        let run = |(bi, m, o): (usize, &mut [Real], &mut [Real])| {
            let (i0, i1) = blocks[bi];
            logits_rows(&g, &qt, &kt, i0, i1, m);
            softmax_rows(&g, opts.boundary, scale, i0, i1, m);
            conv_rows(&g, m, &vt, i0, i1, o);
        };
        if parallel::deterministic() || rayon::current_num_threads() <= 1 {
            work.into_iter().for_each(run);
        } else {
            use rayon::prelude::*;
            work.into_par_iter().for_each(run);
        }
    }
    count((2 * hw * g.slots() * g.c) as u64, (hw * g.slots()) as u64);
    Ok((
        Tensor::new(q.shape(), from_hwc(&out, g.c, hw))?,
        LocalAttentionMap {
            data: Tensor::new(&[g.h, g.w, g.s, g.s], map)?,
            radius: opts.radius,
            normalized: true,
            boundary: opts.boundary,
        },
    ))
}

/// Gradients of [`lak_fused`] with respect to `q`, `k` and `v`, given the
/// normalized map from the forward pass.
pub fn lak_fused_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    map: &LocalAttentionMap,
    gh: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = feature_geom(q, k, map.radius)?;
    let hw = g.h * g.w;
    let qt = to_hwc(q.data(), g.c, hw);
    let kt = to_hwc(k.data(), g.c, hw);
    let vt = to_hwc(v.data(), g.c, hw);
    let ght = to_hwc(gh.data(), g.c, hw);
    let scale = 1.0 / (g.c as Real).sqrt();
    let row = g.w * g.slots();
    let md = map.data.data();
    let blocks = g.blocks();
    let parts = parallel::map_indexed(blocks.len(), |bi| {
        let (i0, i1) = blocks[bi];
        let (h0, h1) = halo(&g, i0, i1);
        let m = &md[i0 * row..i1 * row];
        let mut gm = vec![0.0; (i1 - i0) * row];
        let mut gv = vec![0.0; (h1 - h0) * g.w * g.c];
        conv_backward_rows(&g, m, &vt, &ght, i0, i1, &mut gm, &mut gv);
        softmax_backward_rows(&g, map.boundary, scale, i0, i1, m, &mut gm);
        let mut gq = vec![0.0; (i1 - i0) * g.w * g.c];
        let mut gk = vec![0.0; (h1 - h0) * g.w * g.c];
        logits_backward_rows(&g, &qt, &kt, i0, i1, &gm, &mut gq, &mut gk);
        (gq, ((h0, h1), gk), ((h0, h1), gv))
    });
    let mut gqt = Vec::with_capacity(hw * g.c);
    let mut kh = Vec::new();
    let mut vh = Vec::new();
    for (gq, k_part, v_part) in parts {
        gqt.extend_from_slice(&gq);
        kh.push(k_part);
        vh.push(v_part);
    }
    let mut gkt = vec![0.0; hw * g.c];
    let mut gvt = vec![0.0; hw * g.c];
    merge_halos(&g, kh, &mut gkt);
    merge_halos(&g, vh, &mut gvt);
    Ok((
        Tensor::new(q.shape(), from_hwc(&gqt, g.c, hw))?,
        Tensor::new(k.shape(), from_hwc(&gkt, g.c, hw))?,
        Tensor::new(v.shape(), from_hwc(&gvt, g.c, hw))?,
    ))
}

/// Full `HW x HW` scaled dot-product attention. With `window = Some(r)` every
/// query is hard-masked to its `(2r+1)^2` neighbourhood before the softmax.
/// Refuses maps larger than `budget` elements.
pub fn global_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: Option<usize>,
    budget: usize,
) -> Result<Tensor> {
    let (c, h, w) = q.chw()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("global attention inputs differ in shape"));
    }
    let n = h * w;
    if n * n > budget {
        return Err(Error::Budget {
            requested: n * n,
            budget,
        });
    }
    // logits[n, n] = qᵀ k
    let mut logits = vec![0.0; n * n];
    gemm(
        n,
        c,
        n,
        1.0 / (c as Real).sqrt(),
        q.data(),
        1,
        n as isize,
        k.data(),
        n as isize,
        1,
        0.0,
        &mut logits,
        n as isize,
        1,
    );
    for (p, row) in logits.chunks_mut(n).enumerate() {
        let (pi, pj) = ((p / w) as isize, (p % w) as isize);
        if let Some(r) = window {
            let r = r as isize;
            for (u, l) in row.iter_mut().enumerate() {
                let (ui, uj) = ((u / w) as isize, (u % w) as isize);
                if (ui - pi).abs() > r || (uj - pj).abs() > r {
                    *l = Real::NEG_INFINITY;
                }
            }
        }
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut z = 0.0;
        for l in row.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        row.iter_mut().for_each(|l| *l /= z);
    }
    // out[c, n] = v[c, n] · pᵀ
    let mut out = vec![0.0; c * n];
    gemm(
        c,
        n,
        n,
        1.0,
        v.data(),
        n as isize,
        1,
        &logits,
        1,
        n as isize,
        0.0,
        &mut out,
        n as isize,
        1,
    );
    count((2 * n * n * c) as u64, (n * n) as u64);
    Tensor::new(q.shape(), out)
}
