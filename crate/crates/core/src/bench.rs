//! Local versus global attention cost: analytic counts, instrumented
//! counters, wall clock and peak heap usage.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alloc;
use crate::error::{Error, Result};
use crate::lak::{self, cost_report, AttentionMode, LakOptions, OpCostReport};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub r: usize,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub mode: AttentionMode,
    pub case: BenchCase,
    /// Counted by the kernels during the run.
    pub measured: OpCostReport,
    pub predicted: OpCostReport,
    pub wall_ms: f64,
    /// Peak heap bytes above the level at entry; 0 without the tracking
    /// allocator.
    pub peak_bytes: usize,
    /// Set when the global pass was refused for exceeding the budget.
    pub refused: Option<usize>,
}

/// Attention cases of a `K`-level pyramid on an `h x w` input: level `k`
/// runs on a grid halved `K - k + 1` times with radius `k + 1`.
pub fn pyramid_cases(h: usize, w: usize, c: usize, levels: usize) -> Vec<BenchCase> {
    (1..=levels)
        .map(|k| {
            let d = 1 << (levels - k + 1);
            BenchCase {
                h: h / d,
                w: w / d,
                c,
                r: k + 1,
            }
        })
        .collect()
}

fn inputs(case: BenchCase, seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| {
        Tensor::from_fn(&[case.c, case.h, case.w], |_| {
            rng.random_range(-1.0..1.0) as Real
        })
    })
}

/// Runs one attention pass and records its costs.
pub fn run_case(
    case: BenchCase,
    mode: AttentionMode,
    budget: usize,
    seed: u64,
) -> Result<BenchRow> {
    let [q, k, v] = inputs(case, seed);
    lak::reset_counters();
    let start = Instant::now();
    let (result, peak_bytes) = alloc::measure_peak(|| match mode {
        AttentionMode::Local => lak::lak_fused(&q, &k, &v, LakOptions::new(case.r)).map(|(h, _)| h),
        AttentionMode::Global => lak::global_attention(&q, &k, &v, None, budget),
    });
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let refused = match result {
        Ok(_) => None,
        Err(Error::Budget { budget, .. }) => Some(budget),
        Err(e) => return Err(e),
    };
    Ok(BenchRow {
        mode,
        case,
        measured: lak::counters(),
        predicted: cost_report(case.h, case.w, case.c, case.r, mode),
        wall_ms,
        peak_bytes,
        refused,
    })
}

/// Both modes for every case. Fails if a local map is not smaller than the
/// global one while the window is smaller than the image.
pub fn run_bench(cases: &[BenchCase], budget: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(2 * cases.len());
    for (i, &case) in cases.iter().enumerate() {
        let local = run_case(case, AttentionMode::Local, budget, seed + i as u64)?;
        let global = run_case(case, AttentionMode::Global, budget, seed + i as u64)?;
        let side = 2 * case.r + 1;
        if side * side < case.h * case.w
            && local.predicted.attention_map_elements >= global.predicted.attention_map_elements
        {
            return Err(Error::InvalidArgument(format!(
                "local map not smaller than global for {case:?}"
            )));
        }
        rows.push(local);
        rows.push(global);
    }
    Ok(rows)
}
