//! Process-wide execution knobs.
//!
//! Kernels split their work into fixed-size chunks and merge partial results
//! in chunk order, so the thread count never changes a result. The
//! deterministic flag additionally forces every chunk onto the calling
//! thread.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::Relaxed);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::Relaxed)
}

/// Configures the global worker pool. Only the first call has an effect.
pub fn init_threads(threads: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global();
}

/// Maps `f` over `0..n` and returns the results in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if deterministic() || rayon::current_num_threads() <= 1 || n <= 1 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Runs `f` on disjoint mutable chunks of `data`, each `chunk` elements long.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    if deterministic() || rayon::current_num_threads() <= 1 {
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
