//! Data-parallel execution helpers.
//!
//! Every helper splits work at boundaries that do not depend on the thread
//! count, and any cross-chunk reduction is summed in chunk order, so the
//! parallel and sequential paths produce bitwise-identical results. With the
//! `parallel` feature disabled, or when `NOISNN_STRICT=1` is set, the
//! sequential path is used unconditionally.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// `NOISNN_STRICT=1` pins execution to the sequential path.
pub fn strict_mode() -> bool {
    static STRICT: OnceLock<bool> = OnceLock::new();
    *STRICT.get_or_init(|| {
        std::env::var("NOISNN_STRICT")
            .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
            .unwrap_or(false)
    })
}

/// Overrides the execution path for the current process. Used by benches.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !strict_mode() && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Sizes the global worker pool from `NOISNN_THREADS` when it is set.
/// Returns the thread count in effect.
pub fn configure_from_env() -> usize {
    let requested = std::env::var("NOISNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    configure_threads(requested)
}

#[cfg(feature = "parallel")]
pub fn configure_threads(threads: Option<usize>) -> usize {
    if let Some(n) = threads {
        // Fails only if the global pool already exists; keep whatever it has.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: Option<usize>) -> usize {
    1
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Sums equally sized partial buffers produced per chunk, in chunk order.
pub fn sum_partials(partials: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}
