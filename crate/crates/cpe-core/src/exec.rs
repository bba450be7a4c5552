//! Deterministic data-parallel execution helpers.
//!
//! All parallel loops in this crate go through [`map_indexed`] or
//! [`map_chunked`]. Items (or fixed-size chunks of items) are mapped
//! independently and collected in index order, and every item derives its
//! randomness from its own RNG substream, so the result is bitwise identical
//! whether the map runs on a rayon pool of any size or sequentially.
//!
//! With the `parallel` feature disabled the crate never links rayon and both
//! helpers iterate sequentially. With the feature enabled the execution mode
//! can still be switched at runtime via [`set_compute_mode`], which the
//! benchmark suite uses to compare both paths.

use std::sync::atomic::{AtomicU8, Ordering};

/// Execution mode for data-parallel helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeMode {
    /// Use the rayon thread pool (requires the `parallel` feature).
    Parallel,
    /// Plain sequential iteration.
    Sequential,
}

static MODE: AtomicU8 = AtomicU8::new(0);

/// Select the execution mode used by all subsequent parallel helpers.
///
/// Without the `parallel` feature this is a no-op and execution is always
/// sequential.
pub fn set_compute_mode(mode: ComputeMode) {
    MODE.store(
        match mode {
            ComputeMode::Parallel => 0,
            ComputeMode::Sequential => 1,
        },
        Ordering::Relaxed,
    );
}

/// Current execution mode.
pub fn compute_mode() -> ComputeMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 0 {
        ComputeMode::Parallel
    } else {
        ComputeMode::Sequential
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if compute_mode() == ComputeMode::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map `f` over fixed-size index ranges covering `0..n`, collecting chunk
/// results in chunk order.
///
/// The chunk size is a constant of the call site, never derived from the
/// worker count, so the chunk decomposition (and therefore any per-chunk
/// floating-point accumulation order) is identical in both modes.
pub fn map_chunked<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    let ranges: Vec<std::ops::Range<usize>> =
        (0..n.div_ceil(chunk)).map(|k| (k * chunk)..((k + 1) * chunk).min(n)).collect();
    #[cfg(feature = "parallel")]
    {
        if compute_mode() == ComputeMode::Parallel {
            use rayon::prelude::*;
            return ranges.into_par_iter().map(f).collect();
        }
    }
    ranges.into_iter().map(f).collect()
}
