//! Execution policy for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) the loops below run on the rayon
//! pool; without it every [`Exec`] collapses to the sequential path. Both
//! paths compute each output element with the same arithmetic in the same
//! order, so results are bitwise identical regardless of policy.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Below this many multiply-adds a kernel stays on the calling thread.
pub const PAR_MIN_WORK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Process-wide default: parallel when compiled in and not disabled.
    pub fn current() -> Exec {
        if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Parallel only if `work` is large enough to amortize the fork.
    pub fn for_work(work: usize) -> Exec {
        if work >= PAR_MIN_WORK {
            Exec::current()
        } else {
            Exec::Sequential
        }
    }
}

/// Forces every kernel onto the sequential path (or releases the override).
pub fn set_force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// Configures the global rayon pool. A no-op without the `parallel` feature.
pub fn init_threads(threads: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

/// `(0..n).map(f).collect()` with results in index order.
pub fn map_indexed<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Calls `f(row_index, row)` for every `width`-sized row of `out`.
pub fn for_each_row_mut<F>(out: &mut [f64], width: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
        _ => out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row)),
    }
}
