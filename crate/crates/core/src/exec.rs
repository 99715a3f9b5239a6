//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (on by default) `Execution::Parallel` fans work
//! out over the rayon pool. Without it, or with `Execution::Sequential`, the
//! same closures run in a plain loop. Results are always collected in index
//! order, so reductions over them are identical in both modes.

use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Fixed block length for blocked reductions. Keeping this independent of
/// the worker count is what makes floating-point sums reproducible.
pub const BLOCK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` when the crate was built with rayon, else `Sequential`.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }

    /// Maps `f` over `0..n`, collecting results in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self.effective() {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over consecutive blocks of `block` indices covering `0..n`.
    pub fn map_blocks<T, F>(self, n: usize, block: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Range<usize>) -> T + Sync + Send,
    {
        let block = block.max(1);
        let blocks = n.div_ceil(block);
        self.map(blocks, |b| {
            let start = b * block;
            f(start..(start + block).min(n))
        })
    }

    /// Applies `f` to each mutable chunk of `data` (chunk `i` covers rows
    /// `i*chunk..`), in parallel when enabled.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self.effective() {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            }
            _ => data
                .chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }
}

/// Configures the global rayon pool. A no-op without the `parallel` feature.
/// Returns `false` if the pool had already been initialised.
pub fn set_workers(workers: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        true
    }
}
