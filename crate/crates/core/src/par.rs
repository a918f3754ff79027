//! Deterministic chunked map-reduce over collocation points.
//!
//! Work is split into fixed-size chunks; chunk results are always combined
//! in chunk order with the same associativity, so parallel and sequential
//! execution produce bitwise-identical sums regardless of thread count.

use serde::{Deserialize, Serialize};

/// Chunk size for batched point evaluation. Fixed so that results do not
/// depend on thread count or batch splitting heuristics.
pub const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    /// The mode that will actually run: parallel falls back to sequential
    /// when the `parallel` feature is disabled.
    pub fn effective(self) -> ExecMode {
        #[cfg(feature = "parallel")]
        {
            self
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = self;
            ExecMode::Sequential
        }
    }
}

impl Default for ExecMode {
    fn default() -> Self {
        ExecMode::Parallel.effective()
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|i| i * CHUNK..((i + 1) * CHUNK).min(n))
        .collect()
}

/// Map each chunk of `0..n` and fold the results in chunk order.
pub fn map_reduce_chunks<T, F, R>(n: usize, mode: ExecMode, map: F, reduce: R, init: T) -> T
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    R: Fn(T, T) -> T,
{
    let ranges = chunk_ranges(n);
    match mode.effective() {
        ExecMode::Sequential => ranges.into_iter().map(map).fold(init, reduce),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                let parts: Vec<T> = ranges.into_par_iter().map(map).collect();
                parts.into_iter().fold(init, reduce)
            }
            #[cfg(not(feature = "parallel"))]
            unreachable!("effective() rules out Parallel without the feature")
        }
    }
}

/// Elementwise `a += b` for gradient accumulators.
pub fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        // Sums of many floats are order-sensitive; the chunked reduction must
        // erase the difference between execution modes.
        let n = 10 * CHUNK + 137;
        let vals: Vec<f64> = (0..n)
            .map(|i| ((i * 2654435761) % 1000) as f64 * 1e-3)
            .collect();
        let sum = |mode: ExecMode| {
            map_reduce_chunks(
                n,
                mode,
                |r| vals[r].iter().map(|v| v.sin()).sum::<f64>(),
                |a, b| a + b,
                0.0,
            )
        };
        let seq = sum(ExecMode::Sequential);
        let par = sum(ExecMode::Parallel);
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn covers_every_index_once() {
        let n = 3 * CHUNK + 1;
        let total =
            map_reduce_chunks(n, ExecMode::Sequential, |r| r.len(), |a, b| a + b, 0usize);
        assert_eq!(total, n);
    }
}
