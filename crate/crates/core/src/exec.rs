//! Execution policy for the data-parallel kernels.
//!
//! Every kernel splits its work into chunks whose size never depends on the
//! thread count, and reductions combine per-chunk partials in chunk order.
//! [`Exec::Parallel`] and [`Exec::Sequential`] therefore produce
//! bit-identical results; only wall-clock time differs.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per chunk for row-blocked kernels.
pub const ROW_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is on, otherwise identical to
    /// `Sequential`.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fallible ordered map; the first error in index order wins.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    /// Runs `f(first_row, rows)` over consecutive blocks of `chunk_rows`
    /// rows of a row-major buffer with `row_len` columns.
    pub fn for_row_chunks<F>(self, data: &mut [f64], row_len: usize, chunk_rows: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if data.is_empty() || row_len == 0 {
            return;
        }
        let step = row_len * chunk_rows.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(step)
                .enumerate()
                .for_each(|(i, chunk)| f(i * chunk_rows.max(1), chunk));
            return;
        }
        data.chunks_mut(step)
            .enumerate()
            .for_each(|(i, chunk)| f(i * chunk_rows.max(1), chunk));
    }

    /// Computes one partial per block of `chunk` indices of `0..n` and folds
    /// the partials left-to-right in block order.
    pub fn reduce_chunks<T, M, R>(self, n: usize, chunk: usize, map: M, mut fold: R) -> Option<T>
    where
        T: Send,
        M: Fn(Range<usize>) -> T + Sync + Send,
        R: FnMut(T, T) -> T,
    {
        let chunk = chunk.max(1);
        let blocks = n.div_ceil(chunk);
        let partials = self.map(blocks, |b| map(b * chunk..((b + 1) * chunk).min(n)));
        let mut iter = partials.into_iter();
        let first = iter.next()?;
        Some(iter.fold(first, &mut fold))
    }
}
