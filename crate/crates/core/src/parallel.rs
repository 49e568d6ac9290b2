//! Row-parallel execution helpers.
//!
//! Every parallel kernel in the crate splits its output into independent
//! rows, so the result is bitwise identical whichever path runs. With the
//! `parallel` feature disabled, [`Execution::Parallel`] silently runs the
//! sequential loop.

/// Execution strategy for the data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Below this many output scalars, kernels stay sequential even when
/// `Parallel` is requested.
const MIN_PARALLEL_WORK: usize = 1 << 14;

impl Execution {
    /// The default strategy: parallel when the feature is compiled in and the
    /// `CVQ_THREADS` cap is not 1.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") && thread_cap().is_none_or(|n| n > 1) {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Value of `CVQ_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("CVQ_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Installs the global rayon pool sized by `CVQ_THREADS`. Later calls are
/// no-ops.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    if let Some(n) = thread_cap() {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Fills `out` in chunks of `row_len`, calling `f(row_index, row)`.
pub fn for_each_row<F>(exec: Execution, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel && out.len() >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    let _ = MIN_PARALLEL_WORK;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}
