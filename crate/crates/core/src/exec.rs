//! Feature-gated data-parallel helpers.
//!
//! With the `parallel` feature (the default) the heavy inner loops fan out
//! over rayon; without it the same entry points run sequentially. Both paths
//! produce bit-identical results: work is split along disjoint output rows or
//! independent items, never across a floating-point reduction.

/// Minimum output elements before a kernel bothers forking.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 14;

/// Apply `f` to each fixed-size row of `out`.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert_eq!(out.len() % row_len, 0);
    if out.len() >= PAR_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

/// Apply `f` to each fixed-size row of `out`.
#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert_eq!(out.len() % row_len, 0);
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Map `f` over independent items, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over independent items, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Run `f` inside a worker pool of `threads` threads (no-op pool when the
/// `parallel` feature is disabled or `threads` is zero).
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build worker pool")
        .install(f)
}

/// Run `f` inside a worker pool of `threads` threads (no-op pool when the
/// `parallel` feature is disabled or `threads` is zero).
#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}
