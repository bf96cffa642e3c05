//! Execution of batch-level loops.
//!
//! With the `parallel` feature (default) the maps below fan out on rayon;
//! without it they are plain iterator loops. Both variants return results in
//! input order, and every caller reduces sequentially over that order, so the
//! two builds produce bit-identical numbers. Anything order-sensitive
//! (gradient sums, HVP accumulation, score updates) must go through an
//! ordered collect here rather than a parallel reduction.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, returning results in input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, returning results in input order.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Fallible [`map_ordered`]; the first error (in input order under the
/// sequential build, any error under rayon) aborts the map.
#[cfg(feature = "parallel")]
pub fn try_map_ordered<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Fallible [`map_ordered`].
#[cfg(not(feature = "parallel"))]
pub fn try_map_ordered<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    F: Fn(&T) -> Result<U, E>,
{
    items.iter().map(f).collect()
}

/// Runs `f` inside a rayon pool of `threads` workers when the `parallel`
/// feature is on; plain call otherwise. `None` keeps the global pool.
#[cfg(feature = "parallel")]
pub fn with_thread_limit<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("building rayon pool")
            .install(f),
        _ => f(),
    }
}

/// Runs `f` directly; the sequential build has no pool to size.
#[cfg(not(feature = "parallel"))]
pub fn with_thread_limit<R>(threads: Option<usize>, f: impl FnOnce() -> R) -> R {
    let _ = threads;
    f()
}
