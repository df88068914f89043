//! Order-preserving parallel map.
//!
//! The only concurrency primitive in the crate: map a function over
//! `0..n` and collect results in index order. With the `parallel` feature
//! off (or at one thread) this is a plain loop; outputs are identical
//! either way, which is what makes CSV artifacts thread-count-independent.

#[cfg(feature = "parallel")]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
