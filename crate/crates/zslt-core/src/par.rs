//! Data-parallel fan-out over batch indices.
//!
//! Per-item work is independent of ordering (each item derives its own RNG
//! substream) and results come back as an index-ordered `Vec`, so reductions
//! downstream stay deterministic. With the `parallel` feature (default) the
//! dispatching helper runs on rayon; without it, sequentially. Both explicit
//! variants stay available so benchmarks can compare them in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential reference path.
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync,
    R: Send,
{
    (0..n).map(f).collect()
}

/// Rayon fan-out; output order matches index order.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Feature-dispatched batch map used by training and evaluation.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}
