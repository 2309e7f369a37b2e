//! Data-parallel helpers. With the default `parallel` feature these fan out
//! over rayon; without it they fall back to plain sequential loops. Results
//! are collected in index order either way, so both builds produce identical
//! output bit for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..len`, preserving index order.
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().with_min_len(64).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// True when the build actually fans work out over rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
