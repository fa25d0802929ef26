//! Index-parallel map with a sequential fallback.
//!
//! With the `parallel` feature the map runs on the rayon pool when asked to;
//! without it (or with `parallel = false`) it is a plain iterator. Output order
//! is the index order either way, so results are bit-identical.

pub(crate) fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// True when the crate was built with the rayon backend.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
