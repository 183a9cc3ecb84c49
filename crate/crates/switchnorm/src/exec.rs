//! Loop drivers that switch between rayon and plain iteration.
//!
//! Parallelism is only applied across independent output elements; the
//! summation order inside each element is fixed by the closure, so the
//! results are bitwise identical with the `parallel` feature on or off.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` to each `chunk_len`-sized chunk of `buf`.
pub(crate) fn for_each_chunk_mut<F>(buf: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    buf.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    buf.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Collect `f(0), f(1), ..., f(n-1)` preserving index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
