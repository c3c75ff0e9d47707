//! Chunked map with a sequential fallback.
//!
//! Chunk boundaries depend only on the input length and the chunk size, never on the
//! thread count, so a fold over the returned chunk results in order is identical
//! between the parallel and sequential paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn map_chunks<T, R, F>(items: &[T], chunk: usize, parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = parallel;
    items.chunks(chunk).map(f).collect()
}

pub(crate) fn map_each<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Caps the global worker pool. Without the `parallel` feature this is a no-op.
///
/// Returns false if the pool was already initialized.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}
