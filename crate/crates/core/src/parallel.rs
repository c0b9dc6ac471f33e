//! Batch-level data parallelism with a sequential fallback.
//!
//! With the `parallel` feature, work is spread over the rayon pool unless the
//! process has been switched into sequential mode with [`set_threads`]`(0)`.
//! Without the feature everything runs on the calling thread. Either way the
//! helpers here preserve item order, so callers that reduce results in index
//! order get identical numbers in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Environment variable capping worker threads; `0` selects sequential mode.
pub const THREADS_ENV: &str = "HGC_THREADS";

/// Configure worker threads. `0` forces sequential execution.
///
/// The rayon global pool can only be built once per process, so a second call
/// with a different non-zero count only toggles sequential mode off.
pub fn set_threads(threads: usize) {
    SEQUENTIAL.store(threads == 0, Ordering::SeqCst);
    #[cfg(feature = "parallel")]
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

/// Apply [`THREADS_ENV`] if set. Returns the parsed value.
pub fn init_from_env() -> Option<usize> {
    let value = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
    set_threads(value);
    Some(value)
}

pub fn set_sequential(sequential: bool) {
    SEQUENTIAL.store(sequential, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed)
}

/// Run `f(index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, possibly in parallel, always in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Same as [`for_each_chunk`] but zips a second buffer chunked with its own stride.
pub fn for_each_chunk2<T, U, F>(a: &mut [T], a_len: usize, b: &mut [U], b_len: usize, f: F)
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}
