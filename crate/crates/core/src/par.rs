//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over rayon whenever the
//! configured worker count is above one. With the feature off, or with a single
//! worker, every helper runs a plain iterator. Results are always collected in
//! input order so reductions downstream see the same sequence regardless of the
//! thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps the number of workers used by the helpers in this module.
///
/// `0` means "use whatever rayon's global pool offers". `1` forces the
/// sequential path.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

/// Effective worker count for the next parallel region.
pub fn threads() -> usize {
    match THREADS.load(Ordering::Relaxed) {
        0 => available(),
        n => n,
    }
}

#[cfg(feature = "parallel")]
fn available() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn available() -> usize {
    1
}

/// Whether the helpers will actually fan out.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && threads() > 1
}

/// Runs `f` inside a pool sized by [`threads`] when parallelism is enabled.
#[cfg(feature = "parallel")]
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let n = threads();
    if n > 1 && n != rayon::current_num_threads() {
        match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    } else {
        f()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in input order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Applies `f` to consecutive `chunk`-sized pieces of `data` along with the
/// chunk index. Chunks are disjoint, so the result does not depend on
/// scheduling.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk * 8 {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
