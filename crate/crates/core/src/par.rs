//! Data-parallel helpers. With the `parallel` feature the maps run on the
//! rayon pool; without it (or after [`force_sequential`]) they run in order.
//! Results are always returned in index order, so both paths are
//! interchangeable bit for bit.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Routes every helper in this module through the sequential path at runtime.
pub fn force_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::SeqCst)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// `items.iter().map(f).collect()`, possibly in parallel.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Applies `f` to fixed-size chunks of `out` together with the chunk index.
pub fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sizes the global rayon pool. Must run before any parallel helper; a
/// second call, or a call without the `parallel` feature, is a no-op.
pub fn init_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        return rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok();
    }
    #[allow(unreachable_code)]
    {
        let _ = n;
        false
    }
}
