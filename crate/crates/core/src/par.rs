//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the closures run on the rayon global pool;
//! without it they run in order on the calling thread. Output order always
//! matches input order, so results are identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Batches smaller than this stay on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PAR_LEN: usize = 32;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() >= MIN_PAR_LEN {
            return items.par_iter().with_min_len(MIN_PAR_LEN / 2).map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Like [`map`], with no minimum batch size. Meant for coarse work items
/// such as provider calls or whole-concept scoring.
pub fn map_coarse<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs [`map_coarse`] on a dedicated pool of `threads` workers. Falls back
/// to the global pool if the pool cannot be built.
pub fn map_coarse_bounded<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
            Err(_) => map_coarse(items, f),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        items.iter().map(f).collect()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
