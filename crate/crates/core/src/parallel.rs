//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the work runs on a rayon pool sized by `jobs`;
//! without it everything runs on the calling thread. Output order always
//! matches input order, so results are identical for every `jobs` value.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads to use when the caller asked for `jobs`.
/// `0` means "all available cores".
pub fn effective_jobs(jobs: usize) -> usize {
    #[cfg(feature = "parallel")]
    let n = if jobs == 0 {
        rayon::current_num_threads()
    } else {
        jobs
    };
    #[cfg(not(feature = "parallel"))]
    let n = {
        let _ = jobs;
        1
    };
    n
}

/// Map `f` over `items`, preserving order.
pub fn map_ordered<T, U, F>(items: &[T], jobs: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if jobs != 1 && items.len() > 1 {
            return with_pool(jobs, || items.par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    items.iter().map(f).collect()
}

/// Like [`map_ordered`] but short-circuits to the first error in input order.
pub fn try_map_ordered<T, U, E, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map_ordered(items, jobs, f).into_iter().collect()
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(op),
        Err(_) => op(),
    }
}
