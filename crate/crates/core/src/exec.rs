//! Order-preserving batch map.
//!
//! With the `parallel` feature (on by default) work is spread over a rayon
//! pool; without it, or when `parallelism == 1`, items run one after another
//! on the calling thread. Output order always matches input order.
//!
//! `parallelism` semantics: `0` uses rayon's global pool, `1` runs
//! sequentially, `n > 1` runs on a dedicated pool with `n` threads.

/// Maps `f` over `items`, returning results in input order.
pub fn map_ordered<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    if parallelism == 1 || items.len() < 2 {
        return map_sequential(items, f);
    }
    imp::map_parallel(items, parallelism, f)
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// True when the crate was built with rayon support.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    pub(super) fn map_parallel<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Send + Sync,
    {
        if parallelism == 0 {
            return items.par_iter().map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(e) => {
                log::warn!("could not build a {parallelism}-thread pool ({e}); running sequentially");
                super::map_sequential(items, f)
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub(super) fn map_parallel<T, R, F>(items: &[T], _parallelism: usize, f: F) -> Vec<R>
    where
        F: Fn(&T) -> R,
    {
        super::map_sequential(items, f)
    }
}
