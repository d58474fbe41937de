//! Worker pool. `PROBEKIT_THREADS` caps the worker count; results are
//! always collected in input order so they never depend on it.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::Result;

pub const THREADS_ENV: &str = "PROBEKIT_THREADS";

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            b = b.num_threads(n);
        }
        b.build().expect("worker pool")
    })
}

pub fn parallel_map<T, R, Fun>(items: &[T], f: Fun) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    Fun: Fn(&T) -> Result<R> + Sync + Send,
{
    pool().install(|| items.par_iter().map(f).collect())
}
