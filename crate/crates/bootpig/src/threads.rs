//! Internal parallelism control.
//!
//! `BOOTPIG_THREADS` caps the worker count; 0 (or 1) forces fully
//! single-threaded execution. Parallel sections are restricted to
//! embarrassingly parallel per-record work with order-stable collection, so
//! results are identical at any thread count.

use std::sync::OnceLock;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

pub fn thread_limit() -> usize {
    match std::env::var("BOOTPIG_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(1).max(0),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

fn pool() -> &'static Option<rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = thread_limit();
        if n <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
        }
    })
}

/// Map `f` over 0..n, collecting results in index order.
pub fn par_map<T: Send, F: Fn(usize) -> T + Send + Sync>(n: usize, f: F) -> Vec<T> {
    match pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(&f).collect()
        }),
        None => (0..n).map(f).collect(),
    }
}
