//! Shared rayon pool, capped by the DRNN_THREADS environment variable.
//!
//! All parallel sections use fixed work partitioning and ordered merges, so
//! results are byte-identical regardless of the cap.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn thread_pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Ok(v) = std::env::var("DRNN_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    builder = builder.num_threads(n);
                }
            }
        }
        builder.build().expect("thread pool construction")
    })
}
