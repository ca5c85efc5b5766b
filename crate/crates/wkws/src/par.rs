//! Data-parallel map used by synthesis, feature extraction, and scoring.
//!
//! With the `parallel` feature (default) this fans out over rayon; without
//! it the same code runs sequentially. Output order always matches input
//! order, so results are identical either way.

#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send, F: Fn(&T) -> U + Send + Sync>(items: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F: Fn(&T) -> U + Sync>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Cap the rayon pool size; no-op in sequential builds.
pub fn configure_jobs(jobs: usize) {
    #[cfg(feature = "parallel")]
    if jobs > 0 {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}
