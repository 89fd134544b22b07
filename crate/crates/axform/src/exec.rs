//! Thread-pool executor for per-item work.

use axform_core::training::Executor;
use rayon::prelude::*;

/// Runs jobs on a dedicated pool. Results come back in item order, and the
/// trainer reduces them in that order, so outputs do not depend on the
/// thread count.
pub struct Pool {
    pool: Option<rayon::ThreadPool>,
}

impl Pool {
    /// `threads == 1` runs everything on the calling thread.
    pub fn new(threads: usize) -> Result<Self, String> {
        if threads <= 1 {
            return Ok(Pool { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        Ok(Pool { pool: Some(pool) })
    }
}

impl Executor for Pool {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R> {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}
