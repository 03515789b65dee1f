//! Instance-level data parallelism. Results always come back in input order,
//! so any reduction over them is independent of the worker count.

use crate::error::{ParError, Result};

pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Executor {
    /// Single-threaded reference executor.
    pub fn sequential() -> Self {
        Executor {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers == 1` is the sequential path. Without the `parallel` feature
    /// every worker count runs sequentially.
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(ParError::Config("workers must be at least 1".into()));
        }
        if workers == 1 {
            return Ok(Self::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| ParError::Config(format!("thread pool: {e}")))?;
            Ok(Executor {
                workers,
                pool: Some(pool),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::warn!("built without the parallel feature; running {workers} workers sequentially");
            Ok(Executor { workers })
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// `items.iter().enumerate().map(f)`, in order.
    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect());
        }
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}
