//! Data-parallel map. With the `parallel` feature and more than one thread
//! the work runs on a dedicated rayon pool; otherwise it runs in order on
//! the calling thread. Results are always returned in input order.

use crate::error::Result;

pub struct Pool {
    threads: usize,
    #[cfg(feature = "parallel")]
    inner: Option<rayon::ThreadPool>,
}

impl Pool {
    /// `threads == 0` uses every available core.
    pub fn new(threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            if threads == 1 {
                return Ok(Self { threads, inner: None });
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| crate::Error::InvalidState(format!("cannot start worker pool: {e}")))?;
            Ok(Self {
                threads: pool.current_num_threads(),
                inner: Some(pool),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            if threads > 1 {
                log::warn!("built without the `parallel` feature; running on one thread");
            }
            Ok(Self { threads: 1 })
        }
    }

    pub fn sequential() -> Self {
        Self {
            threads: 1,
            #[cfg(feature = "parallel")]
            inner: None,
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.inner {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}
