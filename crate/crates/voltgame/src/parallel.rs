use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuildError, ThreadPoolBuilder};
use voltgame_core::{Fanout, Sequential};

/// Spreads per-DSO updates over a dedicated rayon pool.
///
/// Results come back in DSO order, so a run is bit-identical to the
/// sequential one whatever the thread count.
pub struct ThreadPoolFanout {
    pool: ThreadPool,
}

impl ThreadPoolFanout {
    pub fn new(threads: usize) -> Result<Self, ThreadPoolBuildError> {
        Ok(Self { pool: ThreadPoolBuilder::new().num_threads(threads).build()? })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Fanout for ThreadPoolFanout {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

/// Sequential for one thread, a pool otherwise. A one-thread pool would
/// only add a hand-off per inner iteration.
pub enum Executor {
    Sequential,
    Pool(ThreadPoolFanout),
}

impl Executor {
    pub fn with_threads(threads: usize) -> Result<Self, ThreadPoolBuildError> {
        if threads <= 1 {
            Ok(Executor::Sequential)
        } else {
            ThreadPoolFanout::new(threads).map(Executor::Pool)
        }
    }
}

impl Fanout for Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Executor::Sequential => Sequential.map(n, f),
            Executor::Pool(pool) => pool.map(n, f),
        }
    }
}
