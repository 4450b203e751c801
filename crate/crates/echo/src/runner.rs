//! Per-sample parallelism capped by `ECHO_NUM_WORKERS`.

use echo_core::training::{BatchRunner, SampleGrad};
use echo_core::Result;
use rayon::prelude::*;
use rayon::ThreadPool;

pub const WORKERS_ENV: &str = "ECHO_NUM_WORKERS";

/// Worker count from the environment, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Thread pool runner. Results are returned (and later reduced) in index
/// order, so the worker count never changes the numbers.
pub struct PoolRunner {
    pool: ThreadPool,
}

impl PoolRunner {
    pub fn new(workers: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
        Self { pool }
    }

    pub fn from_env() -> Self {
        Self::new(worker_count())
    }

    pub fn map<T: Send, F: Fn(usize) -> T + Sync>(&self, n: usize, f: F) -> Vec<T> {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}

impl BatchRunner for PoolRunner {
    fn run(&self, n: usize, job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync)) -> Vec<Result<SampleGrad>> {
        self.map(n, job)
    }
}
