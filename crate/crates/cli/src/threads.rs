//! Worker-pool setup. FUNAVG_THREADS caps parallelism (default: all
//! cores); results never depend on the thread count because every task
//! owns a derived rng state and reductions run in a fixed order.

use funavg_core::fed::{execute_job, ClientTrainSet, LocalTrainJob, LocalTrainOutcome, RoundRunner};
use funavg_core::scalar::Scalar;
use funavg_core::Result;
use rayon::prelude::*;
use rayon::ThreadPool;
use std::sync::OnceLock;

pub const THREADS_ENV: &str = "FUNAVG_THREADS";

static POOL: OnceLock<ThreadPool> = OnceLock::new();

pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0); // 0 lets rayon pick the core count
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Runs a closure per item on the shared pool, preserving input order.
pub fn par_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    pool().install(|| items.into_par_iter().map(f).collect())
}

/// Round runner that trains the clients of one round concurrently.
pub struct RayonRunner;

impl<S: Scalar> RoundRunner<S> for RayonRunner {
    fn run(
        &self,
        jobs: Vec<LocalTrainJob<S>>,
        data: &[ClientTrainSet<S>],
    ) -> Result<Vec<LocalTrainOutcome<S>>> {
        pool().install(|| {
            jobs.into_par_iter()
                .map(|j| {
                    let idx = j.client_index;
                    execute_job(j, &data[idx])
                })
                .collect()
        })
    }
}
