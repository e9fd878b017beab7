//! Shared small utilities: worker-pool sizing and seeded normal sampling.

use std::sync::OnceLock;

use rand::Rng;

/// Number of worker threads for data-parallel sections (rendering, evaluation,
/// numeric gradient sweeps). Controlled by `PROMPTDEPTH_THREADS`; `0` forces
/// serial execution. Training loops are always serial regardless of this value.
pub fn worker_threads() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        match std::env::var("PROMPTDEPTH_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            Some(0) | Some(1) => 1,
            Some(n) => n,
            None => std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        }
    })
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_threads())
            .build()
            .expect("worker pool")
    })
}

/// Maps `f` over `0..n`, in parallel when the worker pool has more than one
/// thread. Output order is by index either way, so results are deterministic.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if worker_threads() <= 1 || n <= 1 {
        (0..n).map(f).collect()
    } else {
        use rayon::prelude::*;
        pool().install(|| (0..n).into_par_iter().map(|i| f(i)).collect())
    }
}

/// Standard normal draw via Box-Muller; deterministic given the RNG stream.
pub fn normal<R: Rng>(rng: &mut R) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
