//! Episode-parallel batches.

use rayon::prelude::*;

use crate::rng::replica_seed;

/// Runs `reps` episodes, episode `i` receiving `(i, base ⊕ i)`; results come
/// back in rep order regardless of scheduling. `threads = None` uses the
/// global pool, `Some(1)` runs inline.
pub fn run_batch<T, F>(reps: u64, base_seed: u64, threads: Option<usize>, episode: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, u64) -> T + Sync + Send,
{
    let job = |i: u64| episode(i, replica_seed(base_seed, i));
    match threads {
        Some(1) => (0..reps).map(job).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(|| (0..reps).into_par_iter().map(job).collect()),
        None => (0..reps).into_par_iter().map(job).collect(),
    }
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
