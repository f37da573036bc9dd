//! Thin switch between rayon data-parallelism and sequential execution.
//!
//! Every parallel site in the crate is an *ordered, independent* map over
//! an index range — replicates of a simulation, points of a curve grid,
//! candidate bandwidths. Results are collected in index order and each
//! element is computed from its own deterministic seed, so the output is
//! byte-identical whether the map runs on one thread, many threads, or
//! with the `parallel` feature compiled out entirely.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..n).map(f)` collected in order, parallel when the feature is on.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Run `body` on a dedicated pool of `workers` threads (0 = library
/// default). Without the `parallel` feature the body just runs inline and
/// `workers` is ignored.
pub fn with_workers<R, F>(workers: usize, body: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers == 0 {
            body()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("failed to build worker pool");
            pool.install(body)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        body()
    }
}

/// Whether this build executes maps on a rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = map_collect(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn worker_counts_do_not_change_results() {
        let run = |workers| with_workers(workers, || map_collect(64, |i| (i as f64).sqrt()));
        let one = run(1);
        let four = run(4);
        assert_eq!(one, four); // bitwise: same f64 ops in the same order
    }
}
