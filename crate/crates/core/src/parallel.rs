//! Ordered data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`map`] fans work out over
//! the rayon pool; without it the sequential path is compiled in. Results
//! always come back in input order and every per-item computation derives
//! its randomness from (seed, index), so parallel and sequential execution
//! are bit-identical. The criterion bench suite compares the two paths on
//! the training workloads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the feature allows, preserving
/// input order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// Indexed variant of [`map`]; `f` receives (position, item).
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// The always-available sequential path (benchmark baseline).
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// The rayon path, exposed for the bench suite.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Bound the worker pool (the CLI's `--jobs N`). Returns false when the
/// build has no parallel backend or the pool was already initialized.
pub fn configure_threads(jobs: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<usize> = (0..1000).collect();
        let doubled = map(&items, |&x| x * 2);
        assert_eq!(doubled, map_sequential(&items, |&x| x * 2));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<u64> = (0..512).collect();
        let f = |&x: &u64| (x as f64).sqrt().sin();
        assert_eq!(map_parallel(&items, f), map_sequential(&items, f));
    }
}
