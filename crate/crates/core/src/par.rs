//! Data-parallel helpers. With the `parallel` feature these dispatch to rayon;
//! without it they run the same closures sequentially. Every helper preserves
//! input order so results never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    return 1;
}

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();

    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();

    #[cfg(not(feature = "parallel"))]
    return items.iter().map(f).collect();
}

/// Maps in parallel and returns the first error in input order.
pub fn try_map_range<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Send + Sync,
{
    map_range(n, f).into_iter().collect()
}

/// Index of the minimum under a total order supplied by `key`; ties resolve
/// through `cmp`, so the answer is identical for any thread count.
pub fn argmin_by<A, K, FK, FC>(items: &[A], key: FK, cmp: FC) -> Option<(usize, K)>
where
    A: Sync,
    K: Send + Sync + Copy,
    FK: Fn(&A) -> K + Send + Sync,
    FC: Fn(&(usize, K), &(usize, K)) -> std::cmp::Ordering + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return items
        .par_iter()
        .enumerate()
        .map(|(i, a)| (i, key(a)))
        .min_by(|a, b| cmp(a, b));

    #[cfg(not(feature = "parallel"))]
    return items
        .iter()
        .enumerate()
        .map(|(i, a)| (i, key(a)))
        .min_by(|a, b| cmp(a, b));
}
