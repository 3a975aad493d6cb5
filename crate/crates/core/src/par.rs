//! Ordered data-parallel maps.
//!
//! With the `parallel` feature (default) these run on the current rayon
//! pool; without it they are plain sequential loops. Results always come back
//! in input order, and fallible maps report the error of the lowest failing
//! index, so output never depends on scheduling.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, keeping input order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
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

/// Maps `f` over `0..n`, keeping index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Fallible ordered map. Returns the error with the lowest input index.
pub fn try_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// Runs `f` with at most `jobs` worker threads (`0` = library default).
///
/// Without the `parallel` feature this just calls `f`.
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}

/// Whether this build fans work out across threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Mixes `parts` into `base` (splitmix64 finalizer per part), giving
/// independent per-item seeds that do not depend on scheduling order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn map_keeps_order() {
        let v: Vec<usize> = (0..1000).collect();
        let out = with_jobs(4, || map(&v, |i, x| i * 1000 + x));
        assert!(out.iter().enumerate().all(|(i, y)| *y == i * 1001));
    }

    #[test]
    fn try_map_reports_lowest_error() {
        let v: Vec<usize> = (0..200).collect();
        let err = try_map(&v, |_, &x| {
            if x % 50 == 7 {
                Err(Error::Data(format!("bad {x}")))
            } else {
                Ok(x)
            }
        })
        .unwrap_err();
        assert_eq!(err.to_string(), "data error: bad 7");
    }
}
