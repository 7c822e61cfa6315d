//! Deterministic data-parallel helpers.
//!
//! Every helper returns results in index order, and reductions combine
//! fixed-size chunks in a fixed order, so output is bit-identical for any
//! worker count. Without the `parallel` feature the same code runs on plain
//! iterators.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size for [`chunked_sum`]. Fixed so the summation tree never depends
/// on the number of threads.
pub const SUM_CHUNK: usize = 256;

/// Below this many items the sequential path is always taken.
const PAR_THRESHOLD: usize = 2 * SUM_CHUNK;

/// Evaluates `f(i)` for `i in 0..n`, results ordered by `i`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

/// Sums vectors `f(i)` of length `dim` over `i in 0..n`.
///
/// Items are summed sequentially inside chunks of [`SUM_CHUNK`], and chunk
/// partials are then added left to right.
pub fn chunked_sum<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let n_chunks = n.div_ceil(SUM_CHUNK);
    let chunk = |c: usize| {
        let mut acc = vec![0.0; dim];
        let end = ((c + 1) * SUM_CHUNK).min(n);
        for i in c * SUM_CHUNK..end {
            f(i, &mut acc);
        }
        acc
    };
    let partials: Vec<Vec<f64>> = if n >= PAR_THRESHOLD {
        map_indexed(n_chunks, chunk)
    } else {
        (0..n_chunks).map(chunk).collect()
    };
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Runs `f` on a pool with `workers` threads (0 = rayon default).
pub fn with_workers<R: Send, F: FnOnce() -> R + Send>(workers: usize, f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
                f()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn chunked_sum_is_independent_of_workers() {
        let f = |i: usize, acc: &mut [f64]| {
            acc[0] += (i as f64).sqrt().sin();
            acc[1] += 1.0 / (1.0 + i as f64);
        };
        let a = with_workers(1, || chunked_sum(5000, 2, f));
        let b = with_workers(3, || chunked_sum(5000, 2, f));
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
