//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! sequentially. Output order never depends on scheduling, and reductions
//! go through fixed-size chunks summed in index order, so results are
//! bitwise identical either way.

/// Chunk length used by [`chunked_sum`]. Fixed so that the floating-point
/// reduction order is independent of the thread count.
pub const REDUCE_CHUNK: usize = 32;

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Sums `f(i)` vectors of length `len` over `0..n`. Each chunk of
/// [`REDUCE_CHUNK`] indices is accumulated sequentially, then the partial
/// sums are added in chunk order.
pub fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_range(chunks, |c| {
        let mut acc = vec![0.0; len];
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
