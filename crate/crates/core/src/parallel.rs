//! Reductions whose floating-point result does not depend on the thread count.
//!
//! Work is split into chunks of a fixed size; partial results are collected
//! in chunk order and combined sequentially.

use rayon::prelude::*;

/// Items per reduction chunk.
pub const CHUNK: usize = 2048;

/// `Σ_{i<n} f(i)` with a fixed association order.
pub fn ordered_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(&f).sum()
        })
        .collect();
    partials.into_iter().sum()
}

/// Accumulates per-chunk buffers of length `len` and adds them in chunk order.
pub fn ordered_accumulate<F>(n: usize, len: usize, fill: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let buffers: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut buf = vec![0.0; len];
            fill(lo..hi, &mut buf);
            buf
        })
        .collect();
    let mut out = vec![0.0; len];
    for buf in buffers {
        for (o, b) in out.iter_mut().zip(buf) {
            *o += b;
        }
    }
    out
}
