//! Deterministic data-parallel helpers.
//!
//! Work is always split into fixed-size chunks, independent of the number of
//! worker threads, and partial sums are combined in chunk order. Results are
//! therefore bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{GdrError, Result};

pub const CHUNK: usize = 2048;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "GDR_THREADS";

pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            let mut acc = 0.0;
            for i in start..end {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

pub fn fill<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync,
{
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let base = c * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = f(base + j);
        }
    });
}

pub fn collect<F>(n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync,
{
    let mut out = vec![0.0; n];
    fill(&mut out, f);
    out
}

/// Maximum over `0..n`; max is order independent so no chunking subtleties.
pub fn max<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            (start..end).map(&f).fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Reads `GDR_THREADS` and installs a global pool of that size. Unset means
/// rayon's default.
pub fn configure_threads_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| GdrError::InvalidParameter(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    if n == 0 {
        return Err(GdrError::InvalidParameter(format!("{THREADS_ENV} must be positive")));
    }
    // A pool may already exist (e.g. in tests); keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
