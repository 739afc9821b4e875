//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps run on the current rayon pool. Every
//! reduction goes through fixed-size chunks summed in index order, so results
//! are bit-identical whatever the thread count (or with the feature off).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used for deterministic partial sums.
pub const CHUNK: usize = 4096;

/// `f` applied to `0..n`, results in index order.
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

/// `f` applied to each item, results in input order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// `f` applied to consecutive `CHUNK`-sized index ranges of `0..n`.
pub fn map_chunks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    map_range(chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
}

/// Sum with a fixed association order: per-chunk left folds, then a left fold
/// over the chunk totals.
pub fn fixed_sum(values: &[f64]) -> f64 {
    map_chunks(values.len(), |r| values[r].iter().sum::<f64>())
        .into_iter()
        .sum()
}

/// Number of worker threads available to the helpers above.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let n = 3 * CHUNK + 17;
        let ranges = map_chunks(n, |r| r);
        assert_eq!(ranges.len(), 4);
        assert_eq!(ranges[0].start, 0);
        assert_eq!(ranges.last().unwrap().end, n);
        for w in ranges.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn fixed_sum_matches_manual_association() {
        let v: Vec<f64> = (0..10_000).map(|i| (i as f64).sin() * 1e-3 + 1.0).collect();
        let manual: f64 = v
            .chunks(CHUNK)
            .map(|c| c.iter().sum::<f64>())
            .sum();
        assert_eq!(fixed_sum(&v).to_bits(), manual.to_bits());
        assert_eq!(fixed_sum(&[]), 0.0);
    }
}
