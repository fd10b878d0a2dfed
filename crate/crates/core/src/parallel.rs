//! Fixed-shape parallel reductions.
//!
//! Work over `0..n` is cut into leaves of `LEAF` items and combined along a
//! binary tree whose shape depends only on `n`. Results are therefore
//! bit-identical for any number of rayon workers.

use std::ops::Range;

pub(crate) const LEAF: usize = 64;

pub(crate) fn tree_reduce<T, M, C>(range: Range<usize>, map: &M, combine: &C) -> T
where
    T: Send,
    M: Fn(Range<usize>) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    let len = range.end - range.start;
    if len <= LEAF {
        return map(range);
    }
    let leaves = len.div_ceil(LEAF);
    let mid = range.start + (leaves / 2) * LEAF;
    let (a, b) = rayon::join(
        || tree_reduce(range.start..mid, map, combine),
        || tree_reduce(mid..range.end, map, combine),
    );
    combine(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_serial_sum_of_integers() {
        let total: u64 = tree_reduce(0..1000, &|r: Range<usize>| r.map(|i| i as u64).sum(), &|a, b| a + b);
        assert_eq!(total, 999 * 1000 / 2);
    }

    #[test]
    fn float_sum_independent_of_pool_size() {
        let xs: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1013) as f64 * 1e-3 + 1e-9 * i as f64).collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| tree_reduce(0..xs.len(), &|r: Range<usize>| xs[r].iter().sum::<f64>(), &|a, b| a + b))
        };
        let one = run(1);
        assert_eq!(one.to_bits(), run(3).to_bits());
        assert_eq!(one.to_bits(), run(4).to_bits());
    }
}
