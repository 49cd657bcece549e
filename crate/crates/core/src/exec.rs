//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) the map runs on the rayon pool;
//! without it the same closures run sequentially. Results are collected in
//! index order in both lanes, and every work item derives its own RNG seed
//! up front, so outputs are bit-identical across lanes and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference lane. Benches compare this against `map_range`.
pub fn map_range_seq<U>(n: usize, f: impl Fn(usize) -> U) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lanes_agree_in_order_and_value() {
        let f = |i: usize| (i as f64).sqrt() * 3.0 + i as f64;
        assert_eq!(map_range(257, f), map_range_seq(257, f));
    }
}
