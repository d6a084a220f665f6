//! Data-parallel map helpers.
//!
//! The `parallel` feature (on by default) backs the per-prompt work —
//! rollout collection, probe rollouts, evaluation — with rayon. The
//! sequential path is always compiled so the two can be benchmarked against
//! each other, and results are collected in input order either way, so a
//! run's output is identical whichever path executes it.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub(crate) fn try_map_ordered<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn try_map_ordered<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    try_map_ordered_seq(items, f)
}

pub(crate) fn try_map_ordered_seq<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    items.iter().map(f).collect()
}
