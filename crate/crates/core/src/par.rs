//! Execution policy for the data-parallel inner loops.
//!
//! Every helper here produces bit-identical results under both policies:
//! work items write disjoint outputs, and reductions are always folded
//! sequentially in index order after the (possibly parallel) map.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPolicy {
    Sequential,
    /// Rayon work-stealing; identical to `Sequential` when the `parallel`
    /// feature is disabled.
    Parallel,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecPolicy::Parallel
        } else {
            ExecPolicy::Sequential
        }
    }
}

impl ExecPolicy {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// Run `f(i, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk<T, F>(policy: ExecPolicy, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if data.is_empty() || chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = policy;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, order preserved.
pub fn map_indices<R, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Map over a slice, order preserved.
pub fn map_slice<T, R, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = policy;
    items.iter().map(f).collect()
}

/// Sum per-item partial buffers of equal length, folding in index order.
pub fn sum_partials<T: Copy + std::ops::AddAssign>(partials: Vec<Vec<T>>, out: &mut [T]) {
    for p in partials {
        debug_assert_eq!(p.len(), out.len());
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}
