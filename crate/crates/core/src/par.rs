//! Data-parallel helpers with a sequential fallback.
//!
//! Every corpus-level loop in the crate goes through [`map`] or
//! [`try_map`]. Both preserve input order, so results are bit-identical
//! whichever [`Parallelism`] is selected. Reductions that could depend on
//! scheduling are done by callers over fixed-size chunks summed in order.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise
    /// behaves exactly like `Sequential`.
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn try_map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    map(mode, items, f).into_iter().collect()
}

/// Maps over `data` split into chunks of `chunk` elements; chunk order is kept.
pub fn map_chunks<T, R, F>(mode: Parallelism, data: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunks: Vec<&[T]> = data.chunks(chunk.max(1)).collect();
    map(mode, &chunks, |_, c| f(c))
}
