//! Sequential or rayon-backed execution of independent work items.
//!
//! With the `parallel` feature disabled every call runs sequentially and
//! [`Execution::Parallel`] falls back to the sequential path.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Number of worker threads the parallel path uses.
    pub fn workers(self) -> usize {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return rayon::current_num_threads().max(1);
        }
        1
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, preserving order.
    pub fn map_slice<I, T, F>(self, items: &[I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps over `0..n` in contiguous chunks of `chunk` indices and folds
    /// every chunk's result with `reduce`.
    pub fn map_reduce_chunks<T, F, R>(self, n: usize, chunk: usize, identity: T, f: F, reduce: R) -> T
    where
        T: Send + Clone + Sync,
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
        R: Fn(T, T) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        let chunks = n.div_ceil(chunk);
        let range = |c: usize| c * chunk..((c + 1) * chunk).min(n);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..chunks)
                .into_par_iter()
                .map(|c| f(range(c)))
                .reduce(|| identity.clone(), &reduce);
        }
        (0..chunks).map(|c| f(range(c))).fold(identity, reduce)
    }
}
