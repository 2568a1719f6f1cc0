//! Execution strategy for the data-parallel loops (per-vertex neighbor search,
//! per-pair forward/backward, per-query ranking).
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every strategy runs sequentially. Reductions in
//! [`ExecMode::Deterministic`] are grouped into fixed-size chunks that are
//! combined in index order, so results are bit-identical regardless of the
//! thread count or strategy. [`ExecMode::Fast`] lets rayon pick the grouping.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per accumulation chunk in deterministic reductions.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Deterministic,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Exec {
    pub strategy: Strategy,
    pub mode: ExecMode,
}

impl Exec {
    pub const SEQUENTIAL: Exec = Exec {
        strategy: Strategy::Sequential,
        mode: ExecMode::Deterministic,
    };

    pub fn new(strategy: Strategy, mode: ExecMode) -> Self {
        Exec { strategy, mode }
    }

    /// True when work is actually spread over threads: a one-thread pool
    /// runs sequentially.
    fn parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.strategy == Strategy::Parallel && rayon::current_num_threads() > 1
        }
        #[cfg(not(feature = "parallel"))]
        false
    }

    /// Order-preserving map over `0..n`.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }

    /// Folds `0..n` into accumulators and merges them. `reset` returns an
    /// accumulator to the identity so sequential runs can reuse one buffer.
    pub fn fold<A, I, F, R, C>(&self, n: usize, identity: I, fold: F, reset: R, combine: C) -> A
    where
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, usize) + Sync + Send,
        R: Fn(&mut A),
        C: Fn(&mut A, &A) + Sync + Send,
    {
        let chunk_range = |c: usize| c * CHUNK..((c + 1) * CHUNK).min(n);
        match self.mode {
            ExecMode::Deterministic => {
                let chunks = n.div_ceil(CHUNK);
                let mut total = identity();
                if self.parallel() {
                    let parts = self.map_range(chunks, |c| {
                        let mut acc = identity();
                        for i in chunk_range(c) {
                            fold(&mut acc, i);
                        }
                        acc
                    });
                    for p in &parts {
                        combine(&mut total, p);
                    }
                } else {
                    let mut scratch = identity();
                    for c in 0..chunks {
                        for i in chunk_range(c) {
                            fold(&mut scratch, i);
                        }
                        combine(&mut total, &scratch);
                        reset(&mut scratch);
                    }
                }
                total
            }
            ExecMode::Fast => {
                #[cfg(feature = "parallel")]
                if self.parallel() {
                    return (0..n)
                        .into_par_iter()
                        .fold(&identity, |mut a, i| {
                            fold(&mut a, i);
                            a
                        })
                        .reduce(&identity, |mut a, b| {
                            combine(&mut a, &b);
                            a
                        });
                }
                let mut acc = identity();
                for i in 0..n {
                    fold(&mut acc, i);
                }
                acc
            }
        }
    }
}
