//! Data-parallel helpers.
//!
//! With the `parallel` feature the loops below run on the rayon pool;
//! without it (or with [`Execution::Sequential`]) they run in order on the
//! calling thread. Results are returned in input order either way, so every
//! caller is deterministic regardless of the execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` when the crate was built with rayon, otherwise `Sequential`.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<I, O, F>(exec: Execution, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<O, F>(exec: Execution, n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map`] but stops at the first error (in input order).
pub fn try_map<I, O, E, F>(exec: Execution, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

/// Number of worker threads the parallel path would use.
pub fn workers(exec: Execution) -> usize {
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => rayon::current_num_threads(),
        _ => 1,
    }
}
