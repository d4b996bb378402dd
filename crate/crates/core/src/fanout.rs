//! Per-DSO fan-out of independent updates.
//!
//! Within one inner iteration every DSO reads the same shared iterate and
//! writes only its own entry, so the work can be spread over threads. The
//! core ships a sequential executor; thread pools are provided by the
//! `voltgame` crate. Implementations must return results in index order so
//! that the outcome is identical for every degree of parallelism.

use alloc::vec::Vec;

pub trait Fanout {
    /// Evaluates `f(0), ..., f(n - 1)` and returns the results in order.
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs every update on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Fanout for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

impl<E: Fanout> Fanout for &E {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (**self).map(n, f)
    }
}
