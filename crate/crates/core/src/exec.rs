//! Execution mode for the data-parallel loops in this crate.
//!
//! Every parallel site maps an index range to independent results and
//! collects them in index order, so outputs are bit-identical whichever mode
//! runs them. Without the `parallel` feature, [`Exec::Parallel`] falls back
//! to the sequential path.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}
