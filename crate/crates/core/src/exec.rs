//! Execution policy for data-parallel loops.
//!
//! Every fan-out in the crate is an order-preserving map: results come back in
//! input order and are reduced sequentially by the caller. With the `parallel`
//! feature disabled the parallel variants degrade to the sequential path.

use std::fmt;
#[cfg(feature = "parallel")]
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to run an order-preserving map over independent work units.
#[derive(Clone, Default)]
pub enum Exec {
    /// Plain iterator on the calling thread.
    Sequential,
    /// rayon's global pool.
    #[default]
    Parallel,
    /// A dedicated pool with a fixed number of workers.
    #[cfg(feature = "parallel")]
    Pool(Arc<rayon::ThreadPool>),
}

impl fmt::Debug for Exec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exec::Sequential => f.write_str("Sequential"),
            Exec::Parallel => f.write_str("Parallel"),
            #[cfg(feature = "parallel")]
            Exec::Pool(p) => write!(f, "Pool({})", p.current_num_threads()),
        }
    }
}

impl Exec {
    /// Policy for an explicit worker count. `1` is sequential; `0` means the
    /// global pool sized to the available cores.
    pub fn with_threads(threads: usize) -> Exec {
        match threads {
            0 => Exec::Parallel,
            1 => Exec::Sequential,
            #[cfg(feature = "parallel")]
            n => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => Exec::Pool(Arc::new(pool)),
                Err(_) => Exec::Parallel,
            },
            #[cfg(not(feature = "parallel"))]
            _ => Exec::Sequential,
        }
    }

    /// Whether this build can actually run work concurrently.
    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Exec::Sequential)
    }

    /// Maps `f` over `items`, returning results in input order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Pool(pool) => pool.install(|| items.par_iter().map(f).collect()),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => items.iter().map(f).collect(),
        }
    }
}
