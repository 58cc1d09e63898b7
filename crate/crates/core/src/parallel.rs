//! Per-window data parallelism.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon pool;
//! without it, or with [`Exec::Sequential`], items run one after another. Results
//! are always returned in input order, so reductions done by the caller are
//! bit-identical between the two.

/// Environment variable read by [`configure_threads_from_env`].
pub const THREADS_ENV: &str = "TADNET_THREADS";

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
    /// `(0..n).map(f)` collected in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel => parallel_map(n, f),
        }
    }

    /// Like [`Exec::map`] but stops at the first error in index order.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Sizes the global worker pool from `TADNET_THREADS` if set. Returns the value used.
/// Invalid values are ignored; calling twice keeps the first pool.
pub fn configure_threads_from_env() -> Option<usize> {
    let n = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
    if n == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Some(n)
}
