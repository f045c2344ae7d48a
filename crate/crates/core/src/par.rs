//! Data-parallel map over samples.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] runs on
//! rayon; without it every map is sequential. Results are always returned in
//! input order and each item's work depends only on its own index, so both
//! paths produce identical output.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

pub fn try_map_indexed<T, R, F>(items: &[T], exec: Execution, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Runs `f` with at most `threads` worker threads for parallel maps.
/// `None` keeps rayon's global pool.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
        log::warn!("could not build a {n}-thread pool; using the global pool");
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    f()
}

pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn order_preserved_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = try_map_indexed(&xs, Execution::Sequential, |i, x| Ok(i as u64 * x)).unwrap();
        let par = with_threads(Some(4), || try_map_indexed(&xs, Execution::Parallel, |i, x| Ok(i as u64 * x)).unwrap());
        assert_eq!(seq, par);
    }

    #[test]
    fn errors_propagate() {
        let xs = [1, 2, 3];
        let out = try_map_indexed(&xs, Execution::Parallel, |_, &x| {
            if x == 2 {
                Err(Error::EmptyInput)
            } else {
                Ok(x)
            }
        });
        assert!(out.is_err());
    }
}
