//! Data-parallel helpers.
//!
//! With the `parallel` feature enabled, maps run on the rayon pool unless
//! deterministic mode is requested through [`DETERMINISTIC_ENV`]. Every helper
//! preserves input order in its output, and reductions are always done by the
//! caller in that order, so results are bit-identical in both modes.

use std::sync::atomic::{AtomicU8, Ordering};

/// Environment variable that forces single-threaded execution when set to `1`.
pub const DETERMINISTIC_ENV: &str = "DEMOLEARN_DETERMINISTIC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

// 0 = unset (consult env), 1 = sequential, 2 = parallel
static OVERRIDE: AtomicU8 = AtomicU8::new(0);

/// Force an execution mode for the whole process (used by benches and tests).
pub fn set_execution(mode: Option<Execution>) {
    let v = match mode {
        None => 0,
        Some(Execution::Sequential) => 1,
        Some(Execution::Parallel) => 2,
    };
    OVERRIDE.store(v, Ordering::SeqCst);
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
        .unwrap_or(false)
}

pub fn execution() -> Execution {
    if !cfg!(feature = "parallel") {
        return Execution::Sequential;
    }
    match OVERRIDE.load(Ordering::SeqCst) {
        1 => Execution::Sequential,
        2 => Execution::Parallel,
        _ if deterministic_mode() => Execution::Sequential,
        _ => Execution::Parallel,
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_with(execution(), items, f)
}

/// Order-preserving map with an explicit execution mode.
pub fn map_with<T, R, F>(mode: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map_with(Execution::Sequential, &xs, |x| x * x);
        let b = map_with(Execution::Parallel, &xs, |x| x * x);
        assert_eq!(a, b);
    }
}
