//! Sample-parallel map with a sequential fallback.
//!
//! With the `parallel` feature the map fans out over rayon; without it (or in
//! strict mode) it runs on the calling thread. Results always come back in
//! input order, and callers reduce them sequentially in that order, so both
//! paths produce bitwise-identical numbers.

use std::sync::atomic::{AtomicBool, Ordering};

static STRICT: AtomicBool = AtomicBool::new(false);

/// Forces every [`par_map`] in this process onto the calling thread.
pub fn set_strict(strict: bool) {
    STRICT.store(strict, Ordering::SeqCst);
}

pub fn is_strict() -> bool {
    STRICT.load(Ordering::SeqCst)
}

/// Caps the global worker pool. Only the first call takes effect.
#[cfg(feature = "parallel")]
pub fn init_threads(threads: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn init_threads(_threads: usize) -> bool {
    false
}

/// Reads `CFT_THREADS` and applies it when set to a positive integer.
pub fn init_threads_from_env() -> Option<usize> {
    let n: usize = std::env::var("CFT_THREADS").ok()?.trim().parse().ok()?;
    if n == 0 {
        return None;
    }
    init_threads(n);
    Some(n)
}

pub fn available_threads() -> usize {
    if is_strict() {
        return 1;
    }
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_strict() && items.len() > 1 {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Sequential version regardless of feature or mode.
pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}
