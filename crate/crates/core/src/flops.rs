//! Per-thread multiply-add counter for matrix products.
//!
//! Every dense and sparse product routed through [`crate::linalg`] adds its
//! floating-point operation count here. Work executed on other threads (for
//! example inside a rayon particle loop) is counted on those threads and is
//! not visible to a [`measure`] call on the current one.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn current() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result with the number of flops it recorded.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = current();
    let out = f();
    (out, current().wrapping_sub(start))
}
