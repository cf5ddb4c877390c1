//! Thread-local tally of multiply-accumulates executed by `matmul` and
//! `conv2d`. Used to check the analytic cost model against real forwards.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MACS.with(|c| c.get())
}

/// Runs `f` and returns its result with the MACs it executed on this thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let r = f();
    (r, read() - before)
}
