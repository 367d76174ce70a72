//! Per-thread multiply-accumulate counter fed by the arithmetic kernels.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Called by kernels; a no-op unless a [`count_macs`] scope is active.
#[inline]
pub fn record_macs(n: u64) {
    MACS.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Runs `f` with counting enabled on this thread and returns the number of
/// scalar multiply-accumulates the kernels executed inside it.
///
/// Nested scopes are not supported: the inner scope's count is folded into
/// the outer one when it exits.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = MACS.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = MACS.with(|c| c.get()).unwrap_or(0);
    MACS.with(|c| c.set(outer.map(|o| o + counted)));
    (out, counted)
}
