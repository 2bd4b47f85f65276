//! Allocation-tracking hook for memory-bound tests.
//!
//! While tracking is on, every tensor construction on the current thread
//! reports its element count; the peak single allocation is what the
//! anchored-attention memory bound asserts against.

use std::cell::Cell;

thread_local! {
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static MAX_ELEMS: Cell<usize> = const { Cell::new(0) };
}

/// Start recording tensor allocations on this thread.
pub fn start_tracking() {
    TRACKING.with(|t| t.set(true));
    MAX_ELEMS.with(|m| m.set(0));
}

/// Stop recording and return the largest single allocation (in elements).
pub fn stop_tracking() -> usize {
    TRACKING.with(|t| t.set(false));
    MAX_ELEMS.with(|m| m.get())
}

#[inline]
pub(crate) fn record(numel: usize) {
    TRACKING.with(|t| {
        if t.get() {
            MAX_ELEMS.with(|m| m.set(m.get().max(numel)));
        }
    });
}
