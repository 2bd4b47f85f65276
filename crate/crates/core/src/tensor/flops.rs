//! Thread-local multiply-add counter instrumenting the attention kernels.
//!
//! The cost model is pinned here so the closed-form complexity report and the
//! instrumented counters agree exactly:
//! - matmul `[m,k]·[k,n]`: `m·k·n`
//! - row softmax on `r×c`: `r·(4c − 1)` (per row: c subtractions, c exps,
//!   c−1 sum adds, c divisions)
//! - dot similarity with 1/√d scaling on `m×n` pairs: `m·n·(d + 1)`
//! - negative squared euclidean similarity: `m·n·(2d + 1)`

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    FLOPS.with(|f| f.set(0));
}

pub fn total() -> u64 {
    FLOPS.with(|f| f.get())
}

pub(crate) fn add(n: u64) {
    FLOPS.with(|f| f.set(f.get() + n));
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    (m as u64) * (k as u64) * (n as u64)
}

pub fn softmax_flops(rows: usize, cols: usize) -> u64 {
    (rows as u64) * (4 * cols as u64 - 1)
}

pub fn sim_dot_flops(m: usize, n: usize, d: usize) -> u64 {
    (m as u64) * (n as u64) * (d as u64 + 1)
}

pub fn sim_euclid_flops(m: usize, n: usize, d: usize) -> u64 {
    (m as u64) * (n as u64) * (2 * d as u64 + 1)
}
