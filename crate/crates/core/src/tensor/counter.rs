//! Per-thread operation counters.
//!
//! Kernels in [`crate::tensor`] report their work to the active counting
//! context of the calling thread, if any. Contexts nest: counts recorded in
//! an inner context are added to the enclosing one when it closes.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Multiply-accumulates performed by matrix products and merging.
    pub macs: u64,
    /// Elementwise scalar work in softmax, normalization and activations.
    pub scalar_ops: u64,
}

impl std::ops::Add for OpCounts {
    type Output = OpCounts;

    fn add(self, other: OpCounts) -> OpCounts {
        OpCounts {
            macs: self.macs + other.macs,
            scalar_ops: self.scalar_ops + other.scalar_ops,
        }
    }
}

thread_local! {
    static ACTIVE: Cell<Option<OpCounts>> = const { Cell::new(None) };
}

/// Runs `f` inside a fresh counting context and returns its result together
/// with the operations recorded on this thread while it ran.
pub fn count_ops<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let outer = ACTIVE.with(|c| c.replace(Some(OpCounts::default())));
    let result = f();
    let counts = ACTIVE.with(|c| c.take()).unwrap_or_default();
    ACTIVE.with(|c| c.set(outer.map(|o| o + counts)));
    (result, counts)
}

pub(crate) fn record_macs(n: u64) {
    ACTIVE.with(|c| {
        if let Some(mut counts) = c.get() {
            counts.macs += n;
            c.set(Some(counts));
        }
    });
}

pub(crate) fn record_scalar(n: u64) {
    ACTIVE.with(|c| {
        if let Some(mut counts) = c.get() {
            counts.scalar_ops += n;
            c.set(Some(counts));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_recorded_outside_a_context() {
        record_macs(10);
        let ((), counts) = count_ops(|| {});
        assert_eq!(counts, OpCounts::default());
    }

    #[test]
    fn nested_contexts_roll_up() {
        let (inner, outer) = count_ops(|| {
            record_macs(3);
            let ((), inner) = count_ops(|| record_macs(5));
            record_scalar(2);
            inner
        });
        assert_eq!(inner.macs, 5);
        assert_eq!(outer.macs, 8);
        assert_eq!(outer.scalar_ops, 2);
    }

    #[test]
    fn contexts_are_per_thread() {
        let ((), counts) = count_ops(|| {
            std::thread::spawn(|| record_macs(100)).join().unwrap();
            record_macs(1);
        });
        assert_eq!(counts.macs, 1);
    }
}
