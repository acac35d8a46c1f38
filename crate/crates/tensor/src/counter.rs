//! Multiply-accumulate instrumentation.
//!
//! Counting is per thread and off by default. One MAC is one FLOP: an
//! `m×k` by `k×p` product records `m·k·p`. Elementwise work (softmax,
//! normalization, activations) is never recorded, with the single exception
//! of explicit Hadamard modulation which records one MAC per element.

use std::cell::Cell;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Thread-local MAC counter.
pub struct OpCounter;

impl OpCounter {
    pub fn enable() {
        ENABLED.with(|e| e.set(true));
    }

    pub fn disable() {
        ENABLED.with(|e| e.set(false));
    }

    pub fn is_enabled() -> bool {
        ENABLED.with(|e| e.get())
    }

    pub fn reset() {
        MACS.with(|m| m.set(0));
    }

    /// MACs recorded since the last reset.
    pub fn count() -> u64 {
        MACS.with(|m| m.get())
    }

    /// Adds `macs` to the counter if instrumentation is enabled.
    pub fn record(macs: u64) {
        if Self::is_enabled() {
            MACS.with(|m| m.set(m.get().saturating_add(macs)));
        }
    }

    /// Runs `f` with a fresh, enabled counter and returns its result together
    /// with the MACs it performed. The previous counter state is restored.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let was_enabled = Self::is_enabled();
        let saved = Self::count();
        Self::reset();
        Self::enable();
        let out = f();
        let macs = Self::count();
        MACS.with(|m| m.set(saved));
        ENABLED.with(|e| e.set(was_enabled));
        (out, macs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_counter_ignores_records() {
        OpCounter::disable();
        OpCounter::reset();
        OpCounter::record(10);
        assert_eq!(OpCounter::count(), 0);
    }

    #[test]
    fn measure_is_scoped() {
        let ((), outer) = OpCounter::measure(|| {
            OpCounter::record(3);
            let ((), inner) = OpCounter::measure(|| OpCounter::record(5));
            assert_eq!(inner, 5);
            OpCounter::record(4);
        });
        assert_eq!(outer, 7);
        assert!(!OpCounter::is_enabled());
    }
}
