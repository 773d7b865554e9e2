//! Time sources. Timestamps are milliseconds since the Unix epoch.

use core::sync::atomic::{AtomicU64, Ordering};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

impl<C: Clock + ?Sized> Clock for alloc::sync::Arc<C> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

/// Deterministic clock: every reading advances by a fixed step.
///
/// Scripted playthroughs use it so transcripts are reproducible byte for byte.
#[derive(Debug)]
pub struct LogicalClock {
    start: u64,
    step: u64,
    ticks: AtomicU64,
}

impl LogicalClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self {
            start,
            step,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        // 2024-01-01T00:00:00Z, one second per reading
        Self::new(1_704_067_200_000, 1_000)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        let n = self.ticks.fetch_add(1, Ordering::Relaxed);
        self.start + n * self.step
    }
}
