//! Process-wide monotonic nanosecond clock.
//!
//! Every timestamp produced by the runtime, the profiler and the simulated
//! device comes from here, so host and device events share one time base.

use std::sync::OnceLock;
use std::time::Instant;

static EPOCH: OnceLock<Instant> = OnceLock::new();

/// Pins the clock's zero point. Idempotent; the first call wins.
pub fn init() {
    EPOCH.get_or_init(Instant::now);
}

/// Nanoseconds since the clock was first touched in this process.
#[inline]
pub fn now_ns() -> u64 {
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}
