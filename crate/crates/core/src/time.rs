//! Wall-clock helpers for message timestamps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Current Unix time in milliseconds.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Unix-millisecond clock that never goes backwards, even if the system clock does.
#[derive(Debug, Default)]
pub struct MonotoneMillis {
    last: AtomicU64,
}

impl MonotoneMillis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        let wall = now_ms();
        let prev = self.last.fetch_max(wall, Ordering::AcqRel);
        prev.max(wall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_decreases() {
        let clock = MonotoneMillis::new();
        clock.last.store(u64::MAX - 1, Ordering::Relaxed);
        assert_eq!(clock.now(), u64::MAX - 1);
        let mut prev = 0;
        let clock = MonotoneMillis::new();
        for _ in 0..1000 {
            let t = clock.now();
            assert!(t >= prev);
            prev = t;
        }
    }
}
