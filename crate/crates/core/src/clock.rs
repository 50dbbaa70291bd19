//! Injected time sources and the two timestamp renderings used by the store.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::DateTime;

/// Milliseconds since the Unix epoch, UTC.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to. Used by tests and the simulator.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: AtomicU64::new(start_ms),
        }
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

fn datetime(ms: u64) -> chrono::DateTime<chrono::Utc> {
    DateTime::from_timestamp_millis(ms as i64).unwrap_or_default()
}

/// `YYYY-MM-DD HH:MM:SS`, the record timestamp format.
pub fn format_timestamp(ms: u64) -> String {
    datetime(ms).format("%Y-%m-%d %H:%M:%S").to_string()
}

/// `YYYYMMDD-HHMMSS`, used in export file stems.
pub fn format_timestr(ms: u64) -> String {
    datetime(ms).format("%Y%m%d-%H%M%S").to_string()
}

/// True when `s` has the exact 19-character record timestamp shape.
pub fn is_record_timestamp(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 19
        && b.iter().enumerate().all(|(i, c)| match i {
            4 | 7 => *c == b'-',
            10 => *c == b' ',
            13 | 16 => *c == b':',
            _ => c.is_ascii_digit(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2025-05-20 14:03:07 UTC
    const T: u64 = 1_747_749_787_000;

    #[test]
    fn renders_both_formats() {
        assert_eq!(format_timestamp(T), "2025-05-20 14:03:07");
        assert_eq!(format_timestr(T), "20250520-140307");
        assert!(is_record_timestamp(&format_timestamp(T)));
        assert!(!is_record_timestamp("2025-05-20T14:03:07"));
    }

    #[test]
    fn manual_clock_moves_on_demand() {
        let c = ManualClock::new(5);
        c.advance(10);
        assert_eq!(c.now_ms(), 15);
        c.set(1);
        assert_eq!(c.now_ms(), 1);
    }
}
