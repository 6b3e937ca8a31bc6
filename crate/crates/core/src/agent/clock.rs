use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Monotonic nanosecond clock mapped onto the Unix epoch at construction.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    anchor_unix_nanos: u64,
    anchor: Instant,
}

impl Clock {
    pub fn new() -> Self {
        let anchor = Instant::now();
        let anchor_unix_nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        Self {
            anchor_unix_nanos,
            anchor,
        }
    }

    #[inline]
    pub fn now_nanos(&self) -> u64 {
        self.anchor_unix_nanos + self.anchor.elapsed().as_nanos() as u64
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}
