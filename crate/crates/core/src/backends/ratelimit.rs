//! Request pacing shared by all callers of one backend.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Monotonic time source; durations are measured from an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep_until(&self, deadline: Duration);

    fn sleep(&self, d: Duration) {
        self.sleep_until(self.now() + d);
    }
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

/// Simulated clock: sleeping jumps time forward instead of blocking.
#[derive(Debug, Default)]
pub struct FakeClock {
    nanos: AtomicU64,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep_until(&self, deadline: Duration) {
        self.nanos.fetch_max(deadline.as_nanos() as u64, Ordering::SeqCst);
    }
}

#[derive(Debug)]
struct Schedule {
    next: Duration,
    recent: VecDeque<Duration>,
}

/// Spaces requests at least `1 / rate` apart and admits at most
/// `max(1, floor(rate))` requests in any half-open one-second window.
///
/// Slots are reserved under a lock, so concurrent callers never share one.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    burst: usize,
    schedule: Mutex<Schedule>,
}

impl RateLimiter {
    pub fn new(rate: f64) -> Self {
        assert!(rate > 0.0 && rate.is_finite(), "rate must be positive");
        Self {
            interval: Duration::from_nanos((1e9 / rate).round() as u64),
            burst: (rate.floor() as usize).max(1),
            schedule: Mutex::new(Schedule { next: Duration::ZERO, recent: VecDeque::new() }),
        }
    }

    /// Requests admitted per one-second window.
    pub fn burst(&self) -> usize {
        self.burst
    }

    /// Reserves the next slot without waiting for it.
    pub fn reserve(&self, now: Duration) -> Duration {
        let mut s = self.schedule.lock().unwrap_or_else(|p| p.into_inner());
        let mut slot = s.next.max(now);
        if s.recent.len() == self.burst {
            slot = slot.max(s.recent[0] + Duration::from_secs(1));
            s.recent.pop_front();
        }
        s.recent.push_back(slot);
        s.next = slot + self.interval;
        slot
    }

    /// Blocks on `clock` until a slot is available; returns the slot time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let slot = self.reserve(clock.now());
        clock.sleep_until(slot);
        slot
    }
}
