//! Time sources. Everything time-dependent takes a [`Clock`] so tests can
//! drive TTLs and token refills without sleeping.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate, Utc};

pub trait Clock: Send + Sync + std::fmt::Debug {
    /// Monotonic time since an arbitrary, fixed origin.
    fn monotonic(&self) -> Duration;

    fn utc_now(&self) -> DateTime<Utc>;

    fn today(&self) -> NaiveDate {
        self.utc_now().date_naive()
    }
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn monotonic(&self) -> Duration {
        self.origin.elapsed()
    }

    fn utc_now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to. Wall and monotonic time advance together.
#[derive(Debug)]
pub struct ManualClock {
    inner: Mutex<(Duration, DateTime<Utc>)>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            inner: Mutex::new((Duration::ZERO, start)),
        }
    }

    /// Starts at midnight UTC of `day`.
    pub fn at_date(day: NaiveDate) -> Self {
        Self::new(day.and_hms_opt(0, 0, 0).expect("midnight is valid").and_utc())
    }

    pub fn advance(&self, by: Duration) {
        let mut guard = self.inner.lock().unwrap();
        guard.0 += by;
        guard.1 += chrono::Duration::from_std(by).expect("duration in range");
    }
}

impl Clock for ManualClock {
    fn monotonic(&self) -> Duration {
        self.inner.lock().unwrap().0
    }

    fn utc_now(&self) -> DateTime<Utc> {
        self.inner.lock().unwrap().1
    }
}
