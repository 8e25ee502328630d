//! Per-provider token buckets with caller-supplied monotonic time.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

// Slack for float accumulation; real token counts never sit this close below 1.
const EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub capacity: u32,
    pub refill_per_sec: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            capacity: 5,
            refill_per_sec: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allowed,
    Denied { retry_after_ms: u64 },
}

impl Decision {
    pub fn is_allowed(self) -> bool {
        matches!(self, Decision::Allowed)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RateLimitError {
    #[error("no rate limit configured for provider {0:?}")]
    UnknownProvider(String),
}

/// A bucket starts full at its creation time.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    capacity: f64,
    tokens: f64,
    refill_per_sec: f64,
    last_refill: Duration,
}

impl TokenBucket {
    pub fn new(config: RateConfig, now: Duration) -> Self {
        let capacity = f64::from(config.capacity.max(1));
        Self {
            capacity,
            tokens: capacity,
            refill_per_sec: config.refill_per_sec.max(0.0),
            last_refill: now,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    fn refill(&mut self, now: Duration) {
        // Observations may arrive slightly out of order across threads.
        if now > self.last_refill {
            let elapsed = (now - self.last_refill).as_secs_f64();
            self.tokens = (self.tokens + elapsed * self.refill_per_sec).min(self.capacity);
            self.last_refill = now;
        }
    }

    pub fn try_acquire(&mut self, now: Duration) -> Decision {
        self.refill(now);
        if self.tokens + EPSILON >= 1.0 {
            self.tokens = (self.tokens - 1.0).max(0.0);
            return Decision::Allowed;
        }
        if self.refill_per_sec <= 0.0 {
            return Decision::Denied { retry_after_ms: u64::MAX };
        }
        let wait_ms = (1.0 - self.tokens) / self.refill_per_sec * 1000.0;
        Decision::Denied {
            retry_after_ms: (wait_ms - 1e-6).ceil().max(1.0) as u64,
        }
    }
}

/// One bucket per configured provider. Buckets are created lazily on first use.
#[derive(Debug)]
pub struct RateLimiter {
    configs: HashMap<String, RateConfig>,
    buckets: Mutex<HashMap<String, TokenBucket>>,
}

impl RateLimiter {
    pub fn new<I, S>(providers: I) -> Self
    where
        I: IntoIterator<Item = (S, RateConfig)>,
        S: Into<String>,
    {
        Self {
            configs: providers.into_iter().map(|(id, c)| (id.into(), c)).collect(),
            buckets: Mutex::new(HashMap::new()),
        }
    }

    pub fn acquire(&self, provider_id: &str, now: Duration) -> Result<Decision, RateLimitError> {
        let config = self
            .configs
            .get(provider_id)
            .ok_or_else(|| RateLimitError::UnknownProvider(provider_id.to_owned()))?;
        let mut buckets = self.buckets.lock().unwrap();
        let bucket = buckets
            .entry(provider_id.to_owned())
            .or_insert_with(|| TokenBucket::new(*config, now));
        Ok(bucket.try_acquire(now))
    }
}
