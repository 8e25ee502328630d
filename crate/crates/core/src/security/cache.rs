//! Response cache with per-entry TTL and single-flight misses.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use chrono::NaiveDate;

use crate::clock::Clock;
use crate::providers::synthetic::fnv1a64;
use crate::providers::DataQuery;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub u64);

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Canonical byte encoding of a query: insensitive to code and field order.
pub fn canonical_query_encoding(query: &DataQuery) -> String {
    let mut codes: Vec<&str> = query.codes.iter().map(String::as_str).collect();
    codes.sort_unstable();
    let mut fields: Vec<&str> = query.fields.iter().map(|f| f.as_str()).collect();
    fields.sort_unstable();
    format!(
        "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
        query.provider_id,
        codes.join("\u{1e}"),
        fields.join("\u{1e}"),
        query.start_date,
        query.end_date,
        query.options.canonical_string(),
    )
}

pub fn cache_key(query: &DataQuery) -> CacheKey {
    CacheKey(fnv1a64(canonical_query_encoding(query).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TtlPolicy {
    /// Ranges that ended before today.
    pub settled: Duration,
    /// Ranges touching today, and quotes.
    pub live: Duration,
}

impl Default for TtlPolicy {
    fn default() -> Self {
        Self {
            settled: Duration::from_secs(24 * 60 * 60),
            live: Duration::from_secs(5),
        }
    }
}

impl TtlPolicy {
    pub fn for_range(&self, end_date: NaiveDate, today: NaiveDate) -> Duration {
        if end_date < today {
            self.settled
        } else {
            self.live
        }
    }

    pub fn for_quote(&self) -> Duration {
        self.live
    }
}

#[derive(Debug, Clone)]
pub struct CacheEntry<V> {
    pub key: CacheKey,
    pub payload: V,
    pub expires_at: Duration,
}

struct Inner<V> {
    entries: HashMap<CacheKey, CacheEntry<V>>,
    in_flight: HashSet<CacheKey>,
}

pub struct ResponseCache<V> {
    inner: Mutex<Inner<V>>,
    ready: Condvar,
}

impl<V> fmt::Debug for ResponseCache<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.lock().unwrap();
        f.debug_struct("ResponseCache")
            .field("entries", &inner.entries.len())
            .field("in_flight", &inner.in_flight.len())
            .finish()
    }
}

impl<V> Default for ResponseCache<V> {
    fn default() -> Self {
        Self {
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                in_flight: HashSet::new(),
            }),
            ready: Condvar::new(),
        }
    }
}

/// Clears the in-flight mark even if the producer panics.
struct FlightGuard<'a, V> {
    cache: &'a ResponseCache<V>,
    key: CacheKey,
}

impl<V> Drop for FlightGuard<'_, V> {
    fn drop(&mut self) {
        if let Ok(mut inner) = self.cache.inner.lock() {
            inner.in_flight.remove(&self.key);
        }
        self.cache.ready.notify_all();
    }
}

impl<V: Clone> ResponseCache<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the cached payload for `key`, or runs `producer` and stores its
    /// result for `ttl`. The flag is `true` when the producer was not invoked
    /// by this call. Errors are returned to the caller and never stored.
    pub fn get_or_insert_with<E, F>(
        &self,
        key: CacheKey,
        clock: &dyn Clock,
        ttl: Duration,
        producer: F,
    ) -> Result<(V, bool), E>
    where
        F: FnOnce() -> Result<V, E>,
    {
        let mut inner = self.inner.lock().unwrap();
        loop {
            let now = clock.monotonic();
            match inner.entries.get(&key) {
                Some(entry) if now < entry.expires_at => return Ok((entry.payload.clone(), true)),
                Some(_) => {
                    inner.entries.remove(&key);
                }
                None => {}
            }
            if inner.in_flight.contains(&key) {
                inner = self.ready.wait(inner).unwrap();
                continue;
            }
            inner.in_flight.insert(key);
            break;
        }
        drop(inner);

        let guard = FlightGuard { cache: self, key };
        let payload = producer()?;
        {
            let mut inner = self.inner.lock().unwrap();
            let expires_at = clock.monotonic() + ttl;
            inner.entries.insert(
                key,
                CacheEntry {
                    key,
                    payload: payload.clone(),
                    expires_at,
                },
            );
        }
        drop(guard);
        Ok((payload, false))
    }

    /// Drops every expired entry.
    pub fn purge_expired(&self, clock: &dyn Clock) {
        let now = clock.monotonic();
        self.inner.lock().unwrap().entries.retain(|_, e| now < e.expires_at);
    }
}
