//! Credentials, redaction, rate limiting, and the response cache.

pub mod cache;
pub mod credentials;
pub mod ratelimit;

pub use cache::{cache_key, canonical_query_encoding, CacheEntry, CacheKey, ResponseCache, TtlPolicy};
pub use credentials::{
    env_var_name, load_credentials, parse_credentials_file, CredentialError, CredentialSource, CredentialStore,
    LoadedCredentials, PermissionPolicy, Secret, ENV_PREFIX, REDACTED,
};
pub use ratelimit::{Decision, RateConfig, RateLimitError, RateLimiter, TokenBucket};
