//! Server configuration file (TOML) and the runtime bootstrap.
//!
//! ```toml
//! default_provider = "synthetic"
//! close_time = "15:00:00"
//! credentials = "credentials.txt"   # relative to this file
//! strict_permissions = false
//! concurrency = 1
//! log_level = "info"               # debug | info | warn | error
//!
//! [cache]
//! settled_ttl_secs = 86400
//! live_ttl_secs = 5
//!
//! [[provider]]
//! id = "synthetic"
//! kind = "synthetic"               # synthetic | http | csv
//! seed = 0
//! rate = { capacity = 5, refill_per_sec = 1.0 }
//! field_map = { pb_lf = "PB_LF" }
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveTime;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::clock::Clock;
use crate::log::{Level, Logger};
use crate::providers::{
    CanonicalField, FieldMap, Provider, ProviderConfig, ProviderConfigError, ProviderKind, DEFAULT_CLOSE_TIME,
};
use crate::security::{load_credentials, CredentialError, CredentialStore, PermissionPolicy, RateConfig, TtlPolicy};
use crate::server::Server;
use crate::tools::{financial_registry, ToolContext};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config file is not valid: {0}")]
    Syntax(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Credentials(#[from] CredentialError),
    #[error(transparent)]
    Provider(#[from] ProviderConfigError),
    #[error("{0}")]
    Tools(String),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    default_provider: Option<String>,
    close_time: Option<String>,
    credentials: Option<PathBuf>,
    #[serde(default)]
    strict_permissions: bool,
    concurrency: Option<usize>,
    log_level: Option<String>,
    #[serde(default)]
    cache: RawCache,
    #[serde(default)]
    provider: Vec<RawProvider>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCache {
    settled_ttl_secs: Option<u64>,
    live_ttl_secs: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProvider {
    id: Option<String>,
    kind: Option<String>,
    seed: Option<u64>,
    base_url_template: Option<String>,
    path: Option<PathBuf>,
    credential_ref: Option<String>,
    timeout_ms: Option<u64>,
    retries: Option<u32>,
    close_time: Option<String>,
    rate: Option<RateConfig>,
    #[serde(default)]
    field_map: BTreeMap<String, String>,
}

/// A validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub providers: Vec<ProviderConfig>,
    pub default_provider: Option<String>,
    pub credentials_path: Option<PathBuf>,
    pub permission_policy: PermissionPolicy,
    pub concurrency: usize,
    pub ttl: TtlPolicy,
    pub log_level: Level,
}

impl Config {
    /// One deterministic synthetic provider; needs no files or keys.
    pub fn synthetic() -> Self {
        Self {
            providers: vec![ProviderConfig::synthetic("synthetic", 0)],
            default_provider: Some("synthetic".to_owned()),
            credentials_path: None,
            permission_policy: PermissionPolicy::Warn,
            concurrency: 1,
            ttl: TtlPolicy::default(),
            log_level: Level::Info,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    /// Relative paths in the file are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let resolve = |p: PathBuf| match base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        };

        let close_time = match &raw.close_time {
            Some(s) => parse_time("close_time", s)?,
            None => DEFAULT_CLOSE_TIME,
        };
        if raw.provider.is_empty() {
            return Err(invalid("provider", "at least one [[provider]] table is required"));
        }

        let mut providers = Vec::with_capacity(raw.provider.len());
        for (i, p) in raw.provider.into_iter().enumerate() {
            let field = |name: &str| format!("provider[{i}].{name}");
            let id = p.id.clone().ok_or_else(|| invalid(field("id"), "is required"))?;
            if id.trim().is_empty() {
                return Err(invalid(field("id"), "must not be empty"));
            }
            if providers.iter().any(|c: &ProviderConfig| c.id == id) {
                return Err(invalid(field("id"), format!("{id:?} is used by another provider")));
            }
            let kind_name = p.kind.as_deref().ok_or_else(|| invalid(field("kind"), "is required"))?;
            let unexpected = |name: &str, present: bool| {
                if present {
                    Err(invalid(field(name), format!("is not used by {kind_name} providers")))
                } else {
                    Ok(())
                }
            };
            let kind = match kind_name {
                "synthetic" => {
                    unexpected("base_url_template", p.base_url_template.is_some())?;
                    unexpected("path", p.path.is_some())?;
                    ProviderKind::Synthetic { seed: p.seed.unwrap_or(0) }
                }
                "http" => {
                    unexpected("seed", p.seed.is_some())?;
                    unexpected("path", p.path.is_some())?;
                    let template = p
                        .base_url_template
                        .clone()
                        .ok_or_else(|| invalid(field("base_url_template"), "is required for http providers"))?;
                    ProviderKind::Http {
                        base_url_template: template,
                    }
                }
                "csv" => {
                    unexpected("seed", p.seed.is_some())?;
                    unexpected("base_url_template", p.base_url_template.is_some())?;
                    let path = p
                        .path
                        .clone()
                        .ok_or_else(|| invalid(field("path"), "is required for csv providers"))?;
                    ProviderKind::Csv { path: resolve(path) }
                }
                other => {
                    return Err(invalid(
                        field("kind"),
                        format!("unknown provider kind {other:?}; expected synthetic, http or csv"),
                    ))
                }
            };

            let mut map = BTreeMap::new();
            for (k, v) in &p.field_map {
                let canonical: CanonicalField = k.parse().map_err(|e: crate::providers::UnknownField| {
                    invalid(format!("provider[{i}].field_map.{k}"), e.to_string())
                })?;
                if v.trim().is_empty() {
                    return Err(invalid(format!("provider[{i}].field_map.{k}"), "must not be empty"));
                }
                map.insert(canonical, v.clone());
            }

            let mut cfg = ProviderConfig::new(id, kind);
            cfg.field_map = FieldMap::new(map);
            cfg.credential_ref = p.credential_ref.clone();
            if let Some(rate) = p.rate {
                if rate.capacity < 1 {
                    return Err(invalid(field("rate.capacity"), "must be at least 1"));
                }
                if !(rate.refill_per_sec.is_finite() && rate.refill_per_sec >= 0.0) {
                    return Err(invalid(field("rate.refill_per_sec"), "must be a non-negative number"));
                }
                cfg.rate = rate;
            }
            if let Some(t) = p.timeout_ms {
                if t == 0 {
                    return Err(invalid(field("timeout_ms"), "must be positive"));
                }
                cfg.timeout_ms = t;
            }
            cfg.retries = p.retries.unwrap_or(0);
            cfg.close_time = match &p.close_time {
                Some(s) => parse_time(&field("close_time"), s)?,
                None => close_time,
            };
            providers.push(cfg);
        }

        if let Some(d) = &raw.default_provider {
            if !providers.iter().any(|p| &p.id == d) {
                return Err(invalid("default_provider", format!("{d:?} is not a configured provider id")));
            }
        }
        let concurrency = raw.concurrency.unwrap_or(1);
        if concurrency == 0 {
            return Err(invalid("concurrency", "must be at least 1"));
        }
        let log_level = match raw.log_level.as_deref() {
            None | Some("info") => Level::Info,
            Some("debug") => Level::Debug,
            Some("warn") => Level::Warn,
            Some("error") => Level::Error,
            Some(other) => {
                return Err(invalid("log_level", format!("{other:?} is not one of debug, info, warn, error")));
            }
        };
        let defaults = TtlPolicy::default();
        let ttl = TtlPolicy {
            settled: raw.cache.settled_ttl_secs.map(Duration::from_secs).unwrap_or(defaults.settled),
            live: raw.cache.live_ttl_secs.map(Duration::from_secs).unwrap_or(defaults.live),
        };

        Ok(Self {
            providers,
            default_provider: raw.default_provider,
            credentials_path: raw.credentials.map(resolve),
            permission_policy: if raw.strict_permissions {
                PermissionPolicy::Fail
            } else {
                PermissionPolicy::Warn
            },
            concurrency,
            ttl,
            log_level,
        })
    }
}

fn parse_time(field: &str, s: &str) -> Result<NaiveTime, ConfigError> {
    NaiveTime::parse_from_str(s, "%H:%M:%S").map_err(|_| invalid(field, format!("{s:?} is not an HH:MM:SS time")))
}

/// Everything a running server needs, wired together.
#[derive(Debug)]
pub struct Runtime {
    pub server: Arc<Server>,
    pub tools: Arc<ToolContext>,
    pub credentials: Arc<CredentialStore>,
    pub log: Logger,
    pub warnings: Vec<String>,
    pub concurrency: usize,
}

impl Runtime {
    /// Loads credentials, opens providers and builds the server. Log lines go
    /// to `log_sink` (redacted); `None` disables logging.
    pub fn start<I>(
        config: &Config,
        env: I,
        clock: Arc<dyn Clock>,
        log_sink: Option<Box<dyn Write + Send>>,
    ) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let known: Vec<&str> = config.providers.iter().map(|p| p.credential_id()).collect();
        let loaded = load_credentials(config.credentials_path.as_deref(), env, &known, config.permission_policy)?;
        let credentials = Arc::new(loaded.store);
        let log = match log_sink {
            Some(sink) => Logger::new(sink, credentials.clone(), clock.clone()).with_level(config.log_level),
            None => Logger::disabled(clock.clone()),
        };
        for w in &loaded.warnings {
            log.warn("credentials_warning", json!({"detail": w}));
        }

        let providers = config
            .providers
            .iter()
            .cloned()
            .map(Provider::open)
            .collect::<Result<Vec<_>, _>>()?;
        let tools = Arc::new(
            ToolContext::new(
                providers,
                config.default_provider.as_deref(),
                credentials.clone(),
                clock,
                config.ttl,
                log.clone(),
            )
            .map_err(ConfigError::Tools)?,
        );
        let registry = financial_registry(tools.clone());
        let server = Arc::new(Server::new(registry, credentials.clone(), log.clone()));
        log.info(
            "server_ready",
            json!({
                "providers": config.providers.iter().map(|p| json!({"id": p.id, "kind": p.kind.name()})).collect::<Vec<_>>(),
                "credentials_loaded": credentials.len(),
                "concurrency": config.concurrency,
            }),
        );
        Ok(Self {
            server,
            tools,
            credentials,
            log,
            warnings: loaded.warnings,
            concurrency: config.concurrency,
        })
    }
}
