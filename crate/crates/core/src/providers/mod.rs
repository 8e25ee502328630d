//! Data-source adapters behind one fetch contract.
//!
//! Providers deal in calendar dates and provider-specific field names; the
//! normalization layer turns their payloads into canonical records.

pub mod calendar;
mod csv_source;
mod http;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::normalize::OptionsMap;
use crate::security::{CredentialStore, RateConfig};

pub use calendar::{last_trading_day_on_or_before, trading_days};
pub use synthetic::{fnv1a64, synthetic_value};

/// Canonical field vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalField {
    Close,
    Open,
    High,
    Low,
    Volume,
    PbLf,
    Turn,
}

impl CanonicalField {
    pub const ALL: [CanonicalField; 7] = [
        CanonicalField::Close,
        CanonicalField::Open,
        CanonicalField::High,
        CanonicalField::Low,
        CanonicalField::Volume,
        CanonicalField::PbLf,
        CanonicalField::Turn,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            CanonicalField::Close => "close",
            CanonicalField::Open => "open",
            CanonicalField::High => "high",
            CanonicalField::Low => "low",
            CanonicalField::Volume => "volume",
            CanonicalField::PbLf => "pb_lf",
            CanonicalField::Turn => "turn",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|f| f.as_str()).collect()
    }
}

impl fmt::Display for CanonicalField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown field {0:?}; expected one of close, open, high, low, volume, pb_lf, turn")]
pub struct UnknownField(pub String);

impl FromStr for CanonicalField {
    type Err = UnknownField;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| UnknownField(s.to_owned()))
    }
}

/// Canonical field → provider field name. Unmapped fields keep their canonical name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldMap(BTreeMap<CanonicalField, String>);

impl FieldMap {
    pub fn new(map: BTreeMap<CanonicalField, String>) -> Self {
        Self(map)
    }

    pub fn provider_name(&self, field: CanonicalField) -> &str {
        self.0.get(&field).map(String::as_str).unwrap_or(field.as_str())
    }

    pub fn canonical_for(&self, provider_field: &str, requested: &[CanonicalField]) -> Option<CanonicalField> {
        requested.iter().copied().find(|f| self.provider_name(*f) == provider_field)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderKind {
    Synthetic { seed: u64 },
    Http { base_url_template: String },
    Csv { path: PathBuf },
}

impl ProviderKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProviderKind::Synthetic { .. } => "synthetic",
            ProviderKind::Http { .. } => "http",
            ProviderKind::Csv { .. } => "csv",
        }
    }
}

pub const DEFAULT_CLOSE_TIME: NaiveTime = match NaiveTime::from_hms_opt(15, 0, 0) {
    Some(t) => t,
    None => panic!("15:00:00 is a valid time"),
};

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub id: String,
    pub kind: ProviderKind,
    pub field_map: FieldMap,
    pub credential_ref: Option<String>,
    pub rate: RateConfig,
    pub timeout_ms: u64,
    pub retries: u32,
    pub close_time: NaiveTime,
}

impl ProviderConfig {
    pub fn new(id: impl Into<String>, kind: ProviderKind) -> Self {
        Self {
            id: id.into(),
            kind,
            field_map: FieldMap::default(),
            credential_ref: None,
            rate: RateConfig::default(),
            timeout_ms: 5_000,
            retries: 0,
            close_time: DEFAULT_CLOSE_TIME,
        }
    }

    pub fn synthetic(id: impl Into<String>, seed: u64) -> Self {
        Self::new(id, ProviderKind::Synthetic { seed })
    }

    /// Credential the provider authenticates with, if it needs one.
    pub fn credential_id(&self) -> &str {
        self.credential_ref.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Error)]
pub enum ProviderConfigError {
    #[error("provider {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("provider {id:?}: cannot read csv file {path}: {detail}")]
    CsvUnreadable { id: String, path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("codes must not be empty")]
    EmptyCodes,
    #[error("fields must not be empty")]
    EmptyFields,
    #[error("duplicate code {0:?}")]
    DuplicateCode(String),
    #[error("duplicate field {0:?}")]
    DuplicateField(String),
    #[error(transparent)]
    InvertedRange(#[from] calendar::InvertedRange),
}

/// A validated request for daily data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataQuery {
    pub codes: Vec<String>,
    pub fields: Vec<CanonicalField>,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub options: OptionsMap,
    pub provider_id: String,
}

impl DataQuery {
    pub fn new(
        codes: Vec<String>,
        fields: Vec<CanonicalField>,
        start_date: NaiveDate,
        end_date: NaiveDate,
        options: OptionsMap,
        provider_id: impl Into<String>,
    ) -> Result<Self, QueryError> {
        if codes.is_empty() {
            return Err(QueryError::EmptyCodes);
        }
        if fields.is_empty() {
            return Err(QueryError::EmptyFields);
        }
        for (i, c) in codes.iter().enumerate() {
            if codes[..i].contains(c) {
                return Err(QueryError::DuplicateCode(c.clone()));
            }
        }
        for (i, f) in fields.iter().enumerate() {
            if fields[..i].contains(f) {
                return Err(QueryError::DuplicateField(f.as_str().to_owned()));
            }
        }
        if start_date > end_date {
            return Err(calendar::InvertedRange {
                start: start_date,
                end: end_date,
            }
            .into());
        }
        Ok(Self {
            codes,
            fields,
            start_date,
            end_date,
            options,
            provider_id: provider_id.into(),
        })
    }

    pub fn trading_days(&self) -> Vec<NaiveDate> {
        trading_days(self.start_date, self.end_date).expect("range checked at construction")
    }

    pub fn contains_date(&self, day: NaiveDate) -> bool {
        self.start_date <= day && day <= self.end_date
    }
}

/// One provider row keyed by provider field names.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub code: String,
    pub date: NaiveDate,
    pub values: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawProviderPayload {
    pub provider_id: String,
    pub rows: Vec<RawRow>,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider returned HTTP {status} for {url}")]
    Status { status: u16, url: String },
    #[error("request to {url} timed out after {timeout_ms} ms")]
    Timeout { timeout_ms: u64, url: String },
    #[error("transport error: {detail}")]
    Transport { detail: String },
    #[error("provider data does not match the expected schema: {detail}")]
    Schema { detail: String },
    #[error("no credential {credential_ref:?} is configured for this provider")]
    CredentialMissing { credential_ref: String },
}

impl ProviderError {
    /// Coarse kind reported to clients.
    pub fn error_kind(&self) -> &'static str {
        match self {
            ProviderError::CredentialMissing { .. } => "credential_missing",
            _ => "provider_failure",
        }
    }

    /// Finer classification for diagnostics.
    pub fn failure_class(&self) -> &'static str {
        match self {
            ProviderError::Status { .. } => "status",
            ProviderError::Timeout { .. } => "timeout",
            ProviderError::Transport { .. } => "transport",
            ProviderError::Schema { .. } => "schema",
            ProviderError::CredentialMissing { .. } => "credential",
        }
    }

    fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Timeout { .. } | ProviderError::Transport { .. } => true,
            ProviderError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug)]
enum Backend {
    Synthetic { seed: u64 },
    Http(http::HttpAdapter),
    Csv(csv_source::CsvTable),
}

/// A configured, ready-to-fetch provider.
#[derive(Debug)]
pub struct Provider {
    config: ProviderConfig,
    backend: Backend,
}

impl Provider {
    /// Validates the config and loads any backing data (csv files are read here).
    pub fn open(config: ProviderConfig) -> Result<Self, ProviderConfigError> {
        let invalid = |reason: &str| ProviderConfigError::Invalid {
            id: config.id.clone(),
            reason: reason.to_owned(),
        };
        if config.id.is_empty() {
            return Err(invalid("id must not be empty"));
        }
        if config.rate.capacity < 1 {
            return Err(invalid("rate.capacity must be at least 1"));
        }
        if !(config.rate.refill_per_sec.is_finite() && config.rate.refill_per_sec >= 0.0) {
            return Err(invalid("rate.refill_per_sec must be a non-negative number"));
        }
        let backend = match &config.kind {
            ProviderKind::Synthetic { seed } => Backend::Synthetic { seed: *seed },
            ProviderKind::Http { base_url_template } => {
                if base_url_template.trim().is_empty() {
                    return Err(invalid("http providers require base_url_template"));
                }
                if config.timeout_ms == 0 {
                    return Err(invalid("timeout_ms must be positive"));
                }
                Backend::Http(http::HttpAdapter::new(base_url_template, config.timeout_ms, config.retries))
            }
            ProviderKind::Csv { path } => {
                let table = csv_source::CsvTable::load(path).map_err(|detail| ProviderConfigError::CsvUnreadable {
                    id: config.id.clone(),
                    path: path.display().to_string(),
                    detail,
                })?;
                Backend::Csv(table)
            }
        };
        Ok(Self { config, backend })
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Fetches rows for every code in `query`. Rows are always inside the
    /// query's date range and carry only requested provider fields.
    pub fn fetch_historical(
        &self,
        query: &DataQuery,
        credentials: &CredentialStore,
        clock: &dyn Clock,
    ) -> Result<RawProviderPayload, ProviderError> {
        let rows = match &self.backend {
            Backend::Synthetic { seed } => self.fetch_synthetic(query, *seed),
            Backend::Http(adapter) => adapter.fetch(query, &self.config, credentials)?,
            Backend::Csv(table) => table.fetch(query, &self.config.field_map)?,
        };
        debug_assert!(rows.iter().all(|r| query.contains_date(r.date)));
        Ok(RawProviderPayload {
            provider_id: self.config.id.clone(),
            rows,
            fetched_at: clock.utc_now(),
        })
    }

    fn fetch_synthetic(&self, query: &DataQuery, seed: u64) -> Vec<RawRow> {
        let days = query.trading_days();
        let mut rows = Vec::with_capacity(query.codes.len() * days.len());
        for code in &query.codes {
            for day in &days {
                let values = query
                    .fields
                    .iter()
                    .map(|f| {
                        let name = self.config.field_map.provider_name(*f).to_owned();
                        (name, Some(synthetic_value(code, *f, *day, seed)))
                    })
                    .collect();
                rows.push(RawRow {
                    code: code.clone(),
                    date: *day,
                    values,
                });
            }
        }
        rows
    }
}

/// Parses a provider cell or JSON string as a number; empty means null.
pub(crate) fn parse_number_cell(cell: &str) -> Result<Option<f64>, String> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("null") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("{cell:?} is not a number")),
    }
}
