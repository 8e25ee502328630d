//! The financial tools: historical retrieval, latest quote, and summary
//! statistics.
//!
//! All three share one pipeline: options → cache lookup → (on a miss) rate
//! limit → provider fetch → normalize → fill.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use indexmap::IndexMap;
use regex::Regex;
use serde_json::{json, Map, Value};

use crate::clock::Clock;
use crate::jsonrpc::ErrorCode;
use crate::log::Logger;
use crate::normalize::{apply_fill, normalize_payload, parse_options, records_to_json, CanonicalRecord, NormalizeError};
use crate::providers::{last_trading_day_on_or_before, CanonicalField, DataQuery, Provider, ProviderError};
use crate::registry::{
    ParamSchema, ParamSpec, ParamType, Registry, RegistryError, ToolDescriptor, ToolError, ToolHandler, ToolResult,
    ValidatedArgs, Violation,
};
use crate::security::{cache_key, CredentialStore, Decision, RateLimiter, ResponseCache, TtlPolicy};

pub const HISTORICAL: &str = "tool_get_historical_data";
pub const QUOTE: &str = "tool_get_quote";
pub const SUMMARY: &str = "tool_compute_summary";

const DATE_PATTERN: &str = r"^\d{4}-\d{2}-\d{2}$";

/// What the cache stores for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedFetch {
    pub records: Vec<CanonicalRecord>,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug)]
enum PipelineError {
    RateLimited { provider_id: String, retry_after_ms: u64 },
    Provider { provider_id: String, error: ProviderError },
    Normalize { provider_id: String, error: NormalizeError },
    Internal(String),
}

/// Shared state for the tool handlers.
#[derive(Debug)]
pub struct ToolContext {
    providers: IndexMap<String, Provider>,
    default_provider: String,
    credentials: Arc<CredentialStore>,
    limiter: RateLimiter,
    cache: ResponseCache<Arc<CachedFetch>>,
    clock: Arc<dyn Clock>,
    ttl: TtlPolicy,
    log: Logger,
    fetches: AtomicU64,
}

impl ToolContext {
    /// `default_provider` falls back to the first provider.
    pub fn new(
        providers: Vec<Provider>,
        default_provider: Option<&str>,
        credentials: Arc<CredentialStore>,
        clock: Arc<dyn Clock>,
        ttl: TtlPolicy,
        log: Logger,
    ) -> Result<Self, String> {
        let mut map = IndexMap::new();
        for p in providers {
            let id = p.id().to_owned();
            if map.insert(id.clone(), p).is_some() {
                return Err(format!("provider id {id:?} is configured twice"));
            }
        }
        let default_provider = match default_provider {
            Some(id) if map.contains_key(id) => id.to_owned(),
            Some(id) => return Err(format!("default_provider {id:?} is not a configured provider")),
            None => map.keys().next().cloned().ok_or("at least one provider must be configured")?,
        };
        let limiter = RateLimiter::new(map.values().map(|p| (p.id().to_owned(), p.config().rate)));
        Ok(Self {
            providers: map,
            default_provider,
            credentials,
            limiter,
            cache: ResponseCache::new(),
            clock,
            ttl,
            log,
            fetches: AtomicU64::new(0),
        })
    }

    pub fn default_provider(&self) -> &str {
        &self.default_provider
    }

    pub fn provider_ids(&self) -> impl Iterator<Item = &str> {
        self.providers.keys().map(String::as_str)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Number of provider fetches attempted so far (cache misses that passed the rate limiter).
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    fn run(&self, query: &DataQuery, ttl: std::time::Duration) -> Result<(Arc<CachedFetch>, bool), PipelineError> {
        let provider = self
            .providers
            .get(&query.provider_id)
            .ok_or_else(|| PipelineError::Internal(format!("provider {:?} vanished", query.provider_id)))?;
        let key = cache_key(query);
        self.cache.get_or_insert_with(key, self.clock.as_ref(), ttl, || {
            let pid = provider.id().to_owned();
            match self.limiter.acquire(&pid, self.clock.monotonic()) {
                Ok(Decision::Allowed) => {}
                Ok(Decision::Denied { retry_after_ms }) => {
                    return Err(PipelineError::RateLimited {
                        provider_id: pid,
                        retry_after_ms,
                    })
                }
                Err(e) => return Err(PipelineError::Internal(e.to_string())),
            }
            self.fetches.fetch_add(1, Ordering::SeqCst);
            let raw = provider
                .fetch_historical(query, &self.credentials, self.clock.as_ref())
                .map_err(|error| PipelineError::Provider {
                    provider_id: pid.clone(),
                    error,
                })?;
            let normalize = |error| PipelineError::Normalize {
                provider_id: pid.clone(),
                error,
            };
            let records = normalize_payload(&raw, query, &provider.config().field_map, provider.config().close_time)
                .map_err(normalize)?;
            let records = apply_fill(records, query.options.fill(), &query.fields).map_err(normalize)?;
            self.log.info(
                "provider_fetch",
                json!({
                    "provider_id": pid,
                    "cache_key": key.to_string(),
                    "codes": query.codes,
                    "start_date": query.start_date.to_string(),
                    "end_date": query.end_date.to_string(),
                    "rows": raw.rows.len(),
                }),
            );
            Ok(Arc::new(CachedFetch {
                records,
                fetched_at: raw.fetched_at,
            }))
        })
    }

    /// Turns pipeline failures into either a failed ToolResult or a protocol error.
    fn failure(&self, err: PipelineError) -> Result<ToolResult, ToolError> {
        let (provider_id, kind, class, detail, code) = match err {
            PipelineError::RateLimited {
                provider_id,
                retry_after_ms,
            } => {
                self.log.warn(
                    "rate_limited",
                    json!({"provider_id": provider_id, "retry_after_ms": retry_after_ms}),
                );
                return Err(ToolError::RateLimited {
                    provider_id,
                    retry_after_ms,
                });
            }
            PipelineError::Internal(msg) => return Err(ToolError::Internal(msg)),
            PipelineError::Provider { provider_id, error } => {
                let code = match error {
                    ProviderError::CredentialMissing { .. } => ErrorCode::CredentialMissing,
                    _ => ErrorCode::ProviderFailure,
                };
                (provider_id, error.error_kind(), error.failure_class(), error.to_string(), code)
            }
            PipelineError::Normalize { provider_id, error } => (
                provider_id,
                "provider_failure",
                "schema",
                error.to_string(),
                ErrorCode::ProviderFailure,
            ),
        };
        let detail = self.credentials.redact_str(&detail).into_owned();
        self.log.warn(
            "provider_error",
            json!({"provider_id": provider_id, "error_kind": kind, "failure_class": class, "detail": detail}),
        );
        Ok(ToolResult::failure(
            kind,
            detail,
            Some(json!({"provider_id": provider_id, "failure_class": class, "code": code.code()})),
        ))
    }

    fn meta(&self, provider_id: &str, fetched_at: DateTime<Utc>, row_count: usize, cache_hit: bool) -> Value {
        json!({
            "provider_id": provider_id,
            "fetched_at": fetched_at.to_rfc3339_opts(SecondsFormat::Secs, true),
            "row_count": row_count,
            "cache_hit": cache_hit,
        })
    }

    pub fn historical(&self, args: &ValidatedArgs) -> Result<ToolResult, ToolError> {
        let query = self.query_from_args(args, "")?;
        if query.trading_days().is_empty() {
            let content = json!({
                "records": [],
                "meta": self.meta(&query.provider_id, self.clock.utc_now(), 0, false),
            });
            return Ok(ToolResult::success(
                content,
                format!(
                    "no trading days between {} and {}; records are empty",
                    query.start_date, query.end_date
                ),
            ));
        }
        let ttl = self.ttl.for_range(query.end_date, self.clock.today());
        let (fetch, hit) = match self.run(&query, ttl) {
            Ok(v) => v,
            Err(e) => return self.failure(e),
        };
        let records = &fetch.records;
        let summary = format!(
            "{} records for {} from {} to {} ({})",
            records.len(),
            query.codes.join(", "),
            query.start_date,
            query.end_date,
            query.provider_id
        );
        let content = json!({
            "records": records_to_json(records, &query.fields),
            "meta": self.meta(&query.provider_id, fetch.fetched_at, records.len(), hit),
        });
        Ok(ToolResult::success(content, summary))
    }

    pub fn quote(&self, args: &ValidatedArgs) -> Result<ToolResult, ToolError> {
        let mut violations = Vec::new();
        let as_of = match args.str("as_of") {
            Some(s) => parse_date("as_of", s, &mut violations),
            None => Some(self.clock.today()),
        };
        let codes = args.strings("codes");
        let fields = parse_fields(args, "fields");
        let provider_id = self.provider_arg(args);
        let options = parse_options(args.str("options").unwrap_or(""));
        let Some(as_of) = as_of else {
            return Err(ToolError::InvalidParams(violations));
        };
        let options = options.map_err(|e| ToolError::InvalidParams(vec![Violation::new("options", e.to_string())]))?;
        let day = last_trading_day_on_or_before(as_of);
        let query = DataQuery::new(codes, fields, day, day, options, provider_id)
            .map_err(|e| ToolError::InvalidParams(vec![Violation::new("", e.to_string())]))?;

        let (fetch, hit) = match self.run(&query, self.ttl.for_quote()) {
            Ok(v) => v,
            Err(e) => return self.failure(e),
        };
        let records: Vec<CanonicalRecord> = fetch
            .records
            .iter()
            .filter(|r| r.values.values().any(Option::is_some))
            .cloned()
            .collect();
        let summary = if records.is_empty() {
            "no data".to_owned()
        } else {
            format!("{} quote(s) as of {day}", records.len())
        };
        let content = json!({
            "records": records_to_json(&records, &query.fields),
            "meta": self.meta(&query.provider_id, fetch.fetched_at, records.len(), hit),
        });
        Ok(ToolResult::success(content, summary))
    }

    pub fn summary(&self, registry_schema: &ParamSchema, args: &ValidatedArgs) -> Result<ToolResult, ToolError> {
        let fields = parse_fields(args, "summarize_fields");
        let (records, source) = if let Some(Value::Array(items)) = args.get("records") {
            let mut violations = Vec::new();
            let mut records = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                match CanonicalRecord::from_json(item) {
                    Ok(r) => records.push(r),
                    Err(e) => violations.push(Violation::new(format!("records[{i}]"), e)),
                }
            }
            if !violations.is_empty() {
                return Err(ToolError::InvalidParams(violations));
            }
            (records, "records")
        } else {
            let query_args = args.get("query").cloned().unwrap_or(Value::Null);
            let values = registry_schema.validate(&query_args).map_err(|vs| {
                ToolError::InvalidParams(
                    vs.into_iter()
                        .map(|v| Violation::new(prefixed("query", &v.param), v.message))
                        .collect(),
                )
            })?;
            let nested = ValidatedArgs {
                tool_name: HISTORICAL.to_owned(),
                values,
            };
            let query = self.query_from_args(&nested, "query.")?;
            if query.trading_days().is_empty() {
                (Vec::new(), "query")
            } else {
                let ttl = self.ttl.for_range(query.end_date, self.clock.today());
                match self.run(&query, ttl) {
                    Ok((fetch, _)) => (fetch.records.clone(), "query"),
                    Err(e) => return self.failure(e),
                }
            }
        };

        if records.is_empty() {
            return Ok(ToolResult::failure("empty_input", "there are no records to summarize", None));
        }

        let mut summaries = Vec::with_capacity(fields.len());
        let mut parts = Vec::new();
        for field in &fields {
            let values: Vec<f64> = records.iter().filter_map(|r| r.value(*field)).collect();
            match SummaryStats::compute(field.as_str(), &values) {
                Some(stats) => {
                    parts.push(format!("{} mean {:.6} over {} values", field, stats.mean, stats.count));
                    summaries.push(stats.to_json());
                }
                None => {
                    parts.push(format!("{field} has no values"));
                    summaries.push(json!({
                        "field": field.as_str(),
                        "error_kind": "no_data",
                        "detail": format!("{field} has no non-null values"),
                    }));
                }
            }
        }
        let content = json!({
            "summaries": summaries,
            "inputs": {"row_count": records.len(), "source": source},
        });
        Ok(ToolResult::success(content, parts.join("; ")))
    }

    fn provider_arg(&self, args: &ValidatedArgs) -> String {
        args.str("provider_id").unwrap_or(&self.default_provider).to_owned()
    }

    fn query_from_args(&self, args: &ValidatedArgs, prefix: &str) -> Result<DataQuery, ToolError> {
        let mut violations = Vec::new();
        let p = |name: &str| format!("{prefix}{name}");
        let start = parse_date(&p("start_date"), args.str("start_date").unwrap_or_default(), &mut violations);
        let end = parse_date(&p("end_date"), args.str("end_date").unwrap_or_default(), &mut violations);
        let options = match parse_options(args.str("options").unwrap_or("")) {
            Ok(o) => Some(o),
            Err(e) => {
                violations.push(Violation::new(p("options"), e.to_string()));
                None
            }
        };
        if let (Some(s), Some(e)) = (start, end) {
            if s > e {
                violations.push(Violation::new(p("end_date"), format!("end_date {e} is before start_date {s}")));
            }
        }
        if !violations.is_empty() {
            return Err(ToolError::InvalidParams(violations));
        }
        let (Some(start), Some(end), Some(options)) = (start, end, options) else {
            unreachable!("violations were recorded for every missing piece");
        };
        DataQuery::new(
            args.strings("codes"),
            parse_fields(args, "fields"),
            start,
            end,
            options,
            self.provider_arg(args),
        )
        .map_err(|e| ToolError::InvalidParams(vec![Violation::new(prefix.trim_end_matches('.'), e.to_string())]))
    }
}

fn prefixed(prefix: &str, param: &str) -> String {
    if param.is_empty() {
        prefix.to_owned()
    } else {
        format!("{prefix}.{param}")
    }
}

fn parse_date(param: &str, s: &str, violations: &mut Vec<Violation>) -> Option<NaiveDate> {
    match NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        Ok(d) => Some(d),
        Err(_) => {
            violations.push(Violation::new(param, format!("{s:?} is not a valid calendar date")));
            None
        }
    }
}

/// Schema validation has already restricted these to the vocabulary.
fn parse_fields(args: &ValidatedArgs, name: &str) -> Vec<CanonicalField> {
    args.strings(name).iter().filter_map(|s| s.parse().ok()).collect()
}

/// Statistics over the non-null values of one field.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub field: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Population (n-denominator) standard deviation.
    pub stddev: f64,
}

impl SummaryStats {
    /// `None` when `values` is empty.
    pub fn compute(field: &str, values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Rounding in the sum can push the mean a hair outside [min, max].
        let mean = (values.iter().sum::<f64>() / n).clamp(min, max);
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            field: field.to_owned(),
            count: values.len(),
            mean,
            min,
            max,
            stddev: var.sqrt(),
        })
    }

    pub fn to_json(&self) -> Value {
        json!({
            "field": self.field,
            "count": self.count,
            "mean": self.mean,
            "min": self.min,
            "max": self.max,
            "stddev": self.stddev,
        })
    }
}

fn field_spec(description: &str) -> ParamSpec {
    ParamSpec::string_array(description)
        .one_of(CanonicalField::names())
        .non_empty_unique()
}

fn codes_spec() -> ParamSpec {
    ParamSpec::string_array("Instrument codes, e.g. 300750.SZ.")
        .with_pattern(Regex::new(r"^\S+$").expect("static regex"))
        .non_empty_unique()
}

fn date_spec(description: &str) -> ParamSpec {
    ParamSpec::string(description).with_pattern(Regex::new(DATE_PATTERN).expect("static regex"))
}

fn provider_spec(ctx: &ToolContext) -> ParamSpec {
    ParamSpec::string("Configured data provider to query.")
        .one_of(ctx.provider_ids().map(str::to_owned))
        .with_default(Value::from(ctx.default_provider()))
}

fn options_spec() -> ParamSpec {
    ParamSpec::string("Semicolon-separated key=value flags, e.g. PriceAdj=F;Fill=Previous.")
        .with_default(Value::from(""))
}

pub fn historical_schema(ctx: &ToolContext) -> ParamSchema {
    ParamSchema::new()
        .required("codes", codes_spec())
        .required("fields", field_spec("Canonical fields to return."))
        .required("start_date", date_spec("First calendar day, YYYY-MM-DD."))
        .required("end_date", date_spec("Last calendar day, YYYY-MM-DD, inclusive."))
        .optional("options", options_spec())
        .optional("provider_id", provider_spec(ctx))
}

pub fn quote_schema(ctx: &ToolContext) -> ParamSchema {
    ParamSchema::new()
        .required("codes", codes_spec())
        .required("fields", field_spec("Canonical fields to return."))
        .optional(
            "as_of",
            date_spec("Reference day, YYYY-MM-DD; the quote is for the last trading day on or before it. Defaults to today."),
        )
        .optional("options", options_spec())
        .optional("provider_id", provider_spec(ctx))
}

pub fn summary_schema() -> ParamSchema {
    ParamSchema::new()
        .optional(
            "records",
            ParamSpec::new(
                ParamType::ObjectArray,
                "Records as returned by tool_get_historical_data: {code, timestamp, <field>...}.",
            ),
        )
        .optional(
            "query",
            ParamSpec::new(ParamType::Object, "Arguments for tool_get_historical_data; the records are fetched first."),
        )
        .required("summarize_fields", field_spec("Fields to summarize."))
        .exactly_one(&["records", "query"])
}

/// Registers the three financial tools against `ctx`.
pub fn register_financial_tools(registry: &mut Registry, ctx: Arc<ToolContext>) -> Result<(), RegistryError> {
    let c = ctx.clone();
    registry.register(
        ToolDescriptor {
            name: HISTORICAL.into(),
            description: "Daily historical data for one or more instruments over a date range, one record per code and trading day.".into(),
            input_schema: historical_schema(&ctx),
            output_description: "{records: [{code, timestamp, <field>...}], meta: {provider_id, fetched_at, row_count, cache_hit}}".into(),
        },
        Arc::new(move |args: &ValidatedArgs| c.historical(args)) as Arc<dyn ToolHandler>,
    )?;

    let c = ctx.clone();
    registry.register(
        ToolDescriptor {
            name: QUOTE.into(),
            description: "Latest daily values for one or more instruments as of a given day.".into(),
            input_schema: quote_schema(&ctx),
            output_description: "{records: [{code, timestamp, <field>...}], meta: {provider_id, fetched_at, row_count, cache_hit}}".into(),
        },
        Arc::new(move |args: &ValidatedArgs| c.quote(args)) as Arc<dyn ToolHandler>,
    )?;

    let c = ctx.clone();
    let nested = historical_schema(&ctx);
    registry.register(
        ToolDescriptor {
            name: SUMMARY.into(),
            description: "Count, mean, min, max and population standard deviation per field, over inline records or a historical query.".into(),
            input_schema: summary_schema(),
            output_description: "{summaries: [{field, count, mean, min, max, stddev}], inputs: {row_count, source}}".into(),
        },
        Arc::new(move |args: &ValidatedArgs| c.summary(&nested, args)) as Arc<dyn ToolHandler>,
    )?;
    Ok(())
}

/// Convenience for embedding: a registry holding just the financial tools.
pub fn financial_registry(ctx: Arc<ToolContext>) -> Registry {
    let mut registry = Registry::new();
    register_financial_tools(&mut registry, ctx).expect("built-in descriptors are valid");
    registry
}

#[doc(hidden)]
pub fn records_from_content(content: &Value) -> Vec<Map<String, Value>> {
    content
        .get("records")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|r| r.as_object().cloned()).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::providers::{synthetic_value, ProviderConfig};

    fn ctx_at(day: &str) -> Arc<ToolContext> {
        let clock = Arc::new(ManualClock::at_date(day.parse().unwrap()));
        let providers = vec![Provider::open(ProviderConfig::synthetic("synthetic", 0)).unwrap()];
        Arc::new(
            ToolContext::new(
                providers,
                None,
                Arc::new(CredentialStore::empty()),
                clock.clone(),
                TtlPolicy::default(),
                Logger::disabled(clock),
            )
            .unwrap(),
        )
    }

    fn call(reg: &Registry, name: &str, args: Value) -> Result<ToolResult, ToolError> {
        let validated = reg.validate_params(name, &args).expect("valid args");
        reg.handler(name).unwrap().call(&validated)
    }

    fn q1_args() -> Value {
        json!({
            "codes": ["300750.SZ"],
            "fields": ["close", "pb_lf", "turn"],
            "start_date": "2024-01-01",
            "end_date": "2024-03-31",
            "options": "PriceAdj=F;Fill=Previous",
        })
    }

    #[test]
    fn historical_q1() {
        let ctx = ctx_at("2024-06-01");
        let reg = financial_registry(ctx.clone());
        let r = call(&reg, HISTORICAL, q1_args()).unwrap();
        assert!(!r.is_error);
        let records = records_from_content(&r.content);
        assert_eq!(records.len(), 65);
        let keys: Vec<_> = records[0].keys().cloned().collect();
        assert_eq!(keys, vec!["code", "timestamp", "close", "pb_lf", "turn"]);
        assert_eq!(records[0]["timestamp"], "2024-01-01 15:00:00");
        assert_eq!(r.content["meta"]["cache_hit"], false);
        assert_eq!(r.content["meta"]["fetched_at"], "2024-06-01T00:00:00Z");

        let again = call(&reg, HISTORICAL, q1_args()).unwrap();
        assert_eq!(again.content["meta"]["cache_hit"], true);
        assert_eq!(ctx.fetch_count(), 1);
    }

    #[test]
    fn weekend_range_is_empty_not_error() {
        let reg = financial_registry(ctx_at("2024-06-01"));
        let r = call(
            &reg,
            HISTORICAL,
            json!({"codes": ["A"], "fields": ["close"], "start_date": "2024-01-06", "end_date": "2024-01-07"}),
        )
        .unwrap();
        assert!(!r.is_error);
        assert_eq!(r.content["records"], json!([]));
        assert!(r.human_summary.unwrap().contains("empty"));
    }

    #[test]
    fn semantic_date_errors_are_invalid_params() {
        let reg = financial_registry(ctx_at("2024-06-01"));
        let err = call(
            &reg,
            HISTORICAL,
            json!({"codes": ["A"], "fields": ["close"], "start_date": "2024-02-30", "end_date": "2024-01-07"}),
        )
        .unwrap_err();
        assert!(matches!(err, ToolError::InvalidParams(ref v) if v[0].param == "start_date"));
        let err = call(
            &reg,
            HISTORICAL,
            json!({"codes": ["A"], "fields": ["close"], "start_date": "2024-02-03", "end_date": "2024-01-07"}),
        )
        .unwrap_err();
        assert!(matches!(err, ToolError::InvalidParams(ref v) if v[0].param == "end_date"));
        let err = call(
            &reg,
            HISTORICAL,
            json!({"codes": ["A"], "fields": ["close"], "start_date": "2024-01-03", "end_date": "2024-01-07", "options": "Fill=Sideways"}),
        )
        .unwrap_err();
        assert!(matches!(err, ToolError::InvalidParams(ref v) if v[0].param == "options"));
    }

    #[test]
    fn quote_uses_last_trading_day() {
        let reg = financial_registry(ctx_at("2024-06-01"));
        let r = call(&reg, QUOTE, json!({"codes": ["300750.SZ"], "fields": ["close"], "as_of": "2024-01-06"})).unwrap();
        let records = records_from_content(&r.content);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0]["timestamp"], "2024-01-05 15:00:00");
        let d = NaiveDate::from_ymd_opt(2024, 1, 5).unwrap();
        assert_eq!(records[0]["close"], json!(synthetic_value("300750.SZ", CanonicalField::Close, d, 0)));
    }

    #[test]
    fn quote_defaults_to_today() {
        let reg = financial_registry(ctx_at("2024-01-03"));
        let r = call(&reg, QUOTE, json!({"codes": ["A"], "fields": ["close"]})).unwrap();
        assert_eq!(records_from_content(&r.content)[0]["timestamp"], "2024-01-03 15:00:00");
    }

    #[test]
    fn summary_stats_hand_checked() {
        let s = SummaryStats::compute("close", &[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.stddev, s.count), (2.0, 1.0, 2));
        let s = SummaryStats::compute("close", &[180.50]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.stddev), (180.5, 180.5, 180.5, 0.0));
        assert!(SummaryStats::compute("close", &[]).is_none());
    }

    #[test]
    fn summary_over_inline_records() {
        let reg = financial_registry(ctx_at("2024-06-01"));
        let r = call(
            &reg,
            SUMMARY,
            json!({
                "records": [
                    {"code": "A", "timestamp": "2024-01-02 15:00:00", "close": 1.0, "turn": null},
                    {"code": "A", "timestamp": "2024-01-03 15:00:00", "close": 3.0, "turn": null},
                ],
                "summarize_fields": ["close", "turn"],
            }),
        )
        .unwrap();
        assert!(!r.is_error);
        assert_eq!(r.content["summaries"][0]["mean"], 2.0);
        assert_eq!(r.content["summaries"][1]["error_kind"], "no_data");
        assert_eq!(r.content["inputs"], json!({"row_count": 2, "source": "records"}));

        let empty = call(&reg, SUMMARY, json!({"records": [], "summarize_fields": ["close"]})).unwrap();
        assert!(empty.is_error);
        assert_eq!(empty.content["error_kind"], "empty_input");
    }

    #[test]
    fn summary_over_query_and_nested_violations() {
        let reg = financial_registry(ctx_at("2024-06-01"));
        let r = call(&reg, SUMMARY, json!({"query": q1_args(), "summarize_fields": ["close", "turn"]})).unwrap();
        assert_eq!(r.content["summaries"][0]["count"], 65);
        assert_eq!(r.content["inputs"]["source"], "query");

        let err = call(&reg, SUMMARY, json!({"query": {"codes": ["A"]}, "summarize_fields": ["close"]})).unwrap_err();
        let ToolError::InvalidParams(vs) = err else { panic!() };
        let params: Vec<_> = vs.iter().map(|v| v.param.as_str()).collect();
        assert_eq!(params, vec!["query.fields", "query.start_date", "query.end_date"]);

        let err = call(&reg, SUMMARY, json!({"records": [{"code": "A"}], "summarize_fields": ["close"]})).unwrap_err();
        assert!(matches!(err, ToolError::InvalidParams(ref v) if v[0].param == "records[0]"));
    }

    #[test]
    fn rate_limit_applies_to_misses_only() {
        let ctx = ctx_at("2024-06-01");
        let reg = financial_registry(ctx.clone());
        for day in ["2024-01-02", "2024-01-03", "2024-01-04", "2024-01-05", "2024-01-08"] {
            call(&reg, HISTORICAL, json!({"codes": ["A"], "fields": ["close"], "start_date": day, "end_date": day})).unwrap();
        }
        // Cached: no token needed.
        call(&reg, HISTORICAL, json!({"codes": ["A"], "fields": ["close"], "start_date": "2024-01-02", "end_date": "2024-01-02"}))
            .unwrap();
        let err = call(&reg, HISTORICAL, json!({"codes": ["A"], "fields": ["close"], "start_date": "2024-01-09", "end_date": "2024-01-09"}))
            .unwrap_err();
        assert_eq!(
            err,
            ToolError::RateLimited {
                provider_id: "synthetic".into(),
                retry_after_ms: 1000
            }
        );
        assert_eq!(ctx.fetch_count(), 5);
    }
}
