//! Canonical records, the options grammar, and fill policies.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use indexmap::IndexMap;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::providers::{CanonicalField, DataQuery, FieldMap, RawProviderPayload};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceAdj {
    Forward,
    Backward,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FillPolicy {
    Previous,
    #[default]
    Blank,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OptionsError {
    #[error("option token {0:?} has no '='")]
    MissingEquals(String),
    #[error("option token {0:?} has an empty key")]
    EmptyKey(String),
    #[error("option {0:?} is given more than once")]
    DuplicateKey(String),
    #[error("option {key}={value:?} is not recognized; expected one of {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

/// `Key=Value;Key=Value` options, insertion-ordered. Unrecognized keys are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OptionsMap {
    entries: IndexMap<String, String>,
}

impl OptionsMap {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn price_adj(&self) -> Option<PriceAdj> {
        self.get("PriceAdj").map(|v| match v {
            "F" => PriceAdj::Forward,
            "B" => PriceAdj::Backward,
            _ => PriceAdj::None,
        })
    }

    pub fn fill(&self) -> FillPolicy {
        match self.get("Fill") {
            Some("Previous") => FillPolicy::Previous,
            _ => FillPolicy::Blank,
        }
    }

    /// Key-sorted `k=v;k=v` form, used for cache keys.
    pub fn canonical_string(&self) -> String {
        let mut pairs: Vec<_> = self.iter().collect();
        pairs.sort_unstable();
        pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }
}

pub fn parse_options(text: &str) -> Result<OptionsMap, OptionsError> {
    let mut entries = IndexMap::new();
    for token in text.split(';') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| OptionsError::MissingEquals(token.to_owned()))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(OptionsError::EmptyKey(token.to_owned()));
        }
        let expected = match key {
            "PriceAdj" => Some(("F, B, N", &["F", "B", "N"][..])),
            "Fill" => Some(("Previous, Blank", &["Previous", "Blank"][..])),
            _ => None,
        };
        if let Some((expected, allowed)) = expected {
            if !allowed.contains(&value) {
                return Err(OptionsError::BadValue {
                    key: key.to_owned(),
                    value: value.to_owned(),
                    expected,
                });
            }
        }
        if entries.insert(key.to_owned(), value.to_owned()).is_some() {
            return Err(OptionsError::DuplicateKey(key.to_owned()));
        }
    }
    Ok(OptionsMap { entries })
}

/// One `(code, trading day)` row of the grounding payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalRecord {
    pub code: String,
    pub timestamp: NaiveDateTime,
    pub values: BTreeMap<CanonicalField, Option<f64>>,
}

impl CanonicalRecord {
    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }

    pub fn timestamp_string(&self) -> String {
        self.timestamp.format(TIMESTAMP_FORMAT).to_string()
    }

    pub fn value(&self, field: CanonicalField) -> Option<f64> {
        self.values.get(&field).copied().flatten()
    }

    /// Flat `{code, timestamp, <field>...}` object with fields in `order`.
    pub fn to_json(&self, order: &[CanonicalField]) -> Value {
        let mut obj = Map::new();
        obj.insert("code".into(), Value::from(self.code.as_str()));
        obj.insert("timestamp".into(), Value::from(self.timestamp_string()));
        for f in order {
            if let Some(v) = self.values.get(f) {
                obj.insert(f.as_str().into(), v.map_or(Value::Null, Value::from));
            }
        }
        Value::Object(obj)
    }

    pub fn from_json(value: &Value) -> Result<Self, String> {
        let obj = value.as_object().ok_or("record must be an object")?;
        let code = obj.get("code").and_then(Value::as_str).ok_or("record.code must be a string")?;
        let ts = obj
            .get("timestamp")
            .and_then(Value::as_str)
            .ok_or("record.timestamp must be a string")?;
        let timestamp = NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT)
            .map_err(|e| format!("record.timestamp {ts:?}: {e}"))?;
        let mut values = BTreeMap::new();
        for (k, v) in obj {
            if k == "code" || k == "timestamp" {
                continue;
            }
            let field: CanonicalField = k.parse().map_err(|e: crate::providers::UnknownField| e.to_string())?;
            let v = match v {
                Value::Null => None,
                Value::Number(n) => n.as_f64(),
                _ => return Err(format!("record.{k} must be a number or null")),
            };
            values.insert(field, v);
        }
        Ok(Self {
            code: code.to_owned(),
            timestamp,
            values,
        })
    }
}

pub fn records_to_json(records: &[CanonicalRecord], order: &[CanonicalField]) -> Value {
    Value::Array(records.iter().map(|r| r.to_json(order)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NormalizeError {
    #[error("provider returned a row for {code} on {date}, outside the requested range")]
    RowOutOfRange { code: String, date: NaiveDate },
    #[error("provider returned a row for unrequested code {0:?}")]
    UnexpectedCode(String),
    #[error("records are not sorted by (code, timestamp) at index {0}")]
    Unsorted(usize),
}

/// Builds one record per `(code, trading day)` in the query, sorted by
/// `(code, timestamp)`. Days the provider did not return are all-null.
pub fn normalize_payload(
    raw: &RawProviderPayload,
    query: &DataQuery,
    field_map: &FieldMap,
    close_time: NaiveTime,
) -> Result<Vec<CanonicalRecord>, NormalizeError> {
    let days = query.trading_days();
    let mut codes: Vec<&String> = query.codes.iter().collect();
    codes.sort();

    let mut by_key: BTreeMap<(&str, NaiveDate), BTreeMap<CanonicalField, Option<f64>>> = BTreeMap::new();
    for row in &raw.rows {
        if !query.contains_date(row.date) {
            return Err(NormalizeError::RowOutOfRange {
                code: row.code.clone(),
                date: row.date,
            });
        }
        if !query.codes.contains(&row.code) {
            return Err(NormalizeError::UnexpectedCode(row.code.clone()));
        }
        let slot = by_key.entry((row.code.as_str(), row.date)).or_default();
        for (provider_field, v) in &row.values {
            if let Some(field) = field_map.canonical_for(provider_field, &query.fields) {
                slot.insert(field, v.filter(|x| x.is_finite()));
            }
        }
    }

    let mut out = Vec::with_capacity(codes.len() * days.len());
    for code in codes {
        for day in &days {
            let found = by_key.get(&(code.as_str(), *day));
            let values = query
                .fields
                .iter()
                .map(|f| (*f, found.and_then(|m| m.get(f).copied()).flatten()))
                .collect();
            out.push(CanonicalRecord {
                code: code.clone(),
                timestamp: day.and_time(close_time),
                values,
            });
        }
    }
    Ok(out)
}

/// `Previous` carries the last non-null value forward within each code;
/// leading nulls stay null. `Blank` is the identity.
pub fn apply_fill(
    mut records: Vec<CanonicalRecord>,
    policy: FillPolicy,
    fields: &[CanonicalField],
) -> Result<Vec<CanonicalRecord>, NormalizeError> {
    if let Some(i) = records
        .windows(2)
        .position(|w| (w[0].code.as_str(), w[0].timestamp) > (w[1].code.as_str(), w[1].timestamp))
    {
        return Err(NormalizeError::Unsorted(i + 1));
    }
    if policy == FillPolicy::Blank {
        return Ok(records);
    }
    let mut last: BTreeMap<CanonicalField, f64> = BTreeMap::new();
    let mut current_code: Option<String> = None;
    for rec in &mut records {
        if current_code.as_deref() != Some(rec.code.as_str()) {
            last.clear();
            current_code = Some(rec.code.clone());
        }
        for f in fields {
            match rec.values.get(f).copied().flatten() {
                Some(v) => {
                    last.insert(*f, v);
                }
                None => {
                    if let Some(prev) = last.get(f) {
                        rec.values.insert(*f, Some(*prev));
                    }
                }
            }
        }
    }
    Ok(records)
}
