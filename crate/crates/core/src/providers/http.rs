//! Keyed REST adapter. One GET per instrument code.
//!
//! The endpoint template may use `{code}`, `{field}` (comma-joined provider
//! field names), `{start}`, `{end}`, `{apikey}` and `{priceadj}`. The body
//! must be `{"rows":[{"code":..,"date":"YYYY-MM-DD","<field>":..}, ..]}`.

use std::collections::BTreeMap;
use std::time::Duration;

use chrono::NaiveDate;
use serde_json::Value;

use super::{parse_number_cell, DataQuery, ProviderConfig, ProviderError, RawRow};
use crate::security::CredentialStore;

const MAX_INTERRUPTS: u32 = 8;

#[derive(Debug)]
pub(super) struct HttpAdapter {
    template: String,
    timeout_ms: u64,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpAdapter {
    pub(super) fn new(template: &str, timeout_ms: u64, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            template: template.to_owned(),
            timeout_ms,
            retries,
            agent,
        }
    }

    pub(super) fn fetch(
        &self,
        query: &DataQuery,
        config: &ProviderConfig,
        credentials: &CredentialStore,
    ) -> Result<Vec<RawRow>, ProviderError> {
        let apikey = if self.template.contains("{apikey}") {
            let reference = config.credential_id();
            let secret = credentials.resolve(reference).ok_or_else(|| ProviderError::CredentialMissing {
                credential_ref: reference.to_owned(),
            })?;
            Some(secret.expose())
        } else {
            None
        };
        let fields: Vec<&str> = query.fields.iter().map(|f| config.field_map.provider_name(*f)).collect();

        let mut rows = Vec::new();
        for code in &query.codes {
            let url = self.expand(code, &fields, query, apikey);
            let body = self.get_with_retries(&url)?;
            rows.extend(decode_rows(&body, code, &fields, query)?);
        }
        Ok(rows)
    }

    fn expand(&self, code: &str, fields: &[&str], query: &DataQuery, apikey: Option<&str>) -> String {
        let field_list = fields.iter().map(|f| encode_component(f)).collect::<Vec<_>>().join(",");
        self.template
            .replace("{code}", &encode_component(code))
            .replace("{field}", &field_list)
            .replace("{start}", &query.start_date.to_string())
            .replace("{end}", &query.end_date.to_string())
            .replace("{priceadj}", &encode_component(query.options.get("PriceAdj").unwrap_or("")))
            .replace("{apikey}", &encode_component(apikey.unwrap_or("")))
    }

    fn get_with_retries(&self, url: &str) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.get_once(url) {
                Err(e) if e.is_retryable() && attempt < self.retries => attempt += 1,
                other => return other,
            }
        }
    }

    fn get_once(&self, url: &str) -> Result<String, ProviderError> {
        // A signal landing on this thread (SIGINT during graceful shutdown)
        // fails timed socket reads with EINTR even under SA_RESTART. The GET
        // is idempotent, so just issue it again.
        let mut interrupts = 0;
        let (status, body) = loop {
            match self.fetch_body(url) {
                Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::Interrupted && interrupts < MAX_INTERRUPTS => {
                    interrupts += 1;
                }
                other => break other.map_err(|e| self.map_error(e, url))?,
            }
        };
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status {
                status,
                url: url.to_owned(),
            });
        }
        Ok(body)
    }

    fn fetch_body(&self, url: &str) -> Result<(u16, String), ureq::Error> {
        let mut response = self.agent.get(url).call()?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Ok((status, String::new()));
        }
        Ok((status, response.body_mut().read_to_string()?))
    }

    fn map_error(&self, err: ureq::Error, url: &str) -> ProviderError {
        match err {
            ureq::Error::Timeout(_) => ProviderError::Timeout {
                timeout_ms: self.timeout_ms,
                url: url.to_owned(),
            },
            ureq::Error::StatusCode(status) => ProviderError::Status {
                status,
                url: url.to_owned(),
            },
            other => ProviderError::Transport {
                detail: format!("GET {url}: {other}"),
            },
        }
    }
}

fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

fn decode_rows(body: &str, code: &str, fields: &[&str], query: &DataQuery) -> Result<Vec<RawRow>, ProviderError> {
    let schema = |detail: String| ProviderError::Schema { detail };
    let value: Value = serde_json::from_str(body).map_err(|e| schema(format!("body is not JSON: {e}")))?;
    let rows = value
        .get("rows")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("body has no `rows` array".to_owned()))?;

    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let obj = row.as_object().ok_or_else(|| schema(format!("rows[{i}] is not an object")))?;
        let row_code = match obj.get("code") {
            None | Some(Value::Null) => code,
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(schema(format!("rows[{i}].code is not a string"))),
        };
        let date = obj
            .get("date")
            .and_then(Value::as_str)
            .and_then(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
            .ok_or_else(|| schema(format!("rows[{i}].date is not a YYYY-MM-DD string")))?;
        if row_code != code || !query.contains_date(date) {
            continue;
        }
        let mut values = BTreeMap::new();
        for field in fields {
            let v = match obj.get(*field) {
                None | Some(Value::Null) => None,
                Some(Value::Number(n)) => n.as_f64(),
                Some(Value::String(s)) => {
                    parse_number_cell(s).map_err(|e| schema(format!("rows[{i}].{field}: {e}")))?
                }
                Some(_) => return Err(schema(format!("rows[{i}].{field} is not numeric"))),
            };
            values.insert((*field).to_owned(), v);
        }
        out.push(RawRow {
            code: row_code.to_owned(),
            date,
            values,
        });
    }
    Ok(out)
}
