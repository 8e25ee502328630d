//! Helpers shared by the integration tests, plus the independent oracles.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde_json::{json, Value};

use quantmcp_core::clock::ManualClock;
use quantmcp_core::config::{Config, Runtime};
use quantmcp_core::log::LogBuffer;
use quantmcp_core::server::Server;

pub const Q1_ARGS: &str = r#"{"codes":["300750.SZ"],"fields":["close","pb_lf","turn"],"start_date":"2024-01-01","end_date":"2024-03-31","options":"PriceAdj=F;Fill=Previous"}"#;

pub fn q1_args() -> Value {
    serde_json::from_str(Q1_ARGS).unwrap()
}

pub fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn golden_path(name: &str) -> PathBuf {
    manifest_dir().join("tests").join("golden").join(name)
}

pub fn fixture_path(name: &str) -> PathBuf {
    manifest_dir().join("tests").join("fixtures").join(name)
}

pub struct Harness {
    pub runtime: Runtime,
    pub clock: Arc<ManualClock>,
    pub logs: LogBuffer,
}

impl Harness {
    pub fn start(config: &Config, env: Vec<(String, String)>, today: &str) -> Self {
        let clock = Arc::new(ManualClock::at_date(date(today)));
        let logs = LogBuffer::default();
        let runtime = Runtime::start(config, env, clock.clone(), Some(Box::new(logs.clone()))).expect("runtime starts");
        Self { runtime, clock, logs }
    }

    pub fn synthetic(today: &str) -> Self {
        Self::start(&Config::synthetic(), Vec::new(), today)
    }

    pub fn server(&self) -> &Server {
        &self.runtime.server
    }

    /// Sends one frame and returns the raw reply bytes.
    pub fn raw(&self, frame: &Value) -> Option<Vec<u8>> {
        self.server().handle_frame(serde_json::to_string(frame).unwrap().as_bytes())
    }

    pub fn send(&self, frame: Value) -> Value {
        let bytes = self.raw(&frame).expect("a reply");
        serde_json::from_slice(&bytes).unwrap()
    }

    pub fn initialize(&self) -> Value {
        self.send(json!({
            "jsonrpc": "2.0", "id": 0, "method": "initialize",
            "params": {"protocolVersion": "2024-11-05", "capabilities": {}, "clientInfo": {"name": "tests", "version": "0"}},
        }))
    }

    pub fn call(&self, id: i64, tool: &str, arguments: Value) -> Value {
        self.send(json!({
            "jsonrpc": "2.0", "id": id, "method": "tools/call",
            "params": {"name": tool, "arguments": arguments},
        }))
    }

    /// Calls a handler directly, bypassing the wire (numbers keep full precision).
    pub fn call_handler(&self, tool: &str, arguments: &Value) -> quantmcp_core::registry::ToolResult {
        let registry = self.server().registry();
        let args = registry.validate_params(tool, arguments).expect("arguments validate");
        registry.handler(tool).unwrap().call(&args).expect("handler succeeds")
    }
}

/// Weekdays in `[start, end]`, by direct enumeration.
pub fn oracle_trading_days(start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = start;
    while d <= end {
        if d.weekday().number_from_monday() <= 5 {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

/// Independent FNV-1a-64.
pub fn oracle_fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent synthetic series generator, written from the formulas.
pub fn oracle_synthetic(code: &str, field: &str, day: NaiveDate, seed: u64) -> f64 {
    let key = format!("{code}|{field}|{}|{seed}", day.format("%Y-%m-%d"));
    let m = oracle_fnv(key.as_bytes()) % 1_000_000;
    match field {
        "close" | "open" | "high" | "low" => (10_000 + (m + 50) / 100) as f64 / 100.0,
        "volume" => m as f64,
        "pb_lf" => (1_000 + (9 * m + 500) / 1_000) as f64 / 1_000.0,
        "turn" => ((m + 5) / 10) as f64 / 10_000.0,
        other => panic!("no oracle for {other}"),
    }
}

pub fn records(content: &Value) -> Vec<Value> {
    content["records"].as_array().cloned().unwrap_or_default()
}
