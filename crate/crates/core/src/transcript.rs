//! Recorded wire sessions: one `{"direction":"in"|"out","message":{...}}`
//! object per line. Replaying feeds every `in` message to a server and diffs
//! the replies against the recorded `out` messages.

use std::collections::VecDeque;
use std::fmt;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::jsonrpc::{message_from_value, to_compact_string};
use crate::server::Server;

/// Placeholder written over volatile values before comparison.
pub const MASK: &str = "<masked>";

/// Keys whose values are masked wherever they appear.
pub const MASKED_KEYS: &[&str] = &["fetched_at"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::In => "in",
            Direction::Out => "out",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub direction: Direction,
    pub message: Value,
}

impl Entry {
    pub fn to_json(&self) -> Value {
        json!({"direction": self.direction.as_str(), "message": self.message})
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transcript line {line}: {reason}")]
pub struct TranscriptError {
    pub line: usize,
    pub reason: String,
}

pub fn parse_transcript(text: &str) -> Result<Transcript, TranscriptError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |reason: String| TranscriptError { line, reason };
        let value: Value = serde_json::from_str(raw).map_err(|e| err(format!("not JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| err("entry must be an object".into()))?;
        if let Some(extra) = obj.keys().find(|k| *k != "direction" && *k != "message") {
            return Err(err(format!("unexpected key {extra:?}")));
        }
        let direction = match obj.get("direction").and_then(Value::as_str) {
            Some("in") => Direction::In,
            Some("out") => Direction::Out,
            _ => return Err(err("direction must be \"in\" or \"out\"".into())),
        };
        let message = obj.get("message").cloned().ok_or_else(|| err("missing message".into()))?;
        message_from_value(message.clone()).map_err(|e| err(format!("message is not valid JSON-RPC: {e}")))?;
        entries.push(Entry { direction, message });
    }
    Ok(Transcript { entries })
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| to_compact_string(&e.to_json()) + "\n")
            .collect()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Value> {
        self.entries
            .iter()
            .filter(|e| e.direction == Direction::In)
            .map(|e| &e.message)
    }
}

fn feed(server: &Server, message: &Value) -> Option<Value> {
    let frame = to_compact_string(message);
    server
        .handle_frame(frame.as_bytes())
        .map(|bytes| serde_json::from_slice(&bytes).expect("server emits valid JSON"))
}

/// Runs `inputs` through `server` and records both directions.
pub fn record<'a, I>(server: &Server, inputs: I) -> Transcript
where
    I: IntoIterator<Item = &'a Value>,
{
    let mut entries = Vec::new();
    for message in inputs {
        entries.push(Entry {
            direction: Direction::In,
            message: message.clone(),
        });
        if let Some(reply) = feed(server, message) {
            entries.push(Entry {
                direction: Direction::Out,
                message: reply,
            });
        }
    }
    Transcript { entries }
}

/// Replaces volatile values with [`MASK`]. JSON embedded in strings (tool
/// text content) is parsed and masked too.
pub fn mask(value: &Value) -> Value {
    fn walk(v: &Value, path: &mut Vec<String>) -> Value {
        match v {
            Value::Object(m) => {
                let mut out = Map::new();
                for (k, child) in m {
                    path.push(k.clone());
                    let is_version = path.len() >= 2 && path[path.len() - 2] == "serverInfo" && k == "version";
                    let masked = if MASKED_KEYS.contains(&k.as_str()) || is_version {
                        Value::from(MASK)
                    } else {
                        walk(child, path)
                    };
                    path.pop();
                    out.insert(k.clone(), masked);
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(|i| walk(i, path)).collect()),
            Value::String(s) if s.starts_with('{') || s.starts_with('[') => match serde_json::from_str::<Value>(s) {
                Ok(inner) => json!({"$embedded": walk(&inner, &mut Vec::new())}),
                Err(_) => v.clone(),
            },
            other => other.clone(),
        }
    }
    walk(value, &mut Vec::new())
}

/// JSON-pointer-ish path of the first difference, if any.
pub fn first_difference(expected: &Value, actual: &Value) -> Option<String> {
    fn go(a: &Value, b: &Value, path: &str) -> Option<String> {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let xk: Vec<_> = x.keys().collect();
                let yk: Vec<_> = y.keys().collect();
                if xk != yk {
                    return Some(format!("{path}: keys {xk:?} != {yk:?}"));
                }
                x.iter().find_map(|(k, v)| go(v, &y[k], &format!("{path}/{k}")))
            }
            (Value::Array(x), Value::Array(y)) => {
                if x.len() != y.len() {
                    return Some(format!("{path}: length {} != {}", x.len(), y.len()));
                }
                x.iter()
                    .zip(y)
                    .enumerate()
                    .find_map(|(i, (p, q))| go(p, q, &format!("{path}/{i}")))
            }
            _ => {
                let (sa, sb) = (to_compact_string(a), to_compact_string(b));
                (sa != sb).then(|| format!("{path}: expected {sa}, got {sb}"))
            }
        }
    }
    go(&mask(expected), &mask(actual), "")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    /// 1-based position among the expected output frames.
    pub index: usize,
    pub id: Value,
    pub diff: Option<String>,
}

impl FrameReport {
    pub fn passed(&self) -> bool {
        self.diff.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub frames: Vec<FrameReport>,
    /// Replies the server produced that the transcript does not expect.
    pub unexpected: Vec<Value>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.unexpected.is_empty() && self.frames.iter().all(FrameReport::passed)
    }

    pub fn failures(&self) -> usize {
        self.frames.iter().filter(|f| !f.passed()).count() + self.unexpected.len()
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for frame in &self.frames {
            match &frame.diff {
                None => writeln!(f, "frame {} (id {}): pass", frame.index, frame.id)?,
                Some(d) => writeln!(f, "frame {} (id {}): FAIL {d}", frame.index, frame.id)?,
            }
        }
        for extra in &self.unexpected {
            writeln!(f, "unexpected output: {}", to_compact_string(extra))?;
        }
        let n = self.frames.len();
        write!(
            f,
            "{n} frame{}, {} failed",
            if n == 1 { "" } else { "s" },
            self.failures()
        )
    }
}

/// Feeds every `in` entry to `server` and checks replies against the `out`
/// entries in order.
pub fn replay(server: &Server, transcript: &Transcript) -> ReplayReport {
    let mut pending: VecDeque<Value> = VecDeque::new();
    let mut report = ReplayReport::default();
    for entry in &transcript.entries {
        match entry.direction {
            Direction::In => pending.extend(feed(server, &entry.message)),
            Direction::Out => {
                let index = report.frames.len() + 1;
                let id = entry.message.get("id").cloned().unwrap_or(Value::Null);
                let diff = match pending.pop_front() {
                    Some(actual) => first_difference(&entry.message, &actual),
                    None => Some("no reply was produced".to_owned()),
                };
                report.frames.push(FrameReport { index, id, diff });
            }
        }
    }
    report.unexpected.extend(pending);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "{\"direction\":\"in\",\"message\":{\"jsonrpc\":\"2.0\",\"id\":1,\"method\":\"ping\"}}\n\n";
        let t = parse_transcript(text).unwrap();
        assert_eq!(t.entries.len(), 1);
        assert_eq!(t.to_jsonl(), text.trim_end().to_owned() + "\n");
        assert!(parse_transcript("{\"direction\":\"sideways\",\"message\":{}}").is_err());
        let err = parse_transcript("\nnope").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(parse_transcript("{\"direction\":\"in\",\"message\":{\"id\":1}}").is_err());
    }

    #[test]
    fn masking() {
        let a = json!({"result": {"serverInfo": {"name": "q", "version": "1"}, "meta": {"fetched_at": "x"}}});
        let b = json!({"result": {"serverInfo": {"name": "q", "version": "2"}, "meta": {"fetched_at": "y"}}});
        assert_eq!(first_difference(&a, &b), None);
        let a = json!({"text": "{\"fetched_at\":\"x\",\"mean\":1.5}"});
        let b = json!({"text": "{\"fetched_at\":\"y\",\"mean\":1.5}"});
        assert_eq!(first_difference(&a, &b), None);
        let c = json!({"text": "{\"fetched_at\":\"y\",\"mean\":1.6}"});
        assert!(first_difference(&a, &c).unwrap().contains("mean"));
        // Only serverInfo.version is volatile.
        assert!(first_difference(&json!({"version": 1}), &json!({"version": 2})).is_some());
    }

    #[test]
    fn empty_report() {
        let r = ReplayReport::default();
        assert!(r.passed());
        assert_eq!(r.to_string(), "0 frames, 0 failed");
    }
}
