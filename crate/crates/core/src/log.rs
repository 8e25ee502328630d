//! Structured log lines on a side channel (stderr for the server).
//!
//! Every line is a JSON object `{ts, level, event, ...fields}` and passes
//! through the credential redactor before it is written.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex};

use chrono::SecondsFormat;
use serde_json::{Map, Value};

use crate::clock::Clock;
use crate::jsonrpc::to_compact_string;
use crate::security::CredentialStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "debug",
            Level::Info => "info",
            Level::Warn => "warn",
            Level::Error => "error",
        }
    }
}

/// In-memory sink, mainly for tests.
#[derive(Debug, Clone, Default)]
pub struct LogBuffer(Arc<Mutex<Vec<u8>>>);

impl LogBuffer {
    pub fn contents(&self) -> String {
        String::from_utf8_lossy(&self.0.lock().unwrap()).into_owned()
    }

    pub fn lines(&self) -> Vec<Value> {
        self.contents()
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect()
    }
}

impl Write for LogBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Clone)]
pub struct Logger {
    sink: Option<Arc<Mutex<Box<dyn Write + Send>>>>,
    redactor: Arc<CredentialStore>,
    clock: Arc<dyn Clock>,
    min_level: Level,
}

impl fmt::Debug for Logger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Logger")
            .field("enabled", &self.sink.is_some())
            .field("min_level", &self.min_level)
            .finish()
    }
}

impl Logger {
    pub fn new(sink: Box<dyn Write + Send>, redactor: Arc<CredentialStore>, clock: Arc<dyn Clock>) -> Self {
        Self {
            sink: Some(Arc::new(Mutex::new(sink))),
            redactor,
            clock,
            min_level: Level::Info,
        }
    }

    pub fn disabled(clock: Arc<dyn Clock>) -> Self {
        Self {
            sink: None,
            redactor: Arc::new(CredentialStore::empty()),
            clock,
            min_level: Level::Error,
        }
    }

    pub fn capture(redactor: Arc<CredentialStore>, clock: Arc<dyn Clock>) -> (Self, LogBuffer) {
        let buf = LogBuffer::default();
        (Self::new(Box::new(buf.clone()), redactor, clock), buf)
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.min_level = level;
        self
    }

    pub fn redactor(&self) -> &Arc<CredentialStore> {
        &self.redactor
    }

    pub fn log(&self, level: Level, event: &str, fields: Value) {
        let Some(sink) = &self.sink else { return };
        if level < self.min_level {
            return;
        }
        let mut line = Map::new();
        line.insert(
            "ts".into(),
            Value::from(self.clock.utc_now().to_rfc3339_opts(SecondsFormat::Millis, true)),
        );
        line.insert("level".into(), Value::from(level.as_str()));
        line.insert("event".into(), Value::from(event));
        match fields {
            Value::Object(m) => line.extend(m),
            Value::Null => {}
            other => {
                line.insert("detail".into(), other);
            }
        }
        let mut line = Value::Object(line);
        self.redactor.redact_value(&mut line);
        let mut text = to_compact_string(&line);
        text.push('\n');
        // A broken log sink must not take the server down.
        if let Ok(mut w) = sink.lock() {
            let _ = w.write_all(text.as_bytes());
            let _ = w.flush();
        }
    }

    pub fn info(&self, event: &str, fields: Value) {
        self.log(Level::Info, event, fields);
    }

    pub fn warn(&self, event: &str, fields: Value) {
        self.log(Level::Warn, event, fields);
    }

    pub fn error(&self, event: &str, fields: Value) {
        self.log(Level::Error, event, fields);
    }

    pub fn debug(&self, event: &str, fields: Value) {
        self.log(Level::Debug, event, fields);
    }
}
