//! JSON-RPC 2.0 envelopes and newline-delimited framing.
//!
//! One frame is one UTF-8 JSON object followed by a single `\n`. The parser
//! keeps unrecognized top-level keys so a message can be re-emitted without
//! loss. Floating-point numbers are rounded to six fractional digits on
//! emission so golden transcripts stay stable across platforms.

use std::fmt;

use serde_json::{Map, Number, Value};
use thiserror::Error;

pub const JSONRPC_VERSION: &str = "2.0";

const RESERVED_KEYS: [&str; 6] = ["jsonrpc", "id", "method", "params", "result", "error"];

/// Request identifier. `null` ids are only legal on error responses, which
/// is modelled as `Option<Id>` on [`Response`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Id {
    Number(i64),
    String(String),
}

impl Id {
    pub fn to_value(&self) -> Value {
        match self {
            Id::Number(n) => Value::from(*n),
            Id::String(s) => Value::from(s.as_str()),
        }
    }
}

impl From<i64> for Id {
    fn from(n: i64) -> Self {
        Id::Number(n)
    }
}

impl From<&str> for Id {
    fn from(s: &str) -> Self {
        Id::String(s.to_owned())
    }
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Id::Number(n) => write!(f, "{n}"),
            Id::String(s) => write!(f, "{s:?}"),
        }
    }
}

/// The server's error taxonomy. Standard JSON-RPC codes plus three
/// application codes in the implementation-defined range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    ParseError,
    InvalidRequest,
    MethodNotFound,
    InvalidParams,
    Internal,
    ProviderFailure,
    RateLimited,
    CredentialMissing,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 8] = [
        ErrorCode::ParseError,
        ErrorCode::InvalidRequest,
        ErrorCode::MethodNotFound,
        ErrorCode::InvalidParams,
        ErrorCode::Internal,
        ErrorCode::ProviderFailure,
        ErrorCode::RateLimited,
        ErrorCode::CredentialMissing,
    ];

    pub const fn code(self) -> i64 {
        match self {
            ErrorCode::ParseError => -32700,
            ErrorCode::InvalidRequest => -32600,
            ErrorCode::MethodNotFound => -32601,
            ErrorCode::InvalidParams => -32602,
            ErrorCode::Internal => -32603,
            ErrorCode::ProviderFailure => -32001,
            ErrorCode::RateLimited => -32002,
            ErrorCode::CredentialMissing => -32003,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }

    pub const fn default_message(self) -> &'static str {
        match self {
            ErrorCode::ParseError => "parse error",
            ErrorCode::InvalidRequest => "invalid request",
            ErrorCode::MethodNotFound => "method not found",
            ErrorCode::InvalidParams => "invalid params",
            ErrorCode::Internal => "internal error",
            ErrorCode::ProviderFailure => "provider failure",
            ErrorCode::RateLimited => "rate limited",
            ErrorCode::CredentialMissing => "credential missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorObject {
    pub code: i64,
    pub message: String,
    pub data: Option<Value>,
}

impl ErrorObject {
    pub fn new(code: ErrorCode, message: impl Into<String>, data: Option<Value>) -> Self {
        Self {
            code: code.code(),
            message: message.into(),
            data,
        }
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        ErrorCode::from_code(self.code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: Id,
    pub method: String,
    pub params: Option<Value>,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub method: String,
    pub params: Option<Value>,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Result(Value),
    Error(ErrorObject),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: Option<Id>,
    pub outcome: Outcome,
    pub extra: Map<String, Value>,
}

impl Response {
    pub fn result(&self) -> Option<&Value> {
        match &self.outcome {
            Outcome::Result(v) => Some(v),
            Outcome::Error(_) => None,
        }
    }

    pub fn error(&self) -> Option<&ErrorObject> {
        match &self.outcome {
            Outcome::Result(_) => None,
            Outcome::Error(e) => Some(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(Request),
    Notification(Notification),
    Response(Response),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Request,
    Notification,
    Response,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Request(_) => MessageKind::Request,
            Message::Notification(_) => MessageKind::Notification,
            Message::Response(_) => MessageKind::Response,
        }
    }

    pub fn request(id: impl Into<Id>, method: impl Into<String>, params: Option<Value>) -> Self {
        Message::Request(Request {
            id: id.into(),
            method: method.into(),
            params,
            extra: Map::new(),
        })
    }

    pub fn notification(method: impl Into<String>, params: Option<Value>) -> Self {
        Message::Notification(Notification {
            method: method.into(),
            params,
            extra: Map::new(),
        })
    }

    pub fn success(id: Id, result: Value) -> Self {
        Message::Response(Response {
            id: Some(id),
            outcome: Outcome::Result(result),
            extra: Map::new(),
        })
    }

    pub fn as_response(&self) -> Option<&Response> {
        match self {
            Message::Response(r) => Some(r),
            _ => None,
        }
    }
}

/// A frame that could not be turned into a [`Message`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid request: {reason}")]
    InvalidRequest { id: Option<Id>, reason: String },
}

impl WireError {
    pub fn code(&self) -> ErrorCode {
        match self {
            WireError::Parse(_) => ErrorCode::ParseError,
            WireError::InvalidRequest { .. } => ErrorCode::InvalidRequest,
        }
    }

    /// The error response the server sends back for this frame.
    pub fn to_response(&self) -> Message {
        match self {
            WireError::Parse(_) => make_error(None, ErrorCode::ParseError, "parse error", None),
            WireError::InvalidRequest { id, reason } => make_error(
                id.clone(),
                ErrorCode::InvalidRequest,
                format!("invalid request: {reason}"),
                None,
            ),
        }
    }
}

/// A message that violates the envelope invariants and must not be emitted.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("message cannot be encoded: {0}")]
pub struct EncodeError(pub String);

fn invalid(id: &Option<Id>, reason: impl Into<String>) -> WireError {
    WireError::InvalidRequest {
        id: id.clone(),
        reason: reason.into(),
    }
}

enum IdField {
    Absent,
    Null,
    Present(Id),
}

fn parse_id(value: Option<&Value>) -> Result<IdField, String> {
    match value {
        None => Ok(IdField::Absent),
        Some(Value::Null) => Ok(IdField::Null),
        Some(Value::String(s)) => Ok(IdField::Present(Id::String(s.clone()))),
        Some(Value::Number(n)) => n
            .as_i64()
            .map(|n| IdField::Present(Id::Number(n)))
            .ok_or_else(|| "id must be an integer or a string".to_owned()),
        Some(_) => Err("id must be an integer or a string".to_owned()),
    }
}

/// Parses one frame. A trailing `\n` (or `\r\n`) is accepted and ignored.
pub fn parse_message(line: &[u8]) -> Result<Message, WireError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let value: Value = serde_json::from_slice(line).map_err(|e| WireError::Parse(e.to_string()))?;
    message_from_value(value)
}

/// Interprets an already-decoded JSON value as an envelope.
pub fn message_from_value(value: Value) -> Result<Message, WireError> {
    let Value::Object(mut obj) = value else {
        return Err(invalid(&None, "frame must be a JSON object"));
    };

    // Correlate errors with the request id whenever it is readable.
    let id_field = parse_id(obj.get("id")).map_err(|reason| invalid(&None, reason))?;
    let id = match &id_field {
        IdField::Present(id) => Some(id.clone()),
        _ => None,
    };

    match obj.get("jsonrpc") {
        Some(Value::String(v)) if v == JSONRPC_VERSION => {}
        _ => return Err(invalid(&id, "jsonrpc must be \"2.0\"")),
    }

    let method = obj.remove("method");
    let params = obj.remove("params");
    let result = obj.remove("result");
    let error = obj.remove("error");
    obj.remove("jsonrpc");
    obj.remove("id");
    let extra = obj;

    if let Some(method) = method {
        let Value::String(method) = method else {
            return Err(invalid(&id, "method must be a string"));
        };
        if method.is_empty() {
            return Err(invalid(&id, "method must not be empty"));
        }
        if result.is_some() || error.is_some() {
            return Err(invalid(&id, "a request must not carry result or error"));
        }
        if let Some(p) = &params {
            if !p.is_object() && !p.is_array() {
                return Err(invalid(&id, "params must be an object or an array"));
            }
        }
        return match id_field {
            IdField::Absent => Ok(Message::Notification(Notification {
                method,
                params,
                extra,
            })),
            IdField::Null => Err(invalid(&None, "request id must not be null")),
            IdField::Present(id) => Ok(Message::Request(Request {
                id,
                method,
                params,
                extra,
            })),
        };
    }

    if params.is_some() {
        return Err(invalid(&id, "params without method"));
    }
    let outcome = match (result, error) {
        (Some(_), Some(_)) => return Err(invalid(&id, "response carries both result and error")),
        (None, None) => return Err(invalid(&id, "missing method, result, or error")),
        (Some(result), None) => Outcome::Result(result),
        (None, Some(error)) => Outcome::Error(parse_error_object(error).map_err(|r| invalid(&id, r))?),
    };
    if matches!(id_field, IdField::Absent) {
        return Err(invalid(&None, "response must carry an id"));
    }
    Ok(Message::Response(Response { id, outcome, extra }))
}

fn parse_error_object(value: Value) -> Result<ErrorObject, String> {
    let Value::Object(mut obj) = value else {
        return Err("error must be an object".to_owned());
    };
    let code = obj
        .get("code")
        .and_then(Value::as_i64)
        .ok_or("error.code must be an integer")?;
    let message = match obj.remove("message") {
        Some(Value::String(m)) if !m.is_empty() => m,
        _ => return Err("error.message must be a non-empty string".to_owned()),
    };
    Ok(ErrorObject {
        code,
        message,
        data: obj.remove("data"),
    })
}

/// Builds the JSON object for a message, checking envelope invariants.
pub fn message_to_value(msg: &Message) -> Result<Value, EncodeError> {
    let mut out = Map::new();
    out.insert("jsonrpc".into(), Value::from(JSONRPC_VERSION));
    let extra = match msg {
        Message::Request(r) => {
            check_method(&r.method)?;
            out.insert("id".into(), r.id.to_value());
            out.insert("method".into(), Value::from(r.method.as_str()));
            if let Some(p) = &r.params {
                out.insert("params".into(), p.clone());
            }
            &r.extra
        }
        Message::Notification(n) => {
            check_method(&n.method)?;
            out.insert("method".into(), Value::from(n.method.as_str()));
            if let Some(p) = &n.params {
                out.insert("params".into(), p.clone());
            }
            &n.extra
        }
        Message::Response(r) => {
            out.insert("id".into(), r.id.as_ref().map_or(Value::Null, Id::to_value));
            match &r.outcome {
                Outcome::Result(v) => {
                    out.insert("result".into(), v.clone());
                }
                Outcome::Error(e) => {
                    if e.message.is_empty() {
                        return Err(EncodeError("error.message is empty".into()));
                    }
                    let mut err = Map::new();
                    err.insert("code".into(), Value::from(e.code));
                    err.insert("message".into(), Value::from(e.message.as_str()));
                    if let Some(d) = &e.data {
                        err.insert("data".into(), d.clone());
                    }
                    out.insert("error".into(), Value::Object(err));
                }
            }
            &r.extra
        }
    };
    for (k, v) in extra {
        if RESERVED_KEYS.contains(&k.as_str()) {
            return Err(EncodeError(format!("extra key {k:?} shadows an envelope field")));
        }
        out.insert(k.clone(), v.clone());
    }
    Ok(Value::Object(out))
}

fn check_method(method: &str) -> Result<(), EncodeError> {
    if method.is_empty() {
        Err(EncodeError("method is empty".into()))
    } else {
        Ok(())
    }
}

/// Encodes one frame: compact JSON, numbers normalized, single trailing newline.
pub fn serialize_message(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    Ok(encode_frame(&message_to_value(msg)?))
}

/// Encodes an arbitrary JSON value as a frame.
pub fn encode_frame(value: &Value) -> Vec<u8> {
    let mut value = value.clone();
    normalize_numbers(&mut value);
    // Compact serde_json output escapes control characters inside strings,
    // so the only newline is the terminator.
    let mut bytes = serde_json::to_vec(&value).expect("Value serialization is infallible");
    bytes.push(b'\n');
    bytes
}

/// Compact JSON text with normalized numbers and no terminator.
pub fn to_compact_string(value: &Value) -> String {
    let mut frame = encode_frame(value);
    frame.pop();
    String::from_utf8(frame).expect("serde_json emits UTF-8")
}

/// Rounds every non-integer number to at most six fractional digits.
pub fn normalize_numbers(value: &mut Value) {
    match value {
        Value::Number(n) => {
            if n.is_f64() {
                if let Some(x) = n.as_f64() {
                    if let Some(r) = Number::from_f64(round6(x)) {
                        *n = r;
                    }
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize_numbers),
        Value::Object(map) => map.values_mut().for_each(normalize_numbers),
        _ => {}
    }
}

/// Round to six decimals. Magnitudes beyond 1e15 already have fewer than six
/// representable fractional digits and are left alone.
pub fn round6(x: f64) -> f64 {
    if !x.is_finite() || x.abs() >= 1e15 {
        return x;
    }
    (x * 1e6).round() / 1e6
}

pub fn make_error(id: Option<Id>, code: ErrorCode, message: impl Into<String>, data: Option<Value>) -> Message {
    let mut message = message.into();
    if message.is_empty() {
        message = code.default_message().to_owned();
    }
    Message::Response(Response {
        id,
        outcome: Outcome::Error(ErrorObject::new(code, message, data)),
        extra: Map::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_tools_list_request() {
        let msg = parse_message(br#"{"jsonrpc":"2.0","id":1,"method":"tools/list"}"#).unwrap();
        let Message::Request(req) = msg else { panic!("expected request") };
        assert_eq!(req.id, Id::Number(1));
        assert_eq!(req.method, "tools/list");
        assert!(req.params.is_none());
    }

    #[test]
    fn response_round_trips_byte_identical() {
        let line = b"{\"jsonrpc\":\"2.0\",\"id\":1,\"result\":{}}\n";
        let msg = parse_message(line).unwrap();
        assert_eq!(serialize_message(&msg).unwrap(), line.to_vec());
    }

    #[test]
    fn unknown_keys_survive_round_trip() {
        let line = br#"{"jsonrpc":"2.0","id":"a","method":"x","params":{},"_meta":{"trace":1}}"#;
        let msg = parse_message(line).unwrap();
        let again = parse_message(&serialize_message(&msg).unwrap()).unwrap();
        assert_eq!(msg, again);
        let Message::Request(req) = again else { panic!() };
        assert_eq!(req.extra["_meta"], json!({"trace": 1}));
    }

    #[test]
    fn notification_has_no_id() {
        let msg = parse_message(br#"{"jsonrpc":"2.0","method":"notifications/initialized"}"#).unwrap();
        assert_eq!(msg.kind(), MessageKind::Notification);
        let text = String::from_utf8(serialize_message(&msg).unwrap()).unwrap();
        assert!(!text.contains("\"id\""));
    }

    #[test]
    fn garbage_is_a_parse_error() {
        let err = parse_message(b"{not json").unwrap_err();
        assert_eq!(err.code(), ErrorCode::ParseError);
        let resp = err.to_response();
        let r = resp.as_response().unwrap();
        assert_eq!(r.id, None);
        assert_eq!(r.error().unwrap().code, -32700);
    }

    #[test]
    fn invalid_envelopes() {
        let cases: &[&[u8]] = &[
            br#"[1,2]"#,
            br#"{"jsonrpc":"1.0","id":1,"method":"a"}"#,
            br#"{"jsonrpc":"2.0","id":1}"#,
            br#"{"jsonrpc":"2.0","id":1,"result":1,"error":{"code":1,"message":"x"}}"#,
            br#"{"jsonrpc":"2.0","id":null,"method":"a"}"#,
            br#"{"jsonrpc":"2.0","id":1.5,"method":"a"}"#,
            br#"{"jsonrpc":"2.0","id":1,"method":7}"#,
            br#"{"jsonrpc":"2.0","id":1,"method":"a","params":3}"#,
            br#"{"jsonrpc":"2.0","result":1}"#,
            br#"{"jsonrpc":"2.0","id":1,"error":{"code":1,"message":""}}"#,
        ];
        for case in cases {
            let err = parse_message(case).unwrap_err();
            assert_eq!(err.code(), ErrorCode::InvalidRequest, "{}", String::from_utf8_lossy(case));
        }
    }

    #[test]
    fn invalid_request_keeps_readable_id() {
        let err = parse_message(br#"{"jsonrpc":"2.0","id":4}"#).unwrap_err();
        let resp = err.to_response();
        assert_eq!(resp.as_response().unwrap().id, Some(Id::Number(4)));
    }

    #[test]
    fn error_response_carries_code() {
        let msg = make_error(Some(Id::Number(7)), ErrorCode::MethodNotFound, "method not found", None);
        let frame = serialize_message(&msg).unwrap();
        let text = String::from_utf8(frame).unwrap();
        assert!(text.contains("\"code\":-32601"));
        assert!(text.ends_with('\n'));
        assert_eq!(text.matches('\n').count(), 1);
    }

    #[test]
    fn make_error_variants() {
        let m = make_error(Some(1.into()), ErrorCode::InvalidParams, "invalid params", None);
        assert_eq!(m.as_response().unwrap().error().unwrap().code, -32602);

        let m = make_error(None, ErrorCode::ParseError, "parse error", None);
        let v = message_to_value(&m).unwrap();
        assert_eq!(v["id"], Value::Null);

        let data = json!({"retry_after_ms": 800});
        let m = make_error(Some(9.into()), ErrorCode::RateLimited, "rate limited", Some(data.clone()));
        assert_eq!(m.as_response().unwrap().error().unwrap().data, Some(data));
    }

    #[test]
    fn non_ascii_survives() {
        let msg = Message::request(3, "tools/call", Some(json!({"name": "宁德时代\n“CATL”"})));
        let frame = serialize_message(&msg).unwrap();
        assert!(std::str::from_utf8(&frame).is_ok());
        assert_eq!(frame.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(parse_message(&frame).unwrap(), msg);
    }

    #[test]
    fn numbers_are_rounded_to_six_digits() {
        let v = json!({"a": 1.0 / 3.0, "b": 180.5, "c": 12, "d": [2.0000004]});
        let text = to_compact_string(&v);
        assert_eq!(text, r#"{"a":0.333333,"b":180.5,"c":12,"d":[2.0]}"#);
    }

    #[test]
    fn encode_rejects_invariant_violations() {
        let bad = Message::Response(Response {
            id: Some(1.into()),
            outcome: Outcome::Error(ErrorObject {
                code: -32603,
                message: String::new(),
                data: None,
            }),
            extra: Map::new(),
        });
        assert!(serialize_message(&bad).is_err());

        let mut extra = Map::new();
        extra.insert("result".into(), json!(1));
        let bad = Message::Request(Request {
            id: 1.into(),
            method: "x".into(),
            params: None,
            extra,
        });
        assert!(serialize_message(&bad).is_err());
    }
}
