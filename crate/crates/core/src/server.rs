//! MCP lifecycle and dispatch, plus the stdio serve loop.

use std::io::{BufRead, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use serde_json::{json, Value};
use thiserror::Error;

use crate::jsonrpc::{
    make_error, message_to_value, parse_message, encode_frame, ErrorCode, Id, Message, Notification, Request,
};
use crate::log::Logger;
use crate::registry::{violations_json, Registry, ToolError, ToolResult, ValidationError};
use crate::security::CredentialStore;

/// The one protocol revision this server speaks. No negotiation is done.
pub const PROTOCOL_VERSION: &str = "2024-11-05";
pub const SERVER_NAME: &str = "quantmcp";
pub const SERVER_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionInfo {
    pub client_name: Option<String>,
    pub client_version: Option<String>,
    pub requested_protocol_version: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ServerState {
    pub initialized: bool,
    pub session: Option<SessionInfo>,
}

pub struct Server {
    registry: Registry,
    state: Mutex<ServerState>,
    redactor: Arc<CredentialStore>,
    log: Logger,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server")
            .field("registry", &self.registry)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl Server {
    pub fn new(registry: Registry, redactor: Arc<CredentialStore>, log: Logger) -> Self {
        Self {
            registry,
            state: Mutex::new(ServerState::default()),
            redactor,
            log,
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn state(&self) -> ServerState {
        self.state.lock().unwrap().clone()
    }

    pub fn is_initialized(&self) -> bool {
        self.state.lock().unwrap().initialized
    }

    /// Handles one raw frame and returns the encoded, redacted reply, if any.
    pub fn handle_frame(&self, line: &[u8]) -> Option<Vec<u8>> {
        let reply = match parse_message(line) {
            Ok(msg) => self.dispatch(msg)?,
            Err(e) => {
                self.log.warn("bad_frame", json!({"code": e.code().code(), "detail": e.to_string()}));
                e.to_response()
            }
        };
        Some(self.encode(&reply))
    }

    /// Encodes an outgoing message with every secret removed.
    pub fn encode(&self, msg: &Message) -> Vec<u8> {
        let mut value = match message_to_value(msg) {
            Ok(v) => v,
            Err(e) => {
                self.log.error("encode_failed", json!({"detail": e.to_string()}));
                let id = match msg {
                    Message::Request(r) => Some(r.id.clone()),
                    Message::Response(r) => r.id.clone(),
                    Message::Notification(_) => None,
                };
                let fallback = make_error(id, ErrorCode::Internal, "response could not be encoded", None);
                message_to_value(&fallback).expect("fallback error is well formed")
            }
        };
        self.redactor.redact_value(&mut value);
        encode_frame(&value)
    }

    /// Routes one parsed message. Notifications and stray responses get no reply.
    pub fn dispatch(&self, msg: Message) -> Option<Message> {
        match msg {
            Message::Request(req) => Some(self.handle_request(req)),
            Message::Notification(n) => {
                self.handle_notification(&n);
                None
            }
            Message::Response(r) => {
                self.log.debug("ignored_response", json!({"id": r.id.map(|id| id.to_value())}));
                None
            }
        }
    }

    fn handle_notification(&self, n: &Notification) {
        self.log.debug("notification", json!({"method": n.method}));
    }

    fn handle_request(&self, req: Request) -> Message {
        let id = req.id.clone();
        self.log.debug("request", json!({"id": id.to_value(), "method": req.method}));
        match req.method.as_str() {
            "initialize" => self.handle_initialize(&req),
            "ping" => Message::success(id, json!({})),
            "tools/list" | "tools/call" if !self.is_initialized() => make_error(
                Some(id),
                ErrorCode::InvalidRequest,
                format!("{} is not allowed before initialize; send initialize first", req.method),
                None,
            ),
            "tools/list" => self.handle_tools_list(&req),
            "tools/call" => self.handle_tools_call(&req),
            other => make_error(
                Some(id),
                ErrorCode::MethodNotFound,
                format!("method {other:?} is not supported"),
                Some(json!({"method": other})),
            ),
        }
    }

    pub fn handle_initialize(&self, req: &Request) -> Message {
        let params = req.params.as_ref();
        let client = params.and_then(|p| p.get("clientInfo"));
        let text = |v: Option<&Value>| v.and_then(Value::as_str).map(str::to_owned);
        let session = SessionInfo {
            client_name: text(client.and_then(|c| c.get("name"))),
            client_version: text(client.and_then(|c| c.get("version"))),
            requested_protocol_version: text(params.and_then(|p| p.get("protocolVersion"))),
        };
        {
            let mut state = self.state.lock().unwrap();
            if state.initialized {
                return make_error(
                    Some(req.id.clone()),
                    ErrorCode::InvalidRequest,
                    "session is already initialized",
                    None,
                );
            }
            state.initialized = true;
            state.session = Some(session.clone());
        }
        self.log.info(
            "session_initialized",
            json!({
                "client_name": session.client_name,
                "client_version": session.client_version,
                "requested_protocol_version": session.requested_protocol_version,
                "protocol_version": PROTOCOL_VERSION,
            }),
        );
        Message::success(
            req.id.clone(),
            json!({
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"tools": {"listChanged": false}},
                "serverInfo": {"name": SERVER_NAME, "version": SERVER_VERSION},
            }),
        )
    }

    pub fn handle_tools_list(&self, req: &Request) -> Message {
        Message::success(req.id.clone(), json!({"tools": self.registry.manifest()}))
    }

    pub fn handle_tools_call(&self, req: &Request) -> Message {
        let id = req.id.clone();
        let invalid = |message: String, data: Value| make_error(Some(id.clone()), ErrorCode::InvalidParams, message, Some(data));
        let Some(Value::Object(params)) = &req.params else {
            return invalid("tools/call params must be an object {name, arguments}".into(), json!({}));
        };
        let Some(name) = params.get("name").and_then(Value::as_str) else {
            return invalid(
                "tools/call params.name must be a string".into(),
                json!({"violations": [{"param": "name", "message": "missing or not a string"}]}),
            );
        };
        let arguments = params.get("arguments").cloned().unwrap_or(Value::Null);
        if !(arguments.is_object() || arguments.is_null()) {
            return invalid(
                "tools/call params.arguments must be an object".into(),
                json!({"tool": name, "violations": [{"param": "arguments", "message": "must be an object"}]}),
            );
        }

        let args = match self.registry.validate_params(name, &arguments) {
            Ok(a) => a,
            Err(ValidationError::NotFound(_)) => {
                return invalid(format!("unknown tool {name:?}"), json!({"tool": name}));
            }
            Err(ValidationError::Invalid { violations, .. }) => {
                return self.violations(id, name, &violations);
            }
        };
        let handler = self.registry.handler(name).expect("validated tools are registered");
        let outcome = catch_unwind(AssertUnwindSafe(|| handler.call(&args)));
        match outcome {
            Ok(Ok(result)) => {
                self.log.info(
                    "tool_call",
                    json!({"id": id.to_value(), "tool": name, "is_error": result.is_error}),
                );
                Message::success(id, tool_result_json(&result))
            }
            Ok(Err(ToolError::InvalidParams(violations))) => self.violations(id, name, &violations),
            Ok(Err(ToolError::RateLimited {
                provider_id,
                retry_after_ms,
            })) => make_error(
                Some(id),
                ErrorCode::RateLimited,
                format!("provider {provider_id:?} is rate limited; retry after {retry_after_ms} ms"),
                Some(json!({"tool": name, "provider_id": provider_id, "retry_after_ms": retry_after_ms})),
            ),
            Ok(Err(ToolError::Internal(detail))) => {
                self.log.error("tool_internal_error", json!({"tool": name, "detail": detail}));
                make_error(Some(id), ErrorCode::Internal, format!("tool {name} failed: {detail}"), None)
            }
            Err(panic) => {
                let detail = panic_message(panic.as_ref());
                self.log.error("tool_panicked", json!({"tool": name, "detail": detail}));
                make_error(
                    Some(id),
                    ErrorCode::Internal,
                    format!("tool {name} crashed"),
                    Some(json!({"tool": name})),
                )
            }
        }
    }

    fn violations(&self, id: Id, tool: &str, violations: &[crate::registry::Violation]) -> Message {
        let listed: Vec<String> = violations.iter().map(ToString::to_string).collect();
        make_error(
            Some(id),
            ErrorCode::InvalidParams,
            format!("invalid arguments for {tool}: {}", listed.join("; ")),
            Some(json!({"tool": tool, "violations": violations_json(violations)})),
        )
    }
}

/// The `tools/call` result body: the JSON payload as text content (plus the
/// one-line summary), and the same payload as structured content.
pub fn tool_result_json(result: &ToolResult) -> Value {
    let mut content = vec![json!({"type": "text", "text": crate::jsonrpc::to_compact_string(&result.content)})];
    if let Some(summary) = &result.human_summary {
        content.push(json!({"type": "text", "text": summary}));
    }
    json!({
        "content": content,
        "structuredContent": result.content,
        "isError": result.is_error,
    })
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_owned()
    }
}

/// Cooperative shutdown: once requested, no new frame is started, and
/// `wait_idle` returns when the frames already started have been answered.
#[derive(Debug, Default)]
pub struct Shutdown {
    state: Mutex<(bool, usize)>,
    idle: Condvar,
}

impl Shutdown {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn request(&self) {
        self.state.lock().unwrap().0 = true;
        self.idle.notify_all();
    }

    pub fn is_requested(&self) -> bool {
        self.state.lock().unwrap().0
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap().1
    }

    /// Blocks until no frame is being processed.
    pub fn wait_idle(&self) {
        let mut state = self.state.lock().unwrap();
        while state.1 > 0 {
            state = self.idle.wait(state).unwrap();
        }
    }

    fn begin(&self) -> bool {
        let mut state = self.state.lock().unwrap();
        if state.0 {
            return false;
        }
        state.1 += 1;
        true
    }

    fn end(&self) {
        let mut state = self.state.lock().unwrap();
        state.1 -= 1;
        if state.1 == 0 {
            self.idle.notify_all();
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// 1 means strictly sequential. Above 1, `tools/call` requests run on a
    /// worker pool of that size and replies may interleave.
    pub concurrency: usize,
    pub shutdown: Arc<Shutdown>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            concurrency: 1,
            shutdown: Shutdown::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("reading input: {0}")]
    Read(#[source] std::io::Error),
    #[error("writing output: {0}")]
    Write(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub frames_in: u64,
    pub frames_out: u64,
}

fn write_frame<W: Write>(writer: &Mutex<W>, bytes: &[u8]) -> Result<(), std::io::Error> {
    let mut w = writer.lock().unwrap();
    w.write_all(bytes)?;
    w.flush()
}

fn is_tools_call(line: &[u8]) -> bool {
    matches!(parse_message(line), Ok(Message::Request(ref r)) if r.method == "tools/call")
}

/// Serves newline-delimited frames from `reader` until EOF or shutdown.
pub fn serve<R, W>(server: Arc<Server>, mut reader: R, writer: W, options: ServeOptions) -> Result<ServeStats, ServeError>
where
    R: BufRead,
    W: Write + Send + 'static,
{
    let writer = Arc::new(Mutex::new(writer));
    let shutdown = options.shutdown.clone();
    let mut stats = ServeStats::default();
    let out_count = Arc::new(Mutex::new(0u64));

    let (tx, workers) = if options.concurrency > 1 {
        let (tx, rx) = crossbeam_channel::unbounded::<Vec<u8>>();
        let handles: Vec<_> = (0..options.concurrency)
            .map(|_| {
                let rx = rx.clone();
                let server = server.clone();
                let writer = writer.clone();
                let shutdown = shutdown.clone();
                let out_count = out_count.clone();
                thread::spawn(move || -> Result<(), std::io::Error> {
                    for line in rx {
                        let reply = server.handle_frame(&line);
                        let written = match reply {
                            Some(bytes) => write_frame(&writer, &bytes).map(|_| *out_count.lock().unwrap() += 1),
                            None => Ok(()),
                        };
                        shutdown.end();
                        written?;
                    }
                    Ok(())
                })
            })
            .collect();
        (Some(tx), handles)
    } else {
        (None, Vec::new())
    };

    let mut line = Vec::new();
    let mut result = Ok(());
    loop {
        line.clear();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                result = Err(ServeError::Read(e));
                break;
            }
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        if !shutdown.begin() {
            break;
        }
        stats.frames_in += 1;
        match &tx {
            Some(tx) if is_tools_call(&line) => {
                tx.send(line.clone()).expect("workers outlive the reader");
            }
            _ => {
                let reply = server.handle_frame(&line);
                let written = match reply {
                    Some(bytes) => write_frame(&writer, &bytes).map(|_| *out_count.lock().unwrap() += 1),
                    None => Ok(()),
                };
                shutdown.end();
                if let Err(e) = written {
                    result = Err(ServeError::Write(e));
                    break;
                }
            }
        }
        if shutdown.is_requested() {
            break;
        }
    }

    drop(tx);
    for handle in workers {
        if let Ok(Err(e)) = handle.join() {
            if result.is_ok() {
                result = Err(ServeError::Write(e));
            }
        }
    }
    stats.frames_out = *out_count.lock().unwrap();
    result.map(|_| stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::registry::{ParamSchema, ParamSpec, ToolDescriptor, ToolHandler, ValidatedArgs};
    use crate::log::LogBuffer;

    fn server_with(registry: Registry) -> (Server, LogBuffer) {
        let clock = Arc::new(ManualClock::at_date("2024-06-01".parse().unwrap()));
        let store = Arc::new(CredentialStore::from_pairs([("alpha", "abc123")]));
        let (log, buf) = Logger::capture(store.clone(), clock);
        (Server::new(registry, store, log), buf)
    }

    fn echo_registry() -> Registry {
        let mut r = Registry::new();
        r.register(
            ToolDescriptor {
                name: "echo".into(),
                description: "Echo text.".into(),
                input_schema: ParamSchema::new().required("text", ParamSpec::string("Text.")),
                output_description: String::new(),
            },
            Arc::new(|a: &ValidatedArgs| {
                let text = a.str("text").unwrap_or_default();
                if text == "boom" {
                    panic!("handler exploded");
                }
                Ok(ToolResult::success(json!({"text": text}), "echoed"))
            }) as Arc<dyn ToolHandler>,
        )
        .unwrap();
        r
    }

    fn call(server: &Server, frame: &str) -> Value {
        let out = server.handle_frame(frame.as_bytes()).expect("reply");
        assert_eq!(out.last(), Some(&b'\n'));
        serde_json::from_slice(&out).unwrap()
    }

    const INIT: &str = r#"{"jsonrpc":"2.0","id":1,"method":"initialize","params":{"protocolVersion":"2024-11-05","clientInfo":{"name":"replay-harness","version":"1"}}}"#;

    #[test]
    fn lifecycle() {
        let (s, logs) = server_with(echo_registry());
        let early = call(&s, r#"{"jsonrpc":"2.0","id":0,"method":"tools/list"}"#);
        assert_eq!(early["error"]["code"], -32600);
        let init = call(&s, INIT);
        assert_eq!(init["result"]["protocolVersion"], PROTOCOL_VERSION);
        assert!(init["result"]["capabilities"]["tools"].is_object());
        assert_eq!(init["result"]["serverInfo"]["name"], "quantmcp");
        assert_eq!(call(&s, INIT)["error"]["code"], -32600);
        assert!(s.handle_frame(br#"{"jsonrpc":"2.0","method":"notifications/initialized"}"#).is_none());
        let list = call(&s, r#"{"jsonrpc":"2.0","id":"x","method":"tools/list"}"#);
        assert_eq!(list["id"], "x");
        assert_eq!(list["result"]["tools"][0]["name"], "echo");
        assert_eq!(call(&s, r#"{"jsonrpc":"2.0","id":3,"method":"prompts/list"}"#)["error"]["code"], -32601);

        let session = logs.lines().into_iter().find(|l| l["event"] == "session_initialized").unwrap();
        assert_eq!(session["client_name"], "replay-harness");
        assert_eq!(s.state().session.unwrap().client_name.as_deref(), Some("replay-harness"));
    }

    #[test]
    fn empty_registry_lists_nothing() {
        let (s, _) = server_with(Registry::new());
        call(&s, INIT);
        assert_eq!(call(&s, r#"{"jsonrpc":"2.0","id":2,"method":"tools/list"}"#)["result"]["tools"], json!([]));
    }

    #[test]
    fn call_paths() {
        let (s, _) = server_with(echo_registry());
        call(&s, INIT);
        let ok = call(&s, r#"{"jsonrpc":"2.0","id":2,"method":"tools/call","params":{"name":"echo","arguments":{"text":"hi"}}}"#);
        assert_eq!(ok["result"]["isError"], false);
        assert_eq!(ok["result"]["structuredContent"]["text"], "hi");
        assert_eq!(ok["result"]["content"][0]["text"], r#"{"text":"hi"}"#);

        let missing = call(&s, r#"{"jsonrpc":"2.0","id":3,"method":"tools/call","params":{"name":"echo","arguments":{}}}"#);
        assert_eq!(missing["error"]["code"], -32602);
        assert_eq!(missing["error"]["data"]["violations"][0]["param"], "text");

        let unknown = call(&s, r#"{"jsonrpc":"2.0","id":4,"method":"tools/call","params":{"name":"nosuch","arguments":{}}}"#);
        assert_eq!(unknown["error"]["code"], -32602);
        assert_eq!(unknown["error"]["data"]["tool"], "nosuch");

        let crashed = call(&s, r#"{"jsonrpc":"2.0","id":5,"method":"tools/call","params":{"name":"echo","arguments":{"text":"boom"}}}"#);
        assert_eq!(crashed["error"]["code"], -32603);
        assert_eq!(crashed["id"], 5);
    }

    #[test]
    fn garbage_gets_parse_error_and_server_survives() {
        let (s, _) = server_with(echo_registry());
        let bad = call(&s, "{not json");
        assert_eq!(bad["error"]["code"], -32700);
        assert!(bad["id"].is_null());
        assert_eq!(call(&s, INIT)["id"], 1);
    }

    #[test]
    fn frames_are_redacted() {
        let (s, logs) = server_with(echo_registry());
        call(&s, INIT);
        let out = s
            .handle_frame(br#"{"jsonrpc":"2.0","id":2,"method":"tools/call","params":{"name":"echo","arguments":{"text":"xabc123y"}}}"#)
            .unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(!text.contains("abc123"));
        assert!(text.contains("***REDACTED***"));
        assert!(!logs.contents().contains("abc123"));
    }

    #[test]
    fn serve_sequential_round_trip() {
        let (s, _) = server_with(echo_registry());
        let input = format!(
            "{INIT}\n\n{{\"jsonrpc\":\"2.0\",\"method\":\"notifications/initialized\"}}\n{{\"jsonrpc\":\"2.0\",\"id\":2,\"method\":\"tools/list\"}}\n"
        );
        let out = LogBuffer::default();
        let stats = serve(Arc::new(s), input.as_bytes(), out.clone(), ServeOptions::default()).unwrap();
        assert_eq!(stats, ServeStats { frames_in: 3, frames_out: 2 });
        let lines: Vec<_> = out.contents().lines().map(str::to_owned).collect();
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn serve_concurrent_correlates_ids() {
        let (s, _) = server_with(echo_registry());
        let mut input = format!("{INIT}\n");
        for i in 0..20 {
            input.push_str(&format!(
                "{{\"jsonrpc\":\"2.0\",\"id\":{},\"method\":\"tools/call\",\"params\":{{\"name\":\"echo\",\"arguments\":{{\"text\":\"t{i}\"}}}}}}\n",
                i + 10
            ));
        }
        let out = LogBuffer::default();
        let options = ServeOptions {
            concurrency: 4,
            ..ServeOptions::default()
        };
        serve(Arc::new(s), input.as_bytes(), out.clone(), options).unwrap();
        let mut seen: Vec<(i64, String)> = out
            .lines()
            .into_iter()
            .filter(|v| v["id"] != 1)
            .map(|v| (v["id"].as_i64().unwrap(), v["result"]["structuredContent"]["text"].as_str().unwrap().to_owned()))
            .collect();
        seen.sort();
        assert_eq!(seen.len(), 20);
        for (id, text) in seen {
            assert_eq!(text, format!("t{}", id - 10));
        }
    }

    #[test]
    fn shutdown_stops_new_frames() {
        let sd = Shutdown::new();
        assert!(sd.begin());
        sd.request();
        assert!(!sd.begin());
        assert_eq!(sd.in_flight(), 1);
        sd.end();
        sd.wait_idle();
    }
}
