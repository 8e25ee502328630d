use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use quantmcp_core::stub::{StubResponse, StubServer};

const Q1: &str = r#"{"codes":["300750.SZ"],"fields":["close","pb_lf","turn"],"start_date":"2024-01-01","end_date":"2024-03-31","options":"PriceAdj=F;Fill=Previous"}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quantmcp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/q1_2024_session.jsonl")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn call_prints_records() {
    let out = run(&["call", "tool_get_historical_data", Q1]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let recs = v["records"].as_array().unwrap();
    assert_eq!(recs.len(), 65);
    assert_eq!(recs[0]["timestamp"], "2024-01-01 15:00:00");
    assert_eq!(v["meta"]["row_count"], 65);
}

#[test]
fn call_summary() {
    let args = format!(r#"{{"query":{Q1},"summarize_fields":["close","turn"]}}"#);
    let out = run(&["call", "tool_compute_summary", &args]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["summaries"][0]["mean"], 148.333538);
    assert_eq!(v["inputs"]["row_count"], 65);
}

#[test]
fn unknown_tool_and_bad_json_are_usage_errors() {
    assert_eq!(run(&["call", "nosuch", "{}"]).status.code(), Some(2));
    assert_eq!(run(&["call", "tool_get_quote", "{not json"]).status.code(), Some(2));
    assert_eq!(run(&["call", "tool_get_quote", "[1]"]).status.code(), Some(2));
    let invalid = run(&["call", "tool_get_quote", r#"{"codes":[],"fields":["close"]}"#]);
    assert_eq!(invalid.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("-32602"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn tool_failures_exit_one() {
    let args = r#"{"records":[],"summarize_fields":["close"]}"#;
    let out = run(&["call", "tool_compute_summary", args]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error_kind"], "empty_input");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[[provider]]\nid = \"x\"\nkind = \"ftp\"\n").unwrap();
    let out = run(&["tools", "list", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("provider[0].kind"), "{err}");

    let missing = run(&["tools", "list", "--config", "/nonexistent/q.toml"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn tools_list_prints_three_tools() {
    let out = run(&["tools", "list"]);
    assert_eq!(out.status.code(), Some(0));
    let tools = stdout_json(&out);
    assert_eq!(tools.as_array().unwrap().len(), 3);
    assert!(tools[0]["inputSchema"]["properties"]["codes"].is_object());
}

#[test]
fn quote_with_pinned_today() {
    let out = run(&["call", "tool_get_quote", r#"{"codes":["300750.SZ"],"fields":["close"]}"#, "--today", "2024-01-06"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["records"][0]["timestamp"], "2024-01-05 15:00:00");
}

#[test]
fn serve_handshake_over_stdio() {
    let mut child = bin()
        .args(["serve", "--log-level", "info"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let input = [
        json!({"jsonrpc":"2.0","id":1,"method":"initialize","params":{"protocolVersion":"2024-11-05","capabilities":{},"clientInfo":{"name":"cli-test","version":"1"}}}),
        json!({"jsonrpc":"2.0","method":"notifications/initialized"}),
        json!({"jsonrpc":"2.0","id":2,"method":"tools/list"}),
        json!({"jsonrpc":"2.0","id":3,"method":"ping"}),
    ];
    {
        let mut stdin = child.stdin.take().unwrap();
        for m in &input {
            writeln!(stdin, "{m}").unwrap();
        }
        writeln!(stdin, "garbage").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let replies: Vec<Value> = out.stdout.split(|b| *b == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect();
    assert_eq!(replies.len(), 4);
    assert_eq!(replies[0]["result"]["serverInfo"]["name"], "quantmcp");
    assert_eq!(replies[1]["result"]["tools"].as_array().unwrap().len(), 3);
    assert_eq!(replies[2]["id"], 3);
    assert_eq!(replies[3]["error"]["code"], -32700);
    let logs = String::from_utf8_lossy(&out.stderr);
    let events: Vec<Value> = logs.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.iter().any(|e| e["event"] == "session_initialized" && e["client_name"] == "cli-test"));
    assert!(events.iter().all(|e| e["ts"].is_string() && e["level"].is_string()));
}

#[test]
fn replay_golden_passes_and_tampered_fails() {
    let ok = run(&["replay", golden().to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("4 frames, 0 failed"));

    let dir = tempfile::tempdir().unwrap();
    let tampered = dir.path().join("t.jsonl");
    let text = std::fs::read_to_string(golden()).unwrap().replace("\"row_count\":65", "\"row_count\":64");
    std::fs::write(&tampered, text).unwrap();
    let bad = run(&["replay", tampered.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));

    let empty = dir.path().join("e.jsonl");
    std::fs::write(&empty, "").unwrap();
    let e = run(&["replay", empty.to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&e.stdout).contains("0 frames"));
}

#[test]
fn record_then_replay_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/q1_2024_session.inputs.jsonl");
    let out = dir.path().join("rec.jsonl");
    let rec = run(&["record", inputs.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(rec.status.code(), Some(0));
    assert_eq!(run(&["replay", out.to_str().unwrap()]).status.code(), Some(0));
}

#[cfg(unix)]
#[test]
fn sigint_finishes_the_in_flight_call() {
    let stub = StubServer::start(|_| {
        StubResponse::ok(r#"{"rows":[{"date":"2024-01-02","close":42}]}"#).delayed(Duration::from_millis(1200))
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("slow.toml");
    std::fs::write(
        &cfg,
        format!(
            "[[provider]]\nid = \"slow\"\nkind = \"http\"\nbase_url_template = \"{}/d?c={{code}}&f={{field}}\"\ntimeout_ms = 5000\n",
            stub.base_url()
        ),
    )
    .unwrap();
    let mut child = bin()
        .args(["serve", "--config", cfg.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"jsonrpc":"2.0","id":1,"method":"initialize","params":{{}}}}"#).unwrap();
    writeln!(
        stdin,
        r#"{{"jsonrpc":"2.0","id":2,"method":"tools/call","params":{{"name":"tool_get_historical_data","arguments":{{"codes":["A"],"fields":["close"],"start_date":"2024-01-02","end_date":"2024-01-02"}}}}}}"#
    )
    .unwrap();
    stdin.flush().unwrap();

    let deadline = Instant::now() + Duration::from_secs(5);
    while stub.requests().is_empty() {
        assert!(Instant::now() < deadline, "call never reached the provider");
        std::thread::sleep(Duration::from_millis(10));
    }
    // SAFETY: plain kill(2) on our own child.
    assert_eq!(unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGINT) }, 0);

    let status = child.wait().unwrap();
    drop(stdin);
    assert_eq!(status.code(), Some(0));
    let replies: Vec<Value> = BufReader::new(child.stdout.take().unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    assert_eq!(replies.len(), 2);
    assert_eq!(replies[1]["id"], 2);
    assert_eq!(replies[1]["result"]["structuredContent"]["records"][0]["close"], 42.0, "{}", replies[1]);
}
