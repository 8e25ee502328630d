mod common;

use std::collections::HashSet;

use serde_json::{json, Value};

use common::{fixture_path, golden_path, q1_args, records, Harness};
use quantmcp_core::config::Config;
use quantmcp_core::log::LogBuffer;
use quantmcp_core::providers::{ProviderConfig, ProviderKind};
use quantmcp_core::server::{serve, ServeOptions, Shutdown};
use quantmcp_core::transcript::{parse_transcript, record, replay, Direction};

fn golden() -> quantmcp_core::transcript::Transcript {
    parse_transcript(&std::fs::read_to_string(golden_path("q1_2024_session.jsonl")).unwrap()).unwrap()
}

#[test]
fn calls_before_initialize_are_rejected() {
    let h = Harness::synthetic("2024-06-01");
    let reply = h.send(json!({"jsonrpc": "2.0", "id": 1, "method": "tools/list"}));
    assert_eq!(reply["error"]["code"], -32600);
    assert_eq!(reply["id"], 1);
    h.initialize();
    let again = h.send(json!({"jsonrpc": "2.0", "id": 2, "method": "tools/list"}));
    assert_eq!(again["result"]["tools"].as_array().unwrap().len(), 3);
}

#[test]
fn second_initialize_is_rejected() {
    let h = Harness::synthetic("2024-06-01");
    assert!(h.initialize()["result"]["protocolVersion"].is_string());
    assert_eq!(h.initialize()["error"]["code"], -32600);
}

#[test]
fn notifications_get_no_reply() {
    let h = Harness::synthetic("2024-06-01");
    h.initialize();
    assert!(h.raw(&json!({"jsonrpc": "2.0", "method": "notifications/initialized"})).is_none());
    assert!(h.raw(&json!({"jsonrpc": "2.0", "method": "no/such/notification"})).is_none());
}

#[test]
fn unknown_method_and_unknown_tool() {
    let h = Harness::synthetic("2024-06-01");
    h.initialize();
    let m = h.send(json!({"jsonrpc": "2.0", "id": "abc", "method": "resources/list"}));
    assert_eq!(m["error"]["code"], -32601);
    assert_eq!(m["id"], "abc");
    let t = h.call(3, "tool_nope", json!({}));
    assert_eq!(t["error"]["code"], -32602);
}

#[test]
fn manifest_schemas_are_closed_and_described() {
    let h = Harness::synthetic("2024-06-01");
    h.initialize();
    let tools = h.send(json!({"jsonrpc": "2.0", "id": 1, "method": "tools/list"}))["result"]["tools"].clone();
    let names: Vec<&str> = tools.as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["tool_get_historical_data", "tool_get_quote", "tool_compute_summary"]);
    for tool in tools.as_array().unwrap() {
        let schema = &tool["inputSchema"];
        assert_eq!(schema["type"], "object");
        assert_eq!(schema["additionalProperties"], false);
        assert!(tool["description"].as_str().unwrap().contains("Returns:"));
        for (name, prop) in schema["properties"].as_object().unwrap() {
            assert!(prop["type"].is_string(), "{name} has no type");
            assert!(!prop["description"].as_str().unwrap_or("").is_empty(), "{name} undocumented");
        }
        for req in schema["required"].as_array().unwrap() {
            assert!(schema["properties"].get(req.as_str().unwrap()).is_some());
        }
    }
}

#[test]
fn concurrent_serve_correlates_every_id() {
    let h = Harness::synthetic("2024-06-01");
    let mut input = String::from(
        r#"{"jsonrpc":"2.0","id":"init","method":"initialize","params":{"clientInfo":{"name":"t","version":"0"}}}"#,
    );
    input.push('\n');
    let days = ["2024-01-02", "2024-01-03", "2024-01-04", "2024-01-05", "2024-01-08"];
    for i in 0..40 {
        let d = days[i % days.len()];
        let args = json!({"codes": [format!("C{}", i % 3)], "fields": ["close"], "start_date": d, "end_date": d});
        input.push_str(
            &json!({"jsonrpc": "2.0", "id": i, "method": "tools/call", "params": {"name": "tool_get_historical_data", "arguments": args}})
                .to_string(),
        );
        input.push('\n');
    }
    let out = LogBuffer::default();
    let options = ServeOptions {
        concurrency: 4,
        shutdown: Shutdown::new(),
    };
    let stats = serve(h.runtime.server.clone(), input.as_bytes(), out.clone(), options).unwrap();
    assert_eq!(stats.frames_in, 41);
    let lines = out.lines();
    assert_eq!(lines.len(), 41);
    let ids: HashSet<String> = lines.iter().map(|l| l["id"].to_string()).collect();
    assert_eq!(ids.len(), 41);
    for l in &lines[1..] {
        // Each reply's records belong to the code its request asked for.
        let Some(i) = l["id"].as_u64() else { continue };
        if let Some(recs) = l["result"]["structuredContent"]["records"].as_array() {
            assert_eq!(recs[0]["code"], format!("C{}", i % 3));
        } else {
            assert_eq!(l["error"]["code"], -32002, "{l}");
        }
    }
}

#[test]
fn golden_replays_cleanly_and_deterministically() {
    let h = Harness::synthetic("2024-06-01");
    let first = replay(h.server(), &golden());
    assert!(first.passed(), "{first}");
    let h = Harness::synthetic("2025-02-11");
    let second = replay(h.server(), &golden());
    assert!(second.passed(), "{second}");
    assert_eq!(first.to_string(), second.to_string());
}

#[test]
fn tampered_golden_fails_on_the_changed_frame() {
    let mut t = golden();
    let summary = t
        .entries
        .iter_mut()
        .filter(|e| e.direction == Direction::Out)
        .last()
        .unwrap();
    let sc = &mut summary.message["result"]["structuredContent"]["summaries"][0]["mean"];
    *sc = json!(sc.as_f64().unwrap() + 0.01);
    let report = replay(Harness::synthetic("2024-06-01").server(), &t);
    assert!(!report.passed());
    assert_eq!(report.failures(), 1);
    let text = report.to_string();
    assert!(text.contains("FAIL"), "{text}");
    assert!(text.contains("mean"), "{text}");
}

#[test]
fn recording_the_inputs_reproduces_the_golden() {
    let inputs: Vec<Value> = std::fs::read_to_string(golden_path("q1_2024_session.inputs.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let recorded = record(Harness::synthetic("2024-06-01").server(), &inputs);
    let report = replay(Harness::synthetic("2024-06-01").server(), &recorded);
    assert!(report.passed());
    assert_eq!(recorded.entries.len(), golden().entries.len());
}

#[test]
fn summary_over_query_matches_summary_over_inline_records() {
    let h = Harness::synthetic("2024-06-01");
    let hist = h.call_handler("tool_get_historical_data", &q1_args());
    let inline = h.call_handler(
        "tool_compute_summary",
        &json!({"records": hist.content["records"], "summarize_fields": ["close", "pb_lf", "turn"]}),
    );
    let via_query = h.call_handler(
        "tool_compute_summary",
        &json!({"query": q1_args(), "summarize_fields": ["close", "pb_lf", "turn"]}),
    );
    assert_eq!(inline.content["summaries"], via_query.content["summaries"]);
}

#[test]
fn csv_quote_for_unknown_code_has_no_data() {
    let mut config = Config::synthetic();
    config.providers = vec![ProviderConfig::new("export", ProviderKind::Csv { path: fixture_path("example_record.csv") })];
    config.default_provider = Some("export".into());
    let h = Harness::start(&config, Vec::new(), "2024-06-01");
    let known = h.call_handler(
        "tool_get_quote",
        &json!({"codes": ["600519.SH"], "fields": ["close"], "as_of": "2024-01-02"}),
    );
    assert_eq!(records(&known.content)[0]["close"], 1685.0);
    let unknown = h.call_handler(
        "tool_get_quote",
        &json!({"codes": ["000001.SZ"], "fields": ["close"], "as_of": "2024-01-02"}),
    );
    assert!(!unknown.is_error);
    assert!(records(&unknown.content).is_empty());
    let summary = unknown.human_summary.unwrap_or_default();
    assert!(summary.contains("no data"), "{summary}");
}
