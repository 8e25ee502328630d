//! `quantmcp`: run the tool server, call tools directly, record and replay
//! wire transcripts.
//!
//! Exit codes: 0 success, 1 tool-level error, 2 usage or configuration
//! error, 3 runtime or transport error.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use quantmcp_core::clock::{Clock, ManualClock, SystemClock};
use quantmcp_core::config::{Config, ConfigError, Runtime};
use quantmcp_core::jsonrpc::{ErrorCode, Message};
use quantmcp_core::log::{Level, Logger};
use quantmcp_core::server::{serve, ServeOptions, Shutdown, PROTOCOL_VERSION};
use quantmcp_core::transcript::{parse_transcript, record, replay};

const EXIT_TOOL_ERROR: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "quantmcp", version, about = "Financial data tools over the Model Context Protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Server configuration file. Without it a single synthetic provider is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Pin the server clock to midnight UTC of this day (YYYY-MM-DD).
    #[arg(long, global = true, value_name = "DATE")]
    today: Option<NaiveDate>,

    /// Log verbosity on stderr: debug, info, warn or error. Defaults to the
    /// config file's log_level for `serve` and to warn otherwise.
    #[arg(long, global = true, value_name = "LEVEL")]
    log_level: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the protocol on stdin/stdout until stdin closes.
    Serve {
        /// Run up to N tools/call requests in parallel.
        #[arg(long, value_name = "N")]
        concurrent: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Inspect the tool manifest.
    Tools {
        #[command(subcommand)]
        action: ToolsAction,
    },
    /// Initialize an in-process server, run one tools/call, print the result.
    Call {
        tool: String,
        /// Tool arguments as a JSON object.
        params: String,
        #[command(flatten)]
        common: Common,
    },
    /// Replay a transcript and diff the replies.
    Replay {
        transcript: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a file of input messages (one per line) and write a transcript.
    Record {
        inputs: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Subcommand)]
enum ToolsAction {
    /// Print the manifest as JSON.
    List {
        #[command(flatten)]
        common: Common,
    },
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Serve { concurrent, common } => cmd_serve(&common, concurrent),
        Command::Tools {
            action: ToolsAction::List { common },
        } => cmd_tools_list(&common),
        Command::Call { tool, params, common } => cmd_call(&common, &tool, &params),
        Command::Replay { transcript, common } => cmd_replay(&common, &transcript),
        Command::Record { inputs, out, common } => cmd_record(&common, &inputs, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("quantmcp: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn clock(common: &Common) -> Arc<dyn Clock> {
    match common.today {
        Some(day) => Arc::new(ManualClock::at_date(day)),
        None => Arc::new(SystemClock::new()),
    }
}

fn load_config(common: &Common, default_level: Option<Level>) -> Result<Config, Failure> {
    let mut config = match &common.config {
        Some(path) => Config::load(path).map_err(config_failure)?,
        None => Config::synthetic(),
    };
    let level = match common.log_level.as_deref() {
        None => default_level,
        Some("debug") => Some(Level::Debug),
        Some("info") => Some(Level::Info),
        Some("warn") => Some(Level::Warn),
        Some("error") => Some(Level::Error),
        Some(other) => {
            return Err(Failure::usage(anyhow::anyhow!(
                "--log-level {other:?} is not one of debug, info, warn, error"
            )))
        }
    };
    if let Some(level) = level {
        config.log_level = level;
    }
    Ok(config)
}

fn config_failure(e: ConfigError) -> Failure {
    Failure::usage(anyhow::Error::new(e).context("invalid configuration"))
}

fn start(common: &Common, config: &Config) -> Result<Runtime, Failure> {
    let runtime = Runtime::start(config, std::env::vars(), clock(common), Some(Box::new(io::stderr())))
        .map_err(config_failure)?;
    install_panic_hook(runtime.log.clone());
    Ok(runtime)
}

/// Panic messages can carry request data, so they go through the redacting logger.
fn install_panic_hook(log: Logger) {
    std::panic::set_hook(Box::new(move |info| {
        let detail = match info.payload().downcast_ref::<&str>() {
            Some(s) => (*s).to_owned(),
            None => info
                .payload()
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "non-string panic payload".to_owned()),
        };
        let location = info.location().map(|l| format!("{}:{}", l.file(), l.line()));
        log.error("panic", json!({"detail": detail, "location": location}));
    }));
}

fn cmd_serve(common: &Common, concurrent: Option<usize>) -> Result<u8, Failure> {
    let mut config = load_config(common, None)?;
    if let Some(n) = concurrent {
        if n == 0 {
            return Err(Failure::usage(anyhow::anyhow!("--concurrent must be at least 1")));
        }
        config.concurrency = n;
    }
    let runtime = start(common, &config)?;

    let shutdown = Shutdown::new();
    {
        let shutdown = shutdown.clone();
        let log = runtime.log.clone();
        ctrlc::set_handler(move || {
            log.info("shutdown_requested", json!({"in_flight": shutdown.in_flight()}));
            shutdown.request();
            shutdown.wait_idle();
            let _ = io::stdout().flush();
            log.info("shutdown", json!({"reason": "interrupt"}));
            std::process::exit(0);
        })
        .context("installing the interrupt handler")
        .map_err(Failure::runtime)?;
    }

    let options = ServeOptions {
        concurrency: runtime.concurrency,
        shutdown,
    };
    let stdin = io::stdin();
    let stats = serve(runtime.server.clone(), stdin.lock(), io::stdout(), options).map_err(Failure::runtime)?;
    runtime.log.info(
        "shutdown",
        json!({"reason": "eof", "frames_in": stats.frames_in, "frames_out": stats.frames_out}),
    );
    Ok(0)
}

fn initialize(runtime: &Runtime) -> Result<(), Failure> {
    let init = Message::request(
        0,
        "initialize",
        Some(json!({
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {},
            "clientInfo": {"name": "quantmcp-cli", "version": env!("CARGO_PKG_VERSION")},
        })),
    );
    match runtime.server.dispatch(init) {
        Some(Message::Response(r)) if r.result().is_some() => Ok(()),
        other => Err(Failure::runtime(anyhow::anyhow!("initialize failed: {other:?}"))),
    }
}

fn reply_value(runtime: &Runtime, msg: Message) -> Result<Value, Failure> {
    let reply = runtime
        .server
        .dispatch(msg)
        .ok_or_else(|| Failure::runtime(anyhow::anyhow!("server sent no reply")))?;
    serde_json::from_slice(&runtime.server.encode(&reply)).map_err(Failure::runtime)
}

fn print_json(value: &Value) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(Failure::runtime)?;
    writeln!(out).map_err(Failure::runtime)
}

fn cmd_tools_list(common: &Common) -> Result<u8, Failure> {
    let runtime = start(common, &load_config(common, Some(Level::Warn))?)?;
    initialize(&runtime)?;
    let reply = reply_value(&runtime, Message::request(1, "tools/list", None))?;
    print_json(&reply["result"]["tools"])?;
    Ok(0)
}

fn cmd_call(common: &Common, tool: &str, params: &str) -> Result<u8, Failure> {
    let arguments: Value = serde_json::from_str(params)
        .context("params must be a JSON object")
        .map_err(Failure::usage)?;
    if !arguments.is_object() {
        return Err(Failure::usage(anyhow::anyhow!("params must be a JSON object")));
    }
    let runtime = start(common, &load_config(common, Some(Level::Warn))?)?;
    initialize(&runtime)?;
    let reply = reply_value(
        &runtime,
        Message::request(1, "tools/call", Some(json!({"name": tool, "arguments": arguments}))),
    )?;
    if let Some(error) = reply.get("error") {
        let mut err = io::stderr().lock();
        let _ = serde_json::to_writer_pretty(&mut err, error);
        let _ = writeln!(err);
        let code = error.get("code").and_then(Value::as_i64);
        return Ok(if code == Some(ErrorCode::InvalidParams.code()) {
            EXIT_USAGE
        } else {
            EXIT_RUNTIME
        });
    }
    let result = &reply["result"];
    print_json(&result["structuredContent"])?;
    Ok(if result["isError"] == Value::Bool(true) {
        EXIT_TOOL_ERROR
    } else {
        0
    })
}

fn cmd_replay(common: &Common, path: &Path) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading transcript {}", path.display()))
        .map_err(Failure::usage)?;
    let transcript = parse_transcript(&text).map_err(Failure::usage)?;
    let runtime = start(common, &load_config(common, Some(Level::Warn))?)?;
    let report = replay(&runtime.server, &transcript);
    println!("{report}");
    Ok(if report.passed() { 0 } else { EXIT_TOOL_ERROR })
}

fn cmd_record(common: &Common, inputs: &Path, out: Option<&Path>) -> Result<u8, Failure> {
    let file = std::fs::File::open(inputs)
        .with_context(|| format!("reading {}", inputs.display()))
        .map_err(Failure::usage)?;
    let mut messages = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Failure::usage)?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not JSON", inputs.display(), i + 1))
            .map_err(Failure::usage)?;
        messages.push(v);
    }
    let runtime = start(common, &load_config(common, Some(Level::Warn))?)?;
    let transcript = record(&runtime.server, &messages);
    let text = transcript.to_jsonl();
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::runtime)?,
        None => io::stdout().write_all(text.as_bytes()).map_err(Failure::runtime)?,
    }
    Ok(0)
}
