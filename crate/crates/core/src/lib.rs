//! A Model Context Protocol server that exposes financial market data tools
//! over newline-delimited JSON-RPC 2.0.

pub mod clock;
pub mod config;
pub mod jsonrpc;
pub mod log;
pub mod normalize;
pub mod providers;
pub mod registry;
pub mod security;
pub mod server;
pub mod stub;
pub mod tools;
pub mod transcript;
