//! Record ingest service.
//!
//! Agents stream binary monitoring records over TCP. Every connection gets a
//! reader thread that decodes frames into one shared ingress queue, which
//! feeds a single pipeline:
//!
//! ```text
//! select -> window -> reconstruct -> translate -> export
//! ```
//!
//! Complete traces leave as OTLP/JSON documents. Metric and log records are
//! counted and not forwarded.

mod config;
pub mod export;
mod service;
mod stats;
pub mod window;

use std::io;
use std::net::SocketAddr;

use thiserror::Error;

pub use config::{parse_addr, parse_listen, ExportMode, ServiceConfig, DEFAULT_PORT, ENV_KEYS};
pub use export::{Exporter, MemoryExporter, RetryPolicy};
pub use service::{query_stats, trace_seed, Service};
pub use stats::StatsSnapshot;
pub use window::{Incomplete, TraceWindow, WindowedTrace};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid collector configuration: {0}")]
    Config(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("pipeline failed: {0}")]
    Pipeline(String),
}
