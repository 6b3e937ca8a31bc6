use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::sink::{CountingSink, FileSink, RecordSink, TcpSink};
use super::AgentError;

/// What a full queue does to a producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    /// Wait for space. Lossless.
    #[default]
    Block,
    /// Reject the record and count it.
    Drop,
}

/// How much of the probe path runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum CollectionLevel {
    /// Probes are present but return inert handles.
    Deactivated,
    /// Timestamps are taken and records built, then discarded.
    CollectOnly,
    /// Records are built and queued for the writer.
    #[default]
    Full,
}

impl CollectionLevel {
    pub(crate) fn from_u8(v: u8) -> Self {
        match v {
            0 => CollectionLevel::Deactivated,
            1 => CollectionLevel::CollectOnly,
            _ => CollectionLevel::Full,
        }
    }
}

/// Where records are handed to the sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delivery {
    /// Through the bounded queue to the writer thread.
    #[default]
    Asynchronous,
    /// Directly on the producing thread. Control configuration for overhead experiments.
    Synchronous,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SinkKind {
    /// Counts and discards; the controller's written counter is the observable.
    #[default]
    Memory,
    File(PathBuf),
    Tcp(String),
}

impl SinkKind {
    pub fn open(&self) -> Result<Box<dyn RecordSink>, AgentError> {
        Ok(match self {
            SinkKind::Memory => Box::new(CountingSink::new()),
            SinkKind::File(path) => Box::new(FileSink::create(path)?),
            SinkKind::Tcp(addr) => Box::new(TcpSink::connect(addr.as_str())?),
        })
    }
}

impl FromStr for SinkKind {
    type Err = AgentError;

    /// `memory`, `file:<path>` or `tcp:<host:port>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "memory" => Ok(SinkKind::Memory),
            Some(("file", path)) if !path.is_empty() => Ok(SinkKind::File(path.into())),
            Some(("tcp", addr)) if !addr.is_empty() => Ok(SinkKind::Tcp(addr.into())),
            _ => Err(AgentError::Config(format!("unknown sink {s:?}"))),
        }
    }
}

impl fmt::Display for SinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SinkKind::Memory => f.write_str("memory"),
            SinkKind::File(path) => write!(f, "file:{}", path.display()),
            SinkKind::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

impl FromStr for OverflowPolicy {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "block" => Ok(OverflowPolicy::Block),
            "drop" => Ok(OverflowPolicy::Drop),
            _ => Err(AgentError::Config(format!("unknown overflow policy {s:?}"))),
        }
    }
}

impl FromStr for CollectionLevel {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "deactivated" => Ok(CollectionLevel::Deactivated),
            "collect" | "collect_only" | "collect-only" => Ok(CollectionLevel::CollectOnly),
            "full" => Ok(CollectionLevel::Full),
            _ => Err(AgentError::Config(format!("unknown collection level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub queue_capacity: usize,
    pub overflow_policy: OverflowPolicy,
    pub collection_level: CollectionLevel,
    pub delivery: Delivery,
    pub sink: SinkKind,
    pub host_name: String,
    pub enabled: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            queue_capacity: Self::DEFAULT_QUEUE_CAPACITY,
            overflow_policy: OverflowPolicy::Block,
            collection_level: CollectionLevel::Full,
            delivery: Delivery::Asynchronous,
            sink: SinkKind::Memory,
            host_name: default_host_name(),
            enabled: true,
        }
    }
}

/// Environment variable for each configuration key.
pub const ENV_KEYS: [(&str, &str); 5] = [
    ("KESTREL_QUEUE_CAPACITY", "queue.capacity"),
    ("KESTREL_OVERFLOW_POLICY", "queue.overflow"),
    ("KESTREL_SINK", "sink"),
    ("KESTREL_COLLECTION_LEVEL", "collection.level"),
    ("KESTREL_HOST_NAME", "host.name"),
];

impl AgentConfig {
    pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;

    /// Overrides fields from `key = value` pairs. Unknown keys are an error.
    pub fn apply<'a>(
        mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, AgentError> {
        for (key, value) in pairs {
            let value = value.trim();
            match key.trim() {
                "queue.capacity" => {
                    self.queue_capacity = value
                        .parse()
                        .ok()
                        .filter(|&c: &usize| c > 0)
                        .ok_or_else(|| {
                            AgentError::Config(format!("queue.capacity must be a positive integer, got {value:?}"))
                        })?;
                }
                "queue.overflow" => self.overflow_policy = value.parse()?,
                "sink" => self.sink = value.parse()?,
                "collection.level" => self.collection_level = value.parse()?,
                "host.name" => self.host_name = value.to_string(),
                other => return Err(AgentError::Config(format!("unknown agent key {other:?}"))),
            }
        }
        Ok(self)
    }

    /// Applies the `KESTREL_*` environment variables that are set.
    pub fn apply_env(self) -> Result<Self, AgentError> {
        let vars: Vec<(&str, String)> = ENV_KEYS
            .iter()
            .filter_map(|&(var, key)| std::env::var(var).ok().map(|v| (key, v)))
            .collect();
        self.apply(vars.iter().map(|(k, v)| (*k, v.as_str())))
    }
}

fn default_host_name() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .filter(|h| !h.is_empty())
        .or_else(|| {
            std::fs::read_to_string("/etc/hostname")
                .ok()
                .map(|h| h.trim().to_string())
                .filter(|h| !h.is_empty())
        })
        .unwrap_or_else(|| "localhost".to_string())
}
