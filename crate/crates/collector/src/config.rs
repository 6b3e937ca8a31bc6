use std::collections::BTreeMap;
use std::fmt;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::export::{DiscardExporter, Exporter, FileExporter, HttpExporter, RetryPolicy, StdoutExporter};
use crate::window::{DEFAULT_IDLE_TIMEOUT, DEFAULT_MAX_OPEN, DEFAULT_SETTLE};
use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExportMode {
    /// POST to an OTLP/HTTP endpoint, `host:port` or a URL.
    Http(String),
    /// One document per line, appended.
    File(PathBuf),
    Stdout,
    /// Count spans without delivering them.
    Discard,
}

impl ExportMode {
    /// Builds a mode from the `--export` kind and `--export-target` value.
    pub fn from_parts(kind: &str, target: Option<&str>) -> Result<Self, ServiceError> {
        let need = |what: &str| {
            target
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .ok_or_else(|| ServiceError::Config(format!("export mode {kind} needs a {what} target")))
        };
        match kind.to_ascii_lowercase().as_str() {
            "http" | "http_post" => Ok(ExportMode::Http(need("host:port or URL")?)),
            "file" => Ok(ExportMode::File(need("path")?.into())),
            "stdout" => Ok(ExportMode::Stdout),
            "none" | "discard" => Ok(ExportMode::Discard),
            other => Err(ServiceError::Config(format!(
                "unknown export mode {other:?} (expected http, file, stdout or none)"
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExportMode::Http(_) => "http",
            ExportMode::File(_) => "file",
            ExportMode::Stdout => "stdout",
            ExportMode::Discard => "none",
        }
    }

    pub fn target(&self) -> Option<String> {
        match self {
            ExportMode::Http(t) => Some(t.clone()),
            ExportMode::File(p) => Some(p.display().to_string()),
            ExportMode::Stdout | ExportMode::Discard => None,
        }
    }

    pub fn open(&self) -> Result<Box<dyn Exporter>, ServiceError> {
        Ok(match self {
            ExportMode::Http(target) => Box::new(HttpExporter::new(
                HttpExporter::endpoint_url(target),
                Duration::from_secs(10),
            )),
            ExportMode::File(path) => Box::new(FileExporter::create(path)?),
            ExportMode::Stdout => Box::new(StdoutExporter),
            ExportMode::Discard => Box::new(DiscardExporter),
        })
    }
}

impl fmt::Display for ExportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target() {
            Some(t) => write!(f, "{}:{t}", self.kind()),
            None => f.write_str(self.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub export: ExportMode,
    pub idle_timeout: Duration,
    /// Quiet time after which a complete trace leaves the window; capped at
    /// `idle_timeout`.
    pub settle: Duration,
    pub max_open: usize,
    /// Capacity of the ingress queue and of every pipeline edge.
    pub buffer_capacity: usize,
    /// Traces per exported document.
    pub batch_size: usize,
    /// Mixed with each trace id to derive span ids.
    pub id_seed: u64,
    pub resource: BTreeMap<String, String>,
    pub retry: RetryPolicy,
    /// Optional address answering each connection with a JSON stats snapshot.
    pub stats_listen: Option<SocketAddr>,
}

pub const DEFAULT_PORT: u16 = 5678;

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            export: ExportMode::Stdout,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            settle: DEFAULT_SETTLE,
            max_open: DEFAULT_MAX_OPEN,
            buffer_capacity: 4096,
            batch_size: 1,
            id_seed: 0,
            resource: BTreeMap::from([("service.name".to_string(), "kestrel".to_string())]),
            retry: RetryPolicy::default(),
            stats_listen: None,
        }
    }
}

/// Environment variable for each configuration key.
pub const ENV_KEYS: [(&str, &str); 8] = [
    ("KESTREL_LISTEN", "listen"),
    ("KESTREL_EXPORT", "export"),
    ("KESTREL_EXPORT_TARGET", "export.target"),
    ("KESTREL_IDLE_TIMEOUT_MS", "idle.timeout.ms"),
    ("KESTREL_SETTLE_MS", "settle.ms"),
    ("KESTREL_BUFFER_CAPACITY", "buffer.capacity"),
    ("KESTREL_BATCH_SIZE", "batch.size"),
    ("KESTREL_STATS_LISTEN", "stats.listen"),
];

pub fn parse_addr(s: &str) -> Result<SocketAddr, ServiceError> {
    s.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| ServiceError::Config(format!("cannot resolve address {s:?}")))
}

/// Parses `port`, `host:port` or `:port`.
pub fn parse_listen(s: &str) -> Result<SocketAddr, ServiceError> {
    let s = s.trim();
    if let Ok(port) = s.trim_start_matches(':').parse::<u16>() {
        return Ok(SocketAddr::from(([0, 0, 0, 0], port)));
    }
    parse_addr(s)
}

fn parse_positive<T: FromStr + PartialOrd + Default>(key: &str, value: &str) -> Result<T, ServiceError> {
    value
        .trim()
        .parse::<T>()
        .ok()
        .filter(|v| *v > T::default())
        .ok_or_else(|| ServiceError::Config(format!("{key} must be a positive integer, got {value:?}")))
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.listen.port() == 0 {
            return Err(ServiceError::Config("listen port must be in 1..=65535".into()));
        }
        self.validate_pipeline()
    }

    /// Everything except the listen port, for services started on a bound listener.
    pub(crate) fn validate_pipeline(&self) -> Result<(), ServiceError> {
        if self.idle_timeout.is_zero() {
            return Err(ServiceError::Config("idle timeout must be positive".into()));
        }

        for (name, v) in [
            ("max open traces", self.max_open),
            ("buffer capacity", self.buffer_capacity),
            ("batch size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ServiceError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Overrides fields from `key = value` pairs. Unknown keys are an error.
    ///
    /// `export` and `export.target` are combined after all pairs are read.
    pub fn apply<'a>(
        mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, ServiceError> {
        let mut kind = None;
        let mut target = None;
        for (key, value) in pairs {
            let value = value.trim();
            match key.trim() {
                "listen" => self.listen = parse_listen(value)?,
                "export" => kind = Some(value.to_string()),
                "export.target" => target = Some(value.to_string()),
                "idle.timeout.ms" => {
                    self.idle_timeout = Duration::from_millis(parse_positive("idle.timeout.ms", value)?)
                }
                "settle.ms" => {
                    self.settle = Duration::from_millis(value.parse().map_err(|_| {
                        ServiceError::Config(format!("settle.ms must be an integer, got {value:?}"))
                    })?)
                }
                "buffer.capacity" => self.buffer_capacity = parse_positive("buffer.capacity", value)?,
                "batch.size" => self.batch_size = parse_positive("batch.size", value)?,
                "max.open" => self.max_open = parse_positive("max.open", value)?,
                "stats.listen" => self.stats_listen = Some(parse_listen(value)?),
                other => return Err(ServiceError::Config(format!("unknown collector key {other:?}"))),
            }
        }
        if kind.is_some() || target.is_some() {
            let kind = kind.unwrap_or_else(|| self.export.kind().to_string());
            let target = target.or_else(|| self.export.target());
            self.export = ExportMode::from_parts(&kind, target.as_deref())?;
        }
        Ok(self)
    }

    pub fn apply_env(self) -> Result<Self, ServiceError> {
        let vars: Vec<(&str, String)> = ENV_KEYS
            .iter()
            .filter_map(|&(var, key)| std::env::var(var).ok().map(|v| (key, v)))
            .collect();
        self.apply(vars.iter().map(|(k, v)| (*k, v.as_str())))
    }
}
