//! Monitoring records for the three telemetry kinds: operation executions
//! (traces), metric samples and log events.
//!
//! Records are plain immutable values. [`binary`] holds the length-prefixed
//! wire format used by files and TCP streams, [`text`] the semicolon-separated
//! dump format.

pub mod binary;
pub mod text;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use binary::{
    check_preamble, decode_payload, decode_record, encode_record, encode_record_into, frame_len,
    StreamError, DecodeError, EncodeError, RecordReader,
    RecordWriter, StreamDecoder, FORMAT_VERSION, MAGIC, MAX_PAYLOAD_LEN, PREAMBLE, PREAMBLE_LEN,
};
pub use text::{decode_text, encode_text, TextDecodeError};

/// Largest UTF-8 byte length of any text field.
pub const MAX_TEXT_LEN: usize = u16::MAX as usize;

/// One completed operation execution, the unit of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperationExecutionRecord {
    pub trace_id: u64,
    /// Execution order index: position of this execution within its trace in call order.
    pub eoi: u32,
    /// Execution stack size: call-stack depth at entry.
    pub ess: u32,
    pub operation_signature: String,
    pub host_name: String,
    /// Entry timestamp in nanoseconds since the Unix epoch.
    pub tin: u64,
    /// Exit timestamp in nanoseconds since the Unix epoch.
    pub tout: u64,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSampleRecord {
    pub timestamp: u64,
    pub sampler_name: String,
    pub metric_name: String,
    pub value: f64,
    pub host_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEventRecord {
    pub timestamp: u64,
    pub severity: Severity,
    pub message: String,
    pub host_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Trace,
    Debug,
    Info,
    Warn,
    Error,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::Trace,
        Severity::Debug,
        Severity::Info,
        Severity::Warn,
        Severity::Error,
    ];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(value: u8) -> Option<Self> {
        Self::ALL.get(value as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Trace => "TRACE",
            Severity::Debug => "DEBUG",
            Severity::Info => "INFO",
            Severity::Warn => "WARN",
            Severity::Error => "ERROR",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|sev| sev.as_str() == s)
            .ok_or_else(|| format!("unknown severity {s:?}"))
    }
}

/// Any record that can cross the agent queue or the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum MonitoringRecord {
    OperationExecution(OperationExecutionRecord),
    MetricSample(MetricSampleRecord),
    LogEvent(LogEventRecord),
}

/// Kind of a [`MonitoringRecord`], carrying its 1-byte wire tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    OperationExecution = 1,
    MetricSample = 2,
    LogEvent = 3,
}

impl RecordKind {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(RecordKind::OperationExecution),
            2 => Some(RecordKind::MetricSample),
            3 => Some(RecordKind::LogEvent),
            _ => None,
        }
    }

    /// Name used as the first field of the text format.
    pub fn text_name(self) -> &'static str {
        match self {
            RecordKind::OperationExecution => "OPEXEC",
            RecordKind::MetricSample => "METRIC",
            RecordKind::LogEvent => "LOG",
        }
    }
}

impl MonitoringRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            MonitoringRecord::OperationExecution(_) => RecordKind::OperationExecution,
            MonitoringRecord::MetricSample(_) => RecordKind::MetricSample,
            MonitoringRecord::LogEvent(_) => RecordKind::LogEvent,
        }
    }

    /// Checks the per-type invariants that encoding relies on.
    pub fn validate(&self) -> Result<(), EncodeError> {
        fn text(field: &'static str, value: &str) -> Result<(), EncodeError> {
            if value.len() > MAX_TEXT_LEN {
                return Err(EncodeError::TextTooLong {
                    field,
                    len: value.len(),
                });
            }
            Ok(())
        }
        match self {
            MonitoringRecord::OperationExecution(r) => {
                if r.tout < r.tin {
                    return Err(EncodeError::ExitBeforeEntry {
                        tin: r.tin,
                        tout: r.tout,
                    });
                }
                text("operation_signature", &r.operation_signature)?;
                text("host_name", &r.host_name)?;
                text("session_id", &r.session_id)
            }
            MonitoringRecord::MetricSample(r) => {
                if !r.value.is_finite() {
                    return Err(EncodeError::NonFiniteValue(r.value));
                }
                text("sampler_name", &r.sampler_name)?;
                text("metric_name", &r.metric_name)?;
                text("host_name", &r.host_name)
            }
            MonitoringRecord::LogEvent(r) => {
                text("message", &r.message)?;
                text("host_name", &r.host_name)
            }
        }
    }

    pub fn as_operation(&self) -> Option<&OperationExecutionRecord> {
        match self {
            MonitoringRecord::OperationExecution(r) => Some(r),
            _ => None,
        }
    }
}

impl From<OperationExecutionRecord> for MonitoringRecord {
    fn from(r: OperationExecutionRecord) -> Self {
        MonitoringRecord::OperationExecution(r)
    }
}

impl From<MetricSampleRecord> for MonitoringRecord {
    fn from(r: MetricSampleRecord) -> Self {
        MonitoringRecord::MetricSample(r)
    }
}

impl From<LogEventRecord> for MonitoringRecord {
    fn from(r: LogEventRecord) -> Self {
        MonitoringRecord::LogEvent(r)
    }
}

/// Proptest strategies shared by the unit and integration tests.
#[cfg(any(test, feature = "testing"))]
pub mod strategy {
    use super::*;
    use proptest::prelude::*;

    pub fn text() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            "[a-zA-Z0-9.()_]{1,24}",
            any::<String>().prop_map(|s| s.chars().take(40).collect()),
            Just("a;b%c\nd".to_string()),
        ]
    }

    pub fn severity() -> impl Strategy<Value = Severity> {
        (0u8..5).prop_map(|v| Severity::from_u8(v).unwrap())
    }

    pub fn operation() -> impl Strategy<Value = OperationExecutionRecord> {
        (
            any::<u64>(),
            any::<u32>(),
            any::<u32>(),
            text(),
            text(),
            any::<u64>(),
            any::<u64>(),
            text(),
        )
            .prop_map(|(trace_id, eoi, ess, sig, host, a, b, session)| {
                OperationExecutionRecord {
                    trace_id,
                    eoi,
                    ess,
                    operation_signature: sig,
                    host_name: host,
                    tin: a.min(b),
                    tout: a.max(b),
                    session_id: session,
                }
            })
    }

    pub fn metric() -> impl Strategy<Value = MetricSampleRecord> {
        (any::<u64>(), text(), text(), any::<f64>(), text()).prop_map(
            |(timestamp, sampler_name, metric_name, value, host_name)| MetricSampleRecord {
                timestamp,
                sampler_name,
                metric_name,
                value: if value.is_finite() { value } else { 0.5 },
                host_name,
            },
        )
    }

    pub fn log_event() -> impl Strategy<Value = LogEventRecord> {
        (any::<u64>(), severity(), text(), text()).prop_map(
            |(timestamp, severity, message, host_name)| LogEventRecord {
                timestamp,
                severity,
                message,
                host_name,
            },
        )
    }

    pub fn record() -> impl Strategy<Value = MonitoringRecord> {
        prop_oneof![
            operation().prop_map(MonitoringRecord::from),
            metric().prop_map(MonitoringRecord::from),
            log_event().prop_map(MonitoringRecord::from),
        ]
    }
}
