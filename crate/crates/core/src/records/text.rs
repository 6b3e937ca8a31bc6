//! Semicolon-separated text form of records, one line per record.
//!
//! `OPEXEC;42;0;0;A.a();h;100;200;` holds the kind name, then every field in
//! declaration order. Texts escape `%`, `;` and newline as `%25`, `%3B`, `%0A`.

use thiserror::Error;

use super::{
    LogEventRecord, MetricSampleRecord, MonitoringRecord, OperationExecutionRecord, RecordKind,
    Severity,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextDecodeError {
    #[error("unknown record kind {0:?}")]
    UnknownKind(String),
    #[error("{kind} line has {found} fields, expected {expected}")]
    FieldCount {
        kind: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("field `{field}`: {message}")]
    BadField {
        field: &'static str,
        message: String,
    },
}

pub fn encode_text(record: &MonitoringRecord) -> String {
    let mut fields: Vec<String> = vec![record.kind().text_name().to_string()];
    match record {
        MonitoringRecord::OperationExecution(r) => {
            fields.push(r.trace_id.to_string());
            fields.push(r.eoi.to_string());
            fields.push(r.ess.to_string());
            fields.push(escape(&r.operation_signature));
            fields.push(escape(&r.host_name));
            fields.push(r.tin.to_string());
            fields.push(r.tout.to_string());
            fields.push(escape(&r.session_id));
        }
        MonitoringRecord::MetricSample(r) => {
            fields.push(r.timestamp.to_string());
            fields.push(escape(&r.sampler_name));
            fields.push(escape(&r.metric_name));
            // Debug formatting of f64 is the shortest string that parses back exactly.
            fields.push(format!("{:?}", r.value));
            fields.push(escape(&r.host_name));
        }
        MonitoringRecord::LogEvent(r) => {
            fields.push(r.timestamp.to_string());
            fields.push(r.severity.as_str().to_string());
            fields.push(escape(&r.message));
            fields.push(escape(&r.host_name));
        }
    }
    fields.join(";")
}

pub fn decode_text(line: &str) -> Result<MonitoringRecord, TextDecodeError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let fields: Vec<&str> = line.split(';').collect();
    let kind = match fields[0] {
        "OPEXEC" => RecordKind::OperationExecution,
        "METRIC" => RecordKind::MetricSample,
        "LOG" => RecordKind::LogEvent,
        other => return Err(TextDecodeError::UnknownKind(other.to_string())),
    };
    let expected = match kind {
        RecordKind::OperationExecution => 9,
        RecordKind::MetricSample => 6,
        RecordKind::LogEvent => 5,
    };
    if fields.len() != expected {
        return Err(TextDecodeError::FieldCount {
            kind: kind.text_name(),
            found: fields.len(),
            expected,
        });
    }
    let f = &fields[1..];
    Ok(match kind {
        RecordKind::OperationExecution => {
            let tin = number("tin", f[5])?;
            let tout = number("tout", f[6])?;
            if tout < tin {
                return Err(TextDecodeError::BadField {
                    field: "tout",
                    message: format!("{tout} precedes tin {tin}"),
                });
            }
            MonitoringRecord::OperationExecution(OperationExecutionRecord {
                trace_id: number("trace_id", f[0])?,
                eoi: number("eoi", f[1])?,
                ess: number("ess", f[2])?,
                operation_signature: unescape("operation_signature", f[3])?,
                host_name: unescape("host_name", f[4])?,
                tin,
                tout,
                session_id: unescape("session_id", f[7])?,
            })
        }
        RecordKind::MetricSample => {
            let value: f64 = number("value", f[3])?;
            if !value.is_finite() {
                return Err(TextDecodeError::BadField {
                    field: "value",
                    message: "not finite".into(),
                });
            }
            MonitoringRecord::MetricSample(MetricSampleRecord {
                timestamp: number("timestamp", f[0])?,
                sampler_name: unescape("sampler_name", f[1])?,
                metric_name: unescape("metric_name", f[2])?,
                value,
                host_name: unescape("host_name", f[4])?,
            })
        }
        RecordKind::LogEvent => MonitoringRecord::LogEvent(LogEventRecord {
            timestamp: number("timestamp", f[0])?,
            severity: f[1]
                .parse::<Severity>()
                .map_err(|message| TextDecodeError::BadField {
                    field: "severity",
                    message,
                })?,
            message: unescape("message", f[2])?,
            host_name: unescape("host_name", f[3])?,
        }),
    })
}

fn number<T: std::str::FromStr>(field: &'static str, s: &str) -> Result<T, TextDecodeError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| TextDecodeError::BadField {
        field,
        message: format!("{s:?}: {e}"),
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            ';' => out.push_str("%3B"),
            '\n' => out.push_str("%0A"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(field: &'static str, s: &str) -> Result<String, TextDecodeError> {
    let bad = |message: String| TextDecodeError::BadField { field, message };
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('%') {
        out.push_str(&rest[..pos]);
        let code = rest
            .get(pos + 1..pos + 3)
            .ok_or_else(|| bad("truncated escape".into()))?;
        out.push(match code {
            "25" => '%',
            "3B" => ';',
            "0A" => '\n',
            other => return Err(bad(format!("unknown escape %{other}"))),
        });
        rest = &rest[pos + 3..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::strategy;
    use proptest::prelude::*;

    #[test]
    fn operation_line() {
        let r = MonitoringRecord::OperationExecution(OperationExecutionRecord {
            trace_id: 42,
            eoi: 0,
            ess: 0,
            operation_signature: "A.a()".into(),
            host_name: "h".into(),
            tin: 100,
            tout: 200,
            session_id: String::new(),
        });
        assert_eq!(encode_text(&r), "OPEXEC;42;0;0;A.a();h;100;200;");
    }

    #[test]
    fn semicolon_is_escaped() {
        let r = MonitoringRecord::LogEvent(LogEventRecord {
            timestamp: 5,
            severity: Severity::Error,
            message: "a;b".into(),
            host_name: "h".into(),
        });
        assert_eq!(encode_text(&r), "LOG;5;ERROR;a%3Bb;h");
        assert_eq!(decode_text("LOG;5;ERROR;a%3Bb;h").unwrap(), r);
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(decode_text("NOPE;1"), Err(TextDecodeError::UnknownKind(_))));
        assert!(matches!(
            decode_text("LOG;5;ERROR;x"),
            Err(TextDecodeError::FieldCount { found: 4, .. })
        ));
        assert!(decode_text("LOG;5;LOUD;x;h").is_err());
        assert!(decode_text("LOG;5;INFO;x%4;h").is_err());
        assert!(decode_text("METRIC;1;s;m;NaN;h").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(record in strategy::record()) {
            let line = encode_text(&record);
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(decode_text(&line).unwrap(), record);
        }
    }
}
