//! OTLP/JSON trace documents.
//!
//! Field order is fixed by the struct declarations, map-valued data goes
//! through sorted maps, and output is compact, so equal inputs always give
//! byte-equal documents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Span;

pub const SCOPE_NAME: &str = "kestrel.transformer";
pub const SCOPE_VERSION: &str = "1";
/// `SPAN_KIND_INTERNAL`
const SPAN_KIND_INTERNAL: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TracesData {
    pub resource_spans: Vec<ResourceSpans>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResourceSpans {
    pub resource: Resource,
    pub scope_spans: Vec<ScopeSpans>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub attributes: Vec<KeyValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeSpans {
    pub scope: Scope,
    pub spans: Vec<OtlpSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OtlpSpan {
    pub trace_id: String,
    pub span_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub parent_span_id: String,
    pub name: String,
    pub kind: u8,
    pub start_time_unix_nano: String,
    pub end_time_unix_nano: String,
    pub attributes: Vec<KeyValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyValue {
    pub key: String,
    pub value: AnyValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnyValue {
    pub string_value: String,
}

fn key_values(map: &BTreeMap<String, String>) -> Vec<KeyValue> {
    map.iter()
        .map(|(k, v)| KeyValue {
            key: k.clone(),
            value: AnyValue {
                string_value: v.clone(),
            },
        })
        .collect()
}

impl From<&Span> for OtlpSpan {
    fn from(span: &Span) -> Self {
        OtlpSpan {
            trace_id: format!("{:032x}", span.trace_id),
            span_id: format!("{:016x}", span.span_id),
            parent_span_id: span
                .parent_span_id
                .map(|p| format!("{p:016x}"))
                .unwrap_or_default(),
            name: span.name.clone(),
            kind: SPAN_KIND_INTERNAL,
            start_time_unix_nano: span.start_unix_nano.to_string(),
            end_time_unix_nano: span.end_unix_nano.to_string(),
            attributes: key_values(&span.attributes),
        }
    }
}

impl TracesData {
    pub fn new<'a>(spans: impl IntoIterator<Item = &'a Span>, resource: &BTreeMap<String, String>) -> Self {
        TracesData {
            resource_spans: vec![ResourceSpans {
                resource: Resource {
                    attributes: key_values(resource),
                },
                scope_spans: vec![ScopeSpans {
                    scope: Scope {
                        name: SCOPE_NAME.to_string(),
                        version: SCOPE_VERSION.to_string(),
                    },
                    spans: spans.into_iter().map(OtlpSpan::from).collect(),
                }],
            }],
        }
    }

    pub fn span_count(&self) -> usize {
        self.resource_spans
            .iter()
            .flat_map(|r| &r.scope_spans)
            .map(|s| s.spans.len())
            .sum()
    }

    pub fn spans(&self) -> impl Iterator<Item = &OtlpSpan> {
        self.resource_spans
            .iter()
            .flat_map(|r| &r.scope_spans)
            .flat_map(|s| &s.spans)
    }
}

/// Renders the spans of one trace as a compact OTLP/JSON document.
pub fn spans_to_otlp_json(spans: &[Span], resource: &BTreeMap<String, String>) -> String {
    serde_json::to_string(&TracesData::new(spans, resource)).expect("OTLP documents always serialize")
}

/// Renders several traces into one document, spans in the given order.
pub fn traces_to_otlp_json(traces: &[Vec<Span>], resource: &BTreeMap<String, String>) -> String {
    serde_json::to_string(&TracesData::new(traces.iter().flatten(), resource))
        .expect("OTLP documents always serialize")
}

fn parse_hex<T>(field: &str, s: &str, digits: usize, parse: fn(&str, u32) -> Result<T, std::num::ParseIntError>) -> Result<T, String> {
    if s.len() != digits {
        return Err(format!("{field} {s:?} is not {digits} hex digits"));
    }
    parse(s, 16).map_err(|e| format!("{field} {s:?}: {e}"))
}

/// Parses a document back into spans. Inverse of [`spans_to_otlp_json`] up to
/// the resource attributes.
pub fn otlp_json_to_spans(json: &str) -> Result<Vec<Span>, String> {
    let data: TracesData = serde_json::from_str(json).map_err(|e| e.to_string())?;
    data.spans()
        .map(|s| {
            Ok(Span {
                trace_id: parse_hex("traceId", &s.trace_id, 32, u128::from_str_radix)?,
                span_id: parse_hex("spanId", &s.span_id, 16, u64::from_str_radix)?,
                parent_span_id: if s.parent_span_id.is_empty() {
                    None
                } else {
                    Some(parse_hex("parentSpanId", &s.parent_span_id, 16, u64::from_str_radix)?)
                },
                name: s.name.clone(),
                start_unix_nano: s.start_time_unix_nano.parse().map_err(|e| format!("startTimeUnixNano: {e}"))?,
                end_unix_nano: s.end_time_unix_nano.parse().map_err(|e| format!("endTimeUnixNano: {e}"))?,
                attributes: s
                    .attributes
                    .iter()
                    .map(|kv| (kv.key.clone(), kv.value.string_value.clone()))
                    .collect(),
            })
        })
        .collect()
}
