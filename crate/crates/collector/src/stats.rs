use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Live counters, shared by the acceptor, the readers and the pipeline.
#[derive(Debug, Default)]
pub struct Stats {
    pub(crate) operation_records: AtomicU64,
    pub(crate) metric_records: AtomicU64,
    pub(crate) log_records: AtomicU64,
    pub(crate) traces_completed: AtomicU64,
    pub(crate) traces_timed_out: AtomicU64,
    pub(crate) traces_malformed: AtomicU64,
    pub(crate) records_discarded: AtomicU64,
    pub(crate) stragglers: AtomicU64,
    pub(crate) spans_exported: AtomicU64,
    pub(crate) spans_dropped: AtomicU64,
    pub(crate) documents_exported: AtomicU64,
    pub(crate) export_failures: AtomicU64,
    pub(crate) export_retries: AtomicU64,
    pub(crate) connections_accepted: AtomicU64,
    pub(crate) active_connections: AtomicU64,
    pub(crate) malformed_connections: AtomicU64,
}

pub(crate) fn bump(counter: &AtomicU64, n: u64) {
    counter.fetch_add(n, Ordering::AcqRel);
}

/// Counter values at one instant. Everything except `active_connections`
/// only grows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub operation_records: u64,
    pub metric_records: u64,
    pub log_records: u64,
    /// Traces that met the completeness rule.
    pub traces_completed: u64,
    /// Traces emitted incomplete: idle timeout, eviction or final flush.
    pub traces_timed_out: u64,
    /// Complete traces whose records failed reconstruction.
    pub traces_malformed: u64,
    /// Records of timed-out and malformed traces, which produce no spans.
    pub records_discarded: u64,
    pub stragglers: u64,
    pub spans_exported: u64,
    /// Spans of batches given up after the last export attempt.
    pub spans_dropped: u64,
    pub documents_exported: u64,
    /// Batches given up after the last export attempt.
    pub export_failures: u64,
    pub export_retries: u64,
    pub connections_accepted: u64,
    pub active_connections: u64,
    pub malformed_connections: u64,
}

impl StatsSnapshot {
    pub fn records_received(&self) -> u64 {
        self.operation_records + self.metric_records + self.log_records
    }

    /// Operation records whose fate is decided: exported, dropped or discarded.
    pub fn operation_records_settled(&self) -> u64 {
        self.spans_exported + self.spans_dropped + self.records_discarded + self.stragglers
    }
}

impl Stats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let l = |c: &AtomicU64| c.load(Ordering::Acquire);
        StatsSnapshot {
            operation_records: l(&self.operation_records),
            metric_records: l(&self.metric_records),
            log_records: l(&self.log_records),
            traces_completed: l(&self.traces_completed),
            traces_timed_out: l(&self.traces_timed_out),
            traces_malformed: l(&self.traces_malformed),
            records_discarded: l(&self.records_discarded),
            stragglers: l(&self.stragglers),
            spans_exported: l(&self.spans_exported),
            spans_dropped: l(&self.spans_dropped),
            documents_exported: l(&self.documents_exported),
            export_failures: l(&self.export_failures),
            export_retries: l(&self.export_retries),
            connections_accepted: l(&self.connections_accepted),
            active_connections: l(&self.active_connections),
            malformed_connections: l(&self.malformed_connections),
        }
    }
}
