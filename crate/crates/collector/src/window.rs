//! Buffers operation execution records until their trace is complete.
//!
//! A trace is complete while it holds the root execution (eoi 0, ess 0) and
//! its eoi values are exactly `0..=max_eoi` with no duplicates. The rule only
//! looks at the set of records, so arrival order does not matter; but a
//! complete-looking set can still be a prefix of a larger trace. A complete
//! trace therefore leaves the window once it has also been quiet for the
//! settle interval, and records arriving meanwhile join it. Incomplete traces
//! leave after the idle timeout. Records of a trace that already left are
//! counted as stragglers and dropped.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use kestrel_core::records::OperationExecutionRecord;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_SETTLE: Duration = Duration::from_millis(100);
pub const DEFAULT_MAX_OPEN: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Incomplete {
    /// No record arrived for the idle timeout.
    TimedOut,
    /// Pushed out by the open-trace limit.
    Evicted,
    /// Still open when the window was flushed.
    Flushed,
}

/// A trace leaving the window. `incomplete` is `None` when the completeness
/// rule held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedTrace {
    pub trace_id: u64,
    pub records: Vec<OperationExecutionRecord>,
    pub incomplete: Option<Incomplete>,
}

impl WindowedTrace {
    pub fn is_complete(&self) -> bool {
        self.incomplete.is_none()
    }
}

#[derive(Debug)]
struct OpenTrace {
    records: Vec<OperationExecutionRecord>,
    seen: HashSet<u32>,
    max_eoi: u32,
    has_root: bool,
    duplicate: bool,
    last_seen: Instant,
    created: u64,
}

impl OpenTrace {
    fn is_complete(&self) -> bool {
        !self.duplicate && self.has_root && self.seen.len() as u64 == self.max_eoi as u64 + 1
    }
}

#[derive(Debug)]
pub struct TraceWindow {
    idle_timeout: Duration,
    settle: Duration,
    max_open: usize,
    open: HashMap<u64, OpenTrace>,
    by_age: BTreeMap<u64, u64>,
    next_seq: u64,
    emitted: HashSet<u64>,
    emitted_order: VecDeque<u64>,
    stragglers: u64,
}

impl Default for TraceWindow {
    fn default() -> Self {
        Self::new(DEFAULT_IDLE_TIMEOUT, DEFAULT_MAX_OPEN)
    }
}

impl TraceWindow {
    /// Window with the default settle interval, capped at `idle_timeout`.
    pub fn new(idle_timeout: Duration, max_open: usize) -> Self {
        Self::with_settle(idle_timeout, DEFAULT_SETTLE.min(idle_timeout), max_open)
    }

    pub fn with_settle(idle_timeout: Duration, settle: Duration, max_open: usize) -> Self {
        assert!(!idle_timeout.is_zero(), "idle timeout must be positive");
        assert!(settle <= idle_timeout, "settle interval must not exceed the idle timeout");
        assert!(max_open > 0, "max_open must be positive");
        Self {
            idle_timeout,
            settle,
            max_open,
            open: HashMap::new(),
            by_age: BTreeMap::new(),
            next_seq: 0,
            emitted: HashSet::new(),
            emitted_order: VecDeque::new(),
            stragglers: 0,
        }
    }

    pub fn idle_timeout(&self) -> Duration {
        self.idle_timeout
    }

    pub fn settle(&self) -> Duration {
        self.settle
    }

    pub fn open_traces(&self) -> usize {
        self.open.len()
    }

    pub fn buffered_records(&self) -> usize {
        self.open.values().map(|t| t.records.len()).sum()
    }

    /// Whether the buffered records of `trace_id` currently satisfy the
    /// completeness rule.
    pub fn is_complete(&self, trace_id: u64) -> bool {
        self.open.get(&trace_id).is_some_and(OpenTrace::is_complete)
    }

    /// Records dropped because their trace had already left the window.
    pub fn stragglers(&self) -> u64 {
        self.stragglers
    }

    /// Buffers `record`. Returns the oldest open trace when the open-trace
    /// limit forces it out; complete traces leave through [`sweep`](Self::sweep).
    pub fn offer(&mut self, record: OperationExecutionRecord, now: Instant) -> Vec<WindowedTrace> {
        let trace_id = record.trace_id;
        if self.emitted.contains(&trace_id) {
            self.stragglers += 1;
            return Vec::new();
        }
        let mut out = Vec::new();
        if !self.open.contains_key(&trace_id) && self.open.len() >= self.max_open {
            if let Some((_, oldest)) = self.by_age.pop_first() {
                out.extend(self.take(oldest, Incomplete::Evicted));
            }
        }
        let created = self.next_seq;
        let trace = self.open.entry(trace_id).or_insert_with(|| OpenTrace {
            records: Vec::new(),
            seen: HashSet::new(),
            max_eoi: 0,
            has_root: false,
            duplicate: false,
            last_seen: now,
            created,
        });
        if trace.created == created {
            self.by_age.insert(created, trace_id);
            self.next_seq += 1;
        }
        trace.last_seen = now;
        if !trace.seen.insert(record.eoi) {
            trace.duplicate = true;
        }
        trace.max_eoi = trace.max_eoi.max(record.eoi);
        trace.has_root |= record.eoi == 0 && record.ess == 0;
        trace.records.push(record);
        out
    }

    /// Emits complete traces quiet for the settle interval and incomplete
    /// traces quiet for the idle timeout, oldest first.
    pub fn sweep(&mut self, now: Instant) -> Vec<WindowedTrace> {
        let mut due: Vec<(u64, u64)> = self
            .open
            .iter()
            .filter(|(_, t)| {
                let quiet = now.saturating_duration_since(t.last_seen);
                quiet >= self.idle_timeout || (quiet >= self.settle && t.is_complete())
            })
            .map(|(&id, t)| (t.created, id))
            .collect();
        due.sort_unstable();
        due.into_iter()
            .filter_map(|(_, id)| self.take(id, Incomplete::TimedOut))
            .collect()
    }

    /// Emits every open trace, oldest first.
    pub fn flush(&mut self) -> Vec<WindowedTrace> {
        let ids: Vec<u64> = self.by_age.values().copied().collect();
        ids.into_iter()
            .filter_map(|id| self.take(id, Incomplete::Flushed))
            .collect()
    }

    /// Removes a trace; `reason` applies only if it is not complete.
    fn take(&mut self, trace_id: u64, reason: Incomplete) -> Option<WindowedTrace> {
        let trace = self.open.remove(&trace_id)?;
        self.by_age.remove(&trace.created);
        self.emitted.insert(trace_id);
        self.emitted_order.push_back(trace_id);
        // remember enough emitted ids to catch stragglers of recent traces
        while self.emitted_order.len() > 4 * self.max_open {
            if let Some(old) = self.emitted_order.pop_front() {
                self.emitted.remove(&old);
            }
        }
        let incomplete = (!trace.is_complete()).then_some(reason);
        Some(WindowedTrace {
            trace_id,
            records: trace.records,
            incomplete,
        })
    }
}
