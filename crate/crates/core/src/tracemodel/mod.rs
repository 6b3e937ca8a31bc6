//! Call tree reconstruction and span translation.
//!
//! Operation execution records carry only their position in call order
//! (`eoi`) and the stack depth at entry (`ess`). The parent of execution `i`
//! is the latest earlier execution one level shallower, so a single pass with
//! a stack rebuilds the tree.

mod otlp;
mod spans;

use std::fmt;

use thiserror::Error;

use crate::records::OperationExecutionRecord;

pub use otlp::{
    otlp_json_to_spans, spans_to_otlp_json, traces_to_otlp_json, AnyValue, KeyValue, OtlpSpan,
    Resource, ResourceSpans, Scope, ScopeSpans, TracesData, SCOPE_NAME, SCOPE_VERSION,
};
pub use spans::{span_id, translate_to_spans, Span};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace has no records")]
    Empty,
    #[error("records from more than one trace: {expected} and {found}")]
    MixedTraceIds { expected: u64, found: u64 },
    #[error("malformed trace {trace_id} at eoi {eoi}: {reason}")]
    Malformed {
        trace_id: u64,
        eoi: u32,
        reason: MalformedReason,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedReason {
    MissingEoi,
    DuplicateEoi,
    /// The first execution does not start at depth 0.
    RootNotAtDepthZero,
    /// Depth grew by more than one between consecutive executions.
    DepthJump { previous: u32, found: u32 },
    /// A second depth-0 execution after the root.
    SecondRoot,
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MalformedReason::MissingEoi => f.write_str("eoi missing"),
            MalformedReason::DuplicateEoi => f.write_str("eoi duplicated"),
            MalformedReason::RootNotAtDepthZero => f.write_str("first execution has ess > 0"),
            MalformedReason::DepthJump { previous, found } => {
                write!(f, "ess jumps from {previous} to {found}")
            }
            MalformedReason::SecondRoot => f.write_str("second execution at ess 0"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallTreeNode {
    pub record: OperationExecutionRecord,
    /// Callees in eoi order.
    pub children: Vec<CallTreeNode>,
}

impl CallTreeNode {
    pub fn leaf(record: OperationExecutionRecord) -> Self {
        Self {
            record,
            children: Vec::new(),
        }
    }
}

// Iterative so that very deep call chains do not overflow the stack on drop.
impl Drop for CallTreeNode {
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.children);
        while let Some(mut node) = stack.pop() {
            stack.append(&mut node.children);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub trace_id: u64,
    pub root: CallTreeNode,
    pub record_count: usize,
}

impl Trace {
    /// Nodes in eoi order, each with its parent's eoi.
    pub fn preorder(&self) -> Preorder<'_> {
        Preorder {
            stack: vec![(&self.root, None)],
        }
    }

    /// Parent eoi of every execution, indexed by eoi.
    pub fn parents(&self) -> Vec<Option<u32>> {
        let mut parents = vec![None; self.record_count];
        for (node, parent) in self.preorder() {
            parents[node.record.eoi as usize] = parent;
        }
        parents
    }

    /// The records in eoi order.
    pub fn records(&self) -> Vec<OperationExecutionRecord> {
        self.preorder().map(|(node, _)| node.record.clone()).collect()
    }
}

pub struct Preorder<'a> {
    stack: Vec<(&'a CallTreeNode, Option<u32>)>,
}

impl<'a> Iterator for Preorder<'a> {
    type Item = (&'a CallTreeNode, Option<u32>);

    fn next(&mut self) -> Option<Self::Item> {
        let (node, parent) = self.stack.pop()?;
        let eoi = node.record.eoi;
        self.stack
            .extend(node.children.iter().rev().map(|child| (child, Some(eoi))));
        Some((node, parent))
    }
}

/// Checks the eoi/ess invariants of one trace's records and sorts them by eoi.
pub fn validate_trace_records(
    mut records: Vec<OperationExecutionRecord>,
) -> Result<Vec<OperationExecutionRecord>, TraceError> {
    let first = records.first().ok_or(TraceError::Empty)?;
    let trace_id = first.trace_id;
    if let Some(other) = records.iter().find(|r| r.trace_id != trace_id) {
        return Err(TraceError::MixedTraceIds {
            expected: trace_id,
            found: other.trace_id,
        });
    }
    records.sort_by_key(|r| r.eoi);
    let malformed = |eoi: u32, reason| TraceError::Malformed {
        trace_id,
        eoi,
        reason,
    };
    for (i, record) in records.iter().enumerate() {
        let expected = i as u32;
        if record.eoi != expected {
            return Err(if record.eoi < expected {
                malformed(record.eoi, MalformedReason::DuplicateEoi)
            } else {
                malformed(expected, MalformedReason::MissingEoi)
            });
        }
        if i == 0 {
            if record.ess != 0 {
                return Err(malformed(0, MalformedReason::RootNotAtDepthZero));
            }
            continue;
        }
        let previous = records[i - 1].ess;
        if record.ess > previous + 1 {
            return Err(malformed(
                expected,
                MalformedReason::DepthJump {
                    previous,
                    found: record.ess,
                },
            ));
        }
        if record.ess == 0 {
            return Err(malformed(expected, MalformedReason::SecondRoot));
        }
    }
    Ok(records)
}

/// Rebuilds the call tree of one trace from its records, in any order.
pub fn reconstruct_trace(records: Vec<OperationExecutionRecord>) -> Result<Trace, TraceError> {
    let records = validate_trace_records(records)?;
    let n = records.len();
    let trace_id = records[0].trace_id;

    // parent[i] via the open-execution stack: before pushing i, the stack
    // holds exactly the chain of its ancestors once trimmed to depth ess(i)
    let mut parent = vec![usize::MAX; n];
    let mut stack: Vec<usize> = Vec::new();
    for (i, record) in records.iter().enumerate() {
        stack.truncate(record.ess as usize);
        if let Some(&p) = stack.last() {
            parent[i] = p;
        }
        stack.push(i);
    }

    // children have larger eoi than their parent, so building from the back
    // finishes every subtree before its parent needs it
    let mut pending: Vec<Vec<CallTreeNode>> = vec![Vec::new(); n];
    let mut root = None;
    for (i, record) in records.into_iter().enumerate().rev() {
        let mut children = std::mem::take(&mut pending[i]);
        children.reverse();
        let node = CallTreeNode { record, children };
        match parent[i] {
            usize::MAX => root = Some(node),
            p => pending[p].push(node),
        }
    }
    Ok(Trace {
        trace_id,
        root: root.expect("eoi 0 is always the root"),
        record_count: n,
    })
}
