use std::borrow::Cow;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

/// Per-thread trace state. Never shared between threads.
#[derive(Debug)]
pub struct TraceContext {
    trace_id: u64,
    next_eoi: u32,
    /// eoi values of the currently open executions, innermost last.
    open: Vec<u32>,
    session_id: String,
    rng: SmallRng,
}

impl TraceContext {
    pub fn new() -> Self {
        Self::from_rng(SmallRng::from_rng(&mut rand::rng()))
    }

    /// Context whose trace ids come from a seeded generator.
    pub fn with_seed(seed: u64) -> Self {
        Self::from_rng(SmallRng::seed_from_u64(seed))
    }

    fn from_rng(rng: SmallRng) -> Self {
        Self {
            trace_id: 0,
            next_eoi: 0,
            open: Vec::with_capacity(16),
            session_id: String::new(),
            rng,
        }
    }

    /// Id of the current (or most recent) trace; 0 before the first entry.
    pub fn trace_id(&self) -> u64 {
        self.trace_id
    }

    pub fn next_eoi(&self) -> u32 {
        self.next_eoi
    }

    /// Number of open executions.
    pub fn current_ess(&self) -> u32 {
        self.open.len() as u32
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn set_session_id(&mut self, session_id: impl Into<String>) {
        self.session_id = session_id.into();
    }

    pub(crate) fn open(&mut self) -> (u64, u32, u32) {
        if self.open.is_empty() {
            self.trace_id = loop {
                let id: u64 = self.rng.random();
                if id != 0 {
                    break id;
                }
            };
            self.next_eoi = 0;
        }
        let eoi = self.next_eoi;
        self.next_eoi += 1;
        let ess = self.open.len() as u32;
        self.open.push(eoi);
        (self.trace_id, eoi, ess)
    }

    /// Closes the innermost execution if it is `eoi`. On a nesting violation
    /// the execution is removed wherever it is and `false` is returned.
    pub(crate) fn close(&mut self, trace_id: u64, eoi: u32) -> bool {
        if trace_id == self.trace_id && self.open.last() == Some(&eoi) {
            self.open.pop();
            return true;
        }
        if trace_id == self.trace_id {
            if let Some(pos) = self.open.iter().rposition(|&e| e == eoi) {
                self.open.remove(pos);
            }
        }
        false
    }
}

impl Default for TraceContext {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle for an execution opened by [`MonitoringController::enter`](super::MonitoringController::enter).
#[must_use = "pass the handle to exit() when the operation returns"]
#[derive(Debug)]
pub struct OpenExecution {
    pub(crate) active: Option<ActiveExecution>,
}

#[derive(Debug)]
pub(crate) struct ActiveExecution {
    pub trace_id: u64,
    pub eoi: u32,
    pub ess: u32,
    pub tin: u64,
    pub signature: Cow<'static, str>,
}

impl OpenExecution {
    pub(crate) const INERT: OpenExecution = OpenExecution { active: None };

    /// True when monitoring was off at entry; exiting it does nothing.
    pub fn is_inert(&self) -> bool {
        self.active.is_none()
    }

    pub fn eoi(&self) -> Option<u32> {
        self.active.as_ref().map(|a| a.eoi)
    }

    pub fn ess(&self) -> Option<u32> {
        self.active.as_ref().map(|a| a.ess)
    }

    pub fn trace_id(&self) -> Option<u64> {
        self.active.as_ref().map(|a| a.trace_id)
    }
}
