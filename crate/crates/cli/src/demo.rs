//! A three-component sample application and a closed-loop load driver.
//!
//! Every request enters `frontend`, which calls `catalog`, which calls
//! `persistence`, so each request is one trace of exactly three executions
//! at depths 0, 1 and 2.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use kestrel_core::agent::{MonitoringController, TraceContext};

pub const FRONTEND: &str = "frontend.Frontend.handle()";
pub const CATALOG: &str = "catalog.Catalog.lookup()";
pub const PERSISTENCE: &str = "persistence.Store.load()";
pub const RECORDS_PER_REQUEST: u64 = 3;

#[derive(Clone)]
pub struct DemoApp {
    ctl: MonitoringController,
    /// Busy time spent inside each operation, excluding its callees.
    pub service_time: Duration,
}

impl DemoApp {
    pub fn new(ctl: MonitoringController, service_time: Duration) -> Self {
        Self { ctl, service_time }
    }

    /// Serves one request and returns its trace id (0 when monitoring is off).
    pub fn handle(&self, ctx: &mut TraceContext, request: u64) -> u64 {
        let execution = self.ctl.enter(ctx, FRONTEND);
        let trace_id = execution.trace_id().unwrap_or(0);
        self.work();
        let item = self.lookup(ctx, request);
        std::hint::black_box(item);
        self.ctl.exit(ctx, execution);
        trace_id
    }

    fn lookup(&self, ctx: &mut TraceContext, request: u64) -> u64 {
        self.ctl.probe(ctx, CATALOG, |ctx| {
            self.work();
            self.load(ctx, request % 97)
        })
    }

    fn load(&self, ctx: &mut TraceContext, key: u64) -> u64 {
        self.ctl.probe(ctx, PERSISTENCE, |_| {
            self.work();
            key.wrapping_mul(0x9E37_79B9)
        })
    }

    fn work(&self) {
        if self.service_time.is_zero() {
            return;
        }
        let start = Instant::now();
        while start.elapsed() < self.service_time {
            std::hint::spin_loop();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadConfig {
    pub request_count: u64,
    pub concurrency: usize,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            request_count: 6400,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub requests: u64,
    pub trace_ids: HashSet<u64>,
    pub elapsed: Duration,
}

/// Issues `request_count` requests from `concurrency` workers, each with its
/// own trace context, pulling request numbers from a shared counter.
pub fn run_load(app: &DemoApp, config: LoadConfig) -> LoadReport {
    assert!(config.request_count >= 1, "request count must be at least 1");
    let workers = config.concurrency.max(1);
    let next = AtomicU64::new(0);
    let start = Instant::now();
    let per_worker: Vec<(u64, Vec<u64>)> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let next = &next;
                scope.spawn(move || {
                    let mut ctx = TraceContext::new();
                    ctx.set_session_id(format!("worker-{w}"));
                    let mut ids = Vec::new();
                    let mut served = 0;
                    loop {
                        let request = next.fetch_add(1, Ordering::Relaxed);
                        if request >= config.request_count {
                            break;
                        }
                        ids.push(app.handle(&mut ctx, request));
                        served += 1;
                    }
                    (served, ids)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("load worker panicked")).collect()
    });
    let mut trace_ids = HashSet::new();
    let mut requests = 0;
    for (served, ids) in per_worker {
        requests += served;
        trace_ids.extend(ids);
    }
    LoadReport {
        requests,
        trace_ids,
        elapsed: start.elapsed(),
    }
}
