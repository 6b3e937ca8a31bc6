//! Probe API and collection runtime.
//!
//! Application threads call [`MonitoringController::enter`] and
//! [`MonitoringController::exit`] around operations. Completed executions
//! become [`OperationExecutionRecord`]s that are offered to a bounded queue;
//! a single writer thread takes them off the queue and hands them to a
//! [`RecordSink`], so the application thread never waits for sink I/O.

mod clock;
mod config;
mod context;
mod sampler;
pub mod sink;

use std::borrow::Cow;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, Receiver, SendTimeoutError, Sender, TrySendError};
use thiserror::Error;

use crate::records::{LogEventRecord, MonitoringRecord, OperationExecutionRecord, Severity};

pub use clock::Clock;
pub use config::{AgentConfig, CollectionLevel, Delivery, OverflowPolicy, SinkKind, ENV_KEYS};
pub use context::{OpenExecution, TraceContext};
pub use sampler::{PeriodicSampler, SampleError, SampleFn, SamplerHandle};
pub use sink::{CountingSink, DelaySink, FileSink, MemorySink, RecordSink, TcpSink};

use context::ActiveExecution;
use sampler::Scheduler;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("sink error: {0}")]
    Io(#[from] io::Error),
    #[error("sampler interval must be positive")]
    ZeroInterval,
    #[error("monitoring controller is shut down")]
    ShutDown,
}

/// Point-in-time view of the controller counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ControllerStats {
    /// Records that entered the queue (or the sink, in synchronous mode).
    pub accepted: u64,
    /// Records rejected because the queue was full in DROP mode.
    pub dropped: u64,
    /// Offers refused after shutdown began.
    pub rejected_after_shutdown: u64,
    /// Records the sink accepted.
    pub written: u64,
    /// Records the sink failed to write.
    pub write_errors: u64,
    /// Exits that did not match the innermost open execution.
    pub nesting_violations: u64,
    pub queued: u64,
}

#[derive(Default)]
struct Counters {
    accepted: AtomicU64,
    dropped: AtomicU64,
    rejected: AtomicU64,
    written: AtomicU64,
    write_errors: AtomicU64,
    nesting_violations: AtomicU64,
}

#[derive(Default)]
struct Done {
    finished: Mutex<bool>,
    signal: Condvar,
}

pub(crate) struct Inner {
    pub(crate) enabled: AtomicBool,
    level: AtomicU8,
    policy: OverflowPolicy,
    capacity: usize,
    pub(crate) host_name: String,
    pub(crate) clock: Clock,
    tx: Sender<MonitoringRecord>,
    rx: Receiver<MonitoringRecord>,
    close_tx: Sender<()>,
    sync_sink: Option<Mutex<Box<dyn RecordSink>>>,
    counters: Arc<Counters>,
    closed: AtomicBool,
    abort: Arc<AtomicBool>,
    done: Arc<Done>,
    writer: Mutex<Option<JoinHandle<()>>>,
    scheduler: Mutex<Option<Scheduler>>,
    outcome: Mutex<Option<bool>>,
}

/// Shared handle to one monitoring runtime. Cloning is cheap.
#[derive(Clone)]
pub struct MonitoringController {
    inner: Arc<Inner>,
}

impl MonitoringController {
    /// Opens the configured sink and starts the writer.
    pub fn from_config(config: AgentConfig) -> Result<Self, AgentError> {
        let sink = config.sink.open()?;
        Self::start(config, sink)
    }

    /// Starts a controller writing to `sink`. `config.sink` is ignored.
    pub fn start(config: AgentConfig, sink: impl RecordSink + 'static) -> Result<Self, AgentError> {
        if config.queue_capacity == 0 {
            return Err(AgentError::Config("queue capacity must be positive".into()));
        }
        let (tx, rx) = bounded(config.queue_capacity);
        let (close_tx, close_rx) = bounded(1);
        let counters = Arc::new(Counters::default());
        let abort = Arc::new(AtomicBool::new(false));
        let done = Arc::new(Done::default());

        let sink: Box<dyn RecordSink> = Box::new(sink);
        let (sync_sink, writer_sink) = match config.delivery {
            Delivery::Synchronous => (Some(Mutex::new(sink)), None),
            Delivery::Asynchronous => (None, Some(sink)),
        };

        let writer = match writer_sink {
            Some(sink) => {
                let worker = Writer {
                    rx: rx.clone(),
                    close_rx,
                    sink,
                    counters: Arc::clone(&counters),
                    abort: Arc::clone(&abort),
                    done: Arc::clone(&done),
                };
                Some(
                    thread::Builder::new()
                        .name("kestrel-writer".into())
                        .spawn(move || worker.run())?,
                )
            }
            None => {
                *done.finished.lock().unwrap() = true;
                None
            }
        };

        let inner = Arc::new(Inner {
            enabled: AtomicBool::new(config.enabled),
            level: AtomicU8::new(config.collection_level as u8),
            policy: config.overflow_policy,
            capacity: config.queue_capacity,
            host_name: config.host_name,
            clock: Clock::new(),
            tx,
            rx,
            close_tx,
            sync_sink,
            counters,
            closed: AtomicBool::new(false),
            abort,
            done,
            writer: Mutex::new(writer),
            scheduler: Mutex::new(None),
            outcome: Mutex::new(None),
        });
        Ok(Self { inner })
    }

    pub fn is_enabled(&self) -> bool {
        self.inner.enabled.load(Ordering::Relaxed)
    }

    pub fn set_enabled(&self, enabled: bool) {
        self.inner.enabled.store(enabled, Ordering::Relaxed);
    }

    pub fn collection_level(&self) -> CollectionLevel {
        CollectionLevel::from_u8(self.inner.level.load(Ordering::Relaxed))
    }

    pub fn set_collection_level(&self, level: CollectionLevel) {
        self.inner.level.store(level as u8, Ordering::Relaxed);
    }

    pub fn overflow_policy(&self) -> OverflowPolicy {
        self.inner.policy
    }

    pub fn queue_capacity(&self) -> usize {
        self.inner.capacity
    }

    pub fn host_name(&self) -> &str {
        &self.inner.host_name
    }

    pub fn clock(&self) -> &Clock {
        &self.inner.clock
    }

    /// Opens an execution of `signature` on `ctx`.
    ///
    /// Returns an inert handle, without reading the clock, when monitoring is
    /// disabled or the level is [`CollectionLevel::Deactivated`].
    #[inline]
    pub fn enter(
        &self,
        ctx: &mut TraceContext,
        signature: impl Into<Cow<'static, str>>,
    ) -> OpenExecution {
        let inner = &*self.inner;
        if !inner.enabled.load(Ordering::Relaxed)
            || inner.level.load(Ordering::Relaxed) == CollectionLevel::Deactivated as u8
        {
            return OpenExecution::INERT;
        }
        let (trace_id, eoi, ess) = ctx.open();
        OpenExecution {
            active: Some(ActiveExecution {
                trace_id,
                eoi,
                ess,
                tin: inner.clock.now_nanos(),
                signature: signature.into(),
            }),
        }
    }

    /// Closes an execution. Exits must happen in LIFO order per context;
    /// an out-of-order exit trips a debug assertion, and in release builds
    /// the record is discarded and counted as a nesting violation.
    #[inline]
    pub fn exit(&self, ctx: &mut TraceContext, execution: OpenExecution) {
        let Some(active) = execution.active else {
            return;
        };
        let tout = self.inner.clock.now_nanos();
        if !ctx.close(active.trace_id, active.eoi) {
            self.inner
                .counters
                .nesting_violations
                .fetch_add(1, Ordering::Relaxed);
            debug_assert!(
                false,
                "exit of eoi {} is not the innermost open execution",
                active.eoi
            );
            return;
        }
        let record = OperationExecutionRecord {
            trace_id: active.trace_id,
            eoi: active.eoi,
            ess: active.ess,
            operation_signature: active.signature.into_owned(),
            host_name: self.inner.host_name.clone(),
            tin: active.tin,
            tout,
            session_id: ctx.session_id().to_owned(),
        };
        if self.collection_level() == CollectionLevel::Full {
            self.inner.offer(MonitoringRecord::OperationExecution(record));
        } else {
            std::hint::black_box(record);
        }
    }

    /// Runs `f` inside an execution of `signature`.
    pub fn probe<R>(
        &self,
        ctx: &mut TraceContext,
        signature: impl Into<Cow<'static, str>>,
        f: impl FnOnce(&mut TraceContext) -> R,
    ) -> R {
        let execution = self.enter(ctx, signature);
        let result = f(ctx);
        self.exit(ctx, execution);
        result
    }

    /// Queues a record for the writer. See [`OverflowPolicy`] for full-queue behaviour.
    pub fn offer(&self, record: MonitoringRecord) -> bool {
        self.inner.offer(record)
    }

    /// Emits a log event record, if monitoring is enabled.
    pub fn log(&self, severity: Severity, message: impl Into<String>) -> bool {
        if !self.is_enabled() {
            return false;
        }
        self.inner.offer(MonitoringRecord::LogEvent(LogEventRecord {
            timestamp: self.inner.clock.now_nanos(),
            severity,
            message: message.into(),
            host_name: self.inner.host_name.clone(),
        }))
    }

    pub fn register_sampler(&self, sampler: PeriodicSampler) -> Result<SamplerHandle, AgentError> {
        if sampler.interval.is_zero() {
            return Err(AgentError::ZeroInterval);
        }
        if self.is_shut_down() {
            return Err(AgentError::ShutDown);
        }
        let mut scheduler = self.inner.scheduler.lock().unwrap();
        let scheduler =
            scheduler.get_or_insert_with(|| Scheduler::start(Arc::downgrade(&self.inner)));
        Ok(scheduler.add(sampler))
    }

    pub fn is_shut_down(&self) -> bool {
        self.inner.closed.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> ControllerStats {
        let c = &self.inner.counters;
        ControllerStats {
            accepted: c.accepted.load(Ordering::Acquire),
            dropped: c.dropped.load(Ordering::Acquire),
            rejected_after_shutdown: c.rejected.load(Ordering::Acquire),
            written: c.written.load(Ordering::Acquire),
            write_errors: c.write_errors.load(Ordering::Acquire),
            nesting_violations: c.nesting_violations.load(Ordering::Acquire),
            queued: self.inner.rx.len() as u64,
        }
    }

    pub fn dropped_count(&self) -> u64 {
        self.inner.counters.dropped.load(Ordering::Acquire)
    }

    /// Records still queued; after a timed-out shutdown, the ones abandoned.
    pub fn remaining(&self) -> usize {
        self.inner.rx.len()
    }

    /// Waits until every accepted record has been handed to the sink.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let c = &self.inner.counters;
            let handled = c.written.load(Ordering::Acquire) + c.write_errors.load(Ordering::Acquire);
            if handled >= c.accepted.load(Ordering::Acquire) && self.inner.rx.is_empty() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(200));
        }
    }

    /// Stops samplers, closes the queue to producers and waits up to
    /// `timeout` for the writer to drain it and flush the sink.
    ///
    /// Returns whether the queue fully drained. On timeout the writer is told
    /// to stop after its current record; [`remaining`](Self::remaining)
    /// reports what was left behind. Repeated calls return the first outcome.
    pub fn shutdown(&self, timeout: Duration) -> bool {
        let inner = &*self.inner;
        let mut outcome = inner.outcome.lock().unwrap();
        if let Some(drained) = *outcome {
            return drained;
        }
        let deadline = Instant::now() + timeout;
        inner.closed.store(true, Ordering::Release);
        if let Some(mut scheduler) = inner.scheduler.lock().unwrap().take() {
            scheduler.stop();
        }
        let _ = inner.close_tx.try_send(());

        let finished = {
            let mut finished = inner.done.finished.lock().unwrap();
            while !*finished {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                finished = inner.done.signal.wait_timeout(finished, deadline - now).unwrap().0;
            }
            *finished
        };
        let drained = if finished {
            if let Some(writer) = inner.writer.lock().unwrap().take() {
                let _ = writer.join();
            }
            if let Some(sink) = &inner.sync_sink {
                if let Err(e) = sink.lock().unwrap().flush() {
                    log::warn!("sink flush failed: {e}");
                }
            }
            inner.rx.is_empty()
        } else {
            inner.abort.store(true, Ordering::Release);
            false
        };
        *outcome = Some(drained);
        drained
    }
}

impl Inner {
    pub(crate) fn offer(&self, record: MonitoringRecord) -> bool {
        let c = &self.counters;
        if self.closed.load(Ordering::Acquire) {
            c.rejected.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        if let Some(sink) = &self.sync_sink {
            c.accepted.fetch_add(1, Ordering::Relaxed);
            match sink.lock().unwrap().write(&record) {
                Ok(()) => c.written.fetch_add(1, Ordering::Release),
                Err(_) => c.write_errors.fetch_add(1, Ordering::Release),
            };
            return true;
        }
        let mut record = match self.tx.try_send(record) {
            Ok(()) => {
                c.accepted.fetch_add(1, Ordering::Release);
                return true;
            }
            Err(TrySendError::Full(record)) => record,
            Err(TrySendError::Disconnected(_)) => {
                c.rejected.fetch_add(1, Ordering::Relaxed);
                return false;
            }
        };
        if self.policy == OverflowPolicy::Drop {
            c.dropped.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        loop {
            match self.tx.send_timeout(record, Duration::from_millis(10)) {
                Ok(()) => {
                    c.accepted.fetch_add(1, Ordering::Release);
                    return true;
                }
                Err(SendTimeoutError::Timeout(back)) => {
                    if self.closed.load(Ordering::Acquire) {
                        c.rejected.fetch_add(1, Ordering::Relaxed);
                        return false;
                    }
                    record = back;
                }
                Err(SendTimeoutError::Disconnected(_)) => {
                    c.rejected.fetch_add(1, Ordering::Relaxed);
                    return false;
                }
            }
        }
    }
}

struct Writer {
    rx: Receiver<MonitoringRecord>,
    close_rx: Receiver<()>,
    sink: Box<dyn RecordSink>,
    counters: Arc<Counters>,
    abort: Arc<AtomicBool>,
    done: Arc<Done>,
}

impl Writer {
    const IDLE_FLUSH: Duration = Duration::from_millis(50);

    fn run(mut self) {
        let mut dirty = false;
        loop {
            select! {
                recv(self.rx) -> msg => match msg {
                    Ok(record) => {
                        if self.abort.load(Ordering::Acquire) {
                            break;
                        }
                        self.write(&record);
                        dirty = true;
                        if self.rx.is_empty() {
                            self.flush();
                            dirty = false;
                        }
                    }
                    Err(_) => break,
                },
                recv(self.close_rx) -> _ => {
                    while let Ok(record) = self.rx.try_recv() {
                        if self.abort.load(Ordering::Acquire) {
                            break;
                        }
                        self.write(&record);
                    }
                    break;
                },
                default(Self::IDLE_FLUSH) => {
                    if dirty {
                        self.flush();
                        dirty = false;
                    }
                }
            }
        }
        self.flush();
        *self.done.finished.lock().unwrap() = true;
        self.done.signal.notify_all();
    }

    fn write(&mut self, record: &MonitoringRecord) {
        match self.sink.write(record) {
            Ok(()) => {
                self.counters.written.fetch_add(1, Ordering::Release);
            }
            Err(e) => {
                self.counters.write_errors.fetch_add(1, Ordering::Release);
                log::warn!("sink write failed: {e}");
            }
        }
    }

    fn flush(&mut self) {
        if let Err(e) = self.sink.flush() {
            log::warn!("sink flush failed: {e}");
        }
    }
}
