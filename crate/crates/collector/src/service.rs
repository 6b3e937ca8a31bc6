use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use kestrel_core::pipeline::{Pipeline, PipelineError, RunStats, Stage, StageError};
use kestrel_core::records::{MonitoringRecord, OperationExecutionRecord, StreamDecoder};
use kestrel_core::tracemodel::{reconstruct_trace, traces_to_otlp_json, translate_to_spans, Span, Trace};

use crate::config::ServiceConfig;
use crate::export::{Exporter, RetryPolicy};
use crate::stats::{bump, Stats, StatsSnapshot};
use crate::window::{TraceWindow, WindowedTrace};
use crate::ServiceError;

const POLL: Duration = Duration::from_millis(20);

enum Ingress {
    Record(MonitoringRecord),
    Tick(Instant),
}

enum WindowInput {
    Record(OperationExecutionRecord),
    Tick(Instant),
}

/// Span id seed for one trace.
pub fn trace_seed(id_seed: u64, trace_id: u64) -> u64 {
    id_seed ^ trace_id
}

/// A running collector. Dropping it stops it.
pub struct Service {
    local_addr: SocketAddr,
    stats_addr: Option<SocketAddr>,
    stats: Arc<Stats>,
    stop: Arc<AtomicBool>,
    ticker_stop: Option<Sender<()>>,
    acceptor: Option<JoinHandle<()>>,
    ticker: Option<JoinHandle<()>>,
    stats_server: Option<JoinHandle<()>>,
    pipeline: Option<JoinHandle<Result<RunStats, PipelineError>>>,
}

impl Service {
    /// Binds `config.listen` and starts with the configured exporter.
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let exporter = config.export.open()?;
        let listener = TcpListener::bind(config.listen).map_err(|source| ServiceError::Bind {
            addr: config.listen,
            source,
        })?;
        Self::start_on(listener, config, exporter)
    }

    /// Starts on an already bound listener; `config.listen` and
    /// `config.export` are ignored.
    pub fn start_on(
        listener: TcpListener,
        config: ServiceConfig,
        exporter: impl Exporter + 'static,
    ) -> Result<Self, ServiceError> {
        config.validate_pipeline()?;
        let local_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stats_listener = match config.stats_listen {
            Some(addr) => {
                let l = TcpListener::bind(addr).map_err(|source| ServiceError::Bind { addr, source })?;
                l.set_nonblocking(true)?;
                Some(l)
            }
            None => None,
        };
        let stats_addr = stats_listener.as_ref().map(|l| l.local_addr()).transpose()?;

        let stats = Arc::new(Stats::default());
        let stop = Arc::new(AtomicBool::new(false));
        let (ingress_tx, ingress_rx) = bounded::<Ingress>(config.buffer_capacity);

        let mut pipeline = build_pipeline(&config, Arc::clone(&stats), Box::new(exporter))
            .map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        let pipeline = thread::Builder::new()
            .name("collector-pipeline".into())
            .spawn(move || pipeline.run_with(ingress_rx.into_iter(), |()| {}))?;

        let (ticker_stop, ticker_rx) = bounded::<()>(0);
        let tick_every = (config.settle.min(config.idle_timeout / 4).max(Duration::from_millis(1)) / 2)
            .clamp(Duration::from_millis(5), Duration::from_millis(250));
        let tick_tx = ingress_tx.clone();
        let ticker = thread::Builder::new()
            .name("collector-ticker".into())
            .spawn(move || tick(ticker_rx, tick_tx, tick_every))?;

        let acceptor = {
            let stats = Arc::clone(&stats);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("collector-acceptor".into())
                .spawn(move || accept(listener, ingress_tx, stats, stop))?
        };

        let stats_server = match stats_listener {
            Some(l) => {
                let stats = Arc::clone(&stats);
                let stop = Arc::clone(&stop);
                Some(
                    thread::Builder::new()
                        .name("collector-stats".into())
                        .spawn(move || serve_stats(l, stats, stop))?,
                )
            }
            None => None,
        };

        log::info!("collector listening on {local_addr}");
        Ok(Self {
            local_addr,
            stats_addr,
            stats,
            stop,
            ticker_stop: Some(ticker_stop),
            acceptor: Some(acceptor),
            ticker: Some(ticker),
            stats_server,
            pipeline: Some(pipeline),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats_addr(&self) -> Option<SocketAddr> {
        self.stats_addr
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Polls the counters until `done` holds or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, mut done: impl FnMut(&StatsSnapshot) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if done(&self.stats()) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stops accepting, closes connections, flushes the open traces as
    /// incomplete, drains the pipeline and returns the final counters.
    pub fn stop(mut self) -> Result<StatsSnapshot, ServiceError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<StatsSnapshot, ServiceError> {
        let Some(pipeline) = self.pipeline.take() else {
            return Ok(self.stats());
        };
        self.stop.store(true, Ordering::Release);
        drop(self.ticker_stop.take());
        for handle in [self.acceptor.take(), self.ticker.take(), self.stats_server.take()]
            .into_iter()
            .flatten()
        {
            let _ = handle.join();
        }
        let result = pipeline
            .join()
            .map_err(|_| ServiceError::Pipeline("pipeline thread panicked".into()))?;
        let snapshot = self.stats();
        result.map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        log::info!("collector stopped: {snapshot:?}");
        Ok(snapshot)
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("collector shutdown: {e}");
        }
    }
}

/// Reads one stats snapshot from a collector's stats address.
pub fn query_stats(addr: SocketAddr, timeout: Duration) -> io::Result<StatsSnapshot> {
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut body = String::new();
    stream.read_to_string(&mut body)?;
    serde_json::from_str(body.trim()).map_err(|e| io::Error::new(ErrorKind::InvalidData, e))
}

fn tick(stop: Receiver<()>, tx: Sender<Ingress>, every: Duration) {
    loop {
        match stop.recv_timeout(every) {
            Err(RecvTimeoutError::Timeout) => {
                if tx.send(Ingress::Tick(Instant::now())).is_err() {
                    return;
                }
            }
            _ => return,
        }
    }
}

fn accept(listener: TcpListener, tx: Sender<Ingress>, stats: Arc<Stats>, stop: Arc<AtomicBool>) {
    let mut readers: Vec<JoinHandle<()>> = Vec::new();
    let mut next_id = 0u64;
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                bump(&stats.connections_accepted, 1);
                bump(&stats.active_connections, 1);
                next_id += 1;
                let (conn_tx, conn_stats, conn_stop) = (tx.clone(), Arc::clone(&stats), Arc::clone(&stop));
                let spawned = thread::Builder::new()
                    .name(format!("collector-conn-{next_id}"))
                    .spawn(move || {
                        read_connection(stream, peer, &conn_tx, &conn_stats, &conn_stop);
                        conn_stats.active_connections.fetch_sub(1, Ordering::AcqRel);
                    });
                match spawned {
                    Ok(handle) => readers.push(handle),
                    Err(e) => {
                        log::error!("cannot start reader for {peer}: {e}");
                        stats.active_connections.fetch_sub(1, Ordering::AcqRel);
                    }
                }
                readers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for reader in readers {
        let _ = reader.join();
    }
}

fn read_connection(
    mut stream: TcpStream,
    peer: SocketAddr,
    tx: &Sender<Ingress>,
    stats: &Stats,
    stop: &AtomicBool,
) {
    if let Err(e) = stream
        .set_nonblocking(false)
        .and_then(|()| stream.set_read_timeout(Some(POLL)))
    {
        log::warn!("cannot configure connection from {peer}: {e}");
        return;
    }
    let mut decoder = StreamDecoder::with_preamble();
    let mut buf = vec![0u8; 64 * 1024];
    let malformed = |stream: &TcpStream, reason: String| {
        bump(&stats.malformed_connections, 1);
        log::warn!("closing connection from {peer}: {reason}");
        let _ = stream.shutdown(Shutdown::Both);
    };
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => {
                if decoder.pending() > 0 {
                    malformed(&stream, format!(
                        "stream ended inside a frame at byte offset {}",
                        decoder.offset()
                    ));
                }
                return;
            }
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if stop.load(Ordering::Acquire) {
                    return;
                }
                continue;
            }
            Err(e) => {
                log::warn!("read from {peer} failed: {e}");
                return;
            }
        };
        decoder.push(&buf[..n]);
        loop {
            match decoder.next_record() {
                Ok(Some(record)) => {
                    let counter = match &record {
                        MonitoringRecord::OperationExecution(_) => &stats.operation_records,
                        MonitoringRecord::MetricSample(_) => &stats.metric_records,
                        MonitoringRecord::LogEvent(_) => &stats.log_records,
                    };
                    bump(counter, 1);
                    if tx.send(Ingress::Record(record)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    malformed(&stream, format!("{e} at byte offset {}", decoder.offset()));
                    return;
                }
            }
        }
        if stop.load(Ordering::Acquire) {
            return;
        }
    }
}

fn serve_stats(listener: TcpListener, stats: Arc<Stats>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                let body = serde_json::to_string(&stats.snapshot()).expect("stats serialize");
                let _ = stream
                    .set_nonblocking(false)
                    .and_then(|()| stream.write_all(format!("{body}\n").as_bytes()));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("stats accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn build_pipeline(
    config: &ServiceConfig,
    stats: Arc<Stats>,
    exporter: Box<dyn Exporter>,
) -> Result<Pipeline, PipelineError> {
    let select = Stage::new("select", |ingress: Ingress, out: &mut Vec<WindowInput>| {
        match ingress {
            Ingress::Record(MonitoringRecord::OperationExecution(r)) => out.push(WindowInput::Record(r)),
            Ingress::Record(_) => {}
            Ingress::Tick(now) => out.push(WindowInput::Tick(now)),
        }
        Ok::<_, StageError>(())
    });

    let window = {
        let window = Arc::new(Mutex::new(TraceWindow::with_settle(
            config.idle_timeout,
            config.settle.min(config.idle_timeout),
            config.max_open,
        )));
        let (s1, s2) = (Arc::clone(&stats), Arc::clone(&stats));
        let w2 = Arc::clone(&window);
        Stage::new("window", move |input: WindowInput, out: &mut Vec<WindowedTrace>| {
            let mut w = window.lock().unwrap();
            let before = w.stragglers();
            let emitted = match input {
                WindowInput::Record(r) => w.offer(r, Instant::now()),
                WindowInput::Tick(now) => w.sweep(now),
            };
            bump(&s1.stragglers, w.stragglers() - before);
            route(emitted, &s1, out);
            Ok::<_, StageError>(())
        })
        .on_finish(move |out: &mut Vec<WindowedTrace>| {
            let flushed = w2.lock().unwrap().flush();
            route(flushed, &s2, out);
            Ok::<_, StageError>(())
        })
    };

    let reconstruct = {
        let stats = Arc::clone(&stats);
        Stage::new("reconstruct", move |t: WindowedTrace, out: &mut Vec<Trace>| {
            let n = t.records.len() as u64;
            match reconstruct_trace(t.records) {
                Ok(trace) => out.push(trace),
                Err(e) => {
                    log::warn!("dropping malformed trace: {e}");
                    bump(&stats.traces_malformed, 1);
                    bump(&stats.records_discarded, n);
                }
            }
            Ok::<_, StageError>(())
        })
    };

    let id_seed = config.id_seed;
    let translate = Stage::map("translate", move |trace: Trace| {
        translate_to_spans(&trace, trace_seed(id_seed, trace.trace_id))
    });

    let export = {
        let batch_size = config.batch_size;
        let resource = config.resource.clone();
        let retry = config.retry;
        let batch: Arc<Mutex<Vec<Vec<Span>>>> = Arc::default();
        let (b2, s2) = (Arc::clone(&batch), Arc::clone(&stats));
        let exporter = Arc::new(Mutex::new(exporter));
        let e2 = Arc::clone(&exporter);
        let r2 = resource.clone();
        Stage::new("export", move |spans: Vec<Span>, _out: &mut Vec<()>| {
            let mut batch = batch.lock().unwrap();
            batch.push(spans);
            if batch.len() >= batch_size {
                let traces = std::mem::take(&mut *batch);
                send_batch(&mut **exporter.lock().unwrap(), &traces, &resource, retry, &stats);
            }
            Ok::<_, StageError>(())
        })
        .on_finish(move |_out: &mut Vec<()>| {
            let traces = std::mem::take(&mut *b2.lock().unwrap());
            let mut exporter = e2.lock().unwrap();
            if !traces.is_empty() {
                send_batch(&mut **exporter, &traces, &r2, retry, &s2);
            }
            if let Err(e) = exporter.flush() {
                log::error!("exporter flush failed: {e}");
            }
            Ok::<_, StageError>(())
        })
    };

    Pipeline::chain(vec![select, window, reconstruct, translate, export], config.buffer_capacity)
}

fn route(emitted: Vec<WindowedTrace>, stats: &Stats, out: &mut Vec<WindowedTrace>) {
    for t in emitted {
        if t.is_complete() {
            bump(&stats.traces_completed, 1);
            out.push(t);
        } else {
            log::debug!("trace {} left the window incomplete ({:?})", t.trace_id, t.incomplete);
            bump(&stats.traces_timed_out, 1);
            bump(&stats.records_discarded, t.records.len() as u64);
        }
    }
}

fn send_batch(
    exporter: &mut dyn Exporter,
    traces: &[Vec<Span>],
    resource: &BTreeMap<String, String>,
    retry: RetryPolicy,
    stats: &Stats,
) {
    let spans: u64 = traces.iter().map(|t| t.len() as u64).sum();
    let document = traces_to_otlp_json(traces, resource);
    let (failures, error) = retry.run(exporter, &document);
    match error {
        None => {
            bump(&stats.export_retries, failures as u64);
            bump(&stats.documents_exported, 1);
            bump(&stats.spans_exported, spans);
        }
        Some(e) => {
            bump(&stats.export_retries, failures.saturating_sub(1) as u64);
            log::error!("dropping batch of {spans} spans after {failures} attempts: {e}");
            bump(&stats.export_failures, 1);
            bump(&stats.spans_dropped, spans);
        }
    }
}
