use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use kestrel_collector::{
    query_stats, trace_seed, ExportMode, MemoryExporter, RetryPolicy, Service, ServiceConfig,
    ServiceError, StatsSnapshot,
};
use kestrel_core::agent::{AgentConfig, MonitoringController, TcpSink, TraceContext};
use kestrel_core::records::{
    LogEventRecord, MetricSampleRecord, MonitoringRecord, OperationExecutionRecord, RecordWriter,
    Severity,
};
use kestrel_core::tracemodel::otlp_json_to_spans;

const WAIT: Duration = Duration::from_secs(10);

fn local() -> TcpListener {
    TcpListener::bind("127.0.0.1:0").unwrap()
}

fn config() -> ServiceConfig {
    ServiceConfig {
        idle_timeout: Duration::from_secs(5),
        ..ServiceConfig::default()
    }
}

fn start(config: ServiceConfig) -> (Service, MemoryExporter) {
    let exporter = MemoryExporter::new();
    let service = Service::start_on(local(), config, exporter.clone()).unwrap();
    (service, exporter)
}

fn send(addr: SocketAddr, records: &[OperationExecutionRecord]) {
    let mut w = RecordWriter::new(TcpStream::connect(addr).unwrap()).unwrap();
    for r in records {
        w.write(&r.clone().into()).unwrap();
    }
    w.flush().unwrap();
}

/// The four-node example trace in the order probes emit it: at exit.
fn four_node_trace_emitted() -> Vec<OperationExecutionRecord> {
    let base = 1_700_000_000_000_000_000u64;
    let sigs = ["Frontend.handle()", "Catalog.lookup()", "Persistence.load()", "Catalog.render()"];
    let shape = [(0, 0, 0, 900), (1, 1, 100, 500), (2, 2, 200, 400), (3, 1, 600, 800)];
    let all: Vec<_> = shape
        .iter()
        .map(|&(eoi, ess, tin, tout)| OperationExecutionRecord {
            trace_id: 42,
            eoi,
            ess,
            operation_signature: sigs[eoi as usize].to_string(),
            host_name: "node-a".into(),
            tin: base + tin,
            tout: base + tout,
            session_id: "sess-1".into(),
        })
        .collect();
    [2, 1, 3, 0].iter().map(|&i| all[i].clone()).collect()
}

fn chain(trace_id: u64, depth: u32) -> Vec<OperationExecutionRecord> {
    (0..depth)
        .rev()
        .map(|eoi| OperationExecutionRecord {
            trace_id,
            eoi,
            ess: eoi,
            operation_signature: format!("Layer{eoi}.call()"),
            host_name: "h".into(),
            tin: 10 + eoi as u64,
            tout: 100 - eoi as u64,
            session_id: String::new(),
        })
        .collect()
}

#[test]
fn fresh_service_counts_nothing() {
    let (service, _) = start(config());
    assert_eq!(service.stats(), StatsSnapshot::default());
    assert_eq!(service.stop().unwrap(), StatsSnapshot::default());
}

#[test]
fn single_trace_yields_the_golden_document() {
    let golden = include_str!("../../core/tests/golden/four_node_trace.json").trim_end();
    let cfg = ServiceConfig {
        id_seed: 0x5EED ^ 42,
        resource: BTreeMap::from([("service.name".to_string(), "demo".to_string())]),
        ..config()
    };
    assert_eq!(trace_seed(cfg.id_seed, 42), 0x5EED);
    let (service, exporter) = start(cfg);
    send(service.local_addr(), &four_node_trace_emitted());
    assert!(service.wait_until(WAIT, |s| s.spans_exported == 4));
    let stats = service.stop().unwrap();
    assert_eq!(stats.operation_records, 4);
    assert_eq!(stats.traces_completed, 1);
    assert_eq!(stats.spans_exported, 4);
    assert_eq!(stats.traces_timed_out, 0);
    let docs = exporter.documents();
    assert_eq!(docs.len(), 1);
    assert_eq!(docs[0], golden);
}

#[test]
fn interleaved_connections_keep_traces_apart() {
    let (service, exporter) = start(config());
    let addr = service.local_addr();
    let a = chain(1001, 5);
    let b = chain(2002, 3);
    let mut wa = RecordWriter::new(TcpStream::connect(addr).unwrap()).unwrap();
    let mut wb = RecordWriter::new(TcpStream::connect(addr).unwrap()).unwrap();
    for i in 0..5 {
        wa.write(&a[i].clone().into()).unwrap();
        wa.flush().unwrap();
        if let Some(r) = b.get(i) {
            wb.write(&r.clone().into()).unwrap();
            wb.flush().unwrap();
        }
    }
    assert!(service.wait_until(WAIT, |s| s.spans_exported == 8));
    service.stop().unwrap();
    let mut per_trace: HashMap<u128, usize> = HashMap::new();
    let docs = exporter.documents();
    assert_eq!(docs.len(), 2);
    for doc in &docs {
        let spans = otlp_json_to_spans(doc).unwrap();
        assert!(spans.windows(2).all(|w| w[0].trace_id == w[1].trace_id));
        *per_trace.entry(spans[0].trace_id).or_default() += spans.len();
    }
    assert_eq!(per_trace, HashMap::from([(1001, 5), (2002, 3)]));
}

#[test]
fn garbage_connection_is_isolated() {
    let (service, exporter) = start(config());
    let addr = service.local_addr();

    let mut healthy = RecordWriter::new(TcpStream::connect(addr).unwrap()).unwrap();
    let records = chain(7, 3);
    healthy.write(&records[0].clone().into()).unwrap();
    healthy.flush().unwrap();

    let mut bad = TcpStream::connect(addr).unwrap();
    bad.write_all(&kestrel_core::records::PREAMBLE).unwrap();
    bad.write_all(&[0, 0, 0, 5, 0x7F, 1, 2, 3, 4]).unwrap();
    bad.flush().unwrap();
    // the service closes the connection
    let mut sink = Vec::new();
    bad.set_read_timeout(Some(WAIT)).unwrap();
    assert_eq!(bad.read_to_end(&mut sink).unwrap_or(0), 0);
    assert!(service.wait_until(WAIT, |s| s.malformed_connections == 1));

    for r in &records[1..] {
        healthy.write(&r.clone().into()).unwrap();
    }
    healthy.flush().unwrap();
    send(addr, &chain(8, 2));
    assert!(service.wait_until(WAIT, |s| s.spans_exported == 5));
    let stats = service.stop().unwrap();
    assert_eq!(stats.malformed_connections, 1);
    assert_eq!(stats.traces_completed, 2);
    assert_eq!(stats.connections_accepted, 3);
    assert_eq!(exporter.len(), 2);
}

#[test]
fn bad_preamble_is_malformed() {
    let (service, _) = start(config());
    let mut s = TcpStream::connect(service.local_addr()).unwrap();
    s.write_all(b"HTTP/1.1 GET /\r\n").unwrap();
    assert!(service.wait_until(WAIT, |s| s.malformed_connections == 1));
    drop(s);
    service.stop().unwrap();
}

#[test]
fn incomplete_trace_times_out_without_spans() {
    let (service, exporter) = start(ServiceConfig {
        idle_timeout: Duration::from_millis(100),
        settle: Duration::from_millis(20),
        ..config()
    });
    let recs = chain(5, 3);
    // eoi 2 and 0 only
    send(service.local_addr(), &[recs[0].clone(), recs[2].clone()]);
    assert!(service.wait_until(WAIT, |s| s.traces_timed_out == 1));
    let stats = service.stop().unwrap();
    assert_eq!(stats.records_discarded, 2);
    assert_eq!(stats.spans_exported, 0);
    assert!(exporter.is_empty());
}

#[test]
fn stop_flushes_open_traces_as_incomplete() {
    let (service, _) = start(config());
    send(service.local_addr(), &chain(9, 4)[..2]);
    assert!(service.wait_until(WAIT, |s| s.operation_records == 2));
    let stats = service.stop().unwrap();
    assert_eq!(stats.traces_timed_out, 1);
    assert_eq!(stats.records_discarded, 2);
    assert_eq!(stats.operation_records, stats.operation_records_settled());
}

#[test]
fn metric_and_log_records_are_counted_only() {
    let (service, exporter) = start(config());
    let mut w = RecordWriter::new(TcpStream::connect(service.local_addr()).unwrap()).unwrap();
    w.write(&MonitoringRecord::MetricSample(MetricSampleRecord {
        timestamp: 1,
        sampler_name: "cpu".into(),
        metric_name: "load".into(),
        value: 0.5,
        host_name: "h".into(),
    }))
    .unwrap();
    for _ in 0..2 {
        w.write(&MonitoringRecord::LogEvent(LogEventRecord {
            timestamp: 2,
            severity: Severity::Warn,
            message: "m".into(),
            host_name: "h".into(),
        }))
        .unwrap();
    }
    w.flush().unwrap();
    assert!(service.wait_until(WAIT, |s| s.records_received() == 3));
    let stats = service.stop().unwrap();
    assert_eq!((stats.metric_records, stats.log_records, stats.operation_records), (1, 2, 0));
    assert!(exporter.is_empty());
}

#[test]
fn agent_stream_end_to_end_conserves_spans() {
    let (service, exporter) = start(ServiceConfig {
        batch_size: 4,
        ..config()
    });
    let ctl = MonitoringController::start(
        AgentConfig::default(),
        TcpSink::connect(service.local_addr()).unwrap(),
    )
    .unwrap();
    let mut ctx = TraceContext::new();
    for _ in 0..50 {
        ctl.probe(&mut ctx, "Front.serve()", |ctx| {
            ctl.probe(ctx, "Mid.work()", |ctx| ctl.probe(ctx, "Back.load()", |_| ()));
            ctl.probe(ctx, "Mid.render()", |_| ());
        });
    }
    assert!(ctl.shutdown(WAIT));
    // the last two traces wait in a partial batch until stop
    assert!(service.wait_until(WAIT, |s| s.traces_completed == 50 && s.spans_exported == 192));
    let stats = service.stop().unwrap();
    assert_eq!(stats.spans_exported, 200);
    assert_eq!(stats.documents_exported, 13);
    assert_eq!(stats.operation_records, stats.operation_records_settled());
    let total: usize = exporter
        .documents()
        .iter()
        .map(|d| otlp_json_to_spans(d).unwrap().len())
        .sum();
    assert_eq!(total, 200);
}

#[test]
fn stats_listener_serves_snapshots() {
    let (service, _) = start(ServiceConfig {
        stats_listen: Some("127.0.0.1:0".parse().unwrap()),
        ..config()
    });
    send(service.local_addr(), &chain(3, 1));
    assert!(service.wait_until(WAIT, |s| s.spans_exported == 1));
    let remote = query_stats(service.stats_addr().unwrap(), WAIT).unwrap();
    assert_eq!(remote.traces_completed, 1);
    assert_eq!(remote.spans_exported, 1);
    service.stop().unwrap();
}

#[test]
fn bound_port_is_reported() {
    let taken = local();
    let err = Service::start(ServiceConfig {
        listen: taken.local_addr().unwrap(),
        export: ExportMode::Discard,
        ..config()
    })
    .err()
    .unwrap();
    assert!(matches!(err, ServiceError::Bind { .. }), "{err}");
}

#[test]
fn file_export_writes_one_line_per_document() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    let listener = local();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let service = Service::start(ServiceConfig {
        listen: addr,
        export: ExportMode::File(path.clone()),
        ..config()
    })
    .unwrap();
    send(addr, &chain(1, 2));
    send(addr, &chain(2, 3));
    assert!(service.wait_until(WAIT, |s| s.spans_exported == 5));
    service.stop().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
}

struct Request {
    path: String,
    content_type: String,
    body: String,
}

/// Minimal HTTP/1.1 server answering every request with `status`.
fn http_server(status: u16) -> (SocketAddr, Arc<Mutex<Vec<Request>>>) {
    let listener = local();
    let addr = listener.local_addr().unwrap();
    let seen: Arc<Mutex<Vec<Request>>> = Arc::default();
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                continue;
            }
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            let mut content_type = String::new();
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "content-type" => content_type = v.trim().to_string(),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Request {
                path,
                content_type,
                body: String::from_utf8(body).unwrap(),
            });
            let mut out = stream;
            let _ = write!(out, "HTTP/1.1 {status} X\r\ncontent-length: 0\r\nconnection: close\r\n\r\n");
        }
    });
    (addr, seen)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(5),
    }
}

#[test]
fn http_export_posts_json_to_traces_path() {
    let (http, seen) = http_server(200);
    let service = Service::start_on(
        local(),
        config(),
        kestrel_collector::export::HttpExporter::new(
            kestrel_collector::export::HttpExporter::endpoint_url(&http.to_string()),
            WAIT,
        ),
    )
    .unwrap();
    send(service.local_addr(), &chain(77, 3));
    assert!(service.wait_until(WAIT, |s| s.spans_exported == 3));
    service.stop().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/traces");
    assert_eq!(seen[0].content_type, "application/json");
    assert_eq!(otlp_json_to_spans(&seen[0].body).unwrap().len(), 3);
}

#[test]
fn failing_http_export_retries_then_drops() {
    let (http, seen) = http_server(500);
    let service = Service::start_on(
        local(),
        ServiceConfig {
            retry: fast_retry(),
            ..config()
        },
        kestrel_collector::export::HttpExporter::new(
            kestrel_collector::export::HttpExporter::endpoint_url(&http.to_string()),
            WAIT,
        ),
    )
    .unwrap();
    send(service.local_addr(), &chain(78, 4));
    assert!(service.wait_until(WAIT, |s| s.export_failures == 1));
    let stats = service.stop().unwrap();
    assert_eq!(stats.spans_dropped, 4);
    assert_eq!(stats.spans_exported, 0);
    assert_eq!(stats.operation_records, stats.operation_records_settled());
    assert_eq!(seen.lock().unwrap().len(), 3);
}
