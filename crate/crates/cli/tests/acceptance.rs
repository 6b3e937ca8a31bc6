//! End-to-end acceptance checks with pinned tolerances.
//!
//! Runs without the libtest harness so that every check prints exactly one
//! `PASS` or `FAIL` line even when output capture is on. Checks run one after
//! another; the timing checks would disturb each other if run in parallel.
//! The process exits nonzero if any check fails.
//!
//! `cargo test -p kestrel-cli --test acceptance` runs them all. Pass check
//! names as arguments to run a subset.

use std::collections::{BTreeMap, HashMap};
use std::net::{TcpListener, TcpStream};
use std::process::Command;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use kestrel_collector::{trace_seed, MemoryExporter, Service, ServiceConfig, TraceWindow};
use kestrel_core::agent::{CountingSink, DelaySink, Delivery, MemorySink};
use kestrel_core::bench::{
    decompose, report, run_workload_with_sink, BenchmarkConfig, BenchmarkResult, Level,
};
use kestrel_core::pipeline::{Pipeline, PipelineError, Stage, StageError};
use kestrel_core::records::{
    decode_record, decode_text, encode_record, encode_text, strategy, LogEventRecord,
    MonitoringRecord, OperationExecutionRecord, RecordKind, RecordWriter, Severity,
};
use kestrel_core::tracemodel::{
    otlp_json_to_spans, reconstruct_trace, spans_to_otlp_json, translate_to_spans, CallTreeNode,
};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config as ProptestConfig, RngAlgorithm, TestRng, TestRunner};
use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

/// Folds a wall-clock bound into an outcome.
fn within(outcome: Outcome, started: Instant, bound: Duration) -> Outcome {
    let elapsed = started.elapsed();
    let in_time = elapsed <= bound;
    Outcome::new(
        outcome.pass && in_time,
        format!(
            "{}; {:.2}s (bound {}s)",
            outcome.detail,
            elapsed.as_secs_f64(),
            bound.as_secs()
        ),
    )
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("serialization_round_trip", serialization_round_trip),
        ("reconstruction_from_any_arrival_order", reconstruction_from_any_arrival_order),
        ("collector_conserves_spans", collector_conserves_spans),
        ("writer_decouples_slow_sink", writer_decouples_slow_sink),
        ("decomposition_identity_and_record_law", decomposition_identity_and_record_law),
        ("overhead_levels_are_ordered", overhead_levels_are_ordered),
        ("demo_load_is_fully_traced", demo_load_is_fully_traced),
        ("pipeline_matches_sequential_oracle", pipeline_matches_sequential_oracle),
    ];
    // libtest-style flags such as --nocapture are accepted and ignored
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(panic) => {
                let message = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::fail(format!("panicked: {message}"))
            }
        };
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {}", outcome.detail);
        if !outcome.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// serialization

const ROUND_TRIP_RECORDS: usize = 10_000;

fn serialization_round_trip() -> Outcome {
    let started = Instant::now();
    let mut runner = TestRunner::new_with_rng(
        ProptestConfig::default(),
        TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]),
    );
    let records: Vec<MonitoringRecord> = (0..ROUND_TRIP_RECORDS)
        .map(|_| strategy::record().new_tree(&mut runner).unwrap().current())
        .collect();

    let mut kinds: HashMap<RecordKind, usize> = HashMap::new();
    let mut binary_mismatches = 0;
    let mut text_mismatches = 0;
    for record in &records {
        *kinds.entry(record.kind()).or_default() += 1;
        let bytes = encode_record(record).unwrap();
        match decode_record(&bytes) {
            Ok((decoded, used)) if decoded == *record && used == bytes.len() => {}
            _ => binary_mismatches += 1,
        }
        if decode_text(&encode_text(record)).as_ref() != Ok(record) {
            text_mismatches += 1;
        }
    }

    // the same records as one framed stream with preamble
    let mut writer = RecordWriter::new(Vec::new()).unwrap();
    for record in &records {
        writer.write(record).unwrap();
    }
    let stream = writer.into_inner();
    let reread: Vec<MonitoringRecord> = kestrel_core::records::RecordReader::new(&stream[..])
        .collect::<Result<_, _>>()
        .unwrap();
    let stream_ok = reread == records;

    let golden_log = MonitoringRecord::LogEvent(LogEventRecord {
        timestamp: 0,
        severity: Severity::Info,
        message: String::new(),
        host_name: String::new(),
    });
    let golden_bytes = [0, 0, 0, 0x0E, 0x03, 0, 0, 0, 0, 0, 0, 0, 0, 0x02, 0, 0, 0, 0];
    let golden_ok = encode_record(&golden_log).unwrap() == golden_bytes;

    let all_kinds = kinds.len() == 3;
    let pass = all_kinds && binary_mismatches == 0 && text_mismatches == 0 && stream_ok && golden_ok;
    within(
        Outcome::new(
            pass,
            format!(
                "{ROUND_TRIP_RECORDS} records (opexec {}, metric {}, log {}); binary mismatches {binary_mismatches}, \
                 text mismatches {text_mismatches}, stream {stream_ok}, golden log bytes {golden_ok}",
                kinds.get(&RecordKind::OperationExecution).unwrap_or(&0),
                kinds.get(&RecordKind::MetricSample).unwrap_or(&0),
                kinds.get(&RecordKind::LogEvent).unwrap_or(&0),
            ),
        ),
        started,
        Duration::from_secs(10),
    )
}

// ---------------------------------------------------------------------------
// reconstruction

/// A call tree shape with nodes in preorder; `parent[i] < i`.
struct Shape {
    parent: Vec<Option<usize>>,
}

impl Shape {
    /// Up to `max_nodes` nodes and at most `max_depth` levels.
    fn random(rng: &mut SmallRng, max_nodes: usize, max_depth: usize) -> Shape {
        let n = rng.random_range(1..=max_nodes);
        // grow by attaching to random nodes, then renumber in preorder
        let mut children: Vec<Vec<usize>> = vec![Vec::new()];
        let mut depth = vec![1usize];
        for id in 1..n {
            let candidates: Vec<usize> = (0..id).filter(|&p| depth[p] < max_depth).collect();
            let p = candidates[rng.random_range(0..candidates.len())];
            children[p].push(id);
            children.push(Vec::new());
            depth.push(depth[p] + 1);
        }
        let mut parent = Vec::with_capacity(n);
        let mut stack = vec![(0usize, None)];
        while let Some((node, p)) = stack.pop() {
            let me = parent.len();
            parent.push(p);
            stack.extend(children[node].iter().rev().map(|&c| (c, Some(me))));
        }
        Shape { parent }
    }

    fn depth(&self, i: usize) -> u32 {
        let mut d = 0;
        let mut at = i;
        while let Some(p) = self.parent[at] {
            d += 1;
            at = p;
        }
        d
    }

    fn last_descendant(&self, i: usize) -> usize {
        // preorder: the subtree of i is a contiguous run after i
        let mut last = i;
        for j in i + 1..self.parent.len() {
            if self.is_ancestor(i, j) {
                last = j;
            } else {
                break;
            }
        }
        last
    }

    fn is_ancestor(&self, a: usize, mut j: usize) -> bool {
        while let Some(p) = self.parent[j] {
            if p == a {
                return true;
            }
            j = p;
        }
        false
    }

    /// Records with nested timestamps, in eoi order.
    fn records(&self, trace_id: u64, base: u64) -> Vec<OperationExecutionRecord> {
        (0..self.parent.len())
            .map(|i| {
                let ess = self.depth(i);
                OperationExecutionRecord {
                    trace_id,
                    eoi: i as u32,
                    ess,
                    operation_signature: format!("svc.Component{}.op{}()", ess, i % 7),
                    host_name: "node-a".into(),
                    tin: base + 10 * i as u64,
                    tout: base + 10 * (self.last_descendant(i) as u64 + 1) - ess as u64,
                    session_id: format!("s{trace_id}"),
                }
            })
            .collect()
    }
}

fn parents_of(root: &CallTreeNode) -> Vec<Option<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![(root, None)];
    while let Some((node, parent)) = stack.pop() {
        let me = out.len();
        if node.record.eoi as usize != me {
            // preorder position disagrees with eoi
            return Vec::new();
        }
        out.push(parent);
        stack.extend(node.children.iter().rev().map(|c| (c, Some(me))));
    }
    out
}

fn reconstruction_from_any_arrival_order() -> Outcome {
    let started = Instant::now();
    let mut rng = SmallRng::seed_from_u64(0xACCE);
    let trees = 1000;
    let settle = Duration::from_millis(100);
    let mut direct_failures = 0;
    let mut window_failures = 0;
    let mut max_nodes = 0;
    let mut max_depth = 0;
    for t in 0..trees {
        let shape = Shape::random(&mut rng, 200, 8);
        max_nodes = max_nodes.max(shape.parent.len());
        max_depth = max_depth.max((0..shape.parent.len()).map(|i| shape.depth(i) + 1).max().unwrap());
        let records = shape.records(t as u64 + 1, 1_000_000);
        let mut arrival = records.clone();
        arrival.shuffle(&mut rng);

        match reconstruct_trace(arrival.clone()) {
            Ok(trace) if parents_of(&trace.root) == shape.parent && trace.records() == records => {}
            _ => direct_failures += 1,
        }

        // same permutation through the collector window, one record per
        // millisecond of virtual time with a sweep after every offer
        let mut window = TraceWindow::with_settle(Duration::from_secs(5), settle, 16);
        let t0 = Instant::now();
        let mut emitted = Vec::new();
        for (k, record) in arrival.into_iter().enumerate() {
            let now = t0 + Duration::from_micros(100 * k as u64);
            emitted.extend(window.offer(record, now));
            emitted.extend(window.sweep(now));
        }
        let last = t0 + Duration::from_micros(100 * records.len() as u64);
        emitted.extend(window.sweep(last + settle));
        let ok = emitted.len() == 1
            && emitted[0].incomplete.is_none()
            && window.open_traces() == 0
            && match reconstruct_trace(emitted.pop().unwrap().records) {
                Ok(trace) => parents_of(&trace.root) == shape.parent && trace.records() == records,
                Err(_) => false,
            };
        if !ok {
            window_failures += 1;
        }
    }
    within(
        Outcome::new(
            direct_failures == 0 && window_failures == 0 && max_depth <= 8 && max_nodes <= 200,
            format!(
                "{trees} random trees (largest {max_nodes} nodes, deepest {max_depth} levels); \
                 direct failures {direct_failures}, windowed failures {window_failures}"
            ),
        ),
        started,
        Duration::from_secs(30),
    )
}

// ---------------------------------------------------------------------------
// collector conservation

const CONSERVATION_TRACES: u64 = 2_500;

/// Four-node ess sequences; index 0 is the golden example.
const FOUR_NODE_SHAPES: [[Option<usize>; 4]; 4] = [
    [None, Some(0), Some(1), Some(0)],
    [None, Some(0), Some(1), Some(2)],
    [None, Some(0), Some(0), Some(0)],
    [None, Some(0), Some(0), Some(2)],
];

/// The golden four-node trace, byte for byte the data behind the stored
/// document.
fn golden_trace() -> Vec<OperationExecutionRecord> {
    let base = 1_700_000_000_000_000_000u64;
    let sigs = ["Frontend.handle()", "Catalog.lookup()", "Persistence.load()", "Catalog.render()"];
    let shape = [(0, 0, 0, 900), (1, 1, 100, 500), (2, 2, 200, 400), (3, 1, 600, 800)];
    shape
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
        .collect()
}

fn collector_conserves_spans() -> Outcome {
    let started = Instant::now();
    let golden = include_str!("../../core/tests/golden/four_node_trace.json").trim_end();
    let resource = BTreeMap::from([("service.name".to_string(), "demo".to_string())]);
    let id_seed = 0x5EED ^ 42;

    let mut traces: Vec<Vec<OperationExecutionRecord>> = vec![golden_trace()];
    for t in 1..CONSERVATION_TRACES {
        let shape = Shape {
            parent: FOUR_NODE_SHAPES[(t % 4) as usize].to_vec(),
        };
        traces.push(shape.records(1_000 + t, 1_700_000_000_000_000_000 + t * 10_000));
    }
    let records_sent: usize = traces.iter().map(Vec::len).sum();

    // the document every trace must produce, keyed by trace id
    let expected: HashMap<u64, String> = traces
        .iter()
        .map(|recs| {
            let trace = reconstruct_trace(recs.clone()).unwrap();
            let spans = translate_to_spans(&trace, trace_seed(id_seed, trace.trace_id));
            (trace.trace_id, spans_to_otlp_json(&spans, &resource))
        })
        .collect();

    let config = ServiceConfig {
        idle_timeout: Duration::from_secs(5),
        id_seed,
        resource: resource.clone(),
        ..ServiceConfig::default()
    };
    let exporter = MemoryExporter::new();
    let service = Service::start_on(
        TcpListener::bind("127.0.0.1:0").unwrap(),
        config,
        exporter.clone(),
    )
    .unwrap();
    let addr = service.local_addr();

    // four connections, each streaming its share of traces in exit order
    let connections = 4;
    thread::scope(|scope| {
        for c in 0..connections {
            let traces = &traces;
            scope.spawn(move || {
                let mut writer = RecordWriter::new(TcpStream::connect(addr).unwrap()).unwrap();
                for recs in traces.iter().skip(c).step_by(connections) {
                    let mut emitted = recs.clone();
                    emitted.sort_by_key(|r| r.tout);
                    for r in emitted {
                        writer.write(&r.into()).unwrap();
                    }
                }
                writer.flush().unwrap();
            });
        }
    });
    let done = service.wait_until(Duration::from_secs(25), |s| {
        s.spans_exported == records_sent as u64
    });
    let stats = service.stop().unwrap();
    let docs = exporter.documents();

    let mut spans_in_docs = 0;
    let mut mismatched = 0;
    let mut golden_ok = false;
    let mut seen = HashMap::new();
    for doc in &docs {
        let spans = match otlp_json_to_spans(doc) {
            Ok(spans) => spans,
            Err(_) => {
                mismatched += 1;
                continue;
            }
        };
        spans_in_docs += spans.len();
        let trace_id = spans.first().map_or(0, |s| s.trace_id as u64);
        *seen.entry(trace_id).or_insert(0) += 1;
        if expected.get(&trace_id) != Some(doc) {
            mismatched += 1;
        }
        if trace_id == 42 {
            golden_ok = doc == golden;
        }
    }
    let duplicates = seen.values().filter(|&&n| n > 1).count();
    let pass = done
        && spans_in_docs == records_sent
        && docs.len() as u64 == CONSERVATION_TRACES
        && seen.len() as u64 == CONSERVATION_TRACES
        && duplicates == 0
        && mismatched == 0
        && golden_ok
        && stats.operation_records == stats.operation_records_settled()
        && stats.traces_timed_out == 0;
    within(
        Outcome::new(
            pass,
            format!(
                "sent {records_sent} records in {CONSERVATION_TRACES} traces; exported {spans_in_docs} spans in {} \
                 documents; mismatched documents {mismatched}, duplicates {duplicates}, golden trace {golden_ok}, \
                 timed out {}",
                docs.len(),
                stats.traces_timed_out
            ),
        ),
        started,
        Duration::from_secs(30),
    )
}

// ---------------------------------------------------------------------------
// asynchronous writer

const DECOUPLING_DEPTH: u32 = 5;
const DECOUPLING_MEASURED: u64 = 100_000;
const DECOUPLING_WARMUP: u64 = 1_000;
const SLOW_SINK_DELAY: Duration = Duration::from_micros(100);

fn decoupling_config(warmup: u64, measured: u64) -> BenchmarkConfig {
    let mut config = BenchmarkConfig {
        recursion_depth: DECOUPLING_DEPTH,
        drain_timeout: Duration::from_secs(3),
        ..BenchmarkConfig::new(Level::Full).with_iterations(warmup, measured)
    };
    // room for every record so the slow sink never pushes back
    config.agent.queue_capacity = 600_000;
    config
}

fn writer_decouples_slow_sink() -> Outcome {
    let started = Instant::now();
    let config = decoupling_config(DECOUPLING_WARMUP, DECOUPLING_MEASURED);
    let fast = run_workload_with_sink(&config, CountingSink::new()).unwrap();
    let slow = run_workload_with_sink(
        &config,
        DelaySink::new(CountingSink::new(), SLOW_SINK_DELAY),
    )
    .unwrap();

    let mut sync_config = decoupling_config(100, 2_000);
    sync_config.agent.delivery = Delivery::Synchronous;
    let sync = run_workload_with_sink(
        &sync_config,
        DelaySink::new(CountingSink::new(), SLOW_SINK_DELAY),
    )
    .unwrap();

    let fast_ns = fast.summary.mean_ns();
    let slow_ns = slow.summary.mean_ns();
    let sync_ns = sync.summary.mean_ns();
    let expected_records = DECOUPLING_MEASURED * DECOUPLING_DEPTH as u64;
    let pass = slow_ns <= 2.0 * fast_ns
        && sync_ns > 10.0 * fast_ns
        && slow.records_produced == expected_records
        && fast.records_produced == expected_records;
    within(
        Outcome::new(
            pass,
            format!(
                "mean per iteration: instant sink {fast_ns:.1}ns, 100us sink {slow_ns:.1}ns (bound {:.1}ns), \
                 synchronous 100us sink {sync_ns:.1}ns (must exceed {:.1}ns); queued {} of {expected_records}",
                2.0 * fast_ns,
                10.0 * fast_ns,
                slow.records_produced
            ),
        ),
        started,
        Duration::from_secs(120),
    )
}

// ---------------------------------------------------------------------------
// decomposition

fn decomposition_identity_and_record_law() -> Outcome {
    let started = Instant::now();
    let results: Vec<BenchmarkResult> = Level::ALL
        .into_iter()
        .map(|level| {
            let config = BenchmarkConfig::new(level).with_iterations(1_000, 10_000);
            run_workload_with_sink(&config, CountingSink::new()).unwrap()
        })
        .collect();
    let d = decompose(&results).unwrap();
    let means: Vec<i64> = results.iter().map(|r| r.summary.mean_ps).collect();
    let identity = d.delta_instrumentation_ps + d.delta_collection_ps + d.delta_writing_ps
        == d.total_overhead_ps
        && d.total_overhead_ps == means[3] - means[0];

    // the printed deltas add up to the printed total as well
    let printed = report(Some(&d), &results).csv;
    let deltas: HashMap<&str, f64> = printed
        .lines()
        .filter_map(|l| l.split_once(','))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k, v)))
        .collect();
    let printed_ok = ["instrumentation", "collection", "writing", "total"]
        .iter()
        .all(|k| deltas.contains_key(k))
        && ((deltas["instrumentation"] + deltas["collection"] + deltas["writing"]) - deltas["total"]).abs()
            < 5e-4;

    let mut counts = Vec::new();
    for level in [Level::Full, Level::Deactivated, Level::CollectOnly] {
        let sink = MemorySink::new();
        let config = BenchmarkConfig {
            recursion_depth: 10,
            ..BenchmarkConfig::new(level).with_iterations(0, 100)
        };
        run_workload_with_sink(&config, sink.clone()).unwrap();
        counts.push(sink.len());
    }
    let law = counts == [1000, 0, 0];
    within(
        Outcome::new(
            identity && printed_ok && law,
            format!(
                "deltas {}+{}+{} = {} ps (identity {identity}, printed {printed_ok}); sink records full {}, \
                 deactivated {}, collect {} (expected 1000, 0, 0)",
                d.delta_instrumentation_ps,
                d.delta_collection_ps,
                d.delta_writing_ps,
                d.total_overhead_ps,
                counts[0],
                counts[1],
                counts[2]
            ),
        ),
        started,
        Duration::from_secs(10),
    )
}

// ---------------------------------------------------------------------------
// ordering

fn overhead_levels_are_ordered() -> Outcome {
    let started = Instant::now();
    let medians: Vec<f64> = Level::ALL
        .into_iter()
        .map(|level| {
            let config = BenchmarkConfig::new(level).with_iterations(20_000, 100_000);
            run_workload_with_sink(&config, CountingSink::new())
                .unwrap()
                .summary
                .median_ns
        })
        .collect();
    let band = 0.05 * medians[3];
    let ordered = medians.windows(2).all(|w| w[0] <= w[1] + band);
    within(
        Outcome::new(
            ordered,
            format!(
                "median ns baseline {:.0} <= deactivated {:.0} <= collect {:.0} <= full {:.0}, each within {band:.0}ns",
                medians[0], medians[1], medians[2], medians[3]
            ),
        ),
        started,
        Duration::from_secs(180),
    )
}

// ---------------------------------------------------------------------------
// demo

const DEMO_REQUESTS: u64 = 6_400;

fn demo_load_is_fully_traced() -> Outcome {
    let started = Instant::now();
    let output = match Command::new(env!("CARGO_BIN_EXE_kestrel"))
        .args(["demo", "--requests", &DEMO_REQUESTS.to_string()])
        .output()
    {
        Ok(output) => output,
        Err(e) => return Outcome::fail(format!("could not run the demo: {e}")),
    };
    let stdout = String::from_utf8_lossy(&output.stdout);
    let field = |key: &str| -> Option<u64> {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(key)?.strip_prefix(": ")?.trim().parse().ok())
    };
    let completed = field("traces completed");
    let spans = field("spans exported");
    let distinct = field("distinct trace ids");
    let pass = output.status.success()
        && completed == Some(DEMO_REQUESTS)
        && distinct == Some(DEMO_REQUESTS)
        && spans == Some(3 * DEMO_REQUESTS);
    within(
        Outcome::new(
            pass,
            format!(
                "{DEMO_REQUESTS} requests: exit {:?}, distinct ids {distinct:?}, traces completed {completed:?}, \
                 spans exported {spans:?} (expected {})",
                output.status.code(),
                3 * DEMO_REQUESTS
            ),
        ),
        started,
        Duration::from_secs(120),
    )
}

// ---------------------------------------------------------------------------
// pipeline

#[derive(Debug, Clone, Copy)]
enum Op {
    Add(i64),
    Mul(i64),
    KeepMultiplesOf(i64),
    Duplicate,
}

impl Op {
    fn random(rng: &mut SmallRng) -> Op {
        match rng.random_range(0..4) {
            0 => Op::Add(rng.random_range(-50..50)),
            1 => Op::Mul(rng.random_range(-3..=3)),
            2 => Op::KeepMultiplesOf(rng.random_range(1..5)),
            _ => Op::Duplicate,
        }
    }

    fn apply(self, x: i64, out: &mut Vec<i64>) {
        match self {
            Op::Add(k) => out.push(x.wrapping_add(k)),
            Op::Mul(k) => out.push(x.wrapping_mul(k)),
            Op::KeepMultiplesOf(k) => {
                if x % k == 0 {
                    out.push(x)
                }
            }
            Op::Duplicate => out.extend([x, x]),
        }
    }

    fn stage(self, name: String) -> Stage {
        Stage::new(name, move |x: i64, out: &mut Vec<i64>| {
            self.apply(x, out);
            Ok::<_, StageError>(())
        })
    }
}

fn sequential(ops: &[Op], input: &[i64]) -> Vec<i64> {
    let mut items = input.to_vec();
    for op in ops {
        let mut next = Vec::new();
        for x in items {
            op.apply(x, &mut next);
        }
        items = next;
    }
    items
}

/// Runs `f` on another thread, giving up after `bound`.
fn bounded_run<T: Send + 'static>(bound: Duration, f: impl FnOnce() -> T + Send + 'static) -> Option<T> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(f());
    });
    rx.recv_timeout(bound).ok()
}

fn pipeline_matches_sequential_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = SmallRng::seed_from_u64(0x919E);
    let chains = 1000;
    let mut mismatches = 0;
    for _ in 0..chains {
        let ops: Vec<Op> = (0..rng.random_range(1..=5)).map(|_| Op::random(&mut rng)).collect();
        let input: Vec<i64> = (0..rng.random_range(0..=1000)).map(|_| rng.random_range(-1000..1000)).collect();
        let capacity = rng.random_range(1..=16);
        let stages = ops.iter().enumerate().map(|(i, op)| op.stage(format!("s{i}"))).collect();
        let mut pipeline = Pipeline::chain(stages, capacity).unwrap();
        let (out, _) = pipeline.run::<i64, i64, _>(input.clone()).unwrap();
        if out != sequential(&ops, &input) {
            mismatches += 1;
        }
    }

    let empty_terminates = bounded_run(Duration::from_secs(5), || {
        let stages = vec![Op::Add(1).stage("a".into()), Op::Duplicate.stage("b".into())];
        let mut pipeline = Pipeline::chain(stages, 4).unwrap();
        pipeline.run::<i64, i64, _>(Vec::new()).map(|(out, _)| out.is_empty())
    })
    .is_some_and(|r| r.unwrap_or(false));

    let fail_fast = bounded_run(Duration::from_secs(5), || {
        let stages = vec![
            Op::Add(0).stage("before".into()),
            Stage::try_map("faulty", |x: i64| {
                if x == 500 {
                    Err(StageError::from("element 500 rejected"))
                } else {
                    Ok(x)
                }
            }),
            Op::Add(0).stage("after".into()),
        ];
        let mut pipeline = Pipeline::chain(stages, 4).unwrap();
        matches!(
            pipeline.run::<i64, i64, _>(0..100_000i64),
            Err(PipelineError::StageFailed { ref stage, .. }) if stage == "faulty"
        )
    })
    .unwrap_or(false);

    within(
        Outcome::new(
            mismatches == 0 && empty_terminates && fail_fast,
            format!(
                "{chains} random chains: mismatches {mismatches}; empty input terminates {empty_terminates}; \
                 failure names its stage {fail_fast}"
            ),
        ),
        started,
        Duration::from_secs(30),
    )
}
