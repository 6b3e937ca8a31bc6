use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use kestrel_cli::demo::{run_load, DemoApp, LoadConfig, RECORDS_PER_REQUEST};
use kestrel_cli::settings::{Settings, AGENT_KEYS, COLLECTOR_KEYS};
use kestrel_collector::{
    parse_addr, query_stats, Service, ServiceConfig, ServiceError, StatsSnapshot,
};
use kestrel_core::agent::{AgentConfig, MonitoringController, SinkKind, TcpSink};
use kestrel_core::bench::{self, BenchmarkConfig, Level};
use kestrel_core::records::{encode_text, RecordReader};

#[derive(Parser)]
#[command(name = "kestrel", version, about = "Monitoring agent, trace collector and overhead benchmark")]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(long, short, global = true)]
    verbose: bool,
    /// File of `key = value` lines; command line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-recursive overhead benchmark.
    Bench(BenchArgs),
    /// Run the collector service until interrupted.
    Serve(ServeArgs),
    /// Drive the instrumented demo application.
    Demo(DemoArgs),
    /// Print the records of a record file.
    Dump(DumpArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Total iterations, warmup included [default: 2000000].
    #[arg(long)]
    iterations: Option<u64>,
    /// Iterations discarded from the statistics [default: half of the total].
    #[arg(long)]
    warmup: Option<u64>,
    /// Recursion depth [default: 10].
    #[arg(long)]
    depth: Option<u32>,
    /// Busy wait in the leaf call, in nanoseconds [default: 0].
    #[arg(long = "wait-ns")]
    wait_ns: Option<u64>,
    /// Configuration level [default: full].
    #[arg(long, value_parser = parse_level, conflicts_with = "all_levels")]
    level: Option<Level>,
    /// Run all four levels and print the overhead decomposition.
    #[arg(long)]
    all_levels: bool,
    /// memory, file:<path> or tcp:<host:port> [default: memory].
    #[arg(long)]
    sink: Option<String>,
    /// Agent queue capacity in records.
    #[arg(long)]
    queue_capacity: Option<usize>,
    /// Write the CSV here and print the table instead.
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Record ingest address: port or host:port.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, value_parser = ["http", "file", "stdout", "none"])]
    export: Option<String>,
    /// host:port or URL for http, path for file.
    #[arg(long)]
    export_target: Option<String>,
    /// Idle time after which an open trace is given up, e.g. 5s or 250ms.
    #[arg(long, value_parser = parse_duration)]
    idle_timeout: Option<Duration>,
    /// Quiet time before a complete trace is exported, e.g. 100ms.
    #[arg(long, value_parser = parse_duration)]
    settle: Option<Duration>,
    /// Ingress queue capacity in records.
    #[arg(long)]
    buffer_capacity: Option<usize>,
    /// Traces per exported document.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Address that answers with a JSON stats snapshot.
    #[arg(long)]
    stats_listen: Option<String>,
}

#[derive(Args)]
struct DemoArgs {
    /// Requests to issue [default: 6400].
    #[arg(long)]
    requests: Option<u64>,
    /// Concurrent load workers [default: 4].
    #[arg(long)]
    concurrency: Option<usize>,
    /// Send records to this running collector instead of an in-process one.
    #[arg(long, value_name = "HOST:PORT")]
    collector: Option<String>,
    /// Stats address of the remote collector, to verify completed traces.
    #[arg(long, value_name = "HOST:PORT", requires = "collector")]
    collector_stats: Option<String>,
    /// Export mode of the in-process collector [default: none].
    #[arg(long, value_parser = ["http", "file", "stdout", "none"], conflicts_with = "collector")]
    export: Option<String>,
    /// host:port or URL for http, path for file.
    #[arg(long, conflicts_with = "collector")]
    export_target: Option<String>,
    /// Busy time inside each operation, in microseconds [default: 0].
    #[arg(long)]
    service_time_us: Option<u64>,
    /// Agent queue capacity in records.
    #[arg(long)]
    queue_capacity: Option<usize>,
}

#[derive(Args)]
struct DumpArgs {
    path: PathBuf,
    #[arg(long, value_enum, default_value_t = DumpFormat::Text)]
    format: DumpFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpFormat {
    Text,
    Json,
}

enum Failure {
    /// Bad configuration or arguments.
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }

    fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(_) => Failure::usage(e),
            _ => Failure::runtime(e),
        }
    }
}

const BENCH_KEYS: [&str; 5] = [
    "bench.iterations",
    "bench.warmup",
    "bench.depth",
    "bench.wait.ns",
    "bench.level",
];

const DEMO_KEYS: [&str; 4] = [
    "demo.requests",
    "demo.concurrency",
    "demo.collector",
    "demo.service.time.us",
];

fn parse_level(s: &str) -> Result<Level, String> {
    s.parse().map_err(|e: bench::BenchError| e.to_string())
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) => s.split_at(i),
        None => (s, "s"),
    };
    let n: u64 = num.parse().map_err(|_| format!("invalid duration {s:?}"))?;
    let d = match unit {
        "ms" => Duration::from_millis(n),
        "s" => Duration::from_secs(n),
        "m" => Duration::from_secs(n * 60),
        _ => return Err(format!("invalid duration unit in {s:?} (use ms, s or m)")),
    };
    if d.is_zero() {
        return Err("duration must be positive".into());
    }
    Ok(d)
}

fn setting<T: std::str::FromStr>(settings: &Settings, key: &str) -> Result<Option<T>, Failure> {
    settings
        .get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Failure::usage(format!("invalid value {v:?} for {key}")))
        })
        .transpose()
}

fn agent_config(settings: &Settings, sink: Option<&str>, queue_capacity: Option<usize>) -> Result<AgentConfig, Failure> {
    let mut config = AgentConfig::default()
        .apply(settings.select(&AGENT_KEYS))
        .and_then(AgentConfig::apply_env)
        .map_err(Failure::usage)?;
    if let Some(sink) = sink {
        config.sink = sink.parse::<SinkKind>().map_err(Failure::usage)?;
    }
    if let Some(c) = queue_capacity {
        if c == 0 {
            return Err(Failure::usage("queue capacity must be positive"));
        }
        config.queue_capacity = c;
    }
    Ok(config)
}

fn collector_config(
    settings: &Settings,
    flags: Vec<(&'static str, String)>,
) -> Result<ServiceConfig, Failure> {
    Ok(ServiceConfig::default()
        .apply(settings.select(&COLLECTOR_KEYS))?
        .apply_env()?
        .apply(flags.iter().map(|(k, v)| (*k, v.as_str())))?)
}

fn cmd_bench(args: BenchArgs, settings: &Settings) -> Result<(), Failure> {
    let defaults = BenchmarkConfig::default();
    let total = args
        .iterations
        .or(setting(settings, "bench.iterations")?)
        .unwrap_or(defaults.total_iterations);
    let warmup = args
        .warmup
        .or(setting(settings, "bench.warmup")?)
        .unwrap_or(total / 2);
    let depth = args
        .depth
        .or(setting(settings, "bench.depth")?)
        .unwrap_or(defaults.recursion_depth);
    let wait_ns = args
        .wait_ns
        .or(setting(settings, "bench.wait.ns")?)
        .unwrap_or(0);
    let level = match args.level {
        Some(l) => l,
        None => match settings.get("bench.level") {
            Some(v) => parse_level(v).map_err(Failure::Usage)?,
            None => Level::Full,
        },
    };
    let agent = agent_config(settings, args.sink.as_deref(), args.queue_capacity)?;
    let levels: Vec<Level> = if args.all_levels { Level::ALL.to_vec() } else { vec![level] };

    let mut results = Vec::new();
    for level in levels {
        let config = BenchmarkConfig {
            total_iterations: total,
            warmup_iterations: warmup,
            recursion_depth: depth,
            leaf_wait: Duration::from_nanos(wait_ns),
            level,
            agent: agent.clone(),
            ..BenchmarkConfig::default()
        };
        config.validate().map_err(Failure::usage)?;
        log::info!("running {level}: {total} iterations ({warmup} warmup), depth {depth}, wait {wait_ns} ns");
        let result = bench::run_workload(&config).map_err(Failure::runtime)?;
        for w in &result.warnings {
            eprintln!("warning: {level}: {w}");
        }
        results.push(result);
    }
    let decomposition = if args.all_levels {
        let d = bench::decompose(&results).map_err(Failure::runtime)?;
        for w in &d.warnings {
            eprintln!("warning: {w}");
        }
        Some(d)
    } else {
        None
    };
    let report = bench::report(decomposition.as_ref(), &results);
    match args.out {
        Some(path) => {
            std::fs::write(&path, &report.csv)
                .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
            print!("{}", report.table);
        }
        None => print!("{}", report.csv),
    }
    Ok(())
}

fn print_stats(out: &mut impl Write, s: &StatsSnapshot) -> io::Result<()> {
    let value = serde_json::to_value(s).expect("stats serialize");
    for (k, v) in value.as_object().expect("stats are an object") {
        writeln!(out, "{k}: {v}")?;
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs, settings: &Settings) -> Result<(), Failure> {
    let mut flags = Vec::new();
    if let Some(v) = args.listen {
        flags.push(("listen", v));
    }
    if let Some(v) = args.export {
        flags.push(("export", v));
    }
    if let Some(v) = args.export_target {
        flags.push(("export.target", v));
    }
    if let Some(v) = args.idle_timeout {
        flags.push(("idle.timeout.ms", v.as_millis().to_string()));
    }
    if let Some(v) = args.settle {
        flags.push(("settle.ms", v.as_millis().to_string()));
    }
    if let Some(v) = args.buffer_capacity {
        flags.push(("buffer.capacity", v.to_string()));
    }
    if let Some(v) = args.batch_size {
        flags.push(("batch.size", v.to_string()));
    }
    if let Some(v) = args.stats_listen {
        flags.push(("stats.listen", v));
    }
    let config = collector_config(settings, flags)?;
    let export = config.export.to_string();
    let service = Service::start(config)?;

    let (stop_tx, stop_rx) = std::sync::mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = stop_tx.send(());
    })
    .map_err(Failure::runtime)?;
    eprintln!("listening on {} (export {export})", service.local_addr());
    if let Some(addr) = service.stats_addr() {
        eprintln!("stats on {addr}");
    }
    let _ = stop_rx.recv();
    eprintln!("stopping");
    let stats = service.stop()?;
    let mut out = io::stdout().lock();
    print_stats(&mut out, &stats).map_err(Failure::runtime)?;
    Ok(())
}

enum Collector {
    Local(Service),
    Remote {
        stats: Option<std::net::SocketAddr>,
        before: StatsSnapshot,
    },
}

fn cmd_demo(args: DemoArgs, settings: &Settings) -> Result<(), Failure> {
    let load = LoadConfig {
        request_count: args
            .requests
            .or(setting(settings, "demo.requests")?)
            .unwrap_or(LoadConfig::default().request_count),
        concurrency: args
            .concurrency
            .or(setting(settings, "demo.concurrency")?)
            .unwrap_or(LoadConfig::default().concurrency),
    };
    if load.request_count == 0 || load.concurrency == 0 {
        return Err(Failure::usage("requests and concurrency must be at least 1"));
    }
    let service_time = Duration::from_micros(
        args.service_time_us
            .or(setting(settings, "demo.service.time.us")?)
            .unwrap_or(0),
    );
    let remote = args.collector.or_else(|| settings.get("demo.collector").map(str::to_string));

    let (collector, addr) = match remote {
        Some(target) => {
            let addr = parse_addr(&target).map_err(Failure::usage)?;
            let stats = args
                .collector_stats
                .as_deref()
                .map(parse_addr)
                .transpose()
                .map_err(Failure::usage)?;
            let before = match stats {
                Some(s) => query_stats(s, Duration::from_secs(5))
                    .map_err(|e| Failure::runtime(format!("collector stats at {s} unreachable: {e}")))?,
                None => StatsSnapshot::default(),
            };
            (Collector::Remote { stats, before }, addr)
        }
        None => {
            let mut flags = vec![("export", args.export.unwrap_or_else(|| "none".into()))];
            if let Some(t) = args.export_target {
                flags.push(("export.target", t));
            }
            let config = collector_config(settings, flags)?;
            let exporter = config.export.open()?;
            let listener = TcpListener::bind("127.0.0.1:0").map_err(Failure::runtime)?;
            let service = Service::start_on(listener, config, exporter)?;
            let addr = service.local_addr();
            (Collector::Local(service), addr)
        }
    };

    let sink = TcpSink::connect(addr)
        .map_err(|e| Failure::runtime(format!("collector at {addr} unreachable: {e}")))?;
    let ctl = MonitoringController::start(agent_config(settings, None, args.queue_capacity)?, sink)
        .map_err(Failure::runtime)?;
    let app = DemoApp::new(ctl.clone(), service_time);
    log::info!("issuing {} requests with {} workers", load.request_count, load.concurrency);
    let report = run_load(&app, load);
    if !ctl.shutdown(Duration::from_secs(120)) {
        eprintln!("warning: agent did not drain; {} records left behind", ctl.remaining());
    }
    let agent = ctl.stats();
    let expected_records = report.requests * RECORDS_PER_REQUEST;

    let mut out = io::stdout().lock();
    let w = |out: &mut io::StdoutLock, line: String| writeln!(out, "{line}").map_err(Failure::runtime);
    w(&mut out, format!("requests issued: {}", report.requests))?;
    w(&mut out, format!("distinct trace ids: {}", report.trace_ids.len()))?;
    w(&mut out, format!("traces expected: {}", report.requests))?;
    w(&mut out, format!("records sent: {}", agent.written))?;

    let delta = match collector {
        Collector::Local(service) => {
            service.wait_until(Duration::from_secs(60), |s| s.operation_records >= agent.written);
            Some(service.stop()?)
        }
        Collector::Remote { stats: None, .. } => None,
        Collector::Remote { stats: Some(addr), before } => {
            let deadline = Instant::now() + Duration::from_secs(60);
            let mut last;
            loop {
                last = query_stats(addr, Duration::from_secs(5)).map_err(Failure::runtime)?;
                let done = last.traces_completed - before.traces_completed >= report.requests;
                if done || Instant::now() >= deadline {
                    break;
                }
                std::thread::sleep(Duration::from_millis(50));
            }
            Some(StatsSnapshot {
                traces_completed: last.traces_completed - before.traces_completed,
                spans_exported: last.spans_exported - before.spans_exported,
                traces_timed_out: last.traces_timed_out - before.traces_timed_out,
                ..last
            })
        }
    };
    let Some(stats) = delta else {
        w(&mut out, "traces completed: unknown (pass --collector-stats to check)".into())?;
        return Ok(());
    };
    w(&mut out, format!("traces completed: {}", stats.traces_completed))?;
    w(&mut out, format!("traces timed out: {}", stats.traces_timed_out))?;
    w(&mut out, format!("spans exported: {}", stats.spans_exported))?;
    w(&mut out, format!("elapsed ms: {}", report.elapsed.as_millis()))?;
    if stats.traces_completed != report.requests
        || stats.spans_exported != expected_records
        || report.trace_ids.len() as u64 != report.requests
    {
        return Err(Failure::runtime(format!(
            "expected {} traces and {expected_records} spans",
            report.requests
        )));
    }
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<(), Failure> {
    let file = std::fs::File::open(&args.path)
        .map_err(|e| Failure::runtime(format!("cannot open {}: {e}", args.path.display())))?;
    let mut out = BufWriter::new(io::stdout().lock());
    for record in RecordReader::new(file) {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let _ = out.flush();
                return Err(Failure::runtime(match e.offset() {
                    Some(offset) => format!("{}: malformed record at byte offset {offset}: {e}", args.path.display()),
                    None => format!("{}: {e}", args.path.display()),
                }));
            }
        };
        let line = match args.format {
            DumpFormat::Text => encode_text(&record),
            DumpFormat::Json => serde_json::to_string(&record).expect("records serialize"),
        };
        if writeln!(out, "{line}").is_err() {
            return Ok(());
        }
    }
    out.flush().map_err(Failure::runtime)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();

    let settings = match &cli.config {
        Some(path) => match Settings::load(path) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => Settings::default(),
    };
    let known: Vec<&str> = BENCH_KEYS.iter().chain(&DEMO_KEYS).copied().collect();
    let unknown = settings.unknown_keys(&known);
    if !unknown.is_empty() {
        eprintln!("error: unknown configuration keys: {}", unknown.join(", "));
        return ExitCode::from(2);
    }

    let result = match cli.command {
        Command::Bench(args) => cmd_bench(args, &settings),
        Command::Serve(args) => cmd_serve(args, &settings),
        Command::Demo(args) => cmd_demo(args, &settings),
        Command::Dump(args) => cmd_dump(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
