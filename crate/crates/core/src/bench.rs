//! Self-recursive overhead microbenchmark.
//!
//! Each iteration calls a method that recurses `d` levels and optionally
//! busy-waits at the leaf. Running the same workload at four configuration
//! levels splits the monitoring cost into instrumentation, collection and
//! writing portions.
//!
//! Means are kept as integer picoseconds so that the decomposition identity
//! holds exactly and survives printing.

use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::str::FromStr;
use std::time::{Duration, Instant};

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::agent::{
    AgentConfig, AgentError, CollectionLevel, MonitoringController, RecordSink, TraceContext,
};

pub const SIGNATURE: &str = "kestrel.bench.MonitoredClass.monitoredMethod()";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    /// No probes on the call path at all.
    Baseline,
    Deactivated,
    CollectOnly,
    Full,
}

impl Level {
    pub const ALL: [Level; 4] = [
        Level::Baseline,
        Level::Deactivated,
        Level::CollectOnly,
        Level::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Baseline => "baseline",
            Level::Deactivated => "deactivated",
            Level::CollectOnly => "collect",
            Level::Full => "full",
        }
    }

    fn collection_level(self) -> Option<CollectionLevel> {
        match self {
            Level::Baseline => None,
            Level::Deactivated => Some(CollectionLevel::Deactivated),
            Level::CollectOnly => Some(CollectionLevel::CollectOnly),
            Level::Full => Some(CollectionLevel::Full),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Level::Baseline),
            "deactivated" => Ok(Level::Deactivated),
            "collect" | "collect_only" | "collect-only" => Ok(Level::CollectOnly),
            "full" => Ok(Level::Full),
            _ => Err(BenchError::Config(format!(
                "unknown level {s:?} (expected baseline, deactivated, collect or full)"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("results are not comparable: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkConfig {
    pub total_iterations: u64,
    /// Leading iterations left out of the statistics.
    pub warmup_iterations: u64,
    pub recursion_depth: u32,
    pub leaf_wait: Duration,
    pub level: Level,
    /// Queue, overflow policy, delivery and sink of the agent. The collection
    /// level is taken from `level`.
    pub agent: AgentConfig,
    /// Bound on waiting for the writer, both at the warmup barrier and at shutdown.
    pub drain_timeout: Duration,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            total_iterations: 2_000_000,
            warmup_iterations: 1_000_000,
            recursion_depth: 10,
            leaf_wait: Duration::ZERO,
            level: Level::Full,
            agent: AgentConfig::default(),
            drain_timeout: Duration::from_secs(60),
        }
    }
}

impl BenchmarkConfig {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            ..Self::default()
        }
    }

    /// Sets the iteration counts to `warmup` discarded plus `measured` kept.
    pub fn with_iterations(mut self, warmup: u64, measured: u64) -> Self {
        self.warmup_iterations = warmup;
        self.total_iterations = warmup + measured;
        self
    }

    pub fn measured_iterations(&self) -> u64 {
        self.total_iterations.saturating_sub(self.warmup_iterations)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.recursion_depth == 0 {
            return Err(BenchError::Config("recursion depth must be at least 1".into()));
        }
        if self.total_iterations <= self.warmup_iterations {
            return Err(BenchError::Config(format!(
                "total iterations ({}) must exceed warmup iterations ({})",
                self.total_iterations, self.warmup_iterations
            )));
        }
        Ok(())
    }
}

/// Statistics over the measured per-iteration durations.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: u64,
    /// Exact mean in picoseconds, rounded half away from zero.
    pub mean_ps: i64,
    pub median_ns: f64,
    pub p95_ns: f64,
    pub p99_ns: f64,
    /// Sample standard deviation.
    pub stddev_ns: f64,
    pub ci95_low_ns: f64,
    pub ci95_high_ns: f64,
}

impl Summary {
    pub fn of(series: &[u64]) -> Summary {
        let n = series.len();
        assert!(n > 0, "summary of an empty series");
        let sum: u128 = series.iter().map(|&x| x as u128).sum();
        let mean_ps = ((sum * 1000 + n as u128 / 2) / n as u128) as i64;
        let mean = sum as f64 / n as f64;

        let mut sorted = series.to_vec();
        sorted.sort_unstable();
        let median_ns = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
        };
        let nearest_rank = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1] as f64;

        let (stddev_ns, half_width) = if n > 1 {
            let var = series
                .iter()
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            let sd = var.sqrt();
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("degrees of freedom are positive")
                .inverse_cdf(0.975);
            (sd, t * sd / (n as f64).sqrt())
        } else {
            (0.0, 0.0)
        };
        Summary {
            count: n as u64,
            mean_ps,
            median_ns,
            p95_ns: nearest_rank(0.95),
            p99_ns: nearest_rank(0.99),
            stddev_ns,
            ci95_low_ns: mean - half_width,
            ci95_high_ns: mean + half_width,
        }
    }

    pub fn mean_ns(&self) -> f64 {
        self.mean_ps as f64 / 1000.0
    }

    pub fn ci95_width_ns(&self) -> f64 {
        self.ci95_high_ns - self.ci95_low_ns
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub config: BenchmarkConfig,
    /// Wall time of each measured iteration in nanoseconds.
    pub series: Vec<u64>,
    pub summary: Summary,
    /// Records the queue accepted during measured iterations.
    pub records_produced: u64,
    /// Records the sink received for measured iterations before the drain bound.
    pub records_written: u64,
    pub warnings: Vec<String>,
}

impl BenchmarkResult {
    pub fn from_series(
        config: BenchmarkConfig,
        series: Vec<u64>,
        records_produced: u64,
        records_written: u64,
        warnings: Vec<String>,
    ) -> Self {
        let summary = Summary::of(&series);
        Self {
            config,
            series,
            summary,
            records_produced,
            records_written,
            warnings,
        }
    }
}

/// Smallest nonzero step observed between consecutive monotonic clock reads.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[inline(never)]
fn busy_wait(t: Duration) -> u64 {
    if t.is_zero() {
        return black_box(0);
    }
    let start = Instant::now();
    let mut spins = 0u64;
    while start.elapsed() < t {
        spins += 1;
    }
    black_box(spins)
}

#[inline(never)]
fn baseline_method(depth: u32, t: Duration) -> u64 {
    if depth <= 1 {
        busy_wait(t)
    } else {
        black_box(baseline_method(depth - 1, t))
    }
}

#[inline(never)]
fn monitored_method(ctl: &MonitoringController, ctx: &mut TraceContext, depth: u32, t: Duration) -> u64 {
    let execution = ctl.enter(ctx, SIGNATURE);
    let result = if depth <= 1 {
        busy_wait(t)
    } else {
        black_box(monitored_method(ctl, ctx, depth - 1, t))
    };
    ctl.exit(ctx, execution);
    result
}

/// Runs the workload against the sink named in `config.agent.sink`.
pub fn run_workload(config: &BenchmarkConfig) -> Result<BenchmarkResult, BenchError> {
    config.validate()?;
    let sink = config.agent.sink.open()?;
    run_workload_with_sink(config, sink)
}

/// Runs the workload against `sink`. BASELINE never touches it.
pub fn run_workload_with_sink(
    config: &BenchmarkConfig,
    sink: impl RecordSink + 'static,
) -> Result<BenchmarkResult, BenchError> {
    config.validate()?;
    let mut warnings = Vec::new();
    let resolution = clock_resolution();
    if resolution > Duration::from_micros(1) {
        warnings.push(format!(
            "monotonic clock resolution is {} ns, coarser than 1 us",
            resolution.as_nanos()
        ));
    }

    let d = config.recursion_depth;
    let t = config.leaf_wait;
    let warmup = config.warmup_iterations;
    let measured = config.measured_iterations() as usize;
    let mut series = Vec::with_capacity(measured);

    let Some(level) = config.level.collection_level() else {
        for _ in 0..warmup {
            black_box(baseline_method(d, t));
        }
        for _ in 0..measured {
            let start = Instant::now();
            black_box(baseline_method(d, t));
            series.push(start.elapsed().as_nanos() as u64);
        }
        return Ok(BenchmarkResult::from_series(config.clone(), series, 0, 0, warnings));
    };

    let agent = AgentConfig {
        collection_level: level,
        enabled: true,
        ..config.agent.clone()
    };
    let ctl = MonitoringController::start(agent, sink)?;
    let mut ctx = TraceContext::new();
    for _ in 0..warmup {
        black_box(monitored_method(&ctl, &mut ctx, d, t));
    }
    if !ctl.wait_idle(config.drain_timeout) {
        warnings.push("writer did not drain the warmup records in time".into());
    }
    let before = ctl.stats();
    for _ in 0..measured {
        let start = Instant::now();
        black_box(monitored_method(&ctl, &mut ctx, d, t));
        series.push(start.elapsed().as_nanos() as u64);
    }
    let produced = ctl.stats().accepted - before.accepted;
    if !ctl.shutdown(config.drain_timeout) {
        warnings.push(format!(
            "writer shutdown timed out with {} records still queued",
            ctl.remaining()
        ));
    }
    let after = ctl.stats();
    if after.dropped > before.dropped {
        warnings.push(format!("{} records dropped", after.dropped - before.dropped));
    }
    let written = after.written - before.written;
    Ok(BenchmarkResult::from_series(config.clone(), series, produced, written, warnings))
}

/// Differences between the mean iteration times of adjacent levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverheadDecomposition {
    pub delta_instrumentation_ps: i64,
    pub delta_collection_ps: i64,
    pub delta_writing_ps: i64,
    pub total_overhead_ps: i64,
    /// One entry per negative delta. Negative deltas are kept as measured.
    pub warnings: Vec<String>,
}

/// Attributes overhead to instrumentation, collection and writing.
///
/// Needs exactly one result per level, all with the same depth, leaf wait and
/// measured iteration count.
pub fn decompose(results: &[BenchmarkResult]) -> Result<OverheadDecomposition, BenchError> {
    let mut means = [0i64; 4];
    for (slot, level) in Level::ALL.into_iter().enumerate() {
        let mut matching = results.iter().filter(|r| r.config.level == level);
        let found = matching
            .next()
            .ok_or_else(|| BenchError::Mismatch(format!("no result for level {level}")))?;
        if matching.next().is_some() {
            return Err(BenchError::Mismatch(format!("more than one result for level {level}")));
        }
        means[slot] = found.summary.mean_ps;
    }
    let first = &results[0];
    for r in results {
        let (a, b) = (&first.config, &r.config);
        if a.recursion_depth != b.recursion_depth
            || a.leaf_wait != b.leaf_wait
            || r.summary.count != first.summary.count
        {
            return Err(BenchError::Mismatch(format!(
                "{} ran with depth {}, wait {:?}, {} iterations but {} with depth {}, wait {:?}, {} iterations",
                a.level, a.recursion_depth, a.leaf_wait, first.summary.count,
                b.level, b.recursion_depth, b.leaf_wait, r.summary.count,
            )));
        }
    }
    let [baseline, deactivated, collect, full] = means;
    let d = OverheadDecomposition {
        delta_instrumentation_ps: deactivated - baseline,
        delta_collection_ps: collect - deactivated,
        delta_writing_ps: full - collect,
        total_overhead_ps: full - baseline,
        warnings: Vec::new(),
    };
    let warnings = [
        ("instrumentation", d.delta_instrumentation_ps),
        ("collection", d.delta_collection_ps),
        ("writing", d.delta_writing_ps),
    ]
    .into_iter()
    .filter(|&(_, delta)| delta < 0)
    .map(|(name, delta)| {
        format!(
            "negative {name} delta ({} ns) is below measurement noise",
            format_ps(delta)
        )
    })
    .collect();
    Ok(OverheadDecomposition { warnings, ..d })
}

/// Picoseconds as nanoseconds with exactly three decimals.
pub fn format_ps(ps: i64) -> String {
    let sign = if ps < 0 { "-" } else { "" };
    let abs = ps.unsigned_abs();
    format!("{sign}{}.{:03}", abs / 1000, abs % 1000)
}

pub const CSV_HEADER: &str =
    "level,mean_ns,median_ns,p95_ns,p99_ns,stddev_ns,ci95_low_ns,ci95_high_ns";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub csv: String,
    pub table: String,
}

/// Renders results, and the decomposition when there is one, as CSV and as
/// an aligned text table with the same numbers.
pub fn report(decomposition: Option<&OverheadDecomposition>, results: &[BenchmarkResult]) -> Report {
    let rows: Vec<[String; 8]> = results
        .iter()
        .map(|r| {
            let s = &r.summary;
            [
                r.config.level.to_string(),
                format_ps(s.mean_ps),
                format!("{:.3}", s.median_ns),
                format!("{:.3}", s.p95_ns),
                format!("{:.3}", s.p99_ns),
                format!("{:.3}", s.stddev_ns),
                format!("{:.3}", s.ci95_low_ns),
                format!("{:.3}", s.ci95_high_ns),
            ]
        })
        .collect();
    let deltas: Vec<[String; 2]> = decomposition
        .map(|d| {
            [
                ("instrumentation", d.delta_instrumentation_ps),
                ("collection", d.delta_collection_ps),
                ("writing", d.delta_writing_ps),
                ("total", d.total_overhead_ps),
            ]
            .into_iter()
            .map(|(name, ps)| [name.to_string(), format_ps(ps)])
            .collect()
        })
        .unwrap_or_default();

    let mut csv = String::new();
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    if !deltas.is_empty() {
        csv.push_str("\ncomponent,delta_ns\n");
        for row in &deltas {
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
    }

    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut table = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let mut parts = Vec::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            parts.push(if i == 0 {
                format!("{c:<w$}", w = widths[i])
            } else {
                format!("{c:>w$}", w = widths[i])
            });
        }
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header, &mut table);
    for row in &rows {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>(), &mut table);
    }
    if !deltas.is_empty() {
        let w0 = deltas.iter().map(|r| r[0].len()).max().unwrap_or(0).max("component".len());
        let w1 = deltas.iter().map(|r| r[1].len()).max().unwrap_or(0).max("delta_ns".len());
        let _ = writeln!(table, "\n{:<w0$}  {:>w1$}", "component", "delta_ns");
        for [name, value] in &deltas {
            let _ = writeln!(table, "{name:<w0$}  {value:>w1$}");
        }
    }
    Report { csv, table }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_ps_is_exact() {
        assert_eq!(format_ps(0), "0.000");
        assert_eq!(format_ps(1_500), "1.500");
        assert_eq!(format_ps(-1_000), "-1.000");
        assert_eq!(format_ps(-1), "-0.001");
        assert_eq!(format_ps(60_000_000), "60000.000");
    }

    #[test]
    fn summary_of_known_series() {
        let s = Summary::of(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert_eq!(s.mean_ps, 5_500);
        assert_eq!(s.median_ns, 5.5);
        assert_eq!(s.p95_ns, 10.0);
        assert_eq!(s.p99_ns, 10.0);
        // sum of squared deviations is 82.5 over 9 degrees of freedom
        assert!((s.stddev_ns - (82.5f64 / 9.0).sqrt()).abs() < 1e-12);
        // t(0.975, 9) = 2.262157
        let half = 2.262_157 * s.stddev_ns / 10f64.sqrt();
        assert!((s.ci95_high_ns - (5.5 + half)).abs() < 1e-5);
        assert!((s.ci95_low_ns - (5.5 - half)).abs() < 1e-5);
    }

    #[test]
    fn mean_rounds_to_nearest_picosecond() {
        assert_eq!(Summary::of(&[1, 1, 2]).mean_ps, 1_333);
        assert_eq!(Summary::of(&[1, 2, 2]).mean_ps, 1_667);
        assert_eq!(Summary::of(&[7]).stddev_ns, 0.0);
    }

    #[test]
    fn level_names_parse() {
        for level in Level::ALL {
            assert_eq!(level.as_str().parse::<Level>().unwrap(), level);
        }
        assert!("fast".parse::<Level>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BenchmarkConfig::default().validate().is_ok());
        let mut c = BenchmarkConfig::default();
        c.recursion_depth = 0;
        assert!(c.validate().is_err());
        let c = BenchmarkConfig::default().with_iterations(10, 0);
        assert!(c.validate().is_err());
        assert_eq!(BenchmarkConfig::default().with_iterations(0, 5).measured_iterations(), 5);
    }
}
