//! Periodic metric sampling on a single scheduler thread.

use std::error::Error;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::records::{MetricSampleRecord, MonitoringRecord};

use super::Inner;

pub type SampleError = Box<dyn Error + Send + Sync>;
pub type SampleFn = Box<dyn FnMut() -> Result<Vec<(String, f64)>, SampleError> + Send>;

/// A named metric source polled every `interval`.
pub struct PeriodicSampler {
    pub interval: Duration,
    pub sampler_name: String,
    pub sample_fn: SampleFn,
}

impl PeriodicSampler {
    pub fn new<F>(sampler_name: impl Into<String>, interval: Duration, sample_fn: F) -> Self
    where
        F: FnMut() -> Result<Vec<(String, f64)>, SampleError> + Send + 'static,
    {
        Self {
            interval,
            sampler_name: sampler_name.into(),
            sample_fn: Box::new(sample_fn),
        }
    }

    /// Emits one metric whose value comes from `f` on every tick.
    pub fn synthetic<F>(sampler_name: impl Into<String>, metric: impl Into<String>, interval: Duration, mut f: F) -> Self
    where
        F: FnMut() -> f64 + Send + 'static,
    {
        let metric = metric.into();
        Self::new(sampler_name, interval, move || Ok(vec![(metric.clone(), f())]))
    }

    /// Resident memory and CPU time of the current process, from `/proc/self`.
    pub fn process_stats(interval: Duration) -> Self {
        Self::new("process", interval, read_process_stats)
    }
}

fn read_process_stats() -> Result<Vec<(String, f64)>, SampleError> {
    let status = std::fs::read_to_string("/proc/self/status")?;
    let mut out = Vec::with_capacity(3);
    for line in status.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("VmRSS:") => {
                let kb: f64 = parts.next().ok_or("missing VmRSS value")?.parse()?;
                out.push(("memory.rss_bytes".to_string(), kb * 1024.0));
            }
            Some("Threads:") => {
                let n: f64 = parts.next().ok_or("missing Threads value")?.parse()?;
                out.push(("threads".to_string(), n));
            }
            _ => {}
        }
    }
    let stat = std::fs::read_to_string("/proc/self/stat")?;
    // the command name may contain spaces; fields resume after the last ')'
    let rest = stat.rsplit_once(')').ok_or("unexpected /proc/self/stat layout")?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // utime and stime are fields 14 and 15 of the full line
    let utime: f64 = fields.get(11).ok_or("missing utime")?.parse()?;
    let stime: f64 = fields.get(12).ok_or("missing stime")?.parse()?;
    out.push(("cpu.time_ticks".to_string(), utime + stime));
    Ok(out)
}

/// Returned by [`MonitoringController::register_sampler`](super::MonitoringController::register_sampler).
#[derive(Debug, Clone)]
pub struct SamplerHandle {
    cancelled: Arc<AtomicBool>,
    ticks: Arc<AtomicU64>,
    failures: Arc<AtomicU64>,
    shared: Weak<Shared>,
}

impl SamplerHandle {
    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::Release);
        if let Some(shared) = self.shared.upgrade() {
            shared.wake.notify_all();
        }
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::Acquire)
    }

    /// Completed ticks, failed ones included.
    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::Acquire)
    }

    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::Acquire)
    }
}

struct Entry {
    sampler: PeriodicSampler,
    next_due: Instant,
    cancelled: Arc<AtomicBool>,
    ticks: Arc<AtomicU64>,
    failures: Arc<AtomicU64>,
}

#[derive(Default)]
struct State {
    entries: Vec<Entry>,
    stop: bool,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
}

pub(crate) struct Scheduler {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl Scheduler {
    pub(crate) fn start(controller: Weak<Inner>) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            wake: Condvar::new(),
        });
        let worker = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("kestrel-sampler".into())
            .spawn(move || run(worker, controller))
            .expect("spawn sampler thread");
        Self {
            shared,
            thread: Some(thread),
        }
    }

    pub(crate) fn add(&self, sampler: PeriodicSampler) -> SamplerHandle {
        let cancelled = Arc::new(AtomicBool::new(false));
        let ticks = Arc::new(AtomicU64::new(0));
        let failures = Arc::new(AtomicU64::new(0));
        let entry = Entry {
            next_due: Instant::now() + sampler.interval,
            sampler,
            cancelled: Arc::clone(&cancelled),
            ticks: Arc::clone(&ticks),
            failures: Arc::clone(&failures),
        };
        self.shared.state.lock().unwrap().entries.push(entry);
        self.shared.wake.notify_all();
        SamplerHandle {
            cancelled,
            ticks,
            failures,
            shared: Arc::downgrade(&self.shared),
        }
    }

    pub(crate) fn stop(&mut self) {
        self.shared.state.lock().unwrap().stop = true;
        self.shared.wake.notify_all();
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run(shared: Arc<Shared>, controller: Weak<Inner>) {
    let mut state = shared.state.lock().unwrap();
    loop {
        if state.stop {
            return;
        }
        state.entries.retain(|e| !e.cancelled.load(Ordering::Acquire));
        let Some((idx, due)) = state
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.next_due))
            .min_by_key(|&(_, due)| due)
        else {
            state = shared.wake.wait(state).unwrap();
            continue;
        };
        let now = Instant::now();
        if now < due {
            state = shared.wake.wait_timeout(state, due - now).unwrap().0;
            continue;
        }

        // run the sampler without holding the lock so handles stay responsive
        let mut entry = state.entries.swap_remove(idx);
        drop(state);
        let Some(inner) = controller.upgrade() else {
            return;
        };
        tick(&inner, &mut entry);
        drop(inner);
        state = shared.state.lock().unwrap();

        // skip any boundaries missed while sampling instead of bursting
        let interval = entry.sampler.interval;
        let now = Instant::now();
        let mut next = entry.next_due + interval;
        if next <= now {
            let behind = (now - entry.next_due).as_nanos() / interval.as_nanos();
            next = entry.next_due + interval * (behind as u32 + 1);
        }
        entry.next_due = next;
        if !entry.cancelled.load(Ordering::Acquire) {
            state.entries.push(entry);
        }
    }
}

fn tick(inner: &Inner, entry: &mut Entry) {
    if entry.cancelled.load(Ordering::Acquire) {
        return;
    }
    let result = (entry.sampler.sample_fn)();
    entry.ticks.fetch_add(1, Ordering::AcqRel);
    let samples = match result {
        Ok(samples) => samples,
        Err(e) => {
            entry.failures.fetch_add(1, Ordering::AcqRel);
            log::warn!("sampler {} failed: {e}", entry.sampler.sampler_name);
            return;
        }
    };
    if !inner.enabled.load(Ordering::Relaxed) {
        return;
    }
    let timestamp = inner.clock.now_nanos();
    for (metric_name, value) in samples {
        if !value.is_finite() {
            log::warn!(
                "sampler {} produced non-finite {metric_name} = {value}",
                entry.sampler.sampler_name
            );
            continue;
        }
        inner.offer(MonitoringRecord::MetricSample(MetricSampleRecord {
            timestamp,
            sampler_name: entry.sampler.sampler_name.clone(),
            metric_name,
            value,
            host_name: inner.host_name.clone(),
        }));
    }
}
