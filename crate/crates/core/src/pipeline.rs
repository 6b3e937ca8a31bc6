//! Linear pipe-and-filter runtime.
//!
//! A [`Pipeline`] is a chain of [`Stage`]s joined by bounded FIFO edges. Each
//! stage runs on its own thread; the end of the source is signalled in-band,
//! after the last element, and every stage forwards it once it has flushed.
//! A failing transform aborts the whole run.

use std::any::{type_name, Any, TypeId};
use std::error::Error;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use crossbeam_channel::{bounded, Receiver, Sender};
use thiserror::Error;

pub type StageError = Box<dyn Error + Send + Sync>;

type Element = Box<dyn Any + Send>;
type Transform = Box<dyn FnMut(Element, &mut Vec<Element>) -> Result<(), StageError> + Send>;
type Finish = Box<dyn FnMut(&mut Vec<Element>) -> Result<(), StageError> + Send>;

pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` already has a {side}")]
    Topology { stage: String, side: &'static str },
    #[error("stage `{upstream}` emits {emits} but `{downstream}` consumes {consumes}")]
    TypeMismatch {
        upstream: String,
        emits: &'static str,
        downstream: String,
        consumes: &'static str,
    },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("pipeline is {0:?}, expected Built")]
    State(Status),
    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Built,
    Running,
    Terminated,
}

/// A named processing step from one input element to zero or more outputs.
pub struct Stage {
    name: String,
    input: (TypeId, &'static str),
    output: (TypeId, &'static str),
    transform: Transform,
    finish: Option<Finish>,
}

impl Stage {
    /// General stage: `f` pushes any number of outputs per input.
    pub fn new<I, O, E, F>(name: impl Into<String>, mut f: F) -> Self
    where
        I: Send + 'static,
        O: Send + 'static,
        E: Into<StageError>,
        F: FnMut(I, &mut Vec<O>) -> Result<(), E> + Send + 'static,
    {
        let mut typed = Vec::new();
        let transform: Transform = Box::new(move |element, out| {
            let input = *element
                .downcast::<I>()
                .expect("element type checked when the pipeline was wired");
            f(input, &mut typed).map_err(Into::into)?;
            out.extend(typed.drain(..).map(|o| Box::new(o) as Element));
            Ok(())
        });
        Self {
            name: name.into(),
            input: (TypeId::of::<I>(), type_name::<I>()),
            output: (TypeId::of::<O>(), type_name::<O>()),
            transform,
            finish: None,
        }
    }

    pub fn map<I, O, F>(name: impl Into<String>, mut f: F) -> Self
    where
        I: Send + 'static,
        O: Send + 'static,
        F: FnMut(I) -> O + Send + 'static,
    {
        Self::new(name, move |i, out: &mut Vec<O>| {
            out.push(f(i));
            Ok::<_, StageError>(())
        })
    }

    pub fn try_map<I, O, E, F>(name: impl Into<String>, mut f: F) -> Self
    where
        I: Send + 'static,
        O: Send + 'static,
        E: Into<StageError>,
        F: FnMut(I) -> Result<O, E> + Send + 'static,
    {
        Self::new(name, move |i, out: &mut Vec<O>| {
            out.push(f(i).map_err(Into::into)?);
            Ok::<_, StageError>(())
        })
    }

    pub fn filter<T, F>(name: impl Into<String>, mut keep: F) -> Self
    where
        T: Send + 'static,
        F: FnMut(&T) -> bool + Send + 'static,
    {
        Self::new(name, move |t, out: &mut Vec<T>| {
            if keep(&t) {
                out.push(t);
            }
            Ok::<_, StageError>(())
        })
    }

    /// Adds a hook that runs once at end of stream, before the end marker
    /// moves downstream. It may emit final outputs.
    pub fn on_finish<O, E, F>(mut self, mut f: F) -> Self
    where
        O: Send + 'static,
        E: Into<StageError>,
        F: FnMut(&mut Vec<O>) -> Result<(), E> + Send + 'static,
    {
        assert_eq!(
            TypeId::of::<O>(),
            self.output.0,
            "finish hook of `{}` must emit {}",
            self.name,
            self.output.1
        );
        let mut typed = Vec::new();
        self.finish = Some(Box::new(move |out| {
            f(&mut typed).map_err(Into::into)?;
            out.extend(typed.drain(..).map(|o| Box::new(o) as Element));
            Ok(())
        }));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl std::fmt::Debug for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stage")
            .field("name", &self.name)
            .field("input", &self.input.1)
            .field("output", &self.output.1)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageId(usize);

struct Slot {
    stage: Option<Stage>,
    successor: Option<(usize, usize)>,
    predecessor: Option<usize>,
}

/// Input and output element counts of one stage after a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCounts {
    pub name: String,
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunStats {
    pub source: u64,
    pub stages: Vec<StageCounts>,
    pub sink: u64,
}

impl RunStats {
    /// Elements that some stage consumed without passing anything on for them.
    pub fn filtered_out(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.input.saturating_sub(s.output))
            .sum()
    }
}

enum Msg {
    Item(Element),
    End,
}

#[derive(Default)]
struct Counter {
    input: AtomicU64,
    output: AtomicU64,
}

pub struct Pipeline {
    slots: Vec<Slot>,
    status: Status,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self::new()
    }
}

impl Pipeline {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            status: Status::Built,
        }
    }

    /// Convenience: adds `stages` and connects them in order.
    pub fn chain(stages: Vec<Stage>, capacity: usize) -> Result<Self, PipelineError> {
        let mut pipeline = Self::new();
        let ids: Vec<StageId> = stages.into_iter().map(|s| pipeline.add_stage(s)).collect();
        for pair in ids.windows(2) {
            pipeline.connect(pair[0], pair[1], capacity)?;
        }
        Ok(pipeline)
    }

    pub fn add_stage(&mut self, stage: Stage) -> StageId {
        self.slots.push(Slot {
            stage: Some(stage),
            successor: None,
            predecessor: None,
        });
        StageId(self.slots.len() - 1)
    }

    pub fn status(&self) -> Status {
        self.status
    }

    fn stage(&self, id: StageId) -> Result<&Stage, PipelineError> {
        self.slots
            .get(id.0)
            .and_then(|s| s.stage.as_ref())
            .ok_or_else(|| PipelineError::Config(format!("unknown stage id {}", id.0)))
    }

    /// Joins `upstream`'s output to `downstream`'s input through a FIFO of `capacity`.
    pub fn connect(
        &mut self,
        upstream: StageId,
        downstream: StageId,
        capacity: usize,
    ) -> Result<(), PipelineError> {
        if self.status != Status::Built {
            return Err(PipelineError::State(self.status));
        }
        if capacity == 0 {
            return Err(PipelineError::Config("edge capacity must be positive".into()));
        }
        let (up, down) = (self.stage(upstream)?, self.stage(downstream)?);
        if upstream == downstream {
            return Err(PipelineError::Topology {
                stage: up.name.clone(),
                side: "self-loop",
            });
        }
        if self.slots[upstream.0].successor.is_some() {
            return Err(PipelineError::Topology {
                stage: up.name.clone(),
                side: "successor",
            });
        }
        if self.slots[downstream.0].predecessor.is_some() {
            return Err(PipelineError::Topology {
                stage: down.name.clone(),
                side: "predecessor",
            });
        }
        if up.output.0 != down.input.0 {
            return Err(PipelineError::TypeMismatch {
                upstream: up.name.clone(),
                emits: up.output.1,
                downstream: down.name.clone(),
                consumes: down.input.1,
            });
        }
        // walking forward from downstream must not come back to upstream
        let mut cursor = Some(downstream.0);
        while let Some(i) = cursor {
            if i == upstream.0 {
                return Err(PipelineError::Topology {
                    stage: up.name.clone(),
                    side: "cycle",
                });
            }
            cursor = self.slots[i].successor.map(|(next, _)| next);
        }
        self.slots[upstream.0].successor = Some((downstream.0, capacity));
        self.slots[downstream.0].predecessor = Some(upstream.0);
        Ok(())
    }

    /// Stage indices head to tail, checking that they form one chain.
    fn order(&self) -> Result<Vec<usize>, PipelineError> {
        if self.slots.is_empty() {
            return Err(PipelineError::Config("pipeline has no stages".into()));
        }
        let heads: Vec<usize> = (0..self.slots.len())
            .filter(|&i| self.slots[i].predecessor.is_none())
            .collect();
        if heads.len() != 1 {
            return Err(PipelineError::Config(format!(
                "stages must form a single chain, found {} heads",
                heads.len()
            )));
        }
        let mut order = vec![heads[0]];
        while let Some((next, _)) = self.slots[*order.last().unwrap()].successor {
            order.push(next);
        }
        if order.len() != self.slots.len() {
            return Err(PipelineError::Config("stages must form a single chain".into()));
        }
        Ok(order)
    }

    /// Feeds `source` through every stage and delivers the tail's outputs to
    /// `sink` on the calling thread. Returns when every stage has terminated.
    pub fn run_with<I, O, S, F>(&mut self, source: S, mut sink: F) -> Result<RunStats, PipelineError>
    where
        I: Send + 'static,
        O: Send + 'static,
        S: IntoIterator<Item = I>,
        S::IntoIter: Send,
        F: FnMut(O),
    {
        if self.status != Status::Built {
            return Err(PipelineError::State(self.status));
        }
        let order = self.order()?;
        let head = self.slots[order[0]].stage.as_ref().unwrap();
        let tail = self.slots[*order.last().unwrap()].stage.as_ref().unwrap();
        if head.input.0 != TypeId::of::<I>() {
            return Err(PipelineError::TypeMismatch {
                upstream: "<source>".into(),
                emits: type_name::<I>(),
                downstream: head.name.clone(),
                consumes: head.input.1,
            });
        }
        if tail.output.0 != TypeId::of::<O>() {
            return Err(PipelineError::TypeMismatch {
                upstream: tail.name.clone(),
                emits: tail.output.1,
                downstream: "<sink>".into(),
                consumes: type_name::<O>(),
            });
        }
        self.status = Status::Running;

        let stages: Vec<(Stage, usize)> = order
            .iter()
            .map(|&i| {
                let capacity = self.slots[i].successor.map_or(DEFAULT_CAPACITY, |(_, c)| c);
                (self.slots[i].stage.take().unwrap(), capacity)
            })
            .collect();
        let names: Vec<String> = stages.iter().map(|(s, _)| s.name.clone()).collect();
        let counters: Vec<Arc<Counter>> = stages.iter().map(|_| Arc::default()).collect();
        let failure: Arc<Mutex<Option<(String, String)>>> = Arc::default();
        let source_count = AtomicU64::new(0);
        let mut sink_count = 0u64;

        let source = source.into_iter();
        let (source_tx, mut rx) = bounded::<Msg>(stages[0].1);
        thread::scope(|scope| {
            let source_count = &source_count;
            scope.spawn(move || feed(source, source_tx, source_count));
            for ((stage, capacity), counter) in stages.into_iter().zip(&counters) {
                let (tx, next_rx) = bounded::<Msg>(capacity);
                let input = std::mem::replace(&mut rx, next_rx);
                let counter = Arc::clone(counter);
                let failure = Arc::clone(&failure);
                thread::Builder::new()
                    .name(format!("stage-{}", stage.name))
                    .spawn_scoped(scope, move || run_stage(stage, input, tx, &counter, &failure))
                    .expect("spawn stage thread");
            }
            for msg in rx.iter() {
                match msg {
                    Msg::Item(element) => {
                        sink_count += 1;
                        sink(*element.downcast::<O>().expect("tail output type checked"));
                    }
                    Msg::End => break,
                }
            }
            drop(rx);
        });
        self.status = Status::Terminated;

        if let Some((stage, message)) = failure.lock().unwrap().take() {
            return Err(PipelineError::StageFailed { stage, message });
        }
        Ok(RunStats {
            source: source_count.load(Ordering::Acquire),
            stages: names
                .into_iter()
                .zip(&counters)
                .map(|(name, c)| StageCounts {
                    name,
                    input: c.input.load(Ordering::Acquire),
                    output: c.output.load(Ordering::Acquire),
                })
                .collect(),
            sink: sink_count,
        })
    }

    /// Like [`run_with`](Self::run_with), collecting the tail's outputs.
    pub fn run<I, O, S>(&mut self, source: S) -> Result<(Vec<O>, RunStats), PipelineError>
    where
        I: Send + 'static,
        O: Send + 'static,
        S: IntoIterator<Item = I>,
        S::IntoIter: Send,
    {
        let mut out = Vec::new();
        let stats = self.run_with(source, |o| out.push(o))?;
        Ok((out, stats))
    }
}

fn feed<I: Send + 'static>(source: impl Iterator<Item = I>, tx: Sender<Msg>, count: &AtomicU64) {
    for item in source {
        if tx.send(Msg::Item(Box::new(item))).is_err() {
            return;
        }
        count.fetch_add(1, Ordering::Release);
    }
    let _ = tx.send(Msg::End);
}

fn run_stage(
    mut stage: Stage,
    input: Receiver<Msg>,
    output: Sender<Msg>,
    counter: &Counter,
    failure: &Mutex<Option<(String, String)>>,
) {
    let mut out = Vec::new();
    let name = stage.name.clone();
    let report = |message: String| {
        let mut slot = failure.lock().unwrap();
        if slot.is_none() {
            *slot = Some((name.clone(), message));
        }
    };
    // dropping `input` and `output` on any early return unblocks neighbours
    for msg in input.iter() {
        match msg {
            Msg::Item(element) => {
                counter.input.fetch_add(1, Ordering::Release);
                let result = panic::catch_unwind(AssertUnwindSafe(|| (stage.transform)(element, &mut out)));
                match result {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => return report(e.to_string()),
                    Err(panic) => return report(panic_message(panic)),
                }
                for element in out.drain(..) {
                    if output.send(Msg::Item(element)).is_err() {
                        return;
                    }
                    counter.output.fetch_add(1, Ordering::Release);
                }
            }
            Msg::End => {
                if let Some(finish) = stage.finish.as_mut() {
                    match panic::catch_unwind(AssertUnwindSafe(|| finish(&mut out))) {
                        Ok(Ok(())) => {}
                        Ok(Err(e)) => return report(e.to_string()),
                        Err(panic) => return report(panic_message(panic)),
                    }
                    for element in out.drain(..) {
                        if output.send(Msg::Item(element)).is_err() {
                            return;
                        }
                        counter.output.fetch_add(1, Ordering::Release);
                    }
                }
                let _ = output.send(Msg::End);
                return;
            }
        }
    }
}

fn panic_message(panic: Box<dyn Any + Send>) -> String {
    match panic.downcast::<String>() {
        Ok(s) => format!("panicked: {s}"),
        Err(panic) => match panic.downcast::<&'static str>() {
            Ok(s) => format!("panicked: {s}"),
            Err(_) => "panicked".into(),
        },
    }
}
