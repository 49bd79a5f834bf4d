//! Line-delimited execution trace.
//!
//! One JSON object per line. `container` is the container's index in the
//! run's container list (reports echo the list, index order). Optional fields
//! are omitted when they do not apply to the event kind.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::topology::CoreId;
use crate::units::Nanos;

pub type ThreadId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Wakeup,
    Dispatch,
    Preempt,
    Migrate,
    Complete,
    BalanceTick,
    ControlTick,
    MaskUpdate,
}

/// Why a record was produced outside the normal wakeup/completion flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    /// Emitted while applying a periodic load-balance tick.
    Balance,
    /// An idle core pulling queued work outside a tick.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ns: Nanos,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread: Option<ThreadId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core: Option<CoreId>,
    /// Source core of a migration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_core: Option<CoreId>,
    /// Target core lies in the container's preferred mask at this instant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred: Option<bool>,
    /// Dispatch: the thread last ran on a different core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migrated: Option<bool>,
    /// Dispatch/migrate: the move crossed an LLC domain boundary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossed_llc: Option<bool>,
    /// Wakeup: the thread had to wait in a run queue. Migrate: the thread
    /// was queued (not running) when moved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queued: Option<bool>,
    /// Mask update: the container's new preferred cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<CoreId>>,
    /// Complete: CPU time of the finished service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_ns: Option<Nanos>,
    /// Complete: instruction-units lost to cold execution and penalties.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<Cause>,
}

impl TraceRecord {
    pub fn new(time_ns: Nanos, kind: EventKind) -> Self {
        Self {
            time_ns,
            kind,
            thread: None,
            container: None,
            core: None,
            from_core: None,
            preferred: None,
            migrated: None,
            crossed_llc: None,
            queued: None,
            mask: None,
            budget_ns: None,
            loss: None,
            cause: None,
        }
    }

    pub fn thread(mut self, thread: ThreadId, container: u32) -> Self {
        self.thread = Some(thread);
        self.container = Some(container);
        self
    }

    pub fn core(mut self, core: CoreId) -> Self {
        self.core = Some(core);
        self
    }
}

pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord);

    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: &TraceRecord) {}
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct VecSink {
    pub records: Vec<TraceRecord>,
}

impl TraceSink for VecSink {
    fn record(&mut self, rec: &TraceRecord) {
        self.records.push(rec.clone());
    }
}

/// Writes JSON lines. The first write error is kept and reported by
/// [`TraceSink::finish`].
pub struct JsonlSink<W: Write> {
    out: W,
    error: Option<io::Error>,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for JsonlSink<W> {
    fn record(&mut self, rec: &TraceRecord) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, rec)
            .map_err(io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    fn finish(&mut self) -> io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()
    }
}

/// Forwards to several sinks in order.
#[derive(Default)]
pub struct FanOut<'a> {
    sinks: Vec<&'a mut dyn TraceSink>,
}

impl<'a> FanOut<'a> {
    pub fn new() -> Self {
        Self { sinks: Vec::new() }
    }

    pub fn with(mut self, sink: &'a mut dyn TraceSink) -> Self {
        self.sinks.push(sink);
        self
    }
}

impl TraceSink for FanOut<'_> {
    fn record(&mut self, rec: &TraceRecord) {
        for s in &mut self.sinks {
            s.record(rec);
        }
    }

    fn finish(&mut self) -> io::Result<()> {
        for s in &mut self.sinks {
            s.finish()?;
        }
        Ok(())
    }
}

/// Parses a JSON-lines trace.
pub fn read_trace(input: impl io::BufRead) -> io::Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io::Error::from)?);
    }
    Ok(out)
}
