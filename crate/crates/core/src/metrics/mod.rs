//! Evaluation metrics computed from execution traces.
//!
//! [`MetricsCollector`] is a [`TraceSink`]: the simulator feeds it every
//! record it emits, so a report is always a pure function of the trace.

mod audit;
mod compare;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::WarmthParams;
use crate::predictor::nearest_rank;
use crate::scheduler::trace::{EventKind, TraceRecord, TraceSink};
use crate::scheduler::PolicySettings;
use crate::units::{Nanos, NANOS_PER_MICRO};

pub use audit::{AuditReport, TraceAudit};
pub use compare::{
    aggregate_comparisons, compare_reports, ComparisonAggregate, DeltaSummary, MetricDelta,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace has no wakeups")]
    NoWakeups,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
}

/// Settings a run was produced with, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: String,
    pub allocator: String,
    pub seed: u64,
    pub horizon_ns: Nanos,
    pub topology: String,
    pub total_cores: usize,
    pub containers: Vec<String>,
    pub settings: PolicySettings,
    pub cost: WarmthParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetrics {
    pub container_id: String,
    pub cpu_time_total_ns: Nanos,
    pub cpu_time_preferred_ns: Nanos,
    pub pcr: Option<f64>,
    /// Useful instruction-units retired by completed services.
    pub completed_work: f64,
    pub wakeup_count: u64,
    pub completions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub p50_us: Option<f64>,
    pub p90_us: Option<f64>,
    pub p99_us: Option<f64>,
    pub max_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    /// Completed work / (cores * horizon).
    pub throughput_per_cpu: f64,
    pub completed_work: f64,
    pub busy_time_ns: Nanos,
    pub utilization: f64,
    pub aggregate_pcr: Option<f64>,
    pub sched_latency: LatencySummary,
    /// Dispatches onto a core other than the one the thread last ran on.
    pub migrations_total: u64,
    pub migrations_cross_llc: u64,
    /// Moves made by the balancer or by idle pulls.
    pub balancer_migrations: u64,
    pub context_switches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: RunConfig,
    pub machine: MachineMetrics,
    pub containers: Vec<ContainerMetrics>,
}

#[derive(Debug, Default, Clone)]
struct ContainerAcc {
    cpu_total: Nanos,
    cpu_preferred: Nanos,
    budget_done: u128,
    loss: f64,
    wakeups: u64,
    completions: u64,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    container: usize,
    start: Nanos,
    preferred: bool,
}

#[derive(Debug, Default, Clone)]
pub struct MetricsCollector {
    containers: Vec<ContainerAcc>,
    running: Vec<Option<Segment>>,
    core_busy: Vec<Nanos>,
    woken_at: Vec<Option<Nanos>>,
    latencies: Vec<Nanos>,
    migrations: u64,
    cross_llc: u64,
    balancer_migrations: u64,
    dispatches: u64,
}

fn slot<T: Default + Clone>(v: &mut Vec<T>, i: usize) -> &mut T {
    if v.len() <= i {
        v.resize(i + 1, T::default());
    }
    &mut v[i]
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    fn close(&mut self, core: usize, now: Nanos) {
        if let Some(seg) = self.running.get_mut(core).and_then(Option::take) {
            let dt = now.saturating_sub(seg.start);
            let acc = slot(&mut self.containers, seg.container);
            acc.cpu_total += dt;
            if seg.preferred {
                acc.cpu_preferred += dt;
            }
            *slot(&mut self.core_busy, core) += dt;
        }
    }

    /// Scheduling latencies (wakeup to first dispatch) seen so far.
    pub fn latencies(&self) -> &[Nanos] {
        &self.latencies
    }

    pub fn pcr(&self, container: usize) -> Option<f64> {
        let acc = self.containers.get(container)?;
        (acc.cpu_total > 0).then(|| acc.cpu_preferred as f64 / acc.cpu_total as f64)
    }

    pub fn cpu_time(&self, container: usize) -> Nanos {
        self.containers.get(container).map_or(0, |a| a.cpu_total)
    }

    pub fn core_busy_time(&self) -> Nanos {
        self.core_busy.iter().sum()
    }

    /// Completed work per container: `hot_speed * CPU time of finished
    /// services - losses`. Exact integer CPU time keeps this identical
    /// across runs whenever losses are zero.
    fn completed_work(acc: &ContainerAcc, hot_speed: f64) -> f64 {
        hot_speed * acc.budget_done as f64 - acc.loss
    }

    pub fn finish(
        &self,
        config: RunConfig,
        container_ids: &[String],
    ) -> MetricsReport {
        let hot = config.cost.hot_speed;
        let containers: Vec<ContainerMetrics> = container_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let acc = self.containers.get(i).cloned().unwrap_or_default();
                ContainerMetrics {
                    container_id: id.clone(),
                    cpu_time_total_ns: acc.cpu_total,
                    cpu_time_preferred_ns: acc.cpu_preferred,
                    pcr: self.pcr(i),
                    completed_work: Self::completed_work(&acc, hot),
                    wakeup_count: acc.wakeups,
                    completions: acc.completions,
                }
            })
            .collect();

        let budget: u128 = self.containers.iter().map(|a| a.budget_done).sum();
        let loss: f64 = self.containers.iter().map(|a| a.loss).sum();
        let completed_work = hot * budget as f64 - loss;
        let capacity = config.total_cores as f64 * config.horizon_ns as f64;
        let busy = self.core_busy_time();
        let total: Nanos = self.containers.iter().map(|a| a.cpu_total).sum();
        let preferred: Nanos = self.containers.iter().map(|a| a.cpu_preferred).sum();

        let mut sorted = self.latencies.clone();
        sorted.sort_unstable();
        let pick = |p: f64| {
            (!sorted.is_empty())
                .then(|| sorted[nearest_rank(p, sorted.len()) - 1] as f64 / NANOS_PER_MICRO as f64)
        };
        let sched_latency = LatencySummary {
            samples: sorted.len() as u64,
            p50_us: pick(50.0),
            p90_us: pick(90.0),
            p99_us: pick(99.0),
            max_us: sorted.last().map(|&v| v as f64 / NANOS_PER_MICRO as f64),
        };

        MetricsReport {
            machine: MachineMetrics {
                throughput_per_cpu: if capacity > 0.0 { completed_work / capacity } else { 0.0 },
                completed_work,
                busy_time_ns: busy,
                utilization: if capacity > 0.0 { busy as f64 / capacity } else { 0.0 },
                aggregate_pcr: (total > 0).then(|| preferred as f64 / total as f64),
                sched_latency,
                migrations_total: self.migrations,
                migrations_cross_llc: self.cross_llc,
                balancer_migrations: self.balancer_migrations,
                context_switches: self.dispatches,
            },
            containers,
            config,
        }
    }
}

impl TraceSink for MetricsCollector {
    fn record(&mut self, rec: &TraceRecord) {
        let t = rec.time_ns;
        match rec.kind {
            EventKind::Wakeup => {
                if let Some(c) = rec.container {
                    slot(&mut self.containers, c as usize).wakeups += 1;
                }
                if let Some(th) = rec.thread {
                    *slot(&mut self.woken_at, th) = Some(t);
                }
            }
            EventKind::Dispatch => {
                let (Some(th), Some(c), Some(core)) = (rec.thread, rec.container, rec.core) else {
                    return;
                };
                self.dispatches += 1;
                if rec.migrated == Some(true) {
                    self.migrations += 1;
                    if rec.crossed_llc == Some(true) {
                        self.cross_llc += 1;
                    }
                }
                if let Some(woke) = slot(&mut self.woken_at, th).take() {
                    self.latencies.push(t - woke);
                }
                self.close(core, t);
                *slot(&mut self.running, core) = Some(Segment {
                    container: c as usize,
                    start: t,
                    preferred: rec.preferred == Some(true),
                });
            }
            EventKind::Preempt => {
                if let Some(core) = rec.core {
                    self.close(core, t);
                }
            }
            EventKind::Complete => {
                if let Some(core) = rec.core {
                    self.close(core, t);
                }
                if let Some(c) = rec.container {
                    let acc = slot(&mut self.containers, c as usize);
                    acc.completions += 1;
                    acc.budget_done += rec.budget_ns.unwrap_or(0) as u128;
                    acc.loss += rec.loss.unwrap_or(0.0);
                }
            }
            EventKind::Migrate => {
                self.balancer_migrations += 1;
                if rec.queued == Some(false) {
                    if let Some(from) = rec.from_core {
                        self.close(from, t);
                    }
                }
            }
            EventKind::BalanceTick | EventKind::ControlTick | EventKind::MaskUpdate => {}
        }
    }
}

/// Preferred-core residency of `container` over a complete trace: execution
/// time that began on a core inside the then-current mask, over all
/// execution time. `None` when the container never ran.
pub fn compute_pcr(trace: &[TraceRecord], container: u32) -> Option<f64> {
    let mut c = MetricsCollector::new();
    for r in trace {
        c.record(r);
    }
    c.pcr(container as usize)
}

/// Nearest-rank percentile of wakeup-to-dispatch latency.
pub fn sched_latency_percentile(trace: &[TraceRecord], p: f64) -> Result<Nanos, MetricsError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut c = MetricsCollector::new();
    for r in trace {
        c.record(r);
    }
    let mut lat = c.latencies().to_vec();
    if lat.is_empty() {
        return Err(MetricsError::NoWakeups);
    }
    lat.sort_unstable();
    Ok(lat[nearest_rank(p, lat.len()) - 1])
}
