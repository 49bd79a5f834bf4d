use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::policy::SchedulingPolicy;
use super::state::{SchedState, ThreadState};
use super::trace::{Cause, EventKind, ThreadId, TraceRecord, TraceSink};
use super::{PolicySettings, SimError};
use crate::allocator::{AllocError, AllocationPlan, AllocationStrategy, ContainerDemand};
use crate::costmodel::{
    migration_cost, warmth_after_eviction, warmth_after_run, warmup_loss, WarmthParams,
};
use crate::metrics::{MetricsCollector, MetricsReport, RunConfig};
use crate::predictor::DemandHistory;
use crate::topology::{CoreId, MachineTopology};
use crate::units::{CpuUnits, Nanos, NANOS_PER_SEC};
use crate::workload::{batch_size, derive_seed, ContainerSpec};

pub struct SimInputs<'a> {
    pub topology: &'a MachineTopology,
    pub containers: &'a [ContainerSpec],
    pub policy: &'a dyn SchedulingPolicy,
    pub allocator: &'a dyn AllocationStrategy,
    pub settings: &'a PolicySettings,
    pub cost: &'a WarmthParams,
    pub horizon_ns: Nanos,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    /// Measured CPU usage (CPUs) per container per simulated second.
    pub usage: Vec<Vec<f64>>,
    /// Time the last in-flight service drained.
    pub end_time_ns: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Arrival(usize),
    SegmentEnd { core: CoreId, generation: u64 },
    Balance,
    Second(u64),
}

#[derive(Debug, PartialEq, Eq)]
struct Pending {
    time: Nanos,
    seq: u64,
    event: Event,
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        other.time.cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Source {
    /// Piecewise-constant wakeup-event rate per ns, as `(start, rate)`.
    rate: Vec<(Nanos, f64)>,
    mean_service_ns: f64,
    fanout: f64,
    rng: ChaCha8Rng,
    idle: Vec<ThreadId>,
    cpu_done: Nanos,
    cpu_sampled: Nanos,
    history: DemandHistory,
    requested: f64,
    usage: Vec<f64>,
}

pub struct Simulation<'a> {
    topo: &'a MachineTopology,
    specs: &'a [ContainerSpec],
    policy: &'a dyn SchedulingPolicy,
    allocator: &'a dyn AllocationStrategy,
    settings: &'a PolicySettings,
    cost: &'a WarmthParams,
    horizon: Nanos,
    seed: u64,
    state: SchedState,
    sources: Vec<Source>,
    index: HashMap<String, usize>,
    events: BinaryHeap<Pending>,
    seq: u64,
    now: Nanos,
    runnable: usize,
    balance_pending: bool,
    cause: Option<Cause>,
    collector: MetricsCollector,
    sink: &'a mut dyn TraceSink,
}

/// Runs one simulation to completion, streaming every trace record to
/// `sink`.
pub fn run_simulation(
    inputs: &SimInputs<'_>,
    sink: &mut dyn TraceSink,
) -> Result<SimOutcome, SimError> {
    Simulation::new(inputs, sink)?.run()
}

fn describe(topo: &MachineTopology) -> String {
    let layout: Vec<Vec<usize>> = topo
        .sockets
        .iter()
        .map(|s| s.llc_domains.iter().map(|d| d.cores.len()).collect())
        .collect();
    let first = layout[0][0];
    let uniform = layout.iter().all(|s| s.len() == layout[0].len())
        && layout.iter().flatten().all(|&c| c == first);
    if uniform {
        format!("{}x{}x{}", layout.len(), layout[0].len(), first)
    } else {
        format!("{layout:?}")
    }
}

impl<'a> Simulation<'a> {
    pub fn new(inputs: &SimInputs<'a>, sink: &'a mut dyn TraceSink) -> Result<Self, SimError> {
        inputs.settings.validate()?;
        inputs
            .cost
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let topo = inputs.topology;
        if let Some(&c) = inputs
            .settings
            .reserved_cores
            .iter()
            .find(|&&c| c >= topo.total_cores)
        {
            return Err(SimError::Config(format!("reserved core {c} outside the machine")));
        }
        let seconds = inputs.horizon_ns.div_ceil(NANOS_PER_SEC) as usize;
        let mut sources = Vec::with_capacity(inputs.containers.len());
        let mut index = HashMap::new();
        for (i, spec) in inputs.containers.iter().enumerate() {
            if spec.runnable_cpuset.is_empty() {
                return Err(SimError::EmptyCpuset { container: i as u32 });
            }
            spec.validate(topo)
                .map_err(|e| SimError::Config(e.to_string()))?;
            if index.insert(spec.container_id.clone(), i).is_some() {
                return Err(SimError::Config(format!(
                    "duplicate container id `{}`",
                    spec.container_id
                )));
            }
            let mean_service_ns = spec.process.mean_service_us * 1_000.0;
            let history =
                DemandHistory::new(inputs.settings.window_seconds, inputs.settings.percentile)
                    .map_err(|e| SimError::Config(e.to_string()))?;
            sources.push(Source {
                rate: spec
                    .level_segments(inputs.horizon_ns)
                    .into_iter()
                    .map(|(start, level)| (start, level / (mean_service_ns * spec.process.mean_fanout)))
                    .collect(),
                mean_service_ns,
                fanout: spec.process.mean_fanout,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(inputs.seed, i as u64)),
                idle: Vec::new(),
                cpu_done: 0,
                cpu_sampled: 0,
                history,
                requested: spec.requested_limit,
                usage: Vec::with_capacity(seconds),
            });
        }
        let cpusets: Vec<Vec<CoreId>> = inputs
            .containers
            .iter()
            .map(|c| c.runnable_cpuset.clone())
            .collect();
        Ok(Self {
            topo,
            specs: inputs.containers,
            policy: inputs.policy,
            allocator: inputs.allocator,
            settings: inputs.settings,
            cost: inputs.cost,
            horizon: inputs.horizon_ns,
            seed: inputs.seed,
            state: SchedState::new(topo.total_cores, &cpusets),
            sources,
            index,
            events: BinaryHeap::new(),
            seq: 0,
            now: 0,
            runnable: 0,
            balance_pending: false,
            cause: None,
            collector: MetricsCollector::new(),
            sink,
        })
    }

    pub fn state(&self) -> &SchedState {
        &self.state
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    fn push(&mut self, time: Nanos, event: Event) {
        self.seq += 1;
        self.events.push(Pending {
            time,
            seq: self.seq,
            event,
        });
    }

    fn emit(&mut self, mut rec: TraceRecord) {
        if rec.cause.is_none() {
            rec.cause = self.cause;
        }
        self.collector.record(&rec);
        self.sink.record(&rec);
    }

    fn policy_error(&self, message: String) -> SimError {
        SimError::Policy {
            policy: self.policy.name().to_string(),
            message,
        }
    }

    /// Replaces preferred masks according to `plan`. Masks are intersected
    /// with each container's cpuset; infeasible assignments clear the mask.
    /// A `mask_update` record is emitted only for masks that changed.
    pub fn apply_assignment(&mut self, plan: &AllocationPlan) -> Result<(), SimError> {
        let mut targets = Vec::with_capacity(plan.assignments.len());
        for a in &plan.assignments {
            let i = *self
                .index
                .get(&a.container_id)
                .ok_or_else(|| SimError::UnknownContainer(a.container_id.clone()))?;
            targets.push(i);
        }
        for (a, i) in plan.assignments.iter().zip(targets) {
            let cores: &[CoreId] = if a.feasible { &a.preferred_cores } else { &[] };
            if self.state.set_mask(i, cores) {
                let mut rec = TraceRecord::new(self.now, EventKind::MaskUpdate);
                rec.container = Some(i as u32);
                rec.mask = Some(self.state.containers[i].mask.clone());
                self.emit(rec);
            }
        }
        Ok(())
    }

    fn control(&mut self) -> Result<(), SimError> {
        let mut demands = Vec::with_capacity(self.specs.len());
        for (spec, src) in self.specs.iter().zip(&self.sources) {
            let d = if src.history.is_empty() {
                src.requested
            } else {
                src.history.demand().map_err(|source| SimError::Predictor {
                    time_ns: self.now,
                    source,
                })?
            };
            demands.push(ContainerDemand::new(
                spec.container_id.clone(),
                CpuUnits::from_f64(d),
            ));
        }
        self.emit(TraceRecord::new(self.now, EventKind::ControlTick));
        match self
            .allocator
            .allocate(&demands, self.topo, &self.settings.reserved_cores)
        {
            Ok(plan) => self.apply_assignment(&plan),
            // nothing to size: keep the current masks
            Err(AllocError::ZeroTotalDemand) => Ok(()),
            Err(source) => Err(SimError::Allocation {
                time_ns: self.now,
                source,
            }),
        }
    }

    /// Next wakeup of container `c` after `after`, integrating a unit
    /// exponential draw against the piecewise-constant rate.
    fn schedule_arrival(&mut self, c: usize, after: Nanos) {
        let horizon = self.horizon;
        let src = &mut self.sources[c];
        let mut mass: f64 = src.rng.sample(Exp1);
        let mut t = after as f64;
        let mut i = src.rate.partition_point(|&(start, _)| start <= after).saturating_sub(1);
        while i < src.rate.len() {
            let rate = src.rate[i].1;
            let end = src.rate.get(i + 1).map_or(horizon, |&(s, _)| s) as f64;
            if rate > 0.0 && end > t {
                let avail = rate * (end - t);
                if avail >= mass {
                    let at = (t + mass / rate).ceil() as Nanos;
                    if at < horizon {
                        self.push(at.max(after), Event::Arrival(c));
                    }
                    return;
                }
                mass -= avail;
            }
            t = t.max(end);
            i += 1;
        }
    }

    /// A wakeup event: releases a batch of threads, each with its own
    /// exponential CPU-time budget.
    fn arrival(&mut self, c: usize) -> Result<(), SimError> {
        let src = &mut self.sources[c];
        let batch = batch_size(src.fanout, &mut src.rng);
        for _ in 0..batch {
            let src = &mut self.sources[c];
            let e: f64 = src.rng.sample(Exp1);
            let budget = (e * src.mean_service_ns).round().max(1.0) as Nanos;
            let t = match src.idle.pop() {
                Some(t) => t,
                None => self.state.spawn_thread(c as u32),
            };
            let th = &mut self.state.threads[t];
            th.remaining_ns = budget;
            th.budget_ns = budget;
            th.debt = 0.0;
            th.loss = 0.0;
            self.runnable += 1;
            self.wake(t)?;
        }
        self.schedule_arrival(c, self.now);
        Ok(())
    }

    fn wake(&mut self, t: ThreadId) -> Result<(), SimError> {
        let placement = self.policy.select_core(&self.state, t)?;
        let core = placement.core();
        let container = self.state.container_of(t);
        if core >= self.state.core_count() || !container.in_cpuset(core) {
            return Err(self.policy_error(format!("wakeup of thread {t} onto core {core} outside its cpuset")));
        }
        if !placement.is_queued() && !self.state.is_idle(core) {
            return Err(self.policy_error(format!("wakeup of thread {t} onto busy core {core}")));
        }
        let mut rec = TraceRecord::new(self.now, EventKind::Wakeup)
            .thread(t, self.state.threads[t].container)
            .core(core);
        rec.preferred = Some(container.in_mask(core));
        rec.queued = Some(placement.is_queued());
        self.emit(rec);
        if !self.balance_pending {
            let interval = self.settings.load_balance_interval_ns();
            self.balance_pending = true;
            self.push((self.now / interval + 1) * interval, Event::Balance);
        }
        if placement.is_queued() {
            self.state.place_queued(t, core, self.now);
            if self.state.is_idle(core) {
                self.dispatch_next(core)?;
            }
        } else {
            self.dispatch(t, core);
        }
        Ok(())
    }

    fn dispatch(&mut self, t: ThreadId, core: CoreId) {
        let now = self.now;
        let last = self.state.threads[t].last_core;
        let (migrated, crossed) = match last {
            Some(l) if l != core => (true, self.topo.domain_index(l) != self.topo.domain_index(core)),
            _ => (false, false),
        };
        if let (true, Some(l)) = (migrated, last) {
            self.state.threads[t].debt += migration_cost(l, core, self.topo, self.cost);
        }
        self.state.place_running(t, core);
        let cs = &mut self.state.cores[core];
        cs.segment_start = now;
        cs.generation += 1;
        let generation = cs.generation;
        let run = self.state.threads[t]
            .remaining_ns
            .min(self.settings.time_slice_ns());
        self.push(now + run, Event::SegmentEnd { core, generation });

        let container = self.state.threads[t].container;
        let mut rec = TraceRecord::new(now, EventKind::Dispatch)
            .thread(t, container)
            .core(core);
        rec.preferred = Some(self.state.containers[container as usize].in_mask(core));
        rec.migrated = Some(migrated);
        rec.crossed_llc = Some(crossed);
        if migrated {
            rec.from_core = last;
        }
        self.emit(rec);
    }

    /// Closes the running segment on `core`: charges CPU time, warmup loss
    /// and any migration debt, and updates warmth. The thread stays the
    /// core's occupant.
    fn end_segment(&mut self, core: CoreId) -> ThreadId {
        let now = self.now;
        let cost = self.cost;
        let cs = &mut self.state.cores[core];
        let t = cs.occupant.expect("segment without occupant");
        let dt = now - cs.segment_start;
        cs.segment_start = now;
        let th = &mut self.state.threads[t];
        let c = th.container as usize;
        if dt > 0 {
            let w = cs.warmth[c];
            let mut loss = warmup_loss(w, dt, cost);
            let retired = (cost.hot_speed * dt as f64 - loss).max(0.0);
            let paid = th.debt.min(retired);
            th.debt -= paid;
            loss += paid;
            th.loss += loss;
            cs.warmth[c] = warmth_after_run(w, dt, cost);
            for (k, wk) in cs.warmth.iter_mut().enumerate() {
                if k != c && wk.value() > 0.0 {
                    *wk = warmth_after_eviction(*wk, dt, cost);
                }
            }
        }
        th.remaining_ns -= dt;
        th.last_core = Some(core);
        self.sources[c].cpu_done += dt;
        t
    }

    fn vacate(&mut self, core: CoreId) {
        let cs = &mut self.state.cores[core];
        cs.occupant = None;
        cs.generation += 1;
    }

    fn segment_end(&mut self, core: CoreId, generation: u64) -> Result<(), SimError> {
        let cs = &self.state.cores[core];
        if cs.generation != generation || cs.occupant.is_none() {
            return Ok(());
        }
        let t = self.end_segment(core);
        let container = self.state.threads[t].container;
        if self.state.threads[t].remaining_ns == 0 {
            self.vacate(core);
            let th = &mut self.state.threads[t];
            th.state = ThreadState::Blocked;
            th.current_core = None;
            let mut rec = TraceRecord::new(self.now, EventKind::Complete)
                .thread(t, container)
                .core(core);
            rec.budget_ns = Some(th.budget_ns);
            rec.loss = Some(th.loss);
            self.emit(rec);
            self.runnable -= 1;
            self.sources[container as usize].idle.push(t);
            self.dispatch_next(core)
        } else if !self.state.cores[core].run_queue.is_empty() {
            self.vacate(core);
            self.emit(
                TraceRecord::new(self.now, EventKind::Preempt)
                    .thread(t, container)
                    .core(core),
            );
            self.state.place_queued(t, core, self.now);
            self.dispatch_next(core)
        } else {
            let cs = &mut self.state.cores[core];
            cs.generation += 1;
            let generation = cs.generation;
            let run = self.state.threads[t]
                .remaining_ns
                .min(self.settings.time_slice_ns());
            self.push(self.now + run, Event::SegmentEnd { core, generation });
            Ok(())
        }
    }

    /// Gives an idle `core` its next thread: the head of its own run queue,
    /// else whatever the policy pulls from elsewhere.
    fn dispatch_next(&mut self, core: CoreId) -> Result<(), SimError> {
        if let Some(t) = self.state.cores[core].run_queue.pop_front() {
            self.dispatch(t, core);
            return Ok(());
        }
        let Some(t) = self.policy.pull_for_idle(&self.state, core) else {
            return Ok(());
        };
        let th = &self.state.threads[t];
        let from = match (th.state, th.current_core) {
            (ThreadState::Queued, Some(from)) if from != core => from,
            _ => return Err(self.policy_error(format!("idle pull of non-queued thread {t}"))),
        };
        if !self.state.container_of(t).in_cpuset(core) {
            return Err(self.policy_error(format!("idle pull of thread {t} outside its cpuset")));
        }
        self.state.unqueue(t);
        let mut rec = self.migrate_record(t, from, core);
        rec.queued = Some(true);
        if rec.cause.is_none() && self.cause.is_none() {
            rec.cause = Some(Cause::Idle);
        }
        self.emit(rec);
        self.dispatch(t, core);
        Ok(())
    }

    fn migrate_record(&self, t: ThreadId, from: CoreId, to: CoreId) -> TraceRecord {
        let container = self.state.threads[t].container;
        let mut rec = TraceRecord::new(self.now, EventKind::Migrate)
            .thread(t, container)
            .core(to);
        rec.from_core = Some(from);
        rec.preferred = Some(self.state.containers[container as usize].in_mask(to));
        rec.crossed_llc = Some(self.topo.domain_index(from) != self.topo.domain_index(to));
        rec
    }

    fn balance(&mut self) -> Result<(), SimError> {
        self.balance_pending = false;
        self.emit(TraceRecord::new(self.now, EventKind::BalanceTick));
        self.cause = Some(Cause::Balance);
        let plan = self.policy.plan_balance(&self.state);
        let mut vacated = Vec::new();
        for m in plan {
            let t = m.thread;
            let th = &self.state.threads[t];
            if th.current_core != Some(m.from) || th.state == ThreadState::Blocked || m.from == m.to
            {
                return Err(self.policy_error(format!("stale migration {m:?}")));
            }
            if !self.state.container_of(t).in_cpuset(m.to) {
                return Err(self.policy_error(format!("migration {m:?} outside the cpuset")));
            }
            let was_queued = th.state == ThreadState::Queued;
            let enqueued = th.enqueue_time;
            let mut rec = self.migrate_record(t, m.from, m.to);
            rec.queued = Some(was_queued);
            if was_queued {
                self.state.unqueue(t);
            } else {
                self.end_segment(m.from);
                self.vacate(m.from);
                vacated.push(m.from);
            }
            self.emit(rec);
            if self.state.is_idle(m.to) {
                self.dispatch(t, m.to);
            } else {
                self.state.place_queued(t, m.to, self.now);
                if was_queued {
                    self.state.threads[t].enqueue_time = enqueued;
                }
            }
        }
        for core in vacated {
            if self.state.is_idle(core) {
                self.dispatch_next(core)?;
            }
        }
        self.cause = None;
        let next = self.now + self.settings.load_balance_interval_ns();
        if next < self.horizon || self.runnable > 0 {
            self.balance_pending = true;
            self.push(next, Event::Balance);
        }
        Ok(())
    }

    fn second(&mut self, k: u64) -> Result<(), SimError> {
        let now = self.now;
        let mut partial = vec![0 as Nanos; self.sources.len()];
        for cs in &self.state.cores {
            if let Some(t) = cs.occupant {
                partial[self.state.threads[t].container as usize] += now - cs.segment_start;
            }
        }
        for (src, part) in self.sources.iter_mut().zip(partial) {
            let total = src.cpu_done + part;
            let used = (total - src.cpu_sampled) as f64 / NANOS_PER_SEC as f64;
            src.cpu_sampled = total;
            src.usage.push(used);
            src.history
                .record_sample(used)
                .map_err(|source| SimError::Predictor { time_ns: now, source })?;
        }
        if k.is_multiple_of(self.settings.control_interval_s) && now < self.horizon {
            self.control()?;
        }
        let next = (k + 1) * NANOS_PER_SEC;
        if next <= self.horizon {
            self.push(next, Event::Second(k + 1));
        }
        Ok(())
    }

    /// Runs until the horizon has passed and every admitted service has
    /// finished.
    pub fn run(mut self) -> Result<SimOutcome, SimError> {
        self.control()?;
        for c in 0..self.sources.len() {
            self.schedule_arrival(c, 0);
        }
        let interval = self.settings.load_balance_interval_ns();
        if interval < self.horizon {
            self.balance_pending = true;
            self.push(interval, Event::Balance);
        }
        if NANOS_PER_SEC <= self.horizon {
            self.push(NANOS_PER_SEC, Event::Second(1));
        }
        while let Some(p) = self.events.pop() {
            self.now = p.time;
            match p.event {
                Event::Arrival(c) => self.arrival(c)?,
                Event::SegmentEnd { core, generation } => self.segment_end(core, generation)?,
                Event::Balance => self.balance()?,
                Event::Second(k) => self.second(k)?,
            }
        }
        debug_assert_eq!(self.runnable, 0);
        let ids: Vec<String> = self.specs.iter().map(|s| s.container_id.clone()).collect();
        let config = RunConfig {
            policy: self.policy.name().to_string(),
            allocator: self.allocator.name().to_string(),
            seed: self.seed,
            horizon_ns: self.horizon,
            topology: describe(self.topo),
            total_cores: self.topo.total_cores,
            containers: ids.clone(),
            settings: self.settings.clone(),
            cost: *self.cost,
        };
        Ok(SimOutcome {
            report: self.collector.finish(config, &ids),
            usage: self.sources.into_iter().map(|s| s.usage).collect(),
            end_time_ns: self.now,
        })
    }
}
