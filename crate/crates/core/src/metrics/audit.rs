//! Replays a trace and checks the scheduler's placement invariants.

use serde::{Deserialize, Serialize};

use crate::scheduler::trace::{Cause, EventKind, ThreadId, TraceRecord, TraceSink};
use crate::topology::CoreId;
use crate::units::Nanos;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Wakeups that queued although an idle core of the cpuset existed.
    pub queued_with_idle_wakeups: u64,
    /// Longest stretch during which one core sat idle while a queued thread
    /// could have run on it. A thread queued on one of its preferred cores
    /// may only run on preferred cores; any other queued thread may run
    /// anywhere in its cpuset.
    pub max_queued_while_idle_ns: Nanos,
    /// Such stretches longer than one load-balance interval.
    pub queued_while_idle_overruns: u64,
    /// As `max_queued_while_idle_ns`, but any cpuset core counts, pinned or
    /// not.
    pub cpuset_max_queued_while_idle_ns: Nanos,
    pub cpuset_queued_while_idle_overruns: u64,
    /// Dispatches or wakeups outside the thread's cpuset.
    pub illegal_placements: u64,
    /// Queued threads moved from a preferred core to a non-preferred core.
    pub pinning_violations: u64,
    /// (tick, idle preferred core) pairs with a displaced thread available
    /// for that core.
    pub attraction_opportunities: u64,
    /// Opportunities the tick left unanswered.
    pub attraction_violations: u64,
    pub balance_ticks: u64,
    pub records: u64,
}

impl AuditReport {
    /// Work-conservation invariants hold.
    pub fn work_conserving(&self, balance_interval_ns: Nanos) -> bool {
        self.queued_with_idle_wakeups == 0
            && self.max_queued_while_idle_ns <= balance_interval_ns
            && self.illegal_placements == 0
    }

    /// Soft-affinity invariants hold.
    pub fn pinning_and_attraction(&self) -> bool {
        self.pinning_violations == 0 && self.attraction_violations == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Blocked,
    Queued(CoreId),
    Running(CoreId),
}

#[derive(Debug)]
struct Tick {
    idle: Vec<CoreId>,
    /// Displaced threads at tick start with their container.
    displaced: Vec<(ThreadId, usize)>,
    moved: Vec<ThreadId>,
    /// Cores that received a thread of a container preferring them.
    attracted: Vec<CoreId>,
}

/// Streaming invariant checker; feed it records in trace order.
#[derive(Debug)]
pub struct TraceAudit {
    cpusets: Vec<Vec<bool>>,
    masks: Vec<Vec<bool>>,
    interval: Nanos,
    occupant: Vec<Option<ThreadId>>,
    pos: Vec<Pos>,
    owner: Vec<usize>,
    /// Whether a queued thread sits on one of its preferred cores.
    pinned: Vec<bool>,
    /// Per container: queued threads that are not pinned, and pinned ones.
    free: Vec<usize>,
    held: Vec<usize>,
    episode: Vec<Option<Nanos>>,
    cpuset_episode: Vec<Option<Nanos>>,
    last_time: Option<Nanos>,
    tick: Option<Tick>,
    report: AuditReport,
}

impl TraceAudit {
    pub fn new(total_cores: usize, cpusets: &[Vec<CoreId>], balance_interval_ns: Nanos) -> Self {
        let bits = |set: &[CoreId]| {
            let mut b = vec![false; total_cores];
            for &c in set {
                if c < total_cores {
                    b[c] = true;
                }
            }
            b
        };
        Self {
            cpusets: cpusets.iter().map(|s| bits(s)).collect(),
            masks: vec![vec![false; total_cores]; cpusets.len()],
            interval: balance_interval_ns,
            occupant: vec![None; total_cores],
            pos: Vec::new(),
            owner: Vec::new(),
            pinned: Vec::new(),
            free: vec![0; cpusets.len()],
            held: vec![0; cpusets.len()],
            episode: vec![None; total_cores],
            cpuset_episode: vec![None; total_cores],
            last_time: None,
            tick: None,
            report: AuditReport::default(),
        }
    }

    pub fn report(&self) -> &AuditReport {
        &self.report
    }

    /// Closes open stretches at `end` and returns the findings.
    pub fn finish_at(mut self, end: Nanos) -> AuditReport {
        self.close_tick();
        self.settle(end);
        for c in 0..self.episode.len() {
            if let Some(start) = self.episode[c].take() {
                self.close_episode(start, end, false);
            }
            if let Some(start) = self.cpuset_episode[c].take() {
                self.close_episode(start, end, true);
            }
        }
        self.report
    }

    fn touch(&mut self, t: ThreadId, container: usize) {
        if self.pos.len() <= t {
            self.pos.resize(t + 1, Pos::Blocked);
            self.owner.resize(t + 1, 0);
            self.pinned.resize(t + 1, false);
        }
        self.owner[t] = container;
    }

    fn leave(&mut self, t: ThreadId) {
        match self.pos[t] {
            Pos::Queued(_) => self.count(t, -1),
            Pos::Running(c) if self.occupant[c] == Some(t) => self.occupant[c] = None,
            _ => {}
        }
        self.pos[t] = Pos::Blocked;
    }

    fn enqueue(&mut self, t: ThreadId, core: CoreId) {
        self.leave(t);
        self.pos[t] = Pos::Queued(core);
        self.pinned[t] = self.masks[self.owner[t]][core];
        self.count(t, 1);
    }

    fn count(&mut self, t: ThreadId, delta: isize) {
        let k = self.owner[t];
        let n = if self.pinned[t] { &mut self.held[k] } else { &mut self.free[k] };
        *n = n.checked_add_signed(delta).expect("queue count underflow");
    }

    /// Re-evaluates pinning of container `k`'s queued threads after its
    /// mask changed.
    fn repin(&mut self, k: usize) {
        for t in 0..self.pos.len() {
            if let (Pos::Queued(core), true) = (self.pos[t], self.owner[t] == k) {
                self.count(t, -1);
                self.pinned[t] = self.masks[k][core];
                self.count(t, 1);
            }
        }
    }

    /// `(eligible, cpuset)`: whether idle `core` could run queued work under
    /// pinning, and whether any queued thread's cpuset covers it.
    fn idle_with_work(&self, core: CoreId) -> (bool, bool) {
        if self.occupant[core].is_some() {
            return (false, false);
        }
        let mut any = false;
        for k in 0..self.cpusets.len() {
            if !self.cpusets[k][core] || self.free[k] + self.held[k] == 0 {
                continue;
            }
            any = true;
            if self.free[k] > 0 || (self.held[k] > 0 && self.masks[k][core]) {
                return (true, true);
            }
        }
        (false, any)
    }

    fn close_episode(&mut self, start: Nanos, end: Nanos, cpuset: bool) {
        let d = end - start;
        let r = &mut self.report;
        let (max, overruns) = if cpuset {
            (&mut r.cpuset_max_queued_while_idle_ns, &mut r.cpuset_queued_while_idle_overruns)
        } else {
            (&mut r.max_queued_while_idle_ns, &mut r.queued_while_idle_overruns)
        };
        *max = (*max).max(d);
        if d > self.interval {
            *overruns += 1;
        }
    }

    /// Evaluates the state as it stood at the end of the last timestamp.
    fn settle(&mut self, now: Nanos) {
        let Some(at) = self.last_time else {
            return;
        };
        if now == at {
            return;
        }
        for c in 0..self.occupant.len() {
            let (eligible, cpuset) = self.idle_with_work(c);
            for (strict, bad) in [(false, eligible), (true, cpuset)] {
                let slot = if strict { &mut self.cpuset_episode[c] } else { &mut self.episode[c] };
                match (*slot, bad) {
                    (None, true) => *slot = Some(at),
                    (Some(start), false) => {
                        *slot = None;
                        self.close_episode(start, at, strict);
                    }
                    _ => {}
                }
            }
        }
    }

    fn displaced(&self, t: ThreadId) -> bool {
        let k = self.owner[t];
        let at = match self.pos[t] {
            Pos::Queued(c) | Pos::Running(c) => c,
            Pos::Blocked => return false,
        };
        self.masks[k].iter().any(|&b| b) && !self.masks[k][at]
    }

    fn open_tick(&mut self) {
        let idle = (0..self.occupant.len())
            .filter(|&c| self.occupant[c].is_none())
            .collect();
        let displaced = (0..self.pos.len())
            .filter(|&t| self.displaced(t))
            .map(|t| (t, self.owner[t]))
            .collect();
        self.tick = Some(Tick {
            idle,
            displaced,
            moved: Vec::new(),
            attracted: Vec::new(),
        });
    }

    fn close_tick(&mut self) {
        let Some(tick) = self.tick.take() else {
            return;
        };
        for &core in &tick.idle {
            let wanted = tick
                .displaced
                .iter()
                .any(|&(t, k)| self.masks[k][core] && !tick.moved.contains(&t));
            let served = tick.attracted.contains(&core);
            if wanted || served {
                self.report.attraction_opportunities += 1;
            }
            if wanted && !served {
                self.report.attraction_violations += 1;
            }
        }
    }
}

impl TraceSink for TraceAudit {
    fn record(&mut self, rec: &TraceRecord) {
        self.report.records += 1;
        if self.tick.is_some() && rec.cause != Some(Cause::Balance) {
            self.close_tick();
        }
        self.settle(rec.time_ns);
        self.last_time = Some(rec.time_ns);

        let (t, k) = match (rec.thread, rec.container) {
            (Some(t), Some(k)) => {
                self.touch(t, k as usize);
                (t, k as usize)
            }
            _ => (usize::MAX, usize::MAX),
        };
        let in_cpuset = |core: CoreId| self.cpusets.get(k).is_some_and(|s| s[core]);

        match rec.kind {
            EventKind::BalanceTick => {
                self.report.balance_ticks += 1;
                self.open_tick();
            }
            EventKind::MaskUpdate => {
                if let (Some(k), Some(mask)) = (rec.container, &rec.mask) {
                    let bits = &mut self.masks[k as usize];
                    bits.iter_mut().for_each(|b| *b = false);
                    for &c in mask {
                        bits[c] = true;
                    }
                    self.repin(k as usize);
                }
            }
            EventKind::Wakeup => {
                let Some(core) = rec.core else { return };
                if !in_cpuset(core) {
                    self.report.illegal_placements += 1;
                }
                if rec.queued == Some(true) {
                    let idle_exists = (0..self.occupant.len())
                        .any(|c| self.occupant[c].is_none() && self.cpusets[k][c]);
                    if idle_exists {
                        self.report.queued_with_idle_wakeups += 1;
                    }
                    self.enqueue(t, core);
                }
            }
            EventKind::Dispatch => {
                let Some(core) = rec.core else { return };
                if !in_cpuset(core) {
                    self.report.illegal_placements += 1;
                }
                self.leave(t);
                self.pos[t] = Pos::Running(core);
                self.occupant[core] = Some(t);
            }
            EventKind::Preempt => {
                if let Some(core) = rec.core {
                    self.enqueue(t, core);
                }
            }
            EventKind::Complete => self.leave(t),
            EventKind::Migrate => {
                let (Some(from), Some(to)) = (rec.from_core, rec.core) else {
                    return;
                };
                if rec.queued == Some(true) && self.masks[k][from] && !self.masks[k][to] {
                    self.report.pinning_violations += 1;
                }
                if let Some(tick) = &mut self.tick {
                    tick.moved.push(t);
                    if self.masks[k][to] && tick.displaced.iter().any(|&(d, _)| d == t) {
                        tick.attracted.push(to);
                    }
                }
                self.enqueue(t, to);
            }
            EventKind::ControlTick => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: Nanos, kind: EventKind, thread: ThreadId, core: CoreId) -> TraceRecord {
        TraceRecord::new(t, kind).thread(thread, 0).core(core)
    }

    fn mask(t: Nanos, cores: Vec<CoreId>) -> TraceRecord {
        let mut r = TraceRecord::new(t, EventKind::MaskUpdate);
        r.container = Some(0);
        r.mask = Some(cores);
        r
    }

    fn audit(trace: &[TraceRecord]) -> AuditReport {
        let mut a = TraceAudit::new(4, &[vec![0, 1, 2, 3]], 10);
        for r in trace {
            a.record(r);
        }
        a.finish_at(trace.last().map_or(0, |r| r.time_ns))
    }

    #[test]
    fn queued_wakeup_with_idle_core_is_flagged() {
        let mut w = rec(0, EventKind::Wakeup, 0, 0);
        w.queued = Some(true);
        let r = audit(&[w]);
        assert_eq!(r.queued_with_idle_wakeups, 1);
    }

    #[test]
    fn long_idle_stretch_is_measured() {
        let mut trace = vec![rec(0, EventKind::Dispatch, 0, 0)];
        let mut w = rec(1, EventKind::Wakeup, 1, 0);
        w.queued = Some(true);
        trace.push(w);
        trace.push(rec(50, EventKind::Dispatch, 1, 1));
        let r = audit(&trace);
        assert_eq!(r.max_queued_while_idle_ns, 49);
        assert_eq!(r.queued_while_idle_overruns, 3);
        assert_eq!(r.cpuset_queued_while_idle_overruns, 3);
    }

    #[test]
    fn pinned_wait_only_counts_against_the_cpuset_measure() {
        // thread 1 queues on preferred core 0, then cores 2 and 3 go idle
        let mut trace = vec![mask(0, vec![0, 1])];
        for (t, c) in [(0, 0), (2, 1), (3, 2), (4, 3)] {
            trace.push(rec(0, EventKind::Dispatch, t, c));
        }
        let mut w = rec(1, EventKind::Wakeup, 1, 0);
        w.queued = Some(true);
        trace.push(w);
        trace.push(rec(5, EventKind::Complete, 3, 2));
        trace.push(rec(5, EventKind::Complete, 4, 3));
        trace.push(rec(50, EventKind::Complete, 0, 0));
        trace.push(rec(50, EventKind::Dispatch, 1, 0));
        let r = audit(&trace);
        assert_eq!(r.queued_with_idle_wakeups, 0);
        assert_eq!(r.queued_while_idle_overruns, 0);
        assert_eq!(r.max_queued_while_idle_ns, 0);
        assert_eq!(r.cpuset_max_queued_while_idle_ns, 45);
        assert_eq!(r.cpuset_queued_while_idle_overruns, 2);
        assert!(r.work_conserving(10));
    }

    #[test]
    fn pinned_queue_migration_is_flagged() {
        let mut m = rec(5, EventKind::Migrate, 0, 3);
        m.from_core = Some(0);
        m.queued = Some(true);
        let r = audit(&[mask(0, vec![0, 1]), m]);
        assert_eq!(r.pinning_violations, 1);
    }

    #[test]
    fn missed_attraction_is_flagged() {
        let mut trace = vec![mask(0, vec![0]), rec(0, EventKind::Dispatch, 0, 3)];
        trace.push(TraceRecord::new(10, EventKind::BalanceTick));
        trace.push(rec(11, EventKind::Complete, 0, 3));
        let r = audit(&trace);
        assert_eq!(r.attraction_violations, 1);

        let mut trace = vec![mask(0, vec![0]), rec(0, EventKind::Dispatch, 0, 3)];
        trace.push(TraceRecord::new(10, EventKind::BalanceTick));
        let mut m = rec(10, EventKind::Migrate, 0, 0);
        m.from_core = Some(3);
        m.queued = Some(false);
        m.cause = Some(Cause::Balance);
        trace.push(m);
        let mut d = rec(10, EventKind::Dispatch, 0, 0);
        d.cause = Some(Cause::Balance);
        trace.push(d);
        let r = audit(&trace);
        assert_eq!(r.attraction_violations, 0);
        assert_eq!(r.attraction_opportunities, 1);
    }
}
