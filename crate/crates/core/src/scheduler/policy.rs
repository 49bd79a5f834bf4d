//! Scheduling policies and the registry that selects them by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use super::state::SchedState;
use super::trace::ThreadId;
use super::SimError;
use crate::topology::CoreId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "core")]
pub enum Placement {
    /// Idle core inside the preferred mask.
    Preferred(CoreId),
    /// Idle core outside the mask.
    NonPreferred(CoreId),
    /// No idle core: wait in this core's run queue.
    Queued(CoreId),
}

impl Placement {
    pub fn core(self) -> CoreId {
        match self {
            Placement::Preferred(c) | Placement::NonPreferred(c) | Placement::Queued(c) => c,
        }
    }

    pub fn is_queued(self) -> bool {
        matches!(self, Placement::Queued(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Migration {
    pub thread: ThreadId,
    pub from: CoreId,
    pub to: CoreId,
}

pub trait SchedulingPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Where a newly runnable, unplaced thread goes.
    fn select_core(&self, state: &SchedState, thread: ThreadId) -> Result<Placement, SimError>;

    /// A queued thread for `core` to pull when it is about to go idle with
    /// an empty run queue.
    fn pull_for_idle(&self, state: &SchedState, core: CoreId) -> Option<ThreadId>;

    /// Migrations for a periodic balance tick, planned against one snapshot.
    /// Each thread appears at most once.
    fn plan_balance(&self, state: &SchedState) -> Vec<Migration>;
}

pub type PolicyFactory = Arc<dyn Fn() -> Box<dyn SchedulingPolicy> + Send + Sync>;

#[derive(Clone)]
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("cas", Arc::new(|| Box::new(super::cas::CoreAwarePolicy)));
        r.register("baseline", Arc::new(|| Box::new(super::baseline::WorkConservingPolicy)));
        r
    }

    pub fn register(&mut self, name: &str, factory: PolicyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn SchedulingPolicy>, SimError> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| SimError::UnknownPolicy {
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

/// Lowest-index idle core among `cores`.
pub(crate) fn first_idle(state: &SchedState, cores: &[CoreId]) -> Option<CoreId> {
    cores.iter().copied().find(|&c| state.is_idle(c))
}

/// Core with the shortest run queue (then lowest index) among `cores`.
pub(crate) fn least_loaded(state: &SchedState, cores: &[CoreId]) -> Option<CoreId> {
    cores.iter().copied().min_by_key(|&c| (state.load(c), c))
}

/// Queue-length balancing shared by both policies: repeatedly moves a queued
/// thread from the most loaded core to the least loaded eligible core while
/// the gap is at least two. `allowed(thread, from, to)` filters moves.
pub(crate) fn balance_queues(
    state: &SchedState,
    load: &mut [usize],
    moved: &mut [bool],
    out: &mut Vec<Migration>,
    allowed: impl Fn(ThreadId, CoreId, CoreId) -> bool,
) {
    let n = state.core_count();
    let budget: usize = state.cores.iter().map(|c| c.run_queue.len()).sum();
    for _ in 0..budget {
        let mut progressed = false;
        let mut sources: Vec<CoreId> = (0..n).filter(|&c| !state.cores[c].run_queue.is_empty()).collect();
        sources.sort_by_key(|&c| (std::cmp::Reverse(load[c]), c));
        'src: for src in sources {
            for &t in state.cores[src].run_queue.iter().rev() {
                if moved[t] {
                    continue;
                }
                let container = state.container_of(t);
                let dst = container
                    .cpuset
                    .iter()
                    .copied()
                    .filter(|&d| d != src && allowed(t, src, d))
                    .min_by_key(|&d| (load[d], d));
                if let Some(dst) = dst {
                    if load[src] >= load[dst] + 2 {
                        out.push(Migration {
                            thread: t,
                            from: src,
                            to: dst,
                        });
                        moved[t] = true;
                        load[src] -= 1;
                        load[dst] += 1;
                        progressed = true;
                        break 'src;
                    }
                }
            }
        }
        if !progressed {
            break;
        }
    }
}
