//! Core-aware scheduling: soft affinity toward each container's preferred
//! cores without giving up idle cores elsewhere.
//!
//! Wakeup scans the preferred cores first (the thread's last core if it is
//! one of them and idle), then the rest of the cpuset, and only queues when
//! nothing in the cpuset is idle. Load balancing never moves
//! a thread queued on one of its preferred cores to a core outside the mask,
//! and pulls displaced threads (running or queued) back toward idle
//! preferred cores, one per idle core per tick.

use super::policy::{
    balance_queues, first_idle, least_loaded, Migration, Placement, SchedulingPolicy,
};
use super::state::{SchedState, ThreadState};
use super::trace::ThreadId;
use super::SimError;
use crate::topology::CoreId;

#[derive(Debug, Default, Clone, Copy)]
pub struct CoreAwarePolicy;

/// A queued thread sitting on one of its preferred cores stays inside the
/// mask; anything else may go anywhere in its cpuset.
fn may_move_queued(state: &SchedState, thread: ThreadId, from: CoreId, to: CoreId) -> bool {
    let c = state.container_of(thread);
    c.in_cpuset(to) && (!c.in_mask(from) || c.in_mask(to))
}

/// Ordering key for pulling queued work onto `core`: threads that prefer the
/// core first, then the longest source queue, then the longest wait.
fn pull_key(state: &SchedState, core: CoreId, from: CoreId, thread: ThreadId) -> impl Ord {
    let prefers = state.container_of(thread).in_mask(core);
    (
        !prefers,
        std::cmp::Reverse(state.queue_len(from)),
        state.threads[thread].enqueue_time,
        thread,
    )
}

impl SchedulingPolicy for CoreAwarePolicy {
    fn name(&self) -> &'static str {
        "cas"
    }

    fn select_core(&self, state: &SchedState, thread: ThreadId) -> Result<Placement, SimError> {
        let container = state.container_of(thread);
        if container.cpuset.is_empty() {
            return Err(SimError::EmptyCpuset {
                container: state.threads[thread].container,
            });
        }
        if let Some(last) = state.threads[thread].last_core {
            if container.in_mask(last) && state.is_idle(last) {
                return Ok(Placement::Preferred(last));
            }
        }
        if let Some(core) = first_idle(state, &container.mask) {
            return Ok(Placement::Preferred(core));
        }
        if let Some(core) = first_idle(state, &container.cpuset) {
            return Ok(Placement::NonPreferred(core));
        }
        let pool = if container.mask.is_empty() {
            &container.cpuset
        } else {
            &container.mask
        };
        let core = least_loaded(state, pool).expect("non-empty pool");
        Ok(Placement::Queued(core))
    }

    fn pull_for_idle(&self, state: &SchedState, core: CoreId) -> Option<ThreadId> {
        state
            .queued_threads()
            .filter(|&(from, _, t)| from != core && may_move_queued(state, t, from, core))
            .min_by_key(|&(from, _, t)| pull_key(state, core, from, t))
            .map(|(_, _, t)| t)
    }

    fn plan_balance(&self, state: &SchedState) -> Vec<Migration> {
        let n = state.core_count();
        let mut moved = vec![false; state.threads.len()];
        let mut load: Vec<usize> = (0..n).map(|c| state.load(c)).collect();
        let mut out = Vec::new();

        // Displaced threads, queued ones first (longest wait), then running.
        let mut displaced: Vec<(bool, u64, CoreId, ThreadId)> = Vec::new();
        for core in &state.cores {
            if let Some(t) = core.occupant {
                if state.is_displaced(t) {
                    displaced.push((true, 0, core.core_id, t));
                }
            }
            for &t in &core.run_queue {
                if state.is_displaced(t) {
                    displaced.push((false, state.threads[t].enqueue_time, core.core_id, t));
                }
            }
        }
        displaced.sort_unstable();

        let idle: Vec<CoreId> = (0..n).filter(|&c| load[c] == 0).collect();
        for &core in &idle {
            let attract = displaced
                .iter()
                .find(|&&(_, _, _, t)| !moved[t] && state.container_of(t).in_mask(core))
                .map(|&(_, _, from, t)| (from, t));
            let pick = attract.or_else(|| {
                state
                    .queued_threads()
                    .filter(|&(from, _, t)| {
                        !moved[t] && from != core && may_move_queued(state, t, from, core)
                    })
                    .min_by_key(|&(from, _, t)| pull_key(state, core, from, t))
                    .map(|(from, _, t)| (from, t))
            });
            if let Some((from, thread)) = pick {
                moved[thread] = true;
                load[from] -= 1;
                load[core] += 1;
                out.push(Migration {
                    thread,
                    from,
                    to: core,
                });
            }
        }

        balance_queues(state, &mut load, &mut moved, &mut out, |t, from, to| {
            state.threads[t].state == ThreadState::Queued && may_move_queued(state, t, from, to)
        });
        out
    }
}
