//! Work-conserving comparator without soft affinity: wake on the last core
//! if idle, else the lowest idle core, else the shortest queue. Idle cores
//! pull from the longest queue and ticks even out queue lengths.

use super::policy::{
    balance_queues, first_idle, least_loaded, Migration, Placement, SchedulingPolicy,
};
use super::state::{SchedState, ThreadState};
use super::trace::ThreadId;
use super::SimError;
use crate::topology::CoreId;

#[derive(Debug, Default, Clone, Copy)]
pub struct WorkConservingPolicy;

fn pull_candidate(
    state: &SchedState,
    core: CoreId,
    skip: impl Fn(ThreadId) -> bool,
) -> Option<(CoreId, ThreadId)> {
    state
        .queued_threads()
        .filter(|&(from, _, t)| from != core && !skip(t) && state.container_of(t).in_cpuset(core))
        .min_by_key(|&(from, _, t)| {
            (
                std::cmp::Reverse(state.queue_len(from)),
                state.threads[t].enqueue_time,
                t,
            )
        })
        .map(|(from, _, t)| (from, t))
}

impl SchedulingPolicy for WorkConservingPolicy {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn select_core(&self, state: &SchedState, thread: ThreadId) -> Result<Placement, SimError> {
        let container = state.container_of(thread);
        if container.cpuset.is_empty() {
            return Err(SimError::EmptyCpuset {
                container: state.threads[thread].container,
            });
        }
        let classify = |core: CoreId| {
            if container.in_mask(core) {
                Placement::Preferred(core)
            } else {
                Placement::NonPreferred(core)
            }
        };
        if let Some(last) = state.threads[thread].last_core {
            if container.in_cpuset(last) && state.is_idle(last) {
                return Ok(classify(last));
            }
        }
        if let Some(core) = first_idle(state, &container.cpuset) {
            return Ok(classify(core));
        }
        let core = least_loaded(state, &container.cpuset).expect("non-empty cpuset");
        Ok(Placement::Queued(core))
    }

    fn pull_for_idle(&self, state: &SchedState, core: CoreId) -> Option<ThreadId> {
        pull_candidate(state, core, |_| false).map(|(_, t)| t)
    }

    fn plan_balance(&self, state: &SchedState) -> Vec<Migration> {
        let n = state.core_count();
        let mut moved = vec![false; state.threads.len()];
        let mut load: Vec<usize> = (0..n).map(|c| state.load(c)).collect();
        let mut out = Vec::new();
        for core in 0..n {
            if load[core] != 0 {
                continue;
            }
            if let Some((from, thread)) = pull_candidate(state, core, |t| moved[t]) {
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
        balance_queues(state, &mut load, &mut moved, &mut out, |t, _, to| {
            state.threads[t].state == ThreadState::Queued && state.container_of(t).in_cpuset(to)
        });
        out
    }
}
