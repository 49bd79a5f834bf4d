use std::collections::VecDeque;

use crate::costmodel::WarmthScore;
use crate::scheduler::trace::ThreadId;
use crate::topology::CoreId;
use crate::units::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    Blocked,
    Queued,
    Running,
}

#[derive(Debug, Clone)]
pub struct SimThread {
    pub thread_id: ThreadId,
    pub container: u32,
    pub state: ThreadState,
    /// Core the thread runs on or is queued at.
    pub current_core: Option<CoreId>,
    /// Core the thread last executed on.
    pub last_core: Option<CoreId>,
    /// CPU time left in the current service.
    pub remaining_ns: Nanos,
    pub budget_ns: Nanos,
    /// Instruction-units owed to migration penalties.
    pub debt: f64,
    /// Instruction-units lost so far in the current service.
    pub loss: f64,
    pub enqueue_time: Nanos,
}

#[derive(Debug, Clone)]
pub struct CoreState {
    pub core_id: CoreId,
    pub occupant: Option<ThreadId>,
    pub run_queue: VecDeque<ThreadId>,
    /// Indexed by container.
    pub warmth: Vec<WarmthScore>,
    pub(crate) segment_start: Nanos,
    pub(crate) generation: u64,
}

#[derive(Debug, Clone)]
pub struct ContainerState {
    pub cpuset: Vec<CoreId>,
    cpuset_bits: Vec<bool>,
    pub mask: Vec<CoreId>,
    mask_bits: Vec<bool>,
}

impl ContainerState {
    pub fn new(cpuset: &[CoreId], total_cores: usize) -> Self {
        let mut cpuset: Vec<CoreId> = cpuset.iter().copied().filter(|&c| c < total_cores).collect();
        cpuset.sort_unstable();
        cpuset.dedup();
        let mut cpuset_bits = vec![false; total_cores];
        for &c in &cpuset {
            cpuset_bits[c] = true;
        }
        Self {
            cpuset,
            cpuset_bits,
            mask: Vec::new(),
            mask_bits: vec![false; total_cores],
        }
    }

    /// Replaces the preferred mask with `cores ∩ cpuset`. Returns whether it
    /// changed.
    pub fn set_mask(&mut self, cores: &[CoreId]) -> bool {
        let mut next: Vec<CoreId> = cores
            .iter()
            .copied()
            .filter(|&c| c < self.cpuset_bits.len() && self.cpuset_bits[c])
            .collect();
        next.sort_unstable();
        next.dedup();
        if next == self.mask {
            return false;
        }
        for &c in &self.mask {
            self.mask_bits[c] = false;
        }
        for &c in &next {
            self.mask_bits[c] = true;
        }
        self.mask = next;
        true
    }

    #[inline]
    pub fn in_cpuset(&self, core: CoreId) -> bool {
        self.cpuset_bits[core]
    }

    #[inline]
    pub fn in_mask(&self, core: CoreId) -> bool {
        self.mask_bits[core]
    }
}

/// Everything a placement policy may look at: threads, cores with their run
/// queues, and each container's cpuset and preferred mask.
#[derive(Debug, Clone)]
pub struct SchedState {
    pub threads: Vec<SimThread>,
    pub cores: Vec<CoreState>,
    pub containers: Vec<ContainerState>,
}

impl SchedState {
    pub fn new(total_cores: usize, cpusets: &[Vec<CoreId>]) -> Self {
        let containers: Vec<ContainerState> = cpusets
            .iter()
            .map(|c| ContainerState::new(c, total_cores))
            .collect();
        let cores = (0..total_cores)
            .map(|core_id| CoreState {
                core_id,
                occupant: None,
                run_queue: VecDeque::new(),
                warmth: vec![WarmthScore::COLD; containers.len()],
                segment_start: 0,
                generation: 0,
            })
            .collect();
        Self {
            threads: Vec::new(),
            cores,
            containers,
        }
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    #[inline]
    pub fn is_idle(&self, core: CoreId) -> bool {
        self.cores[core].occupant.is_none()
    }

    #[inline]
    pub fn queue_len(&self, core: CoreId) -> usize {
        self.cores[core].run_queue.len()
    }

    /// Occupant plus queued threads.
    #[inline]
    pub fn load(&self, core: CoreId) -> usize {
        self.queue_len(core) + usize::from(!self.is_idle(core))
    }

    pub fn container_of(&self, thread: ThreadId) -> &ContainerState {
        &self.containers[self.threads[thread].container as usize]
    }

    /// Whether `thread` currently sits (running or queued) outside a
    /// non-empty preferred mask.
    pub fn is_displaced(&self, thread: ThreadId) -> bool {
        let t = &self.threads[thread];
        let c = &self.containers[t.container as usize];
        match t.current_core {
            Some(core) if t.state != ThreadState::Blocked => {
                !c.mask.is_empty() && !c.in_mask(core)
            }
            _ => false,
        }
    }

    /// Creates a blocked thread for `container`.
    pub fn spawn_thread(&mut self, container: u32) -> ThreadId {
        let id = self.threads.len();
        self.threads.push(SimThread {
            thread_id: id,
            container,
            state: ThreadState::Blocked,
            current_core: None,
            last_core: None,
            remaining_ns: 0,
            budget_ns: 0,
            debt: 0.0,
            loss: 0.0,
            enqueue_time: 0,
        });
        id
    }

    /// Puts `thread` on `core` as its occupant (no accounting).
    pub fn place_running(&mut self, thread: ThreadId, core: CoreId) {
        debug_assert!(self.cores[core].occupant.is_none());
        self.cores[core].occupant = Some(thread);
        let t = &mut self.threads[thread];
        t.state = ThreadState::Running;
        t.current_core = Some(core);
    }

    /// Appends `thread` to `core`'s run queue (no accounting).
    pub fn place_queued(&mut self, thread: ThreadId, core: CoreId, now: Nanos) {
        self.cores[core].run_queue.push_back(thread);
        let t = &mut self.threads[thread];
        t.state = ThreadState::Queued;
        t.current_core = Some(core);
        t.enqueue_time = now;
    }

    /// Detaches a queued thread from its run queue.
    pub(crate) fn unqueue(&mut self, thread: ThreadId) {
        if let Some(core) = self.threads[thread].current_core {
            let q = &mut self.cores[core].run_queue;
            if let Some(pos) = q.iter().position(|&t| t == thread) {
                q.remove(pos);
            }
        }
    }

    pub fn set_mask(&mut self, container: usize, cores: &[CoreId]) -> bool {
        self.containers[container].set_mask(cores)
    }

    /// Iterates over every queued thread as `(core, position, thread)`.
    pub fn queued_threads(&self) -> impl Iterator<Item = (CoreId, usize, ThreadId)> + '_ {
        self.cores.iter().flat_map(|c| {
            c.run_queue
                .iter()
                .enumerate()
                .map(move |(i, &t)| (c.core_id, i, t))
        })
    }
}
