//! Chiplet-granular allocation for split-LLC machines.
//!
//! Containers that fit in one chiplet are placed first, smallest demand
//! first; the rest follow largest first. Each container gets the smallest
//! number of chiplets whose remaining capacity covers its demand, preferring
//! the combination with the most remaining capacity so the region has room
//! to absorb bursts.

use std::cmp::Ordering;

use serde::Serialize;

use super::{AffinityAssignment, AllocError, AllocationPlan, AllocationStrategy, ContainerDemand};
use crate::topology::{DomainId, MachineTopology};
use crate::units::CpuUnits;

/// Combinatorial search is exponential in the chiplet count.
pub const MAX_CHIPLETS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChipletCapacityLedger {
    remaining: Vec<CpuUnits>,
    #[serde(skip)]
    capacity: Vec<CpuUnits>,
}

impl ChipletCapacityLedger {
    pub fn for_topology(topology: &MachineTopology) -> Self {
        let capacity: Vec<CpuUnits> = topology
            .domains()
            .map(|d| CpuUnits::from_cores(d.capacity))
            .collect();
        Self {
            remaining: capacity.clone(),
            capacity,
        }
    }

    /// A ledger whose remaining capacity equals its full capacity.
    pub fn from_capacities(capacity: Vec<CpuUnits>) -> Self {
        Self {
            remaining: capacity.clone(),
            capacity,
        }
    }

    /// A partially drained ledger. Fails if any remaining value is outside
    /// `[0, capacity]`.
    pub fn with_remaining(
        capacity: Vec<CpuUnits>,
        remaining: Vec<CpuUnits>,
    ) -> Result<Self, AllocError> {
        if capacity.len() != remaining.len() {
            return Err(AllocError::Ledger("capacity/remaining length mismatch".into()));
        }
        for (i, (&cap, &rem)) in capacity.iter().zip(&remaining).enumerate() {
            if rem.is_negative() || rem > cap {
                return Err(AllocError::Ledger(format!(
                    "chiplet {i}: remaining {rem} outside [0, {cap}]"
                )));
            }
        }
        Ok(Self {
            remaining,
            capacity,
        })
    }

    pub fn remaining(&self) -> &[CpuUnits] {
        &self.remaining
    }

    pub fn capacity(&self) -> &[CpuUnits] {
        &self.capacity
    }

    pub fn len(&self) -> usize {
        self.remaining.len()
    }

    pub fn is_empty(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn total_remaining(&self) -> CpuUnits {
        self.remaining.iter().sum()
    }

    fn sum_of(&self, set: &[DomainId]) -> CpuUnits {
        set.iter().map(|&c| self.remaining[c]).sum()
    }
}

/// Visits every `k`-combination of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k == 0 || k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        // rightmost index that can still advance
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Smallest chiplet set covering `demand`; ties go to the larger summed
/// remaining capacity, then to the lexicographically lowest ids. Returns an
/// empty set when nothing fits. The search starts at one chiplet, so a zero
/// demand still yields a (single) chiplet.
pub fn find_best_set(demand: CpuUnits, ledger: &ChipletCapacityLedger) -> Vec<DomainId> {
    for size in 1..=ledger.len() {
        let mut best: Option<(CpuUnits, Vec<DomainId>)> = None;
        for_each_combination(ledger.len(), size, |set| {
            let sum = ledger.sum_of(set);
            if sum < demand {
                return;
            }
            // strict improvement only: earlier (lexicographically lower) wins ties
            if best.as_ref().is_none_or(|(b, _)| sum > *b) {
                best = Some((sum, set.to_vec()));
            }
        });
        if let Some((_, set)) = best {
            return set;
        }
    }
    Vec::new()
}

/// Drains `demand` from the chosen chiplets in ascending id order.
pub fn update_capacities(
    ledger: &mut ChipletCapacityLedger,
    chosen: &[DomainId],
    demand: CpuUnits,
) -> Result<(), AllocError> {
    if chosen.iter().any(|&c| c >= ledger.len()) {
        return Err(AllocError::Ledger(format!(
            "chosen set {chosen:?} names an unknown chiplet"
        )));
    }
    if demand.is_negative() {
        return Err(AllocError::NegativeDemand(demand.as_f64()));
    }
    let available = ledger.sum_of(chosen);
    if available < demand {
        return Err(AllocError::Ledger(format!(
            "chosen set {chosen:?} has {available} remaining, below demand {demand}"
        )));
    }
    let mut order = chosen.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut residual = demand;
    for c in order {
        if residual == CpuUnits::ZERO {
            break;
        }
        let take = ledger.remaining[c].min(residual);
        ledger.remaining[c] -= take;
        residual -= take;
    }
    Ok(())
}

/// Processing order: demands that fit one chiplet ascending, then the rest
/// descending. Ties keep input order.
pub fn processing_order(demands: &[ContainerDemand], chiplet_capacity: CpuUnits) -> Vec<usize> {
    let (mut single, mut multi): (Vec<usize>, Vec<usize>) =
        (0..demands.len()).partition(|&i| demands[i].demand <= chiplet_capacity);
    single.sort_by(|&a, &b| demands[a].demand.cmp(&demands[b].demand).then(a.cmp(&b)));
    multi.sort_by(|&a, &b| {
        match demands[b].demand.cmp(&demands[a].demand) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        }
    });
    single.extend(multi);
    single
}

pub fn allocate_split_llc(
    demands: &[ContainerDemand],
    topology: &MachineTopology,
) -> Result<AllocationPlan, AllocError> {
    let chiplets = topology.domain_count();
    if chiplets < 2 {
        return Err(AllocError::Topology(format!(
            "split-LLC allocation needs at least 2 LLC domains, machine has {chiplets}"
        )));
    }
    if chiplets > MAX_CHIPLETS {
        return Err(AllocError::Topology(format!(
            "split-LLC allocation supports at most {MAX_CHIPLETS} LLC domains, machine has {chiplets}"
        )));
    }
    if let Some(bad) = demands.iter().find(|d| d.demand.is_negative()) {
        return Err(AllocError::NegativeDemand(bad.demand.as_f64()));
    }
    let mut ledger = ChipletCapacityLedger::for_topology(topology);
    // Capacity of "a single chiplet"; the largest one on heterogeneous parts.
    let chiplet_capacity = ledger.capacity().iter().copied().max().unwrap_or_default();
    let domains: Vec<_> = topology.domains().collect();

    let mut assignments = Vec::with_capacity(demands.len());
    for i in processing_order(demands, chiplet_capacity) {
        let d = &demands[i];
        let best = find_best_set(d.demand, &ledger);
        if best.is_empty() {
            assignments.push(AffinityAssignment::infeasible(&d.container_id));
            continue;
        }
        update_capacities(&mut ledger, &best, d.demand)?;
        let mut cores: Vec<_> = best
            .iter()
            .flat_map(|&c| domains[c].cores.iter().copied())
            .collect();
        cores.sort_unstable();
        assignments.push(AffinityAssignment {
            container_id: d.container_id.clone(),
            preferred_cores: cores,
            granted_capacity: d.demand,
            feasible: true,
            chiplets: Some(best),
        });
    }
    Ok(AllocationPlan {
        algorithm: SplitLlcAllocator.name().to_string(),
        assignments,
        ledger_after: Some(ledger),
        scale_factor: None,
    })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SplitLlcAllocator;

impl AllocationStrategy for SplitLlcAllocator {
    fn name(&self) -> &'static str {
        "split-llc"
    }

    fn allocate(
        &self,
        demands: &[ContainerDemand],
        topology: &MachineTopology,
        _reserved: &[usize],
    ) -> Result<AllocationPlan, AllocError> {
        allocate_split_llc(demands, topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TopologySpec;

    fn cpus(v: &[f64]) -> Vec<CpuUnits> {
        v.iter().map(|&x| CpuUnits::from_f64(x)).collect()
    }

    fn demands(v: &[(&str, f64)]) -> Vec<ContainerDemand> {
        v.iter()
            .map(|&(id, d)| ContainerDemand::new(id, CpuUnits::from_f64(d)))
            .collect()
    }

    fn ledger(rem: &[f64], cap: f64) -> ChipletCapacityLedger {
        ChipletCapacityLedger::with_remaining(vec![CpuUnits::from_f64(cap); rem.len()], cpus(rem))
            .unwrap()
    }

    #[test]
    fn combinations_are_lexicographic() {
        let mut seen = Vec::new();
        for_each_combination(4, 2, |s| seen.push(s.to_vec()));
        assert_eq!(
            seen,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        let mut count = 0;
        for_each_combination(16, 8, |_| count += 1);
        assert_eq!(count, 12_870);
    }

    #[test]
    fn best_set_examples() {
        let full = ledger(&[8.0; 4], 8.0);
        assert_eq!(find_best_set(CpuUnits::ZERO, &ledger(&[3.0, 7.0, 7.0, 1.0], 8.0)), vec![1]);
        assert_eq!(find_best_set(CpuUnits::from_f64(8.0), &full), vec![0]);
        assert_eq!(
            find_best_set(CpuUnits::from_f64(9.0), &ledger(&[2.0, 8.0, 8.0, 8.0], 8.0)),
            vec![1, 2]
        );
        assert!(find_best_set(CpuUnits::from_f64(40.0), &full).is_empty());
    }

    #[test]
    fn drain_examples() {
        let mut l = ledger(&[8.0, 8.0], 8.0);
        update_capacities(&mut l, &[0], CpuUnits::from_f64(5.0)).unwrap();
        assert_eq!(l.remaining(), cpus(&[3.0, 8.0]).as_slice());

        let mut l = ledger(&[2.0, 8.0, 8.0, 8.0], 8.0);
        update_capacities(&mut l, &[1, 2], CpuUnits::from_f64(9.0)).unwrap();
        assert_eq!(l.remaining(), cpus(&[2.0, 0.0, 7.0, 8.0]).as_slice());

        let mut l = ledger(&[8.0, 8.0], 8.0);
        update_capacities(&mut l, &[0, 1], CpuUnits::from_f64(16.0)).unwrap();
        assert_eq!(l.remaining(), cpus(&[0.0, 0.0]).as_slice());

        let mut l = ledger(&[8.0, 8.0], 8.0);
        assert!(update_capacities(&mut l, &[0], CpuUnits::from_f64(9.0)).is_err());
        assert_eq!(l.remaining(), cpus(&[8.0, 8.0]).as_slice());
    }

    #[test]
    fn single_container() {
        let t = TopologySpec::new(1, 4, 8).build().unwrap();
        let plan = allocate_split_llc(&demands(&[("a", 4.0)]), &t).unwrap();
        let a = &plan.assignments[0];
        assert!(a.feasible);
        assert_eq!(a.preferred_cores, (0..8).collect::<Vec<_>>());
        assert_eq!(
            plan.ledger_after.unwrap().remaining(),
            cpus(&[4.0, 8.0, 8.0, 8.0]).as_slice()
        );
    }

    #[test]
    fn mixed_single_and_multi() {
        let t = TopologySpec::new(1, 4, 8).build().unwrap();
        let plan =
            allocate_split_llc(&demands(&[("C", 10.0), ("A", 6.0), ("B", 6.0)]), &t).unwrap();
        let ids: Vec<_> = plan.assignments.iter().map(|a| a.container_id.as_str()).collect();
        assert_eq!(ids, vec!["A", "B", "C"]);
        assert_eq!(plan.assignments[0].chiplets, Some(vec![0]));
        assert_eq!(plan.assignments[1].chiplets, Some(vec![1]));
        assert_eq!(plan.assignments[2].chiplets, Some(vec![2, 3]));
        assert_eq!(plan.assignments[2].preferred_cores, (16..32).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_infeasible() {
        let t = TopologySpec::new(1, 4, 8).build().unwrap();
        let plan = allocate_split_llc(&[], &t).unwrap();
        assert!(plan.assignments.is_empty());
        assert_eq!(plan.ledger_after.unwrap().remaining(), cpus(&[8.0; 4]).as_slice());

        let plan = allocate_split_llc(&demands(&[("big", 40.0)]), &t).unwrap();
        assert!(!plan.assignments[0].feasible);
        assert!(plan.assignments[0].preferred_cores.is_empty());
    }

    #[test]
    fn rejects_unsuitable_topologies() {
        let mono = TopologySpec::new(1, 1, 16).build().unwrap();
        assert!(matches!(
            allocate_split_llc(&[], &mono),
            Err(AllocError::Topology(_))
        ));
        let huge = TopologySpec::new(1, 17, 2).build().unwrap();
        assert!(matches!(
            allocate_split_llc(&[], &huge),
            Err(AllocError::Topology(_))
        ));
    }

    #[test]
    fn order_puts_single_chiplet_demands_first() {
        let d = demands(&[("x", 12.0), ("y", 3.0), ("z", 20.0), ("w", 8.0), ("v", 3.0)]);
        let order = processing_order(&d, CpuUnits::from_f64(8.0));
        let names: Vec<_> = order.iter().map(|&i| d[i].container_id.as_str()).collect();
        assert_eq!(names, vec!["y", "v", "w", "z", "x"]);
    }
}
