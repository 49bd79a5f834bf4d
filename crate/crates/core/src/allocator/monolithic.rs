//! Core-granular proportional allocation for machines with a shared LLC.
//!
//! The public (non-reserved) cores are split among containers in proportion
//! to demand, scaled up so the whole pool is handed out.

use super::{AffinityAssignment, AllocError, AllocationPlan, AllocationStrategy, ContainerDemand};
use crate::topology::{CoreId, MachineTopology};
use crate::units::CpuUnits;

/// `ceil(demand * available / total)`, computed exactly.
fn scaled_core_count(demand: CpuUnits, available: usize, total: CpuUnits) -> usize {
    let num = demand.raw() as i128 * available as i128;
    let den = total.raw() as i128;
    ((num + den - 1) / den) as usize
}

pub fn allocate_monolithic(
    demands: &[ContainerDemand],
    public_cores: &[CoreId],
) -> Result<AllocationPlan, AllocError> {
    if public_cores.is_empty() {
        return Err(AllocError::EmptyPool);
    }
    if let Some(bad) = demands.iter().find(|d| d.demand.is_negative()) {
        return Err(AllocError::NegativeDemand(bad.demand.as_f64()));
    }
    if demands.is_empty() {
        return Ok(AllocationPlan {
            algorithm: MonolithicAllocator.name().to_string(),
            assignments: Vec::new(),
            ledger_after: None,
            scale_factor: None,
        });
    }
    let total: CpuUnits = demands.iter().map(|d| d.demand).sum();
    if total <= CpuUnits::ZERO {
        return Err(AllocError::ZeroTotalDemand);
    }
    let mut pool: Vec<CoreId> = public_cores.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let available = pool.len();
    let scale = available as f64 / total.as_f64();
    let mut next = 0;

    let mut assignments = Vec::with_capacity(demands.len());
    for d in demands {
        let wanted = scaled_core_count(d.demand, available, total);
        let take = wanted.min(pool.len() - next);
        let cores = pool[next..next + take].to_vec();
        next += take;
        assignments.push(AffinityAssignment {
            container_id: d.container_id.clone(),
            feasible: take > 0 || wanted == 0,
            granted_capacity: CpuUnits::from_cores(take),
            preferred_cores: cores,
            chiplets: None,
        });
    }
    Ok(AllocationPlan {
        algorithm: MonolithicAllocator.name().to_string(),
        assignments,
        ledger_after: None,
        scale_factor: Some(scale),
    })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MonolithicAllocator;

impl AllocationStrategy for MonolithicAllocator {
    fn name(&self) -> &'static str {
        "monolithic"
    }

    /// Uses every non-reserved core of the machine as one public pool.
    fn allocate(
        &self,
        demands: &[ContainerDemand],
        topology: &MachineTopology,
        reserved: &[CoreId],
    ) -> Result<AllocationPlan, AllocError> {
        let public: Vec<CoreId> = topology
            .cores()
            .filter(|c| !reserved.contains(c))
            .collect();
        allocate_monolithic(demands, &public)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demands(v: &[f64]) -> Vec<ContainerDemand> {
        v.iter()
            .enumerate()
            .map(|(i, &d)| ContainerDemand::new(format!("c{i}"), CpuUnits::from_f64(d)))
            .collect()
    }

    fn sizes(plan: &AllocationPlan) -> Vec<usize> {
        plan.assignments.iter().map(|a| a.preferred_cores.len()).collect()
    }

    #[test]
    fn doubles_when_pool_is_twice_demand() {
        let pool: Vec<_> = (0..32).collect();
        let plan = allocate_monolithic(&demands(&[4.0, 8.0, 4.0]), &pool).unwrap();
        assert_eq!(plan.scale_factor, Some(2.0));
        assert_eq!(sizes(&plan), vec![8, 16, 8]);
        assert_eq!(plan.assignments[0].preferred_cores, (0..8).collect::<Vec<_>>());
        assert_eq!(plan.assignments[1].preferred_cores, (8..24).collect::<Vec<_>>());
        assert_eq!(plan.assignments[2].preferred_cores, (24..32).collect::<Vec<_>>());
    }

    #[test]
    fn identity_scale_rounds_up() {
        let pool: Vec<_> = (0..16).collect();
        let plan = allocate_monolithic(&demands(&[3.0, 6.0, 7.0]), &pool).unwrap();
        assert_eq!(plan.scale_factor, Some(1.0));
        assert_eq!(sizes(&plan), vec![3, 6, 7]);
    }

    #[test]
    fn overflow_is_clamped() {
        let pool: Vec<_> = (0..10).collect();
        let plan = allocate_monolithic(&demands(&[3.0, 3.0, 3.0]), &pool).unwrap();
        assert!((plan.scale_factor.unwrap() - 10.0 / 9.0).abs() < 1e-12);
        assert_eq!(sizes(&plan), vec![4, 4, 2]);
        assert!(plan.assignments.iter().all(|a| a.feasible));

        let pool: Vec<_> = (0..2).collect();
        let plan = allocate_monolithic(&demands(&[1.0, 1.0, 0.5]), &pool).unwrap();
        assert_eq!(sizes(&plan), vec![1, 1, 0]);
        assert!(!plan.assignments[2].feasible);
    }

    #[test]
    fn exact_ceiling_has_no_float_drift() {
        // 0.1 * 30 / 3.0 == 1 exactly; float math can land on 1.0000000000000002
        let pool: Vec<_> = (0..30).collect();
        let plan = allocate_monolithic(&demands(&[0.1, 2.9]), &pool).unwrap();
        assert_eq!(sizes(&plan), vec![1, 29]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            allocate_monolithic(&demands(&[0.0, 0.0]), &[0, 1]).unwrap_err(),
            AllocError::ZeroTotalDemand
        );
        assert_eq!(
            allocate_monolithic(&demands(&[1.0]), &[]).unwrap_err(),
            AllocError::EmptyPool
        );
    }

    #[test]
    fn respects_public_subset() {
        let pool = vec![3, 5, 7, 9];
        let plan = allocate_monolithic(&demands(&[1.0, 1.0]), &pool).unwrap();
        assert_eq!(plan.assignments[0].preferred_cores, vec![3, 5]);
        assert_eq!(plan.assignments[1].preferred_cores, vec![7, 9]);
    }
}
