//! Preferred-core allocation strategies.
//!
//! Strategies implement [`AllocationStrategy`] and are looked up by name in an
//! [`AllocatorRegistry`]. The special name `auto` picks the strategy matching
//! the machine: `split-llc` when sockets have several LLC domains,
//! `monolithic` otherwise.

mod monolithic;
mod split_llc;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::topology::{CoreId, DomainId, MachineTopology, TopologyKind};
use crate::units::CpuUnits;

pub use monolithic::{allocate_monolithic, MonolithicAllocator};
pub use split_llc::{
    allocate_split_llc, find_best_set, processing_order, update_capacities,
    ChipletCapacityLedger, SplitLlcAllocator, MAX_CHIPLETS,
};

pub const AUTO: &str = "auto";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("{0}")]
    Topology(String),
    #[error("negative demand {0}")]
    NegativeDemand(f64),
    #[error("aggregate demand is zero; scale factor undefined")]
    ZeroTotalDemand,
    #[error("no public cores to allocate from")]
    EmptyPool,
    #[error("capacity ledger: {0}")]
    Ledger(String),
    #[error("unknown allocator `{name}` (known: {known})")]
    UnknownStrategy { name: String, known: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerDemand {
    pub container_id: String,
    pub demand: CpuUnits,
}

impl ContainerDemand {
    pub fn new(container_id: impl Into<String>, demand: CpuUnits) -> Self {
        Self {
            container_id: container_id.into(),
            demand,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityAssignment {
    pub container_id: String,
    /// Sorted core ids.
    pub preferred_cores: Vec<CoreId>,
    pub granted_capacity: CpuUnits,
    pub feasible: bool,
    /// Chosen LLC domains (split-LLC plans only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chiplets: Option<Vec<DomainId>>,
}

impl AffinityAssignment {
    pub fn infeasible(container_id: &str) -> Self {
        Self {
            container_id: container_id.to_string(),
            preferred_cores: Vec::new(),
            granted_capacity: CpuUnits::ZERO,
            feasible: false,
            chiplets: None,
        }
    }
}

/// Assignments are listed in the order the strategy processed them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationPlan {
    pub algorithm: String,
    pub assignments: Vec<AffinityAssignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger_after: Option<ChipletCapacityLedger>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_factor: Option<f64>,
}

impl AllocationPlan {
    pub fn assignment(&self, container_id: &str) -> Option<&AffinityAssignment> {
        self.assignments
            .iter()
            .find(|a| a.container_id == container_id)
    }
}

pub trait AllocationStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn allocate(
        &self,
        demands: &[ContainerDemand],
        topology: &MachineTopology,
        reserved: &[CoreId],
    ) -> Result<AllocationPlan, AllocError>;
}

#[derive(Clone)]
pub struct AllocatorRegistry {
    strategies: BTreeMap<String, Arc<dyn AllocationStrategy>>,
}

impl Default for AllocatorRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl AllocatorRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(SplitLlcAllocator));
        r.register(Arc::new(MonolithicAllocator));
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn AllocationStrategy>) {
        self.strategies.insert(strategy.name().to_string(), strategy);
    }

    pub fn names(&self) -> Vec<&str> {
        self.strategies.keys().map(String::as_str).collect()
    }

    /// Resolves `name`, treating `auto` as "whatever fits this topology".
    pub fn resolve(
        &self,
        name: &str,
        topology: &MachineTopology,
    ) -> Result<Arc<dyn AllocationStrategy>, AllocError> {
        let key = if name == AUTO {
            match topology.kind() {
                TopologyKind::SplitLlc => "split-llc",
                TopologyKind::Monolithic => "monolithic",
            }
        } else {
            name
        };
        self.strategies
            .get(key)
            .cloned()
            .ok_or_else(|| AllocError::UnknownStrategy {
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}
