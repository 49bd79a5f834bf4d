//! Scenario files: a TOML description of machine, workload, policy and cost
//! model, resolved into simulator inputs.
//!
//! ```toml
//! horizon_s = 20
//! seeds = [1, 2, 3]
//!
//! [topology]
//! sockets = 1
//! llc_per_socket = 4
//! cores_per_llc = 8
//!
//! [workload.generator]
//! containers = 8
//! target_utilization = 0.45
//!
//! [policy]
//! variant = "cas"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{AllocError, AllocatorRegistry};
use crate::costmodel::WarmthParams;
use crate::scheduler::trace::TraceSink;
use crate::scheduler::{run_simulation, PolicyRegistry, PolicySettings, SimError, SimInputs, SimOutcome};
use crate::topology::{MachineTopology, TopologyError, TopologySpec};
use crate::units::{Nanos, NANOS_PER_SEC};
use crate::workload::{generate_workload, ingest_trace, ContainerSpec, GeneratorConfig, WorkloadError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Parse(String),
    #[error("scenario `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Allocator(AllocError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl ScenarioError {
    /// Whether the error comes from the user's configuration rather than
    /// from running the simulation.
    pub fn is_config(&self) -> bool {
        match self {
            ScenarioError::Sim(e) => matches!(
                e,
                SimError::Config(_)
                    | SimError::UnknownPolicy { .. }
                    | SimError::EmptyCpuset { .. }
                    | SimError::UnknownContainer(_)
            ),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Synthetic population, used unless `trace` or `containers` is set.
    pub generator: GeneratorConfig,
    /// `container_id,interval_index,usage_cpus` CSV to replay, relative to
    /// the scenario file. Replayed containers take their service time and
    /// fan-out from `generator`.
    pub trace: Option<PathBuf>,
    /// Explicit container list.
    pub containers: Vec<ContainerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub horizon_s: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub topology: TopologySpec,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub policy: PolicySettings,
    #[serde(default)]
    pub cost: WarmthParams,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

/// Scenarios shipped with the crate, by name.
pub const BUILTIN_SCENARIOS: [(&str, &str); 3] = [
    ("split-llc", include_str!("../scenarios/split-llc.toml")),
    ("monolithic", include_str!("../scenarios/monolithic.toml")),
    ("two-socket", include_str!("../scenarios/two-socket.toml")),
];

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Self::from_toml_str(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml_str(text).expect("builtin scenario parses"))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |field, message: &str| {
            Err(ScenarioError::Invalid {
                field,
                message: message.to_string(),
            })
        };
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return invalid("horizon_s", "must be positive");
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "need at least one seed");
        }
        if self.workload.trace.is_some() && !self.workload.containers.is_empty() {
            return invalid("workload", "set either `trace` or `containers`, not both");
        }
        self.policy.validate()?;
        self.cost
            .validate()
            .map_err(|e| ScenarioError::Invalid {
                field: "cost",
                message: e.to_string(),
            })?;
        self.topology.build()?;
        Ok(())
    }

    pub fn horizon_ns(&self) -> Nanos {
        (self.horizon_s * NANOS_PER_SEC as f64).round() as Nanos
    }

    pub fn machine(&self) -> Result<MachineTopology, ScenarioError> {
        Ok(self.topology.build()?)
    }

    /// Container population for `seed`.
    pub fn containers(
        &self,
        topology: &MachineTopology,
        seed: u64,
    ) -> Result<Vec<ContainerSpec>, ScenarioError> {
        let w = &self.workload;
        if let Some(trace) = &w.trace {
            let path = match &self.base_dir {
                Some(dir) if trace.is_relative() => dir.join(trace),
                _ => trace.clone(),
            };
            let g = &w.generator;
            return Ok(ingest_trace(&path, topology, g.mean_service_us, g.mean_fanout)?);
        }
        if !w.containers.is_empty() {
            for c in &w.containers {
                c.validate(topology)?;
            }
            return Ok(w.containers.clone());
        }
        Ok(generate_workload(&w.generator, topology, seed)?)
    }

    /// Runs one seed under the named policy (or the scenario's own).
    pub fn run(
        &self,
        seed: u64,
        policy: Option<&str>,
        sink: &mut dyn TraceSink,
    ) -> Result<SimOutcome, ScenarioError> {
        let topology = self.machine()?;
        let containers = self.containers(&topology, seed)?;
        let mut settings = self.policy.clone();
        if let Some(p) = policy {
            settings.variant = p.to_string();
        }
        let policy = PolicyRegistry::builtin().create(&settings.variant)?;
        let allocator = AllocatorRegistry::builtin()
            .resolve(&settings.allocator, &topology)
            .map_err(ScenarioError::Allocator)?;
        let inputs = SimInputs {
            topology: &topology,
            containers: &containers,
            policy: policy.as_ref(),
            allocator: allocator.as_ref(),
            settings: &settings,
            cost: &self.cost,
            horizon_ns: self.horizon_ns(),
            seed,
        };
        Ok(run_simulation(&inputs, sink)?)
    }
}
