//! Discrete-event multicore scheduler.

mod baseline;
mod cas;
mod engine;
mod policy;
mod state;
pub mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{AllocError, AUTO};
use crate::predictor::{PredictorError, DEFAULT_PERCENTILE, DEFAULT_WINDOW_SECONDS};
use crate::topology::CoreId;
use crate::units::{Nanos, NANOS_PER_MICRO, NANOS_PER_MILLI};

pub use baseline::WorkConservingPolicy;
pub use cas::CoreAwarePolicy;
pub use engine::{run_simulation, SimInputs, SimOutcome, Simulation};
pub use policy::{Migration, Placement, PolicyFactory, PolicyRegistry, SchedulingPolicy};
pub use state::{ContainerState, CoreState, SchedState, SimThread, ThreadState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scheduling policy `{name}` (known: {known})")]
    UnknownPolicy { name: String, known: String },
    #[error("container {container} has an empty cpuset")]
    EmptyCpuset { container: u32 },
    #[error("assignment names unknown container `{0}`")]
    UnknownContainer(String),
    #[error("invalid settings: {0}")]
    Config(String),
    #[error("policy `{policy}` made an illegal move: {message}")]
    Policy { policy: String, message: String },
    #[error("allocation failed at t={time_ns}ns: {source}")]
    Allocation {
        time_ns: Nanos,
        #[source]
        source: AllocError,
    },
    #[error("demand prediction failed at t={time_ns}ns: {source}")]
    Predictor {
        time_ns: Nanos,
        #[source]
        source: PredictorError,
    },
}

/// Scheduler and control-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySettings {
    /// Registered scheduling policy name.
    pub variant: String,
    /// Registered allocator name, or `auto` to pick by topology.
    pub allocator: String,
    pub load_balance_interval_us: u64,
    pub control_interval_s: u64,
    pub time_slice_us: u64,
    pub percentile: f64,
    pub window_seconds: usize,
    pub reserved_cores: Vec<CoreId>,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            variant: "cas".into(),
            allocator: AUTO.into(),
            load_balance_interval_us: 10 * NANOS_PER_MILLI / NANOS_PER_MICRO,
            control_interval_s: 5,
            time_slice_us: NANOS_PER_MILLI / NANOS_PER_MICRO,
            percentile: DEFAULT_PERCENTILE,
            window_seconds: DEFAULT_WINDOW_SECONDS,
            reserved_cores: Vec::new(),
        }
    }
}

impl PolicySettings {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.load_balance_interval_us == 0 {
            return bad("load_balance_interval_us must be positive");
        }
        if self.control_interval_s == 0 {
            return bad("control_interval_s must be positive");
        }
        if self.time_slice_us == 0 {
            return bad("time_slice_us must be positive");
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad("percentile must be in (0, 100]");
        }
        if self.window_seconds == 0 {
            return bad("window_seconds must be positive");
        }
        Ok(())
    }

    pub fn load_balance_interval_ns(&self) -> Nanos {
        self.load_balance_interval_us * NANOS_PER_MICRO
    }

    pub fn time_slice_ns(&self) -> Nanos {
        self.time_slice_us * NANOS_PER_MICRO
    }
}
