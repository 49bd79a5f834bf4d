//! Core warmth model.
//!
//! Each (core, container) pair carries a warmth score in `[0, 1]` standing in
//! for core-local microarchitectural state. Warmth rises exponentially while
//! the container runs on the core and decays while other containers run
//! there. Execution speed interpolates linearly between cold and hot.
//!
//! Speeds are instruction-units per simulated nanosecond.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{CoreId, MachineTopology};
use crate::units::{Nanos, NANOS_PER_MILLI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostModelError {
    #[error("cost parameter `{0}` is invalid: {1}")]
    Invalid(&'static str, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmthParams {
    pub warm_time_constant_ns: Nanos,
    pub cool_time_constant_ns: Nanos,
    pub cold_speed: f64,
    pub hot_speed: f64,
    pub llc_cross_penalty: f64,
    pub migration_penalty: f64,
}

impl Default for WarmthParams {
    fn default() -> Self {
        Self {
            warm_time_constant_ns: 2 * NANOS_PER_MILLI,
            cool_time_constant_ns: 5 * NANOS_PER_MILLI,
            cold_speed: 0.8,
            hot_speed: 1.0,
            llc_cross_penalty: 50_000.0,
            migration_penalty: 10_000.0,
        }
    }
}

impl WarmthParams {
    /// Equal speeds and no penalties: placement cannot change throughput.
    pub fn neutral() -> Self {
        Self {
            cold_speed: 1.0,
            hot_speed: 1.0,
            llc_cross_penalty: 0.0,
            migration_penalty: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        if !(self.cold_speed > 0.0 && self.cold_speed <= 1.0) {
            return Err(CostModelError::Invalid(
                "cold_speed",
                format!("{} not in (0, 1]", self.cold_speed),
            ));
        }
        if !(self.hot_speed >= self.cold_speed) || !self.hot_speed.is_finite() {
            return Err(CostModelError::Invalid(
                "hot_speed",
                format!("{} below cold_speed {}", self.hot_speed, self.cold_speed),
            ));
        }
        if self.warm_time_constant_ns == 0 {
            return Err(CostModelError::Invalid(
                "warm_time_constant_ns",
                "must be positive".into(),
            ));
        }
        if self.cool_time_constant_ns == 0 {
            return Err(CostModelError::Invalid(
                "cool_time_constant_ns",
                "must be positive".into(),
            ));
        }
        for (name, v) in [
            ("llc_cross_penalty", self.llc_cross_penalty),
            ("migration_penalty", self.migration_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CostModelError::Invalid(name, format!("{v} is negative")));
            }
        }
        Ok(())
    }
}

/// Warmth in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct WarmthScore(f64);

impl WarmthScore {
    pub const COLD: WarmthScore = WarmthScore(0.0);
    pub const HOT: WarmthScore = WarmthScore(1.0);

    pub fn new(value: f64) -> Self {
        Self(value.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn warmth_after_run(w: WarmthScore, dt: Nanos, params: &WarmthParams) -> WarmthScore {
    let decay = (-(dt as f64) / params.warm_time_constant_ns as f64).exp();
    WarmthScore::new(w.0 + (1.0 - w.0) * (1.0 - decay))
}

pub fn warmth_after_eviction(w: WarmthScore, dt_other: Nanos, params: &WarmthParams) -> WarmthScore {
    let decay = (-(dt_other as f64) / params.cool_time_constant_ns as f64).exp();
    WarmthScore::new(w.0 * decay)
}

pub fn effective_speed(w: WarmthScore, params: &WarmthParams) -> f64 {
    params.cold_speed + (params.hot_speed - params.cold_speed) * w.0
}

/// Instruction-units lost, relative to running hot, over `dt` of execution
/// starting from warmth `w`. Integrates the speed curve in closed form:
/// `(hot - cold) * (1 - w) * tau * (1 - e^(-dt/tau))`.
pub fn warmup_loss(w: WarmthScore, dt: Nanos, params: &WarmthParams) -> f64 {
    let tau = params.warm_time_constant_ns as f64;
    let spread = params.hot_speed - params.cold_speed;
    spread * (1.0 - w.0) * tau * (1.0 - (-(dt as f64) / tau).exp())
}

pub fn migration_cost(
    from: CoreId,
    to: CoreId,
    topology: &MachineTopology,
    params: &WarmthParams,
) -> f64 {
    if from == to {
        return 0.0;
    }
    let mut cost = params.migration_penalty;
    if topology.domain_index(from) != topology.domain_index(to) {
        cost += params.llc_cross_penalty;
    }
    cost
}
