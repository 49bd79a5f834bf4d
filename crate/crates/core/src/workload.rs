//! Container populations and their utilization processes.
//!
//! Every container carries a per-second utilization level: a baseline with
//! additive bursts (synthetic) or a recorded trace (replay). Inside a second,
//! threads wake as a Poisson stream whose rate keeps the expected number of
//! runnable threads equal to the level, each running for an exponentially
//! distributed slice of CPU time. Optional surges concentrate a second's
//! wakeups into short windows shared across containers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Geometric, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{CoreId, MachineTopology};
use crate::units::{Nanos, NANOS_PER_SEC};

pub const TRACE_HEADER: [&str; 3] = ["container_id", "interval_index", "usage_cpus"];

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload config `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace {path}: bad header, expected `{expected}`")]
    Header { path: PathBuf, expected: String },
    #[error("trace {path}, row {row}, field `{field}`: {message}")]
    Row {
        path: PathBuf,
        row: u64,
        field: &'static str,
        message: String,
    },
    #[error("trace {path}: container `{container}` {message}")]
    Series {
        path: PathBuf,
        container: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    pub interval_index: u64,
    pub usage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelSource {
    Synthetic {
        baseline: f64,
        burst_amplitude: f64,
        burst_probability: f64,
        mean_burst_seconds: f64,
        seed: u64,
    },
    Replay {
        usage: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationProcess {
    pub levels: LevelSource,
    /// Mean CPU time of one thread wakeup, in microseconds.
    pub mean_service_us: f64,
    /// Mean number of threads released by one wakeup event (geometric, at
    /// least one).
    #[serde(default = "one")]
    pub mean_fanout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surge: Option<SurgeProcess>,
}

fn one() -> f64 {
    1.0
}

/// Short windows during which the wakeup rate is multiplied. Containers
/// built with the same surge seed surge together. Inside each second the
/// rate is rescaled so the second's mean still equals its level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeProcess {
    /// Expected surge starts per second.
    pub rate_hz: f64,
    /// Mean surge length in milliseconds (exponential).
    pub mean_ms: f64,
    /// Rate multiplier inside a surge relative to outside.
    pub multiplier: f64,
    pub seed: u64,
}

impl SurgeProcess {
    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |field, message: String| Err(WorkloadError::Config { field, message });
        if !(self.rate_hz >= 0.0 && self.rate_hz.is_finite()) {
            return bad("surge_rate_hz", format!("{} is negative", self.rate_hz));
        }
        if !(self.mean_ms > 0.0 && self.mean_ms.is_finite()) {
            return bad("surge_mean_ms", format!("{} must be positive", self.mean_ms));
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return bad("surge_multiplier", format!("{} below 1", self.multiplier));
        }
        Ok(())
    }

    /// Disjoint, sorted `[start, end)` surge windows before `horizon`.
    pub fn windows(&self, horizon: Nanos) -> Vec<(Nanos, Nanos)> {
        let mut out: Vec<(Nanos, Nanos)> = Vec::new();
        if self.rate_hz <= 0.0 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let gap_mean = NANOS_PER_SEC as f64 / self.rate_hz;
        let len_mean = self.mean_ms * 1e6;
        let mut t = 0.0;
        loop {
            let gap: f64 = rng.sample(Exp1);
            let len: f64 = rng.sample(Exp1);
            t += gap * gap_mean;
            let start = t as Nanos;
            if start >= horizon {
                break;
            }
            let end = ((t + len * len_mean) as Nanos).min(horizon);
            match out.last_mut() {
                Some(last) if start <= last.1 => last.1 = last.1.max(end),
                _ if end > start => out.push((start, end)),
                _ => {}
            }
        }
        out
    }
}

impl UtilizationProcess {
    pub fn baseline(&self) -> f64 {
        match &self.levels {
            LevelSource::Synthetic { baseline, .. } => *baseline,
            LevelSource::Replay { usage } => {
                usage.iter().sum::<f64>() / usage.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub container_id: String,
    pub requested_limit: f64,
    pub runnable_cpuset: Vec<CoreId>,
    pub process: UtilizationProcess,
}

impl ContainerSpec {
    pub fn validate(&self, topology: &MachineTopology) -> Result<(), WorkloadError> {
        let bad = |field, message: String| WorkloadError::Config { field, message };
        if self.runnable_cpuset.is_empty() {
            return Err(bad(
                "cpuset",
                format!("container `{}` has an empty cpuset", self.container_id),
            ));
        }
        if let Some(&c) = self.runnable_cpuset.iter().find(|&&c| c >= topology.total_cores) {
            return Err(bad(
                "cpuset",
                format!("container `{}` names core {c} outside the machine", self.container_id),
            ));
        }
        let width = self.runnable_cpuset.len() as f64;
        if !(self.requested_limit > 0.0 && self.requested_limit <= width) {
            return Err(bad(
                "requested_limit",
                format!(
                    "container `{}`: {} not in (0, {width}]",
                    self.container_id, self.requested_limit
                ),
            ));
        }
        if !(self.process.mean_service_us > 0.0 && self.process.mean_service_us.is_finite()) {
            return Err(bad("mean_service_us", "must be positive".into()));
        }
        if !(self.process.mean_fanout >= 1.0 && self.process.mean_fanout.is_finite()) {
            return Err(bad("mean_fanout", format!("{} below 1", self.process.mean_fanout)));
        }
        if let Some(surge) = &self.process.surge {
            surge.validate()?;
        }
        if let LevelSource::Synthetic {
            baseline,
            burst_amplitude,
            burst_probability,
            mean_burst_seconds,
            ..
        } = self.process.levels
        {
            if !(baseline >= 0.0 && baseline <= self.requested_limit) {
                return Err(bad(
                    "baseline",
                    format!(
                        "container `{}`: {baseline} not in [0, requested_limit {}]",
                        self.container_id, self.requested_limit
                    ),
                ));
            }
            if !(burst_amplitude >= 0.0 && burst_amplitude.is_finite()) {
                return Err(bad("burst_amplitude", format!("{burst_amplitude} is negative")));
            }
            if !(0.0..=1.0).contains(&burst_probability) {
                return Err(bad(
                    "burst_probability",
                    format!("{burst_probability} not in [0, 1]"),
                ));
            }
            if !(mean_burst_seconds >= 1.0 && mean_burst_seconds.is_finite()) {
                return Err(bad(
                    "mean_burst_seconds",
                    format!("{mean_burst_seconds} below 1"),
                ));
            }
        }
        Ok(())
    }

    /// Utilization level for each of the first `seconds` seconds, capped at
    /// the cpuset width. Replayed traces read as zero past their end.
    pub fn utilization_samples(&self, seconds: usize) -> Vec<UtilizationSample> {
        let width = self.runnable_cpuset.len() as f64;
        let levels: Vec<f64> = match &self.process.levels {
            LevelSource::Synthetic {
                baseline,
                burst_amplitude,
                burst_probability,
                mean_burst_seconds,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let keep_going = 1.0 - 1.0 / mean_burst_seconds;
                let mut burst_left = 0u64;
                (0..seconds)
                    .map(|_| {
                        if burst_left == 0 && rng.random_bool(*burst_probability) {
                            burst_left = 1;
                            while rng.random::<f64>() < keep_going {
                                burst_left += 1;
                            }
                        }
                        let level = if burst_left > 0 {
                            burst_left -= 1;
                            baseline + burst_amplitude
                        } else {
                            *baseline
                        };
                        level.min(width)
                    })
                    .collect()
            }
            LevelSource::Replay { usage } => (0..seconds)
                .map(|s| usage.get(s).copied().unwrap_or(0.0).min(width))
                .collect(),
        };
        levels
            .into_iter()
            .enumerate()
            .map(|(i, usage)| UtilizationSample {
                interval_index: i as u64,
                usage,
            })
            .collect()
    }

    /// Instantaneous utilization level as `(start, level)` pieces covering
    /// `[0, horizon)`: the per-second level, reshaped by surges so that each
    /// second still integrates to its level.
    pub fn level_segments(&self, horizon: Nanos) -> Vec<(Nanos, f64)> {
        let seconds = horizon.div_ceil(NANOS_PER_SEC) as usize;
        let levels = self.utilization_samples(seconds);
        let windows = match &self.process.surge {
            Some(s) => s.windows(horizon),
            None => Vec::new(),
        };
        let m = self.process.surge.as_ref().map_or(1.0, |s| s.multiplier);
        let mut out = Vec::new();
        let mut w = 0;
        for sample in levels {
            let lo = sample.interval_index * NANOS_PER_SEC;
            let hi = (lo + NANOS_PER_SEC).min(horizon);
            while w < windows.len() && windows[w].1 <= lo {
                w += 1;
            }
            let mut pieces = Vec::new();
            let mut covered = 0;
            let mut t = lo;
            for &(a, b) in windows[w..].iter().take_while(|&&(a, _)| a < hi) {
                let (a, b) = (a.max(lo), b.min(hi));
                if a > t {
                    pieces.push((t, false));
                }
                pieces.push((a, true));
                covered += b - a;
                t = b;
            }
            if t < hi {
                pieces.push((t, false));
            }
            let f = covered as f64 / (hi - lo) as f64;
            let k = sample.usage / (1.0 + (m - 1.0) * f);
            for (start, surging) in pieces {
                out.push((start, if surging { k * m } else { k }));
            }
        }
        out
    }

    /// Draws an instantaneous runnable-thread count at simulated time `now`.
    /// With fan-out, wakeup batches are Poisson and each contributes a
    /// geometric number of threads, so the mean still equals the level.
    pub fn sample_parallelism(&self, now: Nanos, rng: &mut impl Rng) -> u32 {
        let segments = self.level_segments((now / NANOS_PER_SEC + 1) * NANOS_PER_SEC);
        let i = segments.partition_point(|&(start, _)| start <= now);
        let level = if i == 0 { 0.0 } else { segments[i - 1].1 };
        let fanout = self.process.mean_fanout;
        if fanout <= 1.0 {
            return sample_parallelism(level, rng);
        }
        let batches = sample_parallelism(level / fanout, rng);
        (0..batches).map(|_| batch_size(fanout, rng)).sum()
    }
}

/// Runnable-thread count for a utilization level: Poisson with mean `level`,
/// the stationary occupancy of Poisson wakeups with exponential service.
pub fn sample_parallelism(level: f64, rng: &mut impl Rng) -> u32 {
    if level <= 0.0 {
        return 0;
    }
    Poisson::new(level).map_or(0, |d| d.sample(rng) as u32)
}

/// Threads released by one wakeup event: `1 + Geometric`, mean `fanout`.
pub fn batch_size(fanout: f64, rng: &mut impl Rng) -> u32 {
    if fanout <= 1.0 {
        return 1;
    }
    Geometric::new(1.0 / fanout).map_or(1, |g| 1 + g.sample(rng) as u32)
}

/// Mixes a run seed with a stream index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub containers: usize,
    /// Sum of baselines as a fraction of machine cores.
    pub target_utilization: f64,
    /// requested_limit = baseline * limit_factor (capped at the cpuset).
    pub limit_factor: f64,
    /// Burst amplitude = baseline * burst_amplitude_factor.
    pub burst_amplitude_factor: f64,
    pub burst_probability: f64,
    pub mean_burst_seconds: f64,
    pub mean_service_us: f64,
    pub mean_fanout: f64,
    /// Machine-wide surges shared by every container; 0 disables them.
    pub surge_rate_hz: f64,
    pub surge_mean_ms: f64,
    pub surge_multiplier: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            containers: 8,
            target_utilization: 0.4,
            limit_factor: 1.5,
            burst_amplitude_factor: 1.0,
            burst_probability: 0.1,
            mean_burst_seconds: 1.0,
            mean_service_us: 500.0,
            mean_fanout: 1.0,
            surge_rate_hz: 2.0,
            surge_mean_ms: 20.0,
            surge_multiplier: 4.0,
        }
    }
}

pub fn generate_workload(
    config: &GeneratorConfig,
    topology: &MachineTopology,
    seed: u64,
) -> Result<Vec<ContainerSpec>, WorkloadError> {
    let bad = |field, message: String| WorkloadError::Config { field, message };
    if config.containers == 0 {
        return Err(bad("containers", "need at least one container".into()));
    }
    if !(config.target_utilization > 0.0) {
        return Err(bad(
            "target_utilization",
            format!("{} must be positive", config.target_utilization),
        ));
    }
    if config.target_utilization > 1.0 {
        return Err(bad(
            "target_utilization",
            format!(
                "{} exceeds machine capacity (must be <= 1.0)",
                config.target_utilization
            ),
        ));
    }
    if !(config.limit_factor >= 1.0) {
        return Err(bad("limit_factor", format!("{} below 1", config.limit_factor)));
    }

    let cores = topology.total_cores as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let weights: Vec<f64> = (0..config.containers)
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let weight_sum: f64 = weights.iter().sum();
    let budget = config.target_utilization * cores;
    let cpuset: Vec<CoreId> = topology.cores().collect();
    let surge = (config.surge_rate_hz > 0.0).then(|| SurgeProcess {
        rate_hz: config.surge_rate_hz,
        mean_ms: config.surge_mean_ms,
        multiplier: config.surge_multiplier,
        seed: derive_seed(seed, u64::MAX - 1),
    });

    let specs = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let baseline = budget * w / weight_sum;
            let requested_limit = (baseline * config.limit_factor).min(cores);
            ContainerSpec {
                container_id: format!("c{i}"),
                requested_limit,
                runnable_cpuset: cpuset.clone(),
                process: UtilizationProcess {
                    levels: LevelSource::Synthetic {
                        baseline: baseline.min(requested_limit),
                        burst_amplitude: baseline * config.burst_amplitude_factor,
                        burst_probability: config.burst_probability,
                        mean_burst_seconds: config.mean_burst_seconds,
                        seed: derive_seed(seed, i as u64),
                    },
                    mean_service_us: config.mean_service_us,
                    mean_fanout: config.mean_fanout,
                    surge: surge.clone(),
                },
            }
        })
        .collect::<Vec<_>>();
    for s in &specs {
        s.validate(topology)?;
    }
    Ok(specs)
}

/// Reads a `container_id,interval_index,usage_cpus` CSV into replaying
/// containers whose cpuset is the whole machine. Containers appear in order
/// of first occurrence.
pub fn ingest_trace(
    path: &Path,
    topology: &MachineTopology,
    mean_service_us: f64,
    mean_fanout: f64,
) -> Result<Vec<ContainerSpec>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let header_ok = reader
        .headers()
        .map(|h| h.iter().eq(TRACE_HEADER.iter().copied()))
        .unwrap_or(false);
    if !header_ok {
        return Err(WorkloadError::Header {
            path: path.to_path_buf(),
            expected: TRACE_HEADER.join(","),
        });
    }

    let cores = topology.total_cores as f64;
    let mut order: Vec<String> = Vec::new();
    let mut series: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| WorkloadError::Row {
            path: path.to_path_buf(),
            row: e.position().map_or(0, |p| p.line()),
            field: "record",
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line());
        let row_err = |field, message: String| WorkloadError::Row {
            path: path.to_path_buf(),
            row,
            field,
            message,
        };
        if record.len() != 3 {
            return Err(row_err("record", format!("expected 3 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(row_err("container_id", "empty".into()));
        }
        let index: u64 = record[1]
            .parse()
            .map_err(|_| row_err("interval_index", format!("`{}` is not a non-negative integer", &record[1])))?;
        let usage: f64 = record[2]
            .parse()
            .map_err(|_| row_err("usage_cpus", format!("`{}` is not a number", &record[2])))?;
        if !usage.is_finite() || usage < 0.0 {
            return Err(row_err("usage_cpus", format!("usage {usage} is negative")));
        }
        if usage > cores {
            return Err(row_err(
                "usage_cpus",
                format!("usage {usage} exceeds the machine's {cores} cores"),
            ));
        }
        if !series.contains_key(&id) {
            order.push(id.clone());
        }
        series.entry(id).or_default().push((index, usage));
    }

    let cpuset: Vec<CoreId> = topology.cores().collect();
    let mut specs = Vec::with_capacity(order.len());
    for id in order {
        let mut points = series.remove(&id).unwrap_or_default();
        points.sort_by_key(|&(i, _)| i);
        for (expected, &(index, _)) in points.iter().enumerate() {
            if index != expected as u64 {
                let message = if index < expected as u64 {
                    format!("repeats interval {index}")
                } else {
                    format!("is missing interval {expected}")
                };
                return Err(WorkloadError::Series {
                    path: path.to_path_buf(),
                    container: id,
                    message,
                });
            }
        }
        let usage: Vec<f64> = points.into_iter().map(|(_, u)| u).collect();
        let peak = usage.iter().copied().fold(0.0, f64::max);
        let requested_limit = if peak > 0.0 { peak } else { 1.0f64.min(cores) };
        specs.push(ContainerSpec {
            container_id: id,
            requested_limit,
            runnable_cpuset: cpuset.clone(),
            process: UtilizationProcess {
                levels: LevelSource::Replay { usage },
                mean_service_us,
                mean_fanout,
                surge: None,
            },
        });
    }
    Ok(specs)
}
