use serde::{Deserialize, Serialize};

use super::{MetricsError, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub baseline: Option<f64>,
    pub candidate: Option<f64>,
    /// `candidate / baseline`; `None` when the baseline is zero or missing.
    pub ratio: Option<f64>,
    /// `100 * (ratio - 1)`.
    pub delta_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub seed: u64,
    pub baseline_policy: String,
    pub candidate_policy: String,
    pub deltas: Vec<MetricDelta>,
}

impl DeltaSummary {
    pub fn get(&self, metric: &str) -> Option<&MetricDelta> {
        self.deltas.iter().find(|d| d.metric == metric)
    }
}

fn delta(metric: &str, baseline: Option<f64>, candidate: Option<f64>) -> MetricDelta {
    let ratio = match (baseline, candidate) {
        (Some(b), Some(c)) if b != 0.0 => Some(c / b),
        _ => None,
    };
    MetricDelta {
        metric: metric.to_string(),
        baseline,
        candidate,
        ratio,
        delta_percent: ratio.map(|r| 100.0 * (r - 1.0)),
    }
}

/// Metric-by-metric comparison of two runs over the same inputs.
pub fn compare_reports(
    baseline: &MetricsReport,
    candidate: &MetricsReport,
) -> Result<DeltaSummary, MetricsError> {
    let (a, b) = (&baseline.config, &candidate.config);
    if a.seed != b.seed {
        return Err(MetricsError::Mismatch(format!("seeds {} and {}", a.seed, b.seed)));
    }
    if a.topology != b.topology {
        return Err(MetricsError::Mismatch(format!(
            "topologies {} and {}",
            a.topology, b.topology
        )));
    }
    if a.horizon_ns != b.horizon_ns {
        return Err(MetricsError::Mismatch("different horizons".into()));
    }
    if a.containers != b.containers {
        return Err(MetricsError::Mismatch("different container sets".into()));
    }
    let (m, n) = (&baseline.machine, &candidate.machine);
    let count = |v: u64| Some(v as f64);
    let deltas = vec![
        delta("throughput_per_cpu", Some(m.throughput_per_cpu), Some(n.throughput_per_cpu)),
        delta("completed_work", Some(m.completed_work), Some(n.completed_work)),
        delta("sched_latency_p50_us", m.sched_latency.p50_us, n.sched_latency.p50_us),
        delta("sched_latency_p90_us", m.sched_latency.p90_us, n.sched_latency.p90_us),
        delta("sched_latency_p99_us", m.sched_latency.p99_us, n.sched_latency.p99_us),
        delta("migrations_total", count(m.migrations_total), count(n.migrations_total)),
        delta(
            "migrations_cross_llc",
            count(m.migrations_cross_llc),
            count(n.migrations_cross_llc),
        ),
        delta("context_switches", count(m.context_switches), count(n.context_switches)),
        delta("aggregate_pcr", m.aggregate_pcr, n.aggregate_pcr),
        delta("utilization", Some(m.utilization), Some(n.utilization)),
    ];
    Ok(DeltaSummary {
        seed: a.seed,
        baseline_policy: a.policy.clone(),
        candidate_policy: b.policy.clone(),
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonAggregate {
    pub seeds: usize,
    /// Geometric mean of per-seed throughput ratios.
    pub throughput_ratio_geomean: Option<f64>,
    /// Geometric mean of per-seed p99 latency ratios.
    pub p99_latency_ratio_geomean: Option<f64>,
    pub cross_llc_migrations_baseline: f64,
    pub cross_llc_migrations_candidate: f64,
    /// `1 - candidate / baseline` over summed counts.
    pub cross_llc_reduction: Option<f64>,
}

fn geomean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut n = 0usize;
    let mut log_sum = 0.0;
    for v in values {
        let v = v?;
        if v <= 0.0 {
            return None;
        }
        log_sum += v.ln();
        n += 1;
    }
    (n > 0).then(|| (log_sum / n as f64).exp())
}

pub fn aggregate_comparisons(summaries: &[DeltaSummary]) -> ComparisonAggregate {
    let ratio = |s: &DeltaSummary, m: &str| s.get(m).and_then(|d| d.ratio);
    let sum = |m: &str, pick: fn(&MetricDelta) -> Option<f64>| -> f64 {
        summaries
            .iter()
            .filter_map(|s| s.get(m).and_then(pick))
            .sum()
    };
    let base = sum("migrations_cross_llc", |d| d.baseline);
    let cand = sum("migrations_cross_llc", |d| d.candidate);
    ComparisonAggregate {
        seeds: summaries.len(),
        throughput_ratio_geomean: geomean(summaries.iter().map(|s| ratio(s, "throughput_per_cpu"))),
        p99_latency_ratio_geomean: geomean(
            summaries.iter().map(|s| ratio(s, "sched_latency_p99_us")),
        ),
        cross_llc_migrations_baseline: base,
        cross_llc_migrations_candidate: cand,
        cross_llc_reduction: (base > 0.0).then(|| 1.0 - cand / base),
    }
}
