//! Percentile demand prediction over a trailing window of per-second
//! utilization samples.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WINDOW_SECONDS: usize = 300;
pub const DEFAULT_PERCENTILE: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("negative usage sample {0}")]
    NegativeUsage(f64),
    #[error("usage sample is not a finite number")]
    NonFinite,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("window size must be at least 1")]
    EmptyWindow,
    #[error("no samples recorded yet")]
    ColdStart,
}

/// Index (1-based) of the nearest-rank `p`-th percentile among `n` values:
/// the smallest rank `r` with `r >= p/100 * n`, and never less than 1.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    let exact = p * n as f64 / 100.0;
    let mut rank = exact.ceil();
    // p * n is usually an integer multiple of 100 off by an ulp; don't round
    // that up to the next rank.
    if rank - exact > 1.0 - 1e-9 {
        rank -= 1.0;
    }
    (rank as usize).clamp(1, n.max(1))
}

/// Nearest-rank percentile of an unsorted slice. Returns `None` when empty.
pub fn percentile_of(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut scratch = values.to_vec();
    let k = nearest_rank(p, scratch.len()) - 1;
    let (_, v, _) = scratch.select_nth_unstable_by(k, f64::total_cmp);
    Some(*v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandHistory {
    window: VecDeque<f64>,
    window_seconds: usize,
    percentile_p: f64,
}

impl Default for DemandHistory {
    fn default() -> Self {
        Self {
            window: VecDeque::with_capacity(DEFAULT_WINDOW_SECONDS),
            window_seconds: DEFAULT_WINDOW_SECONDS,
            percentile_p: DEFAULT_PERCENTILE,
        }
    }
}

impl DemandHistory {
    pub fn new(window_seconds: usize, percentile_p: f64) -> Result<Self, PredictorError> {
        if window_seconds == 0 {
            return Err(PredictorError::EmptyWindow);
        }
        if !(percentile_p > 0.0 && percentile_p <= 100.0) {
            return Err(PredictorError::BadPercentile(percentile_p));
        }
        Ok(Self {
            window: VecDeque::with_capacity(window_seconds),
            window_seconds,
            percentile_p,
        })
    }

    pub fn record_sample(&mut self, usage: f64) -> Result<(), PredictorError> {
        if !usage.is_finite() {
            return Err(PredictorError::NonFinite);
        }
        if usage < 0.0 {
            return Err(PredictorError::NegativeUsage(usage));
        }
        if self.window.len() == self.window_seconds {
            self.window.pop_front();
        }
        self.window.push_back(usage);
        Ok(())
    }

    /// Nearest-rank p-th percentile of the retained samples. Always one of
    /// the observed values.
    pub fn demand(&self) -> Result<f64, PredictorError> {
        self.demand_at(self.percentile_p)
    }

    pub fn demand_at(&self, p: f64) -> Result<f64, PredictorError> {
        if !(p > 0.0 && p <= 100.0) {
            return Err(PredictorError::BadPercentile(p));
        }
        let (a, b) = self.window.as_slices();
        let mut scratch = Vec::with_capacity(self.window.len());
        scratch.extend_from_slice(a);
        scratch.extend_from_slice(b);
        percentile_of(&scratch, p).ok_or(PredictorError::ColdStart)
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn percentile(&self) -> f64 {
        self.percentile_p
    }

    pub fn window_seconds(&self) -> usize {
        self.window_seconds
    }
}
