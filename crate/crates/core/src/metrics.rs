//! Throughput series, system throughput, Jain's index and replication summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("throughput series is empty")]
    Empty,
    #[error("slot {slot} has {got} users, expected {expected}")]
    Ragged { slot: usize, got: usize, expected: usize },
    #[error("negative or non-finite throughput {value} for user {user} in slot {slot}")]
    InvalidValue { slot: usize, user: usize, value: f64 },
    #[error("window must be at least one slot")]
    ZeroWindow,
    #[error("no slot with positive smoothed throughput to average over")]
    AllZero,
    #[error("need at least 2 replications to summarize, got {0}")]
    TooFewReplications(usize),
}

/// Per-slot, per-user throughputs `T_i[n]` together with the smoothing window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSeries {
    /// `slots[n][i]`, bits/symbol summed over channels.
    pub slots: Vec<Vec<f64>>,
    pub window: usize,
}

impl ThroughputSeries {
    pub fn new(slots: Vec<Vec<f64>>, window: usize) -> Result<Self, MetricsError> {
        let s = Self { slots, window };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.window == 0 {
            return Err(MetricsError::ZeroWindow);
        }
        let users = self.slots.first().ok_or(MetricsError::Empty)?.len();
        if users == 0 {
            return Err(MetricsError::Empty);
        }
        for (n, row) in self.slots.iter().enumerate() {
            if row.len() != users {
                return Err(MetricsError::Ragged { slot: n, got: row.len(), expected: users });
            }
            if let Some((i, &v)) = row.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(MetricsError::InvalidValue { slot: n, user: i, value: v });
            }
        }
        Ok(())
    }

    pub fn users(&self) -> usize {
        self.slots.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `T^(W)[n]`: mean of the last `min(n, W)` slots up to and including `n`.
    pub fn smoothed(&self) -> Vec<Vec<f64>> {
        let users = self.users();
        let mut prefix = vec![vec![0.0; users]; self.slots.len() + 1];
        for (n, row) in self.slots.iter().enumerate() {
            for i in 0..users {
                prefix[n + 1][i] = prefix[n][i] + row[i];
            }
        }
        (1..=self.slots.len())
            .map(|n| {
                let from = n.saturating_sub(self.window);
                let count = (n - from) as f64;
                (0..users).map(|i| ((prefix[n][i] - prefix[from][i]) / count).max(0.0)).collect()
            })
            .collect()
    }

    /// Time-averaged `T_i[n]` per user.
    pub fn user_means(&self) -> Vec<f64> {
        let n = self.slots.len().max(1) as f64;
        (0..self.users())
            .map(|i| self.slots.iter().map(|row| row[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Jain's index of one vector; `None` when every entry is zero.
pub fn jain_term(x: &[f64]) -> Option<f64> {
    let sum: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return None;
    }
    Some(sum * sum / (x.len() as f64 * sq))
}

/// Time average of the per-slot Jain index over smoothed throughputs.
///
/// Slots where every smoothed throughput is zero are left out, and so is the
/// warm-up (`n < W`) when `skip_warmup` is set.
pub fn jain_index(series: &ThroughputSeries, skip_warmup: bool) -> Result<f64, MetricsError> {
    series.validate()?;
    let first = if skip_warmup { series.window - 1 } else { 0 };
    let terms: Vec<f64> = series
        .smoothed()
        .iter()
        .skip(first)
        .filter_map(|t| jain_term(t))
        .collect();
    if terms.is_empty() {
        return Err(MetricsError::AllZero);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Time average of `sum_i T_i[n]`.
pub fn system_throughput(series: &ThroughputSeries) -> Result<f64, MetricsError> {
    series.validate()?;
    let total: f64 = series.slots.iter().map(|row| row.iter().sum::<f64>()).sum();
    Ok(total / series.len() as f64)
}

/// Mean with a 95% normal-approximation confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (divisor R - 1).
    pub std_dev: f64,
    pub half_width: f64,
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Summary, MetricsError> {
    let r = values.len();
    if r < 2 {
        return Err(MetricsError::TooFewReplications(r));
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    let std_dev = var.sqrt();
    Ok(Summary {
        mean,
        std_dev,
        half_width: 1.96 * std_dev / (r as f64).sqrt(),
        count: r,
    })
}
