//! Rate matrices and per-slot airtime allocations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// U x S matrix of achievable rates (bits/symbol), users along rows.
pub type RateMatrix = Array2<f64>;

/// Column sums of a feasible allocation must equal one within this tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Fraction of airtime each user holds on each channel in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub airtime: Array2<f64>,
}

impl Allocation {
    pub fn zeros(users: usize, channels: usize) -> Self {
        Self {
            airtime: Array2::zeros((users, channels)),
        }
    }

    /// Equal split of every channel over the active users.
    pub fn uniform(active: &[bool], channels: usize) -> Self {
        let count = active.iter().filter(|&&a| a).count();
        let mut alloc = Self::zeros(active.len(), channels);
        if count == 0 {
            return alloc;
        }
        let share = 1.0 / count as f64;
        for (i, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            alloc.airtime.row_mut(i).fill(share);
        }
        alloc
    }

    pub fn users(&self) -> usize {
        self.airtime.nrows()
    }

    pub fn channels(&self) -> usize {
        self.airtime.ncols()
    }

    /// Per-user slot throughput `sum_k P[i,k] * b[i,k]`.
    pub fn user_throughputs(&self, rates: &RateMatrix) -> Vec<f64> {
        debug_assert_eq!(self.airtime.dim(), rates.dim());
        self.airtime
            .rows()
            .into_iter()
            .zip(rates.rows())
            .map(|(p, b)| p.dot(&b))
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.airtime.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// Checks non-negativity, unit column sums and that only `active` users
    /// hold airtime. Returns a description of the first violation.
    pub fn check_feasible(&self, active: &[bool]) -> Result<(), String> {
        if active.len() != self.users() {
            return Err(format!(
                "active set has {} entries for {} users",
                active.len(),
                self.users()
            ));
        }
        for ((i, k), &p) in self.airtime.indexed_iter() {
            if !(p >= 0.0) {
                return Err(format!("negative or NaN airtime {p} at ({i}, {k})"));
            }
            if !active[i] && p != 0.0 {
                return Err(format!("inactive user {i} holds airtime {p} on channel {k}"));
            }
        }
        for (k, s) in self.column_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > FEASIBILITY_TOL {
                return Err(format!("channel {k} airtime sums to {s}"));
            }
        }
        Ok(())
    }

    /// Per channel, gives all airtime to the users maximising `score(i, k)`
    /// among `active`, split equally over exact ties.
    pub fn argmax_split<F>(active: &[bool], channels: usize, mut score: F) -> Self
    where
        F: FnMut(usize, usize) -> f64,
    {
        let mut alloc = Self::zeros(active.len(), channels);
        let mut winners = Vec::with_capacity(active.len());
        for k in 0..channels {
            winners.clear();
            let mut best = f64::NEG_INFINITY;
            for (i, _) in active.iter().enumerate().filter(|(_, &a)| a) {
                let s = score(i, k);
                if s > best {
                    best = s;
                    winners.clear();
                    winners.push(i);
                } else if s == best {
                    winners.push(i);
                }
            }
            if winners.is_empty() {
                continue;
            }
            let share = 1.0 / winners.len() as f64;
            for &i in &winners {
                alloc.airtime[[i, k]] = share;
            }
        }
        alloc
    }
}
