//! Look-back max-min fair allocation for one slot.
//!
//! Maximises `min_i (a_i + (1/d) sum_k P[i,k] b[i,k])` over the product of
//! channel simplices. The objective is concave and piecewise linear, so the
//! slot problem is the linear program
//!
//! ```text
//! max t  s.t.  t - (1/d) sum_k b[i,k] P[i,k] <= a_i   (active i)
//!              sum_i P[i,k] <= 1                      (every k)
//!              P >= 0, t >= 0
//! ```
//!
//! which is solved exactly by a dense simplex method with Bland's rule.
//! Relaxing the column sums to `<= 1` is harmless: extra airtime never
//! lowers the minimum, and any slack is handed out afterwards.

use log::warn;

use crate::allocation::Allocation;
use crate::pf::{SlotProblem, SolverError};

const PIVOT_EPS: f64 = 1e-12;
const MAX_PIVOTS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MaxMinReport {
    pub allocation: Allocation,
    /// Optimal minimum smoothed throughput over the active users.
    pub min_throughput: f64,
    pub pivots: usize,
}

/// Solves the max-min slot problem over `prob.active`.
pub fn solve_maxmin_slot(prob: &SlotProblem) -> Result<MaxMinReport, SolverError> {
    solve_maxmin_with_divisors(prob, &vec![prob.window_divisor; prob.users()])
}

/// As [`solve_maxmin_slot`] but user `i` smooths its slot throughput by
/// `divisors[i]` instead of the shared `window_divisor`.
pub fn solve_maxmin_with_divisors(prob: &SlotProblem, divisors: &[usize]) -> Result<MaxMinReport, SolverError> {
    prob.validate()?;
    if divisors.len() != prob.users() || divisors.contains(&0) {
        return Err(SolverError::InvalidProblem(format!(
            "need {} positive divisors, got {divisors:?}",
            prob.users()
        )));
    }
    let active = prob.optimisable();
    for i in (0..prob.users()).filter(|&i| prob.active[i] && !active[i]) {
        warn!("user {i} has zero baseline and zero rates; excluded from the max-min slot problem");
    }
    let members: Vec<usize> = (0..prob.users()).filter(|&i| active[i]).collect();
    if members.is_empty() {
        return Err(SolverError::InfeasibleActiveSet);
    }
    let (users, channels) = prob.rates.dim();
    let var = |j: usize, k: usize| j * channels + k;
    let t_var = members.len() * channels;
    let n = t_var + 1;
    let m = members.len() + channels;

    let mut lp = Tableau::new(m, n);
    for (j, &i) in members.iter().enumerate() {
        for k in 0..channels {
            lp.set(j, var(j, k), -prob.rates[[i, k]] / divisors[i] as f64);
        }
        lp.set(j, t_var, 1.0);
        lp.set_rhs(j, prob.baseline[i]);
    }
    for k in 0..channels {
        let row = members.len() + k;
        for j in 0..members.len() {
            lp.set(row, var(j, k), 1.0);
        }
        lp.set_rhs(row, 1.0);
    }
    lp.set_objective(t_var, 1.0);
    let pivots = lp.maximize()?;
    let x = lp.solution();

    let mut alloc = Allocation::zeros(users, channels);
    for (j, &i) in members.iter().enumerate() {
        for k in 0..channels {
            alloc.airtime[[i, k]] = x[var(j, k)].max(0.0);
        }
    }
    hand_out_slack(prob, divisors, &members, &mut alloc);
    let smoothed = smoothed(prob, divisors, &alloc);
    let min_throughput = members.iter().map(|&i| smoothed[i]).fold(f64::INFINITY, f64::min);
    Ok(MaxMinReport {
        allocation: alloc,
        min_throughput,
        pivots,
    })
}

/// Gives unallocated airtime on each channel to the worst-off member that
/// can use it, then renormalizes the column.
fn hand_out_slack(prob: &SlotProblem, divisors: &[usize], members: &[usize], alloc: &mut Allocation) {
    for k in 0..prob.channels() {
        let used: f64 = members.iter().map(|&i| alloc.airtime[[i, k]]).sum();
        let slack = 1.0 - used;
        if slack > 0.0 {
            let smoothed = smoothed(prob, divisors, alloc);
            let target = members
                .iter()
                .copied()
                .filter(|&i| prob.rates[[i, k]] > 0.0)
                .min_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b]))
                .unwrap_or(members[0]);
            alloc.airtime[[target, k]] += slack;
        }
        let total: f64 = members.iter().map(|&i| alloc.airtime[[i, k]]).sum();
        for &i in members {
            alloc.airtime[[i, k]] /= total;
        }
    }
}

fn smoothed(prob: &SlotProblem, divisors: &[usize], alloc: &Allocation) -> Vec<f64> {
    alloc
        .user_throughputs(&prob.rates)
        .iter()
        .enumerate()
        .map(|(i, x)| prob.baseline[i] + x / divisors[i] as f64)
        .collect()
}

/// Dense tableau for `max c.x s.t. A x <= b, x >= 0` with `b >= 0`, so the
/// slack basis is feasible from the start.
struct Tableau {
    m: usize,
    n: usize,
    /// (m + 1) rows of n + m + 1 entries; the last row is the objective.
    cells: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn new(m: usize, n: usize) -> Self {
        let width = n + m + 1;
        let mut cells = vec![0.0; (m + 1) * width];
        for i in 0..m {
            cells[i * width + n + i] = 1.0;
        }
        Self {
            m,
            n,
            cells,
            basis: (n..n + m).collect(),
        }
    }

    fn width(&self) -> usize {
        self.n + self.m + 1
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.width() + col]
    }

    fn set(&mut self, row: usize, col: usize, v: f64) {
        let w = self.width();
        self.cells[row * w + col] = v;
    }

    fn set_rhs(&mut self, row: usize, v: f64) {
        debug_assert!(v >= 0.0);
        let w = self.width();
        self.cells[row * w + w - 1] = v;
    }

    fn set_objective(&mut self, col: usize, c: f64) {
        let (m, w) = (self.m, self.width());
        self.cells[m * w + col] = -c;
    }

    fn maximize(&mut self) -> Result<usize, SolverError> {
        let w = self.width();
        for pivots in 0..MAX_PIVOTS {
            // Bland: lowest-index improving column.
            let Some(col) = (0..w - 1).find(|&j| self.at(self.m, j) < -PIVOT_EPS) else {
                return Ok(pivots);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.at(i, col);
                if a > PIVOT_EPS {
                    let ratio = self.at(i, w - 1) / a;
                    let better = match leave {
                        None => true,
                        Some((r, best)) => {
                            ratio < best - PIVOT_EPS
                                || (ratio <= best + PIVOT_EPS && self.basis[i] < self.basis[r])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(SolverError::InvalidProblem("max-min program is unbounded".into()));
            };
            self.pivot(row, col);
        }
        Err(SolverError::InvalidProblem(format!(
            "simplex exceeded {MAX_PIVOTS} pivots"
        )))
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.width();
        let p = self.at(row, col);
        for j in 0..w {
            self.cells[row * w + j] /= p;
        }
        for i in 0..=self.m {
            if i == row {
                continue;
            }
            let f = self.at(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..w {
                let v = self.cells[row * w + j];
                self.cells[i * w + j] -= f * v;
            }
        }
        self.basis[row] = col;
    }

    fn solution(&self) -> Vec<f64> {
        let w = self.width();
        let mut x = vec![0.0; self.n];
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.n {
                x[b] = self.at(i, w - 1);
            }
        }
        x
    }
}
