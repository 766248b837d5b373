//! Per-slot proportional-fair airtime allocation.
//!
//! Maximises `sum_i ln(a_i + (1/d) sum_k P[i,k] b[i,k])` over the product of
//! per-channel simplices, where `a_i` is the look-back baseline throughput and
//! `d = min(n, W)` the window divisor. The gradient with respect to `P[i,k]`
//! is the shadow price `b[i,k] / (d a_i + sum_k P[i,k] b[i,k])`.
//!
//! The solver is Frank-Wolfe: the linear subproblem hands every channel to the
//! user with the highest shadow price, and the step length comes from a
//! bisection on the derivative along the segment. Each iteration is followed
//! by a pairwise sweep that moves airtime on one channel from its cheapest
//! holder to its most valuable user with an exact closed-form step, which is
//! what lets the iterate drop users from a channel exactly. Once the support
//! settles, the optimality conditions restricted to it are a square linear
//! system, and solving that system finishes the job to rounding error.

use log::warn;
use thiserror::Error;

use crate::allocation::{Allocation, RateMatrix, FEASIBILITY_TOL};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 10_000;
/// Airtime at or below this is treated as "not held" by the KKT residual.
pub const SUPPORT_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid slot problem: {0}")]
    InvalidProblem(String),
    #[error("no optimisable user in the active set")]
    InfeasibleActiveSet,
    #[error("shadow price of user {user} on channel {channel} divides by zero")]
    DivisionByZero { user: usize, channel: usize },
    #[error("no convergence after {} iterations (KKT residual {:.3e})", .report.iterations, .report.kkt_residual)]
    NonConvergence { report: Box<SolveReport> },
    #[error("grid search limited to 3 users and 3 channels, got {users}x{channels}")]
    OracleTooLarge { users: usize, channels: usize },
    #[error("grid step must lie in (0, 0.5], got {0}")]
    InvalidGridStep(f64),
}

/// One slot of the look-back PF program.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotProblem {
    pub rates: RateMatrix,
    /// Past smoothed throughput `a_i[n-1]` per user.
    pub baseline: Vec<f64>,
    /// `min(n, W)`.
    pub window_divisor: usize,
    /// Users allowed to receive airtime (the backlogged set).
    pub active: Vec<bool>,
}

impl SlotProblem {
    pub fn new(rates: RateMatrix, baseline: Vec<f64>, window_divisor: usize) -> Result<Self, SolverError> {
        let active = vec![true; rates.nrows()];
        Self::with_active(rates, baseline, window_divisor, active)
    }

    pub fn with_active(
        rates: RateMatrix,
        baseline: Vec<f64>,
        window_divisor: usize,
        active: Vec<bool>,
    ) -> Result<Self, SolverError> {
        let p = Self {
            rates,
            baseline,
            window_divisor,
            active,
        };
        p.validate()?;
        Ok(p)
    }

    /// The memoryless problem: zero baseline, divisor one.
    pub fn deterministic(rates: RateMatrix) -> Result<Self, SolverError> {
        let u = rates.nrows();
        Self::new(rates, vec![0.0; u], 1)
    }

    pub fn users(&self) -> usize {
        self.rates.nrows()
    }

    pub fn channels(&self) -> usize {
        self.rates.ncols()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        let (u, s) = self.rates.dim();
        if u == 0 || s == 0 {
            return bad(format!("empty rate matrix {u}x{s}"));
        }
        if self.baseline.len() != u || self.active.len() != u {
            return bad(format!(
                "{} baselines and {} active flags for {u} users",
                self.baseline.len(),
                self.active.len()
            ));
        }
        if let Some(r) = self.rates.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return bad(format!("rate {r} is not finite and non-negative"));
        }
        if let Some(a) = self.baseline.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return bad(format!("baseline {a} is not finite and non-negative"));
        }
        if self.window_divisor == 0 {
            return bad("window divisor must be at least 1".into());
        }
        if !self.active.iter().any(|&a| a) {
            return Err(SolverError::InfeasibleActiveSet);
        }
        Ok(())
    }

    /// A user with no baseline and no positive rate has utility `-inf` no
    /// matter what it is given.
    fn is_degenerate(&self, i: usize) -> bool {
        self.baseline[i] == 0.0 && self.rates.row(i).iter().all(|&r| r == 0.0)
    }

    /// Active set with degenerate users removed.
    pub fn optimisable(&self) -> Vec<bool> {
        (0..self.users())
            .map(|i| self.active[i] && !self.is_degenerate(i))
            .collect()
    }

    fn divisor(&self) -> f64 {
        self.window_divisor as f64
    }

    /// `d a_i + sum_k P[i,k] b[i,k]` for every user.
    fn denominators(&self, alloc: &Allocation) -> Vec<f64> {
        let d = self.divisor();
        alloc
            .user_throughputs(&self.rates)
            .into_iter()
            .zip(&self.baseline)
            .map(|(x, &a)| d * a + x)
            .collect()
    }

    /// Smoothed throughput `a_i + x_i / d` for every user.
    pub fn smoothed_throughputs(&self, alloc: &Allocation) -> Vec<f64> {
        let d = self.divisor();
        self.denominators(alloc).into_iter().map(|v| v / d).collect()
    }

    /// `y[n] = sum_{i active} ln(a_i + x_i / d)` over the optimisable users.
    pub fn utility(&self, alloc: &Allocation) -> f64 {
        self.utility_over(alloc, &self.optimisable())
    }

    fn utility_over(&self, alloc: &Allocation, active: &[bool]) -> f64 {
        self.smoothed_throughputs(alloc)
            .into_iter()
            .zip(active)
            .filter(|(_, &a)| a)
            .map(|(t, _)| t.ln())
            .sum()
    }
}

/// Shadow price `dy/dP[i,k] = b[i,k] / (d a_i + sum_k P[i,k] b[i,k])`.
pub fn shadow_price(prob: &SlotProblem, alloc: &Allocation, i: usize, k: usize) -> Result<f64, SolverError> {
    let b = prob.rates[[i, k]];
    if b == 0.0 {
        return Ok(0.0);
    }
    let denom = prob.divisor() * prob.baseline[i] + alloc.airtime.row(i).dot(&prob.rates.row(i));
    if denom <= 0.0 {
        return Err(SolverError::DivisionByZero { user: i, channel: k });
    }
    Ok(b / denom)
}

fn price(b: f64, denom: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        b / denom
    }
}

/// Largest per-channel gap between the best shadow price and the worst
/// shadow price among users holding more than [`SUPPORT_EPS`] airtime.
pub fn kkt_residual(prob: &SlotProblem, alloc: &Allocation) -> f64 {
    kkt_residual_over(prob, alloc, &prob.optimisable(), &prob.denominators(alloc))
}

fn kkt_residual_over(prob: &SlotProblem, alloc: &Allocation, active: &[bool], denom: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..prob.channels() {
        let mut best = f64::NEG_INFINITY;
        let mut held_min = f64::INFINITY;
        for i in (0..prob.users()).filter(|&i| active[i]) {
            let g = price(prob.rates[[i, k]], denom[i]);
            best = best.max(g);
            if alloc.airtime[[i, k]] > SUPPORT_EPS {
                held_min = held_min.min(g);
            }
        }
        if held_min.is_finite() {
            worst = worst.max(best - held_min);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub allocation: Allocation,
    /// Value of `y[n]` at the allocation (natural log).
    pub utility: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves one slot to KKT residual `tol`.
pub fn solve_pf_slot(prob: &SlotProblem, tol: f64) -> Result<SolveReport, SolverError> {
    prob.validate()?;
    if !(tol > 0.0) {
        return Err(SolverError::InvalidProblem(format!("tolerance must be positive, got {tol}")));
    }
    let active = prob.optimisable();
    for i in (0..prob.users()).filter(|&i| prob.active[i] && !active[i]) {
        warn!("user {i} has zero baseline and zero rates; excluded from the PF slot problem");
    }
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(SolverError::InfeasibleActiveSet);
    }
    let (users, channels) = prob.rates.dim();
    let mut alloc = Allocation::uniform(&active, channels);
    if count == 1 {
        return Ok(report(prob, alloc, &active, 0));
    }
    let members: Vec<usize> = (0..users).filter(|&i| active[i]).collect();
    let mut denom = prob.denominators(&alloc);

    for iter in 0..MAX_ITERATIONS {
        let residual = kkt_residual_over(prob, &alloc, &active, &denom);
        if residual <= tol {
            return Ok(report(prob, alloc, &active, iter));
        }
        let mut candidates: Vec<Allocation> = polish(prob, &members, &alloc, None).into_iter().collect();
        if iter >= POLISH_PRUNE_AFTER && iter % POLISH_PRUNE_EVERY == 0 {
            // A support whose sharing graph has a cycle is singular; try
            // breaking it one held pair at a time.
            for k in 0..channels {
                let holders: Vec<usize> = members.iter().copied().filter(|&i| alloc.airtime[[i, k]] > SUPPORT_EPS).collect();
                if holders.len() > 1 {
                    candidates.extend(holders.into_iter().filter_map(|i| polish(prob, &members, &alloc, Some((i, k)))));
                }
            }
        }
        let best = candidates
            .into_iter()
            .map(|c| {
                let d = prob.denominators(&c);
                let r = kkt_residual_over(prob, &c, &active, &d);
                (c, d, r)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2));
        if let Some((c, _, r)) = best {
            if r <= tol {
                return Ok(report(prob, c, &active, iter + 1));
            }
        }
        frank_wolfe_step(prob, &members, &mut alloc, &mut denom);
        pairwise_sweep(prob, &members, &mut alloc, &mut denom);
    }
    let rep = report(prob, alloc, &active, MAX_ITERATIONS);
    if rep.kkt_residual <= tol {
        return Ok(rep);
    }
    Err(SolverError::NonConvergence { report: Box::new(rep) })
}

/// The W = 1 slot problem: zero baseline, divisor one.
pub fn solve_pf_w1(rates: &RateMatrix, tol: f64) -> Result<SolveReport, SolverError> {
    solve_pf_slot(&SlotProblem::deterministic(rates.clone())?, tol)
}

fn report(prob: &SlotProblem, mut alloc: Allocation, active: &[bool], iterations: usize) -> SolveReport {
    renormalize(&mut alloc);
    let denom = prob.denominators(&alloc);
    SolveReport {
        utility: prob.utility_over(&alloc, active),
        kkt_residual: kkt_residual_over(prob, &alloc, active, &denom),
        allocation: alloc,
        iterations,
    }
}

fn renormalize(alloc: &mut Allocation) {
    for mut col in alloc.airtime.columns_mut() {
        let s = col.sum();
        if s > 0.0 && (s - 1.0).abs() > 0.0 {
            col.mapv_inplace(|p| p / s);
        }
        debug_assert!((col.sum() - 1.0).abs() <= FEASIBILITY_TOL);
    }
}

/// Full conditional-gradient step towards the vertex that gives each channel
/// to its highest-price user (lowest index on ties).
fn frank_wolfe_step(prob: &SlotProblem, members: &[usize], alloc: &mut Allocation, denom: &mut [f64]) {
    let channels = prob.channels();
    let mut vertex = vec![members[0]; channels];
    for (k, v) in vertex.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for &i in members {
            let g = price(prob.rates[[i, k]], denom[i]);
            if g > best {
                best = g;
                *v = i;
            }
        }
    }
    // Change in each user's weighted rate when moving fully to the vertex.
    let mut delta = vec![0.0; prob.users()];
    for (k, &v) in vertex.iter().enumerate() {
        for &i in members {
            let target = if i == v { 1.0 } else { 0.0 };
            delta[i] += (target - alloc.airtime[[i, k]]) * prob.rates[[i, k]];
        }
    }
    // phi'(gamma) = sum_i delta_i / (denom_i + gamma delta_i), decreasing.
    let slope = |gamma: f64| -> f64 {
        members
            .iter()
            .map(|&i| {
                let v = denom[i] + gamma * delta[i];
                if delta[i] == 0.0 {
                    0.0
                } else if v <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    delta[i] / v
                }
            })
            .sum()
    };
    if !(slope(0.0) > 0.0) {
        return;
    }
    let gamma = if slope(1.0) >= 0.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 {
                break;
            }
        }
        lo
    };
    if gamma <= 0.0 {
        return;
    }
    for (k, &v) in vertex.iter().enumerate() {
        for &i in members {
            let p = &mut alloc.airtime[[i, k]];
            *p = if i == v { *p + gamma * (1.0 - *p) } else { (1.0 - gamma) * *p };
        }
    }
    for &i in members {
        denom[i] = prob.divisor() * prob.baseline[i] + alloc.airtime.row(i).dot(&prob.rates.row(i));
    }
}

/// For each channel, moves airtime from the lowest-price holder to the
/// highest-price user with the exact maximising step.
fn pairwise_sweep(prob: &SlotProblem, members: &[usize], alloc: &mut Allocation, denom: &mut [f64]) {
    for k in 0..prob.channels() {
        let mut to = members[0];
        let mut best = f64::NEG_INFINITY;
        let mut from = None;
        let mut worst = f64::INFINITY;
        for &i in members {
            let g = price(prob.rates[[i, k]], denom[i]);
            if g > best {
                best = g;
                to = i;
            }
            if alloc.airtime[[i, k]] > 0.0 && g < worst {
                worst = g;
                from = Some(i);
            }
        }
        let Some(from) = from else { continue };
        if from == to || !(best > worst) {
            continue;
        }
        let (b_to, b_from) = (prob.rates[[to, k]], prob.rates[[from, k]]);
        let held = alloc.airtime[[from, k]];
        // Maximise ln(D_to + t b_to) + ln(D_from - t b_from) over t in [0, held].
        let step = if b_from == 0.0 {
            held
        } else {
            ((b_to * denom[from] - b_from * denom[to]) / (2.0 * b_to * b_from)).clamp(0.0, held)
        };
        if step <= 0.0 {
            continue;
        }
        if step >= held {
            alloc.airtime[[to, k]] += held;
            alloc.airtime[[from, k]] = 0.0;
        } else {
            alloc.airtime[[to, k]] += step;
            alloc.airtime[[from, k]] -= step;
        }
        denom[to] += step * b_to;
        denom[from] = (denom[from] - step * b_from).max(0.0);
    }
}

/// Largest linear system [`polish`] will attempt.
const POLISH_MAX_UNKNOWNS: usize = 160;
const POLISH_PRUNE_AFTER: usize = 20;
const POLISH_PRUNE_EVERY: usize = 10;

/// Solves the optimality conditions exactly on the current support.
///
/// Channels with one holder stay with it. On a shared channel `k` every
/// holder `i` must see the same price, i.e. `D_i = b[i,k] t_k` for an unknown
/// `t_k`, and the shares must sum to one. Both are linear in the shares and
/// the `t_k`, and the system is square. Returns `None` when it is singular or
/// its solution leaves the simplex, which means the support is not yet right.
/// `drop` removes one held pair from the support first.
fn polish(prob: &SlotProblem, members: &[usize], alloc: &Allocation, drop: Option<(usize, usize)>) -> Option<Allocation> {
    let channels = prob.channels();
    let mut fixed = vec![0.0; prob.users()];
    let mut owner = vec![None; channels];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut shared: Vec<usize> = Vec::new();
    for k in 0..channels {
        let holders: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| alloc.airtime[[i, k]] > SUPPORT_EPS && drop != Some((i, k)))
            .collect();
        match holders.len() {
            0 => return None,
            1 => {
                fixed[holders[0]] += prob.rates[[holders[0], k]];
                owner[k] = Some(holders[0]);
            }
            _ => {
                shared.push(k);
                edges.extend(holders.into_iter().map(|i| (i, k)));
            }
        }
    }
    if edges.is_empty() {
        return None;
    }
    // An optimal sharing graph (users and shared channels) is a forest;
    // anything denser is singular, so do not bother.
    let mut involved: Vec<usize> = edges.iter().map(|&(i, _)| i).collect();
    involved.sort_unstable();
    involved.dedup();
    if edges.len() + 1 > involved.len() + shared.len() {
        return None;
    }
    let n = edges.len() + shared.len();
    if n > POLISH_MAX_UNKNOWNS {
        return None;
    }
    let t_index = |k: usize| edges.len() + shared.iter().position(|&c| c == k).expect("shared channel");
    let d = prob.divisor();
    // Row-major n x (n + 1) augmented matrix.
    let mut m = vec![0.0; n * (n + 1)];
    for (row, &(i, k)) in edges.iter().enumerate() {
        for (e, &(j, c)) in edges.iter().enumerate() {
            if j == i {
                m[row * (n + 1) + e] = prob.rates[[i, c]];
            }
        }
        m[row * (n + 1) + t_index(k)] = -prob.rates[[i, k]];
        m[row * (n + 1) + n] = -(d * prob.baseline[i] + fixed[i]);
    }
    for (s, &k) in shared.iter().enumerate() {
        let row = edges.len() + s;
        for (e, &(_, c)) in edges.iter().enumerate() {
            if c == k {
                m[row * (n + 1) + e] = 1.0;
            }
        }
        m[row * (n + 1) + n] = 1.0;
    }
    let x = solve_dense(&mut m, n)?;
    if x[..edges.len()].iter().any(|&p| !(p > -1e-12 && p < 1.0 + 1e-12)) || x[edges.len()..].iter().any(|&t| !(t > 0.0)) {
        return None;
    }
    let mut out = Allocation::zeros(prob.users(), channels);
    for (k, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            out.airtime[[*i, k]] = 1.0;
        }
    }
    for (e, &(i, k)) in edges.iter().enumerate() {
        out.airtime[[i, k]] = x[e].clamp(0.0, 1.0);
    }
    renormalize(&mut out);
    Some(out)
}

/// Gaussian elimination with partial pivoting on an `n x (n + 1)` augmented
/// matrix. `None` if a pivot vanishes.
fn solve_dense(m: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let w = n + 1;
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a * w + col].abs().total_cmp(&m[b * w + col].abs()))?;
        if m[pivot * w + col].abs() <= 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for j in 0..w {
                m.swap(pivot * w + j, col * w + j);
            }
        }
        let p = m[col * w + col];
        for row in col + 1..n {
            let f = m[row * w + col] / p;
            if f != 0.0 {
                for j in col..w {
                    m[row * w + j] -= f * m[col * w + j];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut v = m[row * w + n];
        for j in row + 1..n {
            v -= m[row * w + j] * x[j];
        }
        x[row] = v / m[row * w + row];
    }
    Some(x)
}

/// Exhaustive search over the grid `{0, h, 2h, ..., 1}` restricted to the
/// product of simplices. Only for tiny instances (U, S <= 3).
pub fn brute_force_pf(prob: &SlotProblem, grid_step: f64) -> Result<SolveReport, SolverError> {
    prob.validate()?;
    let active = prob.optimisable();
    if !active.iter().any(|&a| a) {
        return Err(SolverError::InfeasibleActiveSet);
    }
    let (alloc, utility) = crate::pf::grid_search(prob, &active, grid_step, |t| {
        t.iter().map(|x| x.ln()).sum()
    })?;
    let denom = prob.denominators(&alloc);
    Ok(SolveReport {
        kkt_residual: kkt_residual_over(prob, &alloc, &active, &denom),
        allocation: alloc,
        utility,
        iterations: 0,
    })
}

/// Maximises `objective(smoothed throughputs of the active users)` over the
/// grid of allocations with step `grid_step`. Grid points where the
/// objective is NaN are skipped; returns the best point found.
pub fn grid_search<F>(
    prob: &SlotProblem,
    active: &[bool],
    grid_step: f64,
    objective: F,
) -> Result<(Allocation, f64), SolverError>
where
    F: Fn(&[f64]) -> f64,
{
    let (users, channels) = prob.rates.dim();
    if users > 3 || channels > 3 {
        return Err(SolverError::OracleTooLarge { users, channels });
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(SolverError::InvalidGridStep(grid_step));
    }
    let members: Vec<usize> = (0..users).filter(|&i| active[i]).collect();
    let steps = (1.0 / grid_step).round() as usize;
    let compositions = compositions(steps, members.len());

    let d = prob.divisor();
    let mut best = (vec![0usize; channels], f64::NEG_INFINITY);
    let mut choice = vec![0usize; channels];
    let mut weighted = vec![0.0; members.len()];
    let mut smoothed = vec![0.0; members.len()];
    // Odometer over per-channel compositions.
    loop {
        weighted.iter_mut().for_each(|w| *w = 0.0);
        for (k, &c) in choice.iter().enumerate() {
            for (j, &i) in members.iter().enumerate() {
                weighted[j] += compositions[c][j] as f64 / steps as f64 * prob.rates[[i, k]];
            }
        }
        for (j, &i) in members.iter().enumerate() {
            smoothed[j] = prob.baseline[i] + weighted[j] / d;
        }
        let v = objective(&smoothed);
        if v > best.1 {
            best = (choice.clone(), v);
        }
        let mut k = 0;
        loop {
            if k == channels {
                let mut alloc = Allocation::zeros(users, channels);
                for (k, &c) in best.0.iter().enumerate() {
                    for (j, &i) in members.iter().enumerate() {
                        alloc.airtime[[i, k]] = compositions[c][j] as f64 / steps as f64;
                    }
                }
                return Ok((alloc, best.1));
            }
            choice[k] += 1;
            if choice[k] < compositions.len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// All ways of writing `total` as an ordered sum of `parts` non-negative integers.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first);
            rec(total - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}
