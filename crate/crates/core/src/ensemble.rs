//! Infinite-window PF on ensemble-averaged throughput.
//!
//! When the application tolerates unbounded delay, the utility is
//! `sum_i ln E_B[T_i]` and the decision is a precomputed map from channel
//! realization to airtime. Two routes are provided:
//!
//! * Discrete rates: every (physical channel, joint realization) pair is a
//!   virtual channel with rate `b * p(b)`, and the resulting deterministic
//!   many-channel problem goes through [`crate::pf::solve_pf_slot`].
//! * Continuous rates (Rayleigh, `b = log2(1 + SNR)`): sharing has
//!   probability zero, so the optimum hands channel `k` to
//!   `argmax_i b[i,k] / E[T_i]` and the expectations solve
//!   `E[T_i] = S * int b f_i(b) prod_{j != i} F_j(b E[T_j] / E[T_i]) db`.
//!   That fixed point is found by damped iteration with adaptive quadrature.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{Allocation, RateMatrix};
use crate::pf::{solve_pf_slot, SlotProblem, SolverError, SUPPORT_EPS};
use crate::quadrature::AdaptiveQuadrature;

/// Largest joint state space `prod_i M_i^S` accepted by the discrete route.
pub const MAX_JOINT_REALIZATIONS: usize = 10_000;
pub const DEFAULT_DAMPING: f64 = 0.5;
pub const DEFAULT_FIXED_POINT_TOL: f64 = 1e-6;
pub const MAX_FIXED_POINT_ITERATIONS: usize = 1_000;
const MIN_DAMPING: f64 = 1e-3;
/// Exponential SNR tail mass dropped by the quadrature.
const SNR_TAIL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid rate distribution: {0}")]
    InvalidDistribution(String),
    #[error("joint state space has {states} realizations, above the limit of {MAX_JOINT_REALIZATIONS}")]
    StateSpaceTooLarge { states: usize },
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        policy: Box<EnsemblePolicy>,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("policy file: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Marginal law of one user's per-channel rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateDistribution {
    /// Finitely many rates with their probabilities.
    Discrete { rates: Vec<f64>, probabilities: Vec<f64> },
    /// Rayleigh fading: SNR exponential with the given linear mean, rate
    /// `log2(1 + SNR)`.
    Continuous { mean_snr: f64 },
}

impl RateDistribution {
    pub fn discrete(rates: Vec<f64>, probabilities: Vec<f64>) -> Result<Self, EnsembleError> {
        let d = Self::Discrete { rates, probabilities };
        d.validate()?;
        Ok(d)
    }

    pub fn rayleigh(mean_snr: f64) -> Result<Self, EnsembleError> {
        let d = Self::Continuous { mean_snr };
        d.validate()?;
        Ok(d)
    }

    pub fn rayleigh_db(mean_snr_db: f64) -> Result<Self, EnsembleError> {
        Self::rayleigh(crate::channel::db_to_linear(mean_snr_db))
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::InvalidDistribution(m));
        match self {
            Self::Discrete { rates, probabilities } => {
                if rates.is_empty() {
                    return bad("a discrete distribution needs at least one rate".into());
                }
                if rates.len() != probabilities.len() {
                    return bad(format!("{} rates but {} probabilities", rates.len(), probabilities.len()));
                }
                if let Some(r) = rates.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
                    return bad(format!("rate {r} is not finite and non-negative"));
                }
                if let Some(p) = probabilities.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
                    return bad(format!("probability {p} outside [0, 1]"));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("probabilities sum to {total}"));
                }
            }
            Self::Continuous { mean_snr } => {
                if !(*mean_snr > 0.0 && mean_snr.is_finite()) {
                    return bad(format!("mean SNR must be positive, got {mean_snr}"));
                }
            }
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Discrete { .. })
    }

    /// `E[B]`.
    pub fn mean_rate(&self) -> f64 {
        match self {
            Self::Discrete { rates, probabilities } => rates.iter().zip(probabilities).map(|(r, p)| r * p).sum(),
            Self::Continuous { mean_snr } => {
                let q = AdaptiveQuadrature::default();
                let upper = snr_upper_limit(*mean_snr);
                q.integrate(
                    |s| (1.0 + s).log2() * (-s / mean_snr).exp() / mean_snr,
                    0.0,
                    upper,
                    1e-13,
                )
            }
        }
    }

    /// `P(B <= b)`.
    pub fn cdf(&self, b: f64) -> f64 {
        match self {
            Self::Discrete { rates, probabilities } => rates
                .iter()
                .zip(probabilities)
                .filter(|(r, _)| **r <= b)
                .map(|(_, p)| p)
                .sum(),
            Self::Continuous { mean_snr } => rayleigh_rate_cdf(b, *mean_snr),
        }
    }
}

/// CDF of `log2(1 + SNR)` with `SNR ~ Exp(mean)`.
fn rayleigh_rate_cdf(b: f64, mean_snr: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    let snr = (b * std::f64::consts::LN_2).exp_m1();
    -(-snr / mean_snr).exp_m1()
}

fn snr_upper_limit(mean_snr: f64) -> f64 {
    mean_snr * (1.0 / SNR_TAIL).ln()
}

/// How an [`EnsemblePolicy`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "discrete-exact")]
    DiscreteExact,
    #[serde(rename = "continuous-fixed-point")]
    ContinuousFixedPoint,
}

/// Precomputed expected throughputs `E_B[T_i*]` driving table-lookup dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePolicy {
    pub expected_throughputs: Vec<f64>,
    pub provenance: Provenance,
    pub residual: f64,
}

impl EnsemblePolicy {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.expected_throughputs.is_empty() {
            return Err(EnsembleError::InvalidParameter("policy has no users".into()));
        }
        if let Some(t) = self.expected_throughputs.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(EnsembleError::InvalidParameter(format!(
                "expected throughput {t} is not positive"
            )));
        }
        if !(self.residual >= 0.0) {
            return Err(EnsembleError::InvalidParameter(format!("residual {} is negative", self.residual)));
        }
        Ok(())
    }

    pub fn users(&self) -> usize {
        self.expected_throughputs.len()
    }
}

/// One (physical channel, joint realization) pair of the discrete problem.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualChannel {
    pub channel: usize,
    /// Rate indices of the joint U x S realization, row-major.
    pub realization: Vec<usize>,
    /// Realized rates `b[i, channel]` of each user on this physical channel.
    pub rates: Vec<f64>,
    pub probability: f64,
    /// `b[i, channel] * p(b)`.
    pub virtual_rates: Vec<f64>,
}

impl VirtualChannel {
    pub fn key(&self) -> String {
        realization_key(&self.realization)
    }
}

/// Comma-joined rate indices, the key of an allocation table entry.
pub fn realization_key(indices: &[usize]) -> String {
    indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn discrete_parts(d: &RateDistribution) -> Result<(&[f64], &[f64]), EnsembleError> {
    match d {
        RateDistribution::Discrete { rates, probabilities } => Ok((rates, probabilities)),
        RateDistribution::Continuous { .. } => Err(EnsembleError::InvalidDistribution(
            "the virtual-channel route needs discrete distributions".into(),
        )),
    }
}

/// Enumerates every joint realization of the U x S rate matrix (users
/// independent, each user's channels independent and identically
/// distributed per `dists[i]`) and maps each (channel, realization) to a
/// virtual channel.
pub fn build_virtual_channels(dists: &[RateDistribution], channels: usize) -> Result<Vec<VirtualChannel>, EnsembleError> {
    if dists.is_empty() || channels == 0 {
        return Err(EnsembleError::InvalidParameter("need at least one user and one channel".into()));
    }
    let mut parts = Vec::with_capacity(dists.len());
    for d in dists {
        d.validate()?;
        parts.push(discrete_parts(d)?);
    }
    let users = dists.len();
    // Radix of each entry of the row-major realization vector.
    let radix: Vec<usize> = (0..users * channels).map(|e| parts[e / channels].0.len()).collect();
    let mut states: usize = 1;
    for &m in &radix {
        states = states.saturating_mul(m);
        if states > MAX_JOINT_REALIZATIONS {
            return Err(EnsembleError::StateSpaceTooLarge { states });
        }
    }

    let mut realizations = Vec::with_capacity(states);
    let mut idx = vec![0usize; radix.len()];
    for _ in 0..states {
        let p: f64 = idx
            .iter()
            .enumerate()
            .map(|(e, &m)| parts[e / channels].1[m])
            .product();
        realizations.push((idx.clone(), p));
        // Odometer, last entry fastest.
        for e in (0..idx.len()).rev() {
            idx[e] += 1;
            if idx[e] < radix[e] {
                break;
            }
            idx[e] = 0;
        }
    }

    let mut out = Vec::with_capacity(channels * states);
    for k in 0..channels {
        for (real, p) in &realizations {
            let rates: Vec<f64> = (0..users).map(|i| parts[i].0[real[i * channels + k]]).collect();
            out.push(VirtualChannel {
                channel: k,
                realization: real.clone(),
                virtual_rates: rates.iter().map(|b| b * p).collect(),
                rates,
                probability: *p,
            });
        }
    }
    Ok(out)
}

/// Per-realization airtime matrices, keyed by [`realization_key`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationTable {
    pub users: usize,
    pub channels: usize,
    /// Row-major U x S airtime matrix per joint realization.
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl AllocationTable {
    pub fn get(&self, realization: &[usize]) -> Option<Allocation> {
        let flat = self.entries.get(&realization_key(realization))?;
        let airtime = Array2::from_shape_vec((self.users, self.channels), flat.clone()).ok()?;
        Some(Allocation { airtime })
    }

    /// Table-lookup dispatch: maps the observed rates to their indices in
    /// `dists` and returns the stored allocation.
    pub fn dispatch(&self, dists: &[RateDistribution], rates_now: &RateMatrix) -> Option<Allocation> {
        let mut key = Vec::with_capacity(self.users * self.channels);
        for (i, row) in rates_now.rows().into_iter().enumerate() {
            let (values, _) = discrete_parts(dists.get(i)?).ok()?;
            for &b in row {
                key.push(values.iter().position(|&v| v == b)?);
            }
        }
        self.get(&key)
    }
}

/// Result of the discrete route.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSolution {
    pub policy: EnsemblePolicy,
    pub table: AllocationTable,
    pub virtual_channels: Vec<VirtualChannel>,
    /// U x V airtime over the virtual channels, in `virtual_channels` order.
    pub airtime: Array2<f64>,
}

/// Solves the discrete infinite-window problem exactly through the
/// virtual-channel mapping.
pub fn solve_ensemble_discrete(
    dists: &[RateDistribution],
    channels: usize,
    tol: f64,
) -> Result<DiscreteSolution, EnsembleError> {
    let vcs = build_virtual_channels(dists, channels)?;
    for (i, d) in dists.iter().enumerate() {
        if d.mean_rate() <= 0.0 {
            return Err(EnsembleError::InvalidDistribution(format!(
                "user {i} has zero expected rate"
            )));
        }
    }
    let users = dists.len();
    let rates = Array2::from_shape_fn((users, vcs.len()), |(i, v)| vcs[v].virtual_rates[i]);
    let report = solve_pf_slot(&SlotProblem::deterministic(rates.clone())?, tol)?;
    let airtime = report.allocation.airtime;
    let expected: Vec<f64> = (0..users).map(|i| airtime.row(i).dot(&rates.row(i))).collect();

    let mut entries: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (v, vc) in vcs.iter().enumerate() {
        let flat = entries
            .entry(vc.key())
            .or_insert_with(|| vec![0.0; users * channels]);
        for i in 0..users {
            flat[i * channels + vc.channel] = airtime[[i, v]];
        }
    }
    Ok(DiscreteSolution {
        policy: EnsemblePolicy {
            expected_throughputs: expected,
            provenance: Provenance::DiscreteExact,
            residual: report.kkt_residual,
        },
        table: AllocationTable {
            users,
            channels,
            entries,
        },
        virtual_channels: vcs,
        airtime,
    })
}

/// Expected throughputs `E[T_i] = sum_v P[i,v] r[i,v]` of an allocation over
/// virtual channels.
pub fn ensemble_throughputs(vcs: &[VirtualChannel], airtime: &Array2<f64>) -> Vec<f64> {
    (0..airtime.nrows())
        .map(|i| vcs.iter().enumerate().map(|(v, vc)| airtime[[i, v]] * vc.virtual_rates[i]).sum())
        .collect()
}

/// Worst violation of the ensemble KKT conditions, measured on
/// `b[i,k] / E[T_i]`: for every virtual channel, the best ratio minus the
/// worst ratio among users holding airtime.
pub fn ensemble_kkt_violation(vcs: &[VirtualChannel], airtime: &Array2<f64>) -> f64 {
    let expected = ensemble_throughputs(vcs, airtime);
    let mut worst: f64 = 0.0;
    for (v, vc) in vcs.iter().enumerate() {
        if vc.probability == 0.0 {
            continue;
        }
        let ratio = |i: usize| vc.rates[i] / expected[i];
        let best = (0..expected.len()).map(ratio).fold(f64::NEG_INFINITY, f64::max);
        let held = (0..expected.len())
            .filter(|&i| airtime[[i, v]] > SUPPORT_EPS)
            .map(ratio)
            .fold(f64::INFINITY, f64::min);
        if held.is_finite() {
            worst = worst.max(best - held);
        }
    }
    worst
}

/// Applies a single-channel allocation table to every physical channel of a
/// joint problem: channel `k` of realization `b` uses the single-channel
/// entry for column `b[., k]`.
pub fn replicate_table(single: &AllocationTable, joint: &[VirtualChannel], channels: usize) -> Option<Array2<f64>> {
    let users = single.users;
    let mut airtime = Array2::zeros((users, joint.len()));
    for (v, vc) in joint.iter().enumerate() {
        let column: Vec<usize> = (0..users).map(|i| vc.realization[i * channels + vc.channel]).collect();
        let alloc = single.get(&column)?;
        for i in 0..users {
            airtime[[i, v]] = alloc.airtime[[i, 0]];
        }
    }
    Some(airtime)
}

/// Fixed-point map `G_i(T) = S * E[B_i * prod_{j != i} F_j(B_i T_j / T_i)]`
/// for Rayleigh users, integrated over the SNR axis.
fn fixed_point_map(means: &[f64], channels: usize, t: &[f64], quad: &AdaptiveQuadrature, tol: f64) -> Vec<f64> {
    (0..means.len())
        .map(|i| {
            let mi = means[i];
            let integrand = |s: f64| {
                let b = (1.0 + s).log2();
                let density = (-s / mi).exp() / mi;
                let others: f64 = (0..means.len())
                    .filter(|&j| j != i)
                    .map(|j| rayleigh_rate_cdf(b * t[j] / t[i], means[j]))
                    .product();
                b * density * others
            };
            channels as f64 * quad.integrate(integrand, 0.0, snr_upper_limit(mi), tol)
        })
        .collect()
}

/// Solves the continuous-rate fixed point by damped iteration
/// `T <- (1 - d) T + d G(T)` until `max_i |G_i(T) - T_i| / T_i <= tol`.
/// `d` starts at `damping` and is halved each time the residual grows.
pub fn solve_fixed_point(
    dists: &[RateDistribution],
    channels: usize,
    tol: f64,
    damping: f64,
) -> Result<EnsemblePolicy, EnsembleError> {
    if dists.is_empty() || channels == 0 {
        return Err(EnsembleError::InvalidParameter("need at least one user and one channel".into()));
    }
    if !(tol > 0.0) {
        return Err(EnsembleError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(EnsembleError::InvalidParameter(format!("damping must lie in (0, 1], got {damping}")));
    }
    let mut means = Vec::with_capacity(dists.len());
    for d in dists {
        d.validate()?;
        match d {
            RateDistribution::Continuous { mean_snr } => means.push(*mean_snr),
            RateDistribution::Discrete { .. } => {
                return Err(EnsembleError::InvalidDistribution(
                    "the fixed-point route needs continuous distributions".into(),
                ))
            }
        }
    }
    let users = dists.len() as f64;
    let quad = AdaptiveQuadrature::default();
    let mut t: Vec<f64> = dists
        .iter()
        .map(|d| channels as f64 * d.mean_rate() / users)
        .collect();
    // Quadrature error stays well below the fixed-point tolerance.
    let quad_tol = |t: &[f64]| 1e-3 * tol * t.iter().cloned().fold(f64::INFINITY, f64::min) / channels as f64;

    // G_i falls steeply in T_i when users differ, so a fixed step can
    // oscillate; the step is halved whenever the residual grows.
    let mut step = damping;
    let mut previous = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_FIXED_POINT_ITERATIONS {
        let g = fixed_point_map(&means, channels, &t, &quad, quad_tol(&t));
        residual = g
            .iter()
            .zip(&t)
            .map(|(gi, ti)| (gi - ti).abs() / ti)
            .fold(0.0, f64::max);
        if residual <= tol {
            return Ok(EnsemblePolicy {
                expected_throughputs: t,
                provenance: Provenance::ContinuousFixedPoint,
                residual,
            });
        }
        if residual > previous {
            step = (0.5 * step).max(MIN_DAMPING);
        }
        previous = residual;
        for (ti, gi) in t.iter_mut().zip(&g) {
            *ti = (1.0 - step) * *ti + step * gi;
        }
    }
    Err(EnsembleError::NonConvergence {
        iterations: MAX_FIXED_POINT_ITERATIONS,
        residual,
        policy: Box::new(EnsemblePolicy {
            expected_throughputs: t,
            provenance: Provenance::ContinuousFixedPoint,
            residual,
        }),
    })
}

/// Per channel, all airtime to `argmax_i b[i,k] / E[T_i]`; exact ties split
/// equally.
pub fn ensemble_dispatch(policy: &EnsemblePolicy, rates_now: &RateMatrix) -> Allocation {
    ensemble_dispatch_among(policy, rates_now, &vec![true; rates_now.nrows()])
}

/// [`ensemble_dispatch`] restricted to the `active` users.
pub fn ensemble_dispatch_among(policy: &EnsemblePolicy, rates_now: &RateMatrix, active: &[bool]) -> Allocation {
    debug_assert_eq!(policy.users(), rates_now.nrows());
    let t = &policy.expected_throughputs;
    Allocation::argmax_split(active, rates_now.ncols(), |i, k| rates_now[[i, k]] / t[i])
}

/// Per channel, all airtime to the highest-rate users (ties split equally).
pub fn max_rate_dispatch(rates_now: &RateMatrix) -> Allocation {
    max_rate_dispatch_among(rates_now, &vec![true; rates_now.nrows()])
}

pub fn max_rate_dispatch_among(rates_now: &RateMatrix, active: &[bool]) -> Allocation {
    Allocation::argmax_split(active, rates_now.ncols(), |i, k| rates_now[[i, k]])
}

/// On-disk policy: the policy fields plus an optional discrete table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    #[serde(flatten)]
    pub policy: EnsemblePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation_table: Option<BTreeMap<String, Vec<f64>>>,
}

impl PolicyFile {
    pub fn write_json<W: Write>(&self, out: W) -> Result<(), EnsembleError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self, EnsembleError> {
        let f: Self = serde_json::from_reader(input)?;
        f.policy.validate()?;
        Ok(f)
    }
}
