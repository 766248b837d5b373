//! Slot-by-slot scheduling policies.
//!
//! A [`WindowState`] keeps, for every user, the per-slot throughputs of the
//! last `W_i - 1` slots. Each slot the scheduler turns that history into a
//! baseline `a_i[n-1]` and a divisor, solves (or looks up) an allocation over
//! the backlogged users, and the state then records `T_i[n] = sum_k P b`.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{Allocation, RateMatrix};
use crate::ensemble::{ensemble_dispatch_among, max_rate_dispatch_among, EnsembleError, EnsemblePolicy};
use crate::maxmin::solve_maxmin_with_divisors;
use crate::pf::{solve_pf_slot, SlotProblem, SolverError, DEFAULT_TOL};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("no backlogged user in slot {slot}")]
    EmptyBacklog { slot: usize },
    #[error("expected {expected} users, got {got}")]
    UserCount { expected: usize, got: usize },
    #[error("window length must be at least one slot")]
    ZeroWindow,
    #[error("invalid ensemble policy: {0}")]
    Policy(#[from] EnsembleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Window length of one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Slots(usize),
    /// Full-history average with divisor `n`.
    Unbounded,
}

impl Window {
    fn cap(self, count: usize) -> usize {
        match self {
            Window::Slots(w) => count.min(w),
            Window::Unbounded => count,
        }
    }
}

/// How the baseline treats slots in which a user had nothing to send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BacklogMode {
    /// Every user is always backlogged; backlog flags are ignored.
    #[default]
    Saturated,
    /// Idle slots count as zero throughput inside the window.
    Credit,
    /// Only the current busy period counts; the divisor is
    /// `min(n - n_i + 1, W)`.
    BusyPeriod,
}

/// Backlog history: the flag of every user in every recorded slot, and the
/// first slot of each user's latest busy period (1-based).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BusyTrace {
    pub flags: Vec<Vec<bool>>,
    pub starts: Vec<Option<usize>>,
}

impl BusyTrace {
    fn new(users: usize) -> Self {
        Self {
            flags: Vec::new(),
            starts: vec![None; users],
        }
    }

    fn was_backlogged(&self, i: usize) -> bool {
        self.flags.last().is_some_and(|f| f[i])
    }

    /// `n_i[n]` for a user backlogged in slot `n`.
    pub fn start_for(&self, i: usize, n: usize) -> usize {
        if self.was_backlogged(i) {
            self.starts[i].unwrap_or(n)
        } else {
            n
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    windows: Vec<Window>,
    /// At most `W_i - 1` past throughputs, oldest first. Unused for unbounded windows.
    history: Vec<VecDeque<f64>>,
    /// Running sums for unbounded windows: all history, and since the busy start.
    totals: Vec<f64>,
    since_busy: Vec<f64>,
    completed: usize,
    busy: BusyTrace,
}

impl WindowState {
    pub fn new(users: usize, window: Window) -> Result<Self, SchedulerError> {
        Self::with_windows(vec![window; users])
    }

    /// Per-user window lengths `W_i`.
    pub fn with_windows(windows: Vec<Window>) -> Result<Self, SchedulerError> {
        if windows.contains(&Window::Slots(0)) {
            return Err(SchedulerError::ZeroWindow);
        }
        let users = windows.len();
        let history = windows
            .iter()
            .map(|w| match w {
                Window::Slots(w) => VecDeque::with_capacity(w - 1),
                Window::Unbounded => VecDeque::new(),
            })
            .collect();
        Ok(Self {
            windows,
            history,
            totals: vec![0.0; users],
            since_busy: vec![0.0; users],
            completed: 0,
            busy: BusyTrace::new(users),
        })
    }

    pub fn users(&self) -> usize {
        self.windows.len()
    }

    /// Index `n` (1-based) of the slot about to be scheduled.
    pub fn slot(&self) -> usize {
        self.completed + 1
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn busy(&self) -> &BusyTrace {
        &self.busy
    }

    pub fn stored(&self, i: usize) -> usize {
        self.history[i].len()
    }

    /// `(a_i[n-1], divisor)` for user `i` in the coming slot.
    pub fn baseline(&self, i: usize, mode: BacklogMode) -> (f64, usize) {
        let n = self.slot();
        let w = self.windows[i];
        let (sum, divisor) = match mode {
            BacklogMode::Saturated | BacklogMode::Credit => {
                let sum = match w {
                    Window::Slots(_) => self.history[i].iter().sum(),
                    Window::Unbounded => self.totals[i],
                };
                (sum, w.cap(n))
            }
            BacklogMode::BusyPeriod => {
                let start = self.busy.start_for(i, n);
                let sum = match w {
                    Window::Slots(_) => {
                        let h = &self.history[i];
                        let take = (n - start).min(h.len());
                        h.iter().skip(h.len() - take).sum()
                    }
                    Window::Unbounded if start < n => self.since_busy[i],
                    Window::Unbounded => 0.0,
                };
                (sum, w.cap(n - start + 1))
            }
        };
        (sum / divisor as f64, divisor)
    }

    /// Appends one slot of per-user throughputs and backlog flags.
    pub fn record(&mut self, throughputs: &[f64], backlog: &[bool]) -> Result<(), SchedulerError> {
        let u = self.users();
        for len in [throughputs.len(), backlog.len()] {
            if len != u {
                return Err(SchedulerError::UserCount { expected: u, got: len });
            }
        }
        let n = self.slot();
        for i in 0..u {
            let t = throughputs[i];
            if backlog[i] {
                if !self.busy.was_backlogged(i) {
                    self.busy.starts[i] = Some(n);
                    self.since_busy[i] = 0.0;
                }
                self.since_busy[i] += t;
            }
            self.totals[i] += t;
            if let Window::Slots(w) = self.windows[i] {
                if w > 1 {
                    if self.history[i].len() == w - 1 {
                        self.history[i].pop_front();
                    }
                    self.history[i].push_back(t);
                }
            }
        }
        self.busy.flags.push(backlog.to_vec());
        self.completed += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum SchedulerKind {
    PfW1,
    PfLookback { window: usize },
    PfInfinite { policy: Arc<EnsemblePolicy> },
    MaxThroughput,
    MaxMinLookback { window: usize },
}

impl SchedulerKind {
    pub fn label(&self) -> &'static str {
        match self {
            SchedulerKind::PfW1 => "pf_w1",
            SchedulerKind::PfLookback { .. } => "pf_lookback",
            SchedulerKind::PfInfinite { .. } => "pf_infinite",
            SchedulerKind::MaxThroughput => "max_throughput",
            SchedulerKind::MaxMinLookback { .. } => "maxmin_lookback",
        }
    }

    /// Window the scheduler's own state keeps.
    pub fn state_window(&self) -> Window {
        match self {
            SchedulerKind::PfW1 => Window::Slots(1),
            SchedulerKind::PfLookback { window } | SchedulerKind::MaxMinLookback { window } => Window::Slots(*window),
            SchedulerKind::PfInfinite { .. } | SchedulerKind::MaxThroughput => Window::Unbounded,
        }
    }

    pub fn validate(&self, users: usize) -> Result<(), SchedulerError> {
        match self {
            SchedulerKind::PfLookback { window: 0 } | SchedulerKind::MaxMinLookback { window: 0 } => {
                Err(SchedulerError::ZeroWindow)
            }
            SchedulerKind::PfInfinite { policy } => {
                policy.validate()?;
                if policy.users() != users {
                    return Err(SchedulerError::UserCount {
                        expected: users,
                        got: policy.users(),
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::PfLookback { window } | SchedulerKind::MaxMinLookback { window } => {
                write!(f, "{}(W={window})", self.label())
            }
            _ => f.write_str(self.label()),
        }
    }
}

/// Allocation for the coming slot.
pub fn schedule_slot(
    kind: &SchedulerKind,
    mode: BacklogMode,
    state: &WindowState,
    rates_now: &RateMatrix,
    backlog: &[bool],
) -> Result<Allocation, SchedulerError> {
    let u = state.users();
    if rates_now.nrows() != u {
        return Err(SchedulerError::UserCount { expected: u, got: rates_now.nrows() });
    }
    let active = effective_backlog(mode, backlog, u)?;
    if !active.iter().any(|&b| b) {
        return Err(SchedulerError::EmptyBacklog { slot: state.slot() });
    }
    match kind {
        SchedulerKind::PfInfinite { policy } => Ok(ensemble_dispatch_among(policy, rates_now, &active)),
        SchedulerKind::MaxThroughput => Ok(max_rate_dispatch_among(rates_now, &active)),
        SchedulerKind::PfW1 | SchedulerKind::PfLookback { .. } => {
            let prob = lookback_problem(state, mode, rates_now, active)?;
            match solve_pf_slot(&prob, DEFAULT_TOL) {
                Ok(rep) => Ok(rep.allocation),
                Err(SolverError::NonConvergence { report }) => {
                    warn!(
                        "slot {}: PF solver stopped at KKT residual {:.3e}; using best iterate",
                        state.slot(),
                        report.kkt_residual
                    );
                    Ok(report.allocation)
                }
                Err(e) => Err(e.into()),
            }
        }
        SchedulerKind::MaxMinLookback { .. } => maxmin_slot(state, mode, rates_now, backlog),
    }
}

/// Look-back max-min allocation: maximises `min_i (a_i + x_i / d_i)` over
/// the backlogged users.
pub fn maxmin_slot(
    state: &WindowState,
    mode: BacklogMode,
    rates_now: &RateMatrix,
    backlog: &[bool],
) -> Result<Allocation, SchedulerError> {
    let u = state.users();
    let active = effective_backlog(mode, backlog, u)?;
    if !active.iter().any(|&b| b) {
        return Err(SchedulerError::EmptyBacklog { slot: state.slot() });
    }
    let (baseline, divisors): (Vec<f64>, Vec<usize>) = (0..u).map(|i| state.baseline(i, mode)).unzip();
    let prob = SlotProblem::with_active(rates_now.clone(), baseline, 1, active)?;
    Ok(solve_maxmin_with_divisors(&prob, &divisors)?.allocation)
}

fn effective_backlog(mode: BacklogMode, backlog: &[bool], users: usize) -> Result<Vec<bool>, SchedulerError> {
    if backlog.len() != users {
        return Err(SchedulerError::UserCount { expected: users, got: backlog.len() });
    }
    Ok(match mode {
        BacklogMode::Saturated => vec![true; users],
        _ => backlog.to_vec(),
    })
}

/// PF slot problem from the window history. With a shared divisor the
/// baseline is `a_i`; with per-user divisors the program is rewritten as
/// `sum_i ln(d_i a_i + x_i)`, which has the same maximiser.
fn lookback_problem(
    state: &WindowState,
    mode: BacklogMode,
    rates_now: &RateMatrix,
    active: Vec<bool>,
) -> Result<SlotProblem, SchedulerError> {
    let (baseline, divisors): (Vec<f64>, Vec<usize>) = (0..state.users()).map(|i| state.baseline(i, mode)).unzip();
    let d = divisors[0];
    if divisors.iter().all(|&x| x == d) {
        return Ok(SlotProblem::with_active(rates_now.clone(), baseline, d, active)?);
    }
    let sums = baseline.iter().zip(&divisors).map(|(a, &d)| a * d as f64).collect();
    Ok(SlotProblem::with_active(rates_now.clone(), sums, 1, active)?)
}

/// Records the slot's outcome: `T_i[n] = sum_k P[i,k] b[i,k]`, zero for idle users.
pub fn update_state(
    state: &mut WindowState,
    alloc: &Allocation,
    rates_now: &RateMatrix,
    backlog: &[bool],
) -> Result<Vec<f64>, SchedulerError> {
    let t = alloc.user_throughputs(rates_now);
    state.record(&t, backlog)?;
    Ok(t)
}

/// A scheduler together with its window state.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub mode: BacklogMode,
    pub state: WindowState,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, mode: BacklogMode, users: usize) -> Result<Self, SchedulerError> {
        let window = kind.state_window();
        Self::with_windows(kind, mode, vec![window; users])
    }

    /// Per-user windows; only meaningful for the look-back kinds.
    pub fn with_windows(kind: SchedulerKind, mode: BacklogMode, windows: Vec<Window>) -> Result<Self, SchedulerError> {
        kind.validate(windows.len())?;
        Ok(Self {
            kind,
            mode,
            state: WindowState::with_windows(windows)?,
        })
    }

    /// Schedules one slot and records it. Returns the allocation and the
    /// per-user slot throughputs.
    pub fn step(&mut self, rates_now: &RateMatrix, backlog: &[bool]) -> Result<(Allocation, Vec<f64>), SchedulerError> {
        let alloc = schedule_slot(&self.kind, self.mode, &self.state, rates_now, backlog)?;
        let flags = effective_backlog(self.mode, backlog, self.state.users())?;
        let t = update_state(&mut self.state, &alloc, rates_now, &flags)?;
        Ok((alloc, t))
    }
}
