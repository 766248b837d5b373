//! Multi-channel multi-rate proportional-fairness scheduling.
//!
//! The crate is organised around the pieces of a slot-based OFDM scheduling
//! study:
//!
//! - [`channel`]: correlated Rayleigh fading traces (time and frequency
//!   selective) mapped to Shannon rates.
//! - [`pf`]: the per-slot look-back PF program, its shadow prices, KKT
//!   certificate and a grid-search oracle.
//! - [`ensemble`]: the infinite-window formulation, both the discrete
//!   virtual-channel mapping and the continuous-rate fixed point.
//! - [`maxmin`]: the look-back max-min fair slot program.
//! - [`schedulers`]: slot-by-slot policies driving a sliding throughput window.
//! - [`metrics`]: system throughput, Jain's index and replication summaries.
//! - [`harness`]: seeded parameter sweeps and CSV output.

pub mod allocation;
pub mod channel;
pub mod ensemble;
pub mod format;
pub mod harness;
pub mod maxmin;
pub mod metrics;
pub mod pf;
pub mod quadrature;
pub mod schedulers;

pub use allocation::{Allocation, RateMatrix};
pub use channel::{ChannelConfig, ChannelError, ChannelTrace};
pub use ensemble::{EnsembleError, EnsemblePolicy, Provenance, RateDistribution, VirtualChannel};
pub use harness::{ExperimentConfig, ExperimentResult, HarnessError, Scale, SchedulerSpec, Sweep, SweepAxis};
pub use maxmin::MaxMinReport;
pub use metrics::{MetricsError, Summary, ThroughputSeries};
pub use pf::{SlotProblem, SolveReport, SolverError};
pub use schedulers::{BacklogMode, BusyTrace, Scheduler, SchedulerError, SchedulerKind, Window, WindowState};
