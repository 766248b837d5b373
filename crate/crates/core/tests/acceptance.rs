//! Acceptance suite: runs the twelve acceptance criteria and prints one
//! PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use mcpf_core::channel::{generate_gains, generate_trace};
use mcpf_core::ensemble::{
    ensemble_dispatch, ensemble_kkt_violation, ensemble_throughputs, max_rate_dispatch, replicate_table,
    solve_ensemble_discrete, solve_fixed_point, DEFAULT_DAMPING,
};
use mcpf_core::harness::{run_experiment, simulate};
use mcpf_core::maxmin::solve_maxmin_slot;
use mcpf_core::metrics::{jain_index, system_throughput};
use mcpf_core::pf::{brute_force_pf, solve_pf_slot};
use mcpf_core::{
    Allocation, BacklogMode, ChannelConfig, ExperimentConfig, ExperimentResult, RateDistribution, RateMatrix,
    SchedulerKind, SchedulerSpec, SlotProblem, Sweep, SweepAxis, ThroughputSeries, Window, WindowState,
};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // NaN fails the check.
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("solver-oracle equivalence", c01_solver_oracle),
        ("max-min oracle equivalence", c02_maxmin_oracle),
        ("identical channels reduce to one", c03_channel_reduction),
        ("i.i.d. users reduce to max rate", c04_iid_users),
        ("fixed-point consistency", c05_fixed_point),
        ("throughput vs normalized Doppler", c06_doppler_throughput),
        ("fairness vs normalized Doppler", c07_doppler_fairness),
        ("heterogeneous users", c08_heterogeneous),
        ("delay spread sweep", c09_delay_spread),
        ("degeneracy suite", c10_degeneracy),
        ("channel-model suite", c11_channel),
        ("metrics suite", c12_metrics),
    ];
    // Keep assertion messages out of the report; failures carry their own text.
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1} s]", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.1} s]", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let t = start.elapsed();
    if t > budget {
        return Err(format!("took {:.1} s, budget {:.0} s", t.as_secs_f64(), budget.as_secs_f64()));
    }
    Ok(())
}

/// The 2 x 2 instance family shared by the oracle criteria.
fn random_instance(rng: &mut ChaCha8Rng) -> SlotProblem {
    let rates = Array2::from_shape_fn((2, 2), |_| rng.random_range(0.1..10.0));
    let baseline: Vec<f64> = (0..2)
        .map(|_| if rng.random::<bool>() { 0.0 } else { rng.random_range(0.0..5.0) })
        .collect();
    SlotProblem::new(rates, baseline, 1).unwrap()
}

fn c01_solver_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut gap, mut kkt) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let prob = random_instance(&mut rng);
        let rep = solve_pf_slot(&prob, 1e-9).map_err(|e| e.to_string())?;
        let oracle = brute_force_pf(&prob, 1e-3).map_err(|e| e.to_string())?;
        gap = gap.max((rep.utility - oracle.utility).abs());
        kkt = kkt.max(rep.kkt_residual);
    }
    ensure!(gap <= 1e-3, "utility gap {gap:.3e} > 1e-3");
    ensure!(kkt <= 1e-6, "KKT residual {kkt:.3e} > 1e-6");
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("100 instances, worst utility gap {gap:.2e}, worst KKT residual {kkt:.2e}"))
}

/// Best minimum smoothed throughput over the airtime grid `{0, h, ..., 1}^2`.
/// For a fixed share `p` of channel 0, user 0's throughput rises and user
/// 1's falls in the share `q` of channel 1, so the best grid `q` is one of
/// the two grid points around their crossing.
fn maxmin_grid_oracle(prob: &SlotProblem, h: f64) -> f64 {
    let b = &prob.rates;
    let (a, d) = (&prob.baseline, prob.window_divisor as f64);
    let steps = (1.0 / h).round() as i64;
    let value = |p: f64, q: f64| {
        let x0 = a[0] + (p * b[[0, 0]] + q * b[[0, 1]]) / d;
        let x1 = a[1] + ((1.0 - p) * b[[1, 0]] + (1.0 - q) * b[[1, 1]]) / d;
        x0.min(x1)
    };
    let mut best = f64::NEG_INFINITY;
    for i in 0..=steps {
        let p = i as f64 / steps as f64;
        let cross = (d * (a[1] - a[0]) + (1.0 - p) * b[[1, 0]] + b[[1, 1]] - p * b[[0, 0]]) / (b[[0, 1]] + b[[1, 1]]);
        let j = (cross * steps as f64).floor() as i64;
        for jj in [j, j + 1, 0, steps] {
            let jj = jj.clamp(0, steps);
            best = best.max(value(p, jj as f64 / steps as f64));
        }
    }
    best
}

fn c02_maxmin_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gap = 0.0f64;
    for _ in 0..100 {
        let prob = random_instance(&mut rng);
        let got = solve_maxmin_slot(&prob).map_err(|e| e.to_string())?.min_throughput;
        let oracle = maxmin_grid_oracle(&prob, 1e-5);
        ensure!(got >= oracle - 1e-9, "solver {got} below grid optimum {oracle}");
        gap = gap.max(got - oracle);
    }
    ensure!(gap <= 1e-3, "min-throughput gap {gap:.3e} > 1e-3");
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!("100 instances, worst gap to grid optimum (step 1e-5) {gap:.2e}"))
}

fn c03_channel_reduction() -> Outcome {
    let dists = [
        RateDistribution::discrete(vec![0.5, 3.0], vec![0.7, 0.3]).unwrap(),
        RateDistribution::discrete(vec![1.0, 2.0], vec![0.4, 0.6]).unwrap(),
    ];
    let single = solve_ensemble_discrete(&dists, 1, 1e-12).map_err(|e| e.to_string())?;
    let joint = solve_ensemble_discrete(&dists, 2, 1e-12).map_err(|e| e.to_string())?;
    let mut gap = 0.0f64;
    for i in 0..2 {
        let (s, j) = (single.policy.expected_throughputs[i], joint.policy.expected_throughputs[i]);
        gap = gap.max((j - 2.0 * s).abs());
    }
    ensure!(gap <= 1e-6, "joint throughput differs from 2x single by {gap:.3e}");

    let replicated = replicate_table(&single.table, &joint.virtual_channels, 2).ok_or("table lookup failed")?;
    let expected = ensemble_throughputs(&joint.virtual_channels, &replicated);
    let rep_gap = expected
        .iter()
        .zip(&single.policy.expected_throughputs)
        .map(|(j, s)| (j - 2.0 * s).abs())
        .fold(0.0f64, f64::max);
    ensure!(rep_gap <= 1e-6, "replicated table throughput off by {rep_gap:.3e}");
    // Airtime sums to one on every virtual channel.
    for v in 0..replicated.ncols() {
        let s: f64 = replicated.column(v).sum();
        ensure!((s - 1.0).abs() <= 1e-9, "virtual channel {v} airtime sums to {s}");
    }
    let kkt = ensemble_kkt_violation(&joint.virtual_channels, &replicated);
    ensure!(kkt <= 1e-6, "replicated table violates joint KKT by {kkt:.3e}");
    Ok(format!(
        "{} joint virtual channels, throughput gap {gap:.1e}, replicated-table KKT violation {kkt:.1e}",
        joint.virtual_channels.len()
    ))
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    -mean * (1.0 - rng.random::<f64>()).ln()
}

fn c04_iid_users() -> Outcome {
    let m = 10f64.powf(1.3);
    let dists = vec![RateDistribution::rayleigh(m).unwrap(); 4];
    let policy = solve_fixed_point(&dists, 16, 1e-9, DEFAULT_DAMPING).map_err(|e| e.to_string())?;
    let t = &policy.expected_throughputs;
    let (lo, hi) = t.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    let spread = (hi - lo) / lo;
    ensure!(spread <= 1e-6, "fixed point not symmetric: relative spread {spread:.3e}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 0..10_000 {
        let rates = RateMatrix::from_shape_fn((4, 16), |_| (1.0 + exp_sample(&mut rng, m)).log2());
        ensure!(
            ensemble_dispatch(&policy, &rates) == max_rate_dispatch(&rates),
            "dispatch differs from max-rate on matrix {n}"
        );
    }
    Ok(format!("10^4 matrices identical, T* relative spread {spread:.1e}"))
}

fn c05_fixed_point() -> Outcome {
    let start = Instant::now();
    let dbs = [10.0f64, 12.0, 14.0, 16.0];
    let dists: Vec<RateDistribution> = dbs.iter().map(|&db| RateDistribution::rayleigh_db(db).unwrap()).collect();
    let policy = solve_fixed_point(&dists, 16, 1e-7, DEFAULT_DAMPING).map_err(|e| e.to_string())?;
    let t = &policy.expected_throughputs;
    let means: Vec<f64> = dbs.iter().map(|db| 10f64.powf(db / 10.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let slots = 100_000;
    let mut got = [0.0; 4];
    let mut rates = RateMatrix::zeros((4, 16));
    for _ in 0..slots {
        for ((i, _), r) in rates.indexed_iter_mut() {
            *r = (1.0 + exp_sample(&mut rng, means[i])).log2();
        }
        let alloc = ensemble_dispatch(&policy, &rates);
        for (g, x) in got.iter_mut().zip(alloc.user_throughputs(&rates)) {
            *g += x / slots as f64;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..4 {
        worst = worst.max((got[i] - t[i]).abs() / t[i]);
    }
    ensure!(worst <= 0.02, "simulated throughput off by {:.2}% (T* {t:?}, simulated {got:?})", 100.0 * worst);
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!("10^5 slots, worst relative error {:.2}%", 100.0 * worst))
}

/// Desk-scale window sweep {1, 50, 200, 1000} slots at 30 Hz and 1 ms slots,
/// i.e. normalized Doppler {0.03, 1.5, 6, 30}.
fn desk_window_sweep(snr_db: [f64; 4]) -> ExperimentResult {
    let mut cfg = ExperimentConfig::default();
    cfg.channel.mean_snr_db = snr_db.to_vec();
    cfg.channel.duration = 0.2;
    cfg.replications = 10;
    cfg.sweep = Sweep {
        axis: SweepAxis::WindowSlots,
        values: vec![1.0, 50.0, 200.0, 1000.0],
    };
    let result = run_experiment(&cfg).expect("experiment runs");
    assert!(result.is_complete(), "{} runs failed", result.failures.len());
    result
}

fn homogeneous() -> &'static ExperimentResult {
    static CELL: OnceLock<ExperimentResult> = OnceLock::new();
    CELL.get_or_init(|| desk_window_sweep([13.0; 4]))
}

fn heterogeneous() -> &'static ExperimentResult {
    static CELL: OnceLock<ExperimentResult> = OnceLock::new();
    CELL.get_or_init(|| desk_window_sweep([10.0, 12.0, 14.0, 16.0]))
}

/// Ranks with ties (relative difference under 1e-9) given their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && (x[idx[e + 1]] - x[idx[s]]).abs() <= 1e-9 * x[idx[s]].abs().max(1e-300) {
            e += 1;
        }
        let mean = (s + e) as f64 / 2.0 + 1.0;
        for &i in &idx[s..=e] {
            r[i] = mean;
        }
        s = e + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn mean_throughput(r: &ExperimentResult, v: f64, s: SchedulerSpec) -> (f64, f64) {
    let row = r.summary(v, s).expect("summary");
    (row.system_throughput.mean, row.system_throughput.half_width)
}

fn mean_jain(r: &ExperimentResult, v: f64, s: SchedulerSpec) -> f64 {
    r.summary(v, s).expect("summary").jain_index.mean
}

fn c06_doppler_throughput() -> Outcome {
    let r = homogeneous();
    let doppler: Vec<f64> = r.sweep_values.iter().map(|w| 30.0 * w * 1e-3).collect();
    let pf: Vec<f64> = r.sweep_values.iter().map(|&v| mean_throughput(r, v, SchedulerSpec::PfLookback).0).collect();
    let rho = spearman(&doppler, &pf);
    ensure!(rho >= 0.9, "Spearman {rho:.3} < 0.9 (look-back PF throughput {pf:?})");
    for w in pf.windows(2) {
        ensure!(w[1] >= w[0] * (1.0 - 1e-9), "look-back PF throughput decreases: {pf:?}");
    }
    let last = *r.sweep_values.last().unwrap();
    let (lb, _) = mean_throughput(r, last, SchedulerSpec::PfLookback);
    let (inf, inf_hw) = mean_throughput(r, last, SchedulerSpec::PfInfinite);
    let (mt, mt_hw) = mean_throughput(r, last, SchedulerSpec::MaxThroughput);
    for (name, other) in [("infinite-W PF", inf), ("MT", mt)] {
        ensure!((lb - other).abs() <= 0.05 * other, "look-back PF {lb:.3} not within 5% of {name} {other:.3}");
    }
    ensure!(
        (inf - mt).abs() <= inf_hw.max(mt_hw),
        "infinite-W PF {inf:.4} and MT {mt:.4} differ beyond CI half-width {:.4}",
        inf_hw.max(mt_hw)
    );
    Ok(format!(
        "look-back PF {} (Spearman {rho:.2}); at 30: look-back {lb:.2}, infinite-W {inf:.2}, MT {mt:.2}",
        fmt_list(&pf)
    ))
}

fn fmt_list(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c07_doppler_fairness() -> Outcome {
    let r = homogeneous();
    let mut problems = Vec::new();
    for &v in &r.sweep_values {
        let mm = mean_jain(r, v, SchedulerSpec::MaxminLookback);
        for &s in &r.schedulers {
            let j = mean_jain(r, v, s);
            if mm < j - 0.01 {
                problems.push(format!("max-min Jain {mm:.3} < {} {j:.3} at W={v}", s.label()));
            }
        }
    }
    let last = *r.sweep_values.last().unwrap();
    let at_last: Vec<String> = r
        .schedulers
        .iter()
        .map(|&s| format!("{} {:.3}", s.label(), mean_jain(r, last, s)))
        .collect();
    for &s in &r.schedulers {
        let j = mean_jain(r, last, s);
        if j < 0.99 {
            problems.push(format!("{} Jain {j:.3} < 0.99 at normalized Doppler 30", s.label()));
        }
    }
    ensure!(problems.is_empty(), "{}; Jain at 30: {}", problems.join("; "), at_last.join(", "));
    Ok(format!("Jain at normalized Doppler 30: {}", at_last.join(", ")))
}

fn c08_heterogeneous() -> Outcome {
    let r = heterogeneous();
    let pf_variants = [SchedulerSpec::PfW1, SchedulerSpec::PfLookback, SchedulerSpec::PfInfinite];
    let mut min_margin = f64::INFINITY;
    for &v in &r.sweep_values {
        let mt = mean_jain(r, v, SchedulerSpec::MaxThroughput);
        for s in pf_variants {
            let j = mean_jain(r, v, s);
            min_margin = min_margin.min(j - mt);
            ensure!(j - mt >= 0.03, "MT Jain {mt:.3} not 0.03 below {} {j:.3} at W={v}", s.label());
        }
        let (mt_t, _) = mean_throughput(r, v, SchedulerSpec::MaxThroughput);
        for &s in &r.schedulers {
            let (t, _) = mean_throughput(r, v, s);
            ensure!(mt_t >= t, "MT throughput {mt_t:.3} below {} {t:.3} at W={v}", s.label());
        }
    }

    // MT and infinite-W PF do not depend on W; compare their allocations on
    // the replication traces.
    let mut cfg = ExperimentConfig::default();
    cfg.channel.mean_snr_db = vec![10.0, 12.0, 14.0, 16.0];
    cfg.channel.duration = 0.2;
    let policy = Arc::new(cfg.infinite_window_policy().map_err(|e| e.to_string())?);
    let (mut differ, mut total) = (0usize, 0usize);
    for rep in 0..10 {
        let trace = generate_trace(&cfg.point_channel(0, rep)).map_err(|e| e.to_string())?;
        let mut mt_allocs: Vec<Allocation> = Vec::new();
        simulate(SchedulerKind::MaxThroughput, BacklogMode::Saturated, &trace.rates, |_, a| {
            mt_allocs.push(a.clone())
        })
        .map_err(|e| e.to_string())?;
        let kind = SchedulerKind::PfInfinite { policy: policy.clone() };
        simulate(kind, BacklogMode::Saturated, &trace.rates, |n, a| {
            total += 1;
            if *a != mt_allocs[n] {
                differ += 1;
            }
        })
        .map_err(|e| e.to_string())?;
    }
    let frac = differ as f64 / total as f64;
    ensure!(frac > 0.1, "MT and infinite-W PF allocations differ on only {:.1}% of slots", 100.0 * frac);
    Ok(format!(
        "smallest PF-over-MT Jain margin {min_margin:.3}; MT vs infinite-W PF allocations differ on {:.1}% of slots",
        100.0 * frac
    ))
}

fn c09_delay_spread() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.channel.duration = 0.2;
    cfg.replications = 10;
    cfg.window_slots = 200;
    cfg.sweep = Sweep {
        axis: SweepAxis::RmsDelaySpread,
        values: vec![0.0, 216.5e-9, 1083e-9],
    };
    let r = run_experiment(&cfg).map_err(|e| e.to_string())?;
    ensure!(r.is_complete(), "{} runs failed", r.failures.len());
    let series = |s: SchedulerSpec| -> Vec<f64> { r.sweep_values.iter().map(|&v| mean_throughput(&r, v, s).0).collect() };
    for s in [SchedulerSpec::PfW1, SchedulerSpec::MaxminLookback] {
        let t = series(s);
        ensure!(t.windows(2).all(|w| w[1] > w[0]), "{} throughput not increasing: {t:?}", s.label());
    }
    let spread = |v: f64| {
        let t: Vec<f64> = r.schedulers.iter().map(|&s| mean_throughput(&r, v, s).0).collect();
        t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let (flat, wide) = (spread(0.0), spread(1083e-9));
    ensure!(wide <= 0.5 * flat, "spread {wide:.3} at 1083 ns is not half of {flat:.3} at 0 ns");
    Ok(format!(
        "pf_w1 {}, max-min {}; scheduler spread {flat:.2} -> {wide:.2}",
        fmt_list(&series(SchedulerSpec::PfW1)),
        fmt_list(&series(SchedulerSpec::MaxminLookback))
    ))
}

fn log_utility(t: &[f64]) -> f64 {
    t.iter().map(|x| x.ln()).sum()
}

fn c10_degeneracy() -> Outcome {
    let cfg = ChannelConfig {
        duration: 0.2,
        seed: 10,
        ..ChannelConfig::default()
    };
    let trace = generate_trace(&cfg).map_err(|e| e.to_string())?;
    let mode = BacklogMode::Saturated;
    let run = |kind: SchedulerKind, mode: BacklogMode| simulate(kind, mode, &trace.rates, |_, _| {}).map_err(|e| e.to_string());

    let w1 = run(SchedulerKind::PfW1, mode)?;
    let lb1 = run(SchedulerKind::PfLookback { window: 1 }, mode)?;
    let mut worst = 0.0f64;
    for (a, b) in w1.iter().zip(&lb1) {
        worst = worst.max((log_utility(a) - log_utility(b)).abs());
    }
    ensure!(worst <= 1e-9, "look-back W=1 and W=1 PF utilities differ by {worst:.3e}");

    // First slot: empty history, divisor 1, so look-back PF solves the W = 1 problem.
    let state = WindowState::new(4, Window::Slots(50)).map_err(|e| e.to_string())?;
    for i in 0..4 {
        ensure!(state.baseline(i, mode) == (0.0, 1), "slot-1 baseline of user {i} is {:?}", state.baseline(i, mode));
    }
    let lb50 = run(SchedulerKind::PfLookback { window: 50 }, mode)?;
    let first = (log_utility(&lb50[0]) - log_utility(&w1[0])).abs();
    ensure!(first <= 1e-9, "slot-1 utility differs by {first:.3e}");

    for kind in [SchedulerKind::PfLookback { window: 50 }, SchedulerKind::MaxMinLookback { window: 50 }] {
        let label = kind.to_string();
        let credit = run(kind.clone(), BacklogMode::Credit)?;
        let busy = run(kind, BacklogMode::BusyPeriod)?;
        ensure!(credit == busy, "{label}: credit and busy-period modes differ under saturation");
    }
    Ok(format!("W=1 utility gap {worst:.1e}, slot-1 gap {first:.1e}, credit = busy-period"))
}

/// Bessel J0 from (1/pi) * int_0^pi cos(x sin t) dt by Simpson's rule.
fn bessel_j0(x: f64) -> f64 {
    let n = 2000;
    let h = PI / n as f64;
    let f = |t: f64| (x * t.sin()).cos();
    let mut s = f(0.0) + f(PI);
    for j in 1..n {
        s += if j % 2 == 1 { 4.0 } else { 2.0 } * f(j as f64 * h);
    }
    s * h / 3.0 / PI
}

fn c11_channel() -> Outcome {
    let start = Instant::now();
    for seed in 0..10 {
        let cfg = ChannelConfig {
            rms_delay_spread: 0.0,
            duration: 0.2,
            seed,
            ..ChannelConfig::default()
        };
        let trace = generate_trace(&cfg).map_err(|e| e.to_string())?;
        for b in &trace.rates {
            for row in b.rows() {
                ensure!(row.iter().all(|&x| x == row[0]), "flat-fading rates differ across subcarriers (seed {seed})");
            }
        }
    }

    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for seed in 0..20 {
        for &rms in &[0.0, 216.5e-9, 1083e-9] {
            let cfg = ChannelConfig {
                rms_delay_spread: rms,
                seed,
                ..ChannelConfig::default()
            };
            let gains = generate_gains(&cfg).map_err(|e| e.to_string())?;
            let count = (gains.len() * cfg.num_users * cfg.num_subcarriers) as f64;
            let p = gains.iter().flat_map(|h| h.iter().map(|g| g.norm_sqr())).sum::<f64>() / count;
            lo = lo.min(p);
            hi = hi.max(p);
        }
    }
    ensure!(lo >= 0.9 && hi <= 1.1, "mean power of 1 s traces spans [{lo:.3}, {hi:.3}]");

    let max_lag = 10;
    let mut acc = vec![Complex64::new(0.0, 0.0); max_lag + 1];
    let mut pairs = vec![0usize; max_lag + 1];
    let mut power = 0.0;
    let mut series = 0;
    for seed in 0..200 {
        let cfg = ChannelConfig {
            rms_delay_spread: 0.0,
            duration: 0.05,
            seed: 5000 + seed,
            ..ChannelConfig::default()
        };
        let gains = generate_gains(&cfg).map_err(|e| e.to_string())?;
        for i in 0..cfg.num_users {
            let h: Vec<Complex64> = gains.iter().map(|g| g[[i, 0]]).collect();
            power += h.iter().map(|g| g.norm_sqr()).sum::<f64>() / h.len() as f64;
            series += 1;
            for lag in 0..=max_lag {
                for n in 0..h.len() - lag {
                    acc[lag] += h[n + lag] * h[n].conj();
                    pairs[lag] += 1;
                }
            }
        }
    }
    let power = power / series as f64;
    let mut worst = 0.0f64;
    for lag in 0..=max_lag {
        let rho = (acc[lag] / pairs[lag] as f64).re / power;
        let want = bessel_j0(2.0 * PI * 30.0 * lag as f64 * 1e-3);
        worst = worst.max((rho - want).abs());
    }
    ensure!(worst <= 0.1, "autocorrelation deviates from J0 by {worst:.3}");
    within_budget(start, Duration::from_secs(180))?;
    Ok(format!("flat fading exact, mean power in [{lo:.3}, {hi:.3}], worst J0 deviation {worst:.3} (200 traces)"))
}

fn c12_metrics() -> Outcome {
    let jain = |slots: Vec<Vec<f64>>, w: usize| jain_index(&ThroughputSeries::new(slots, w).unwrap(), false).unwrap();
    let cases = [
        (jain(vec![vec![2.0; 4]; 5], 3), 1.0),
        (jain(vec![vec![5.0, 0.0, 0.0, 0.0]; 7], 2), 0.25),
        (jain(vec![vec![1.0, 3.0]], 1), 0.8),
    ];
    for (got, want) in cases {
        ensure!(got == want, "Jain example gave {got}, expected {want}");
    }
    let tput = system_throughput(&ThroughputSeries::new(vec![vec![1.0; 4]; 10], 5).unwrap()).unwrap();
    ensure!(tput == 4.0, "system throughput example gave {tput}");

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (u, n, w) = (rng.random_range(2..6), rng.random_range(1..40), rng.random_range(1..10));
        let slots: Vec<Vec<f64>> = (0..n).map(|_| (0..u).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let base = jain(slots.clone(), w);
        let c = 2f64.powi(rng.random_range(-6..7));
        let scaled = slots.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        ensure!(jain(scaled, w) == base, "Jain index changed under scaling by {c}");
    }
    Ok("examples 1.0, 0.25, 0.8 exact; scale invariance exact on 200 random series".into())
}
