//! Time- and frequency-correlated Rayleigh fading for an OFDM downlink.
//!
//! Each user sees a tapped-delay-line channel. Taps sit at multiples of the
//! sample period `symbol_duration / S` with an exponential power profile whose
//! RMS delay spread matches the configuration. Every tap evolves as a Clarke
//! sum of equal-power complex sinusoids, which gives the `J0(2 pi f_d tau)`
//! autocorrelation. Subcarrier gains are the S-point DFT of the taps, and
//! rates follow the Shannon map `log2(1 + SNR)`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::RateMatrix;
use crate::format::significant;

/// Sinusoids per tap in the Clarke sum.
pub const SINUSOIDS_PER_TAP: usize = 16;

/// Tail power (fraction of the untruncated profile) below which taps are dropped.
const TAIL_POWER: f64 = 1e-3;

/// Header of the trace CSV format.
pub const TRACE_CSV_HEADER: [&str; 4] = ["slot", "user", "subcarrier", "rate_bits_per_symbol"];

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "RMS delay spread {requested:.4e} s cannot be represented with {taps} taps at sample period {sample_period:.4e} s (maximum {max:.4e} s)"
    )]
    UnrepresentableDelayProfile {
        requested: f64,
        max: f64,
        taps: usize,
        sample_period: f64,
    },
    #[error("trace CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for ChannelError {
    fn from(e: csv::Error) -> Self {
        ChannelError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub num_users: usize,
    pub num_subcarriers: usize,
    /// OFDM symbol duration in seconds.
    pub symbol_duration: f64,
    /// Scheduling slot length in seconds.
    pub slot_duration: f64,
    pub doppler_hz: f64,
    /// RMS delay spread in seconds.
    pub rms_delay_spread: f64,
    /// Mean SNR per user in dB.
    pub mean_snr_db: Vec<f64>,
    /// Simulated time in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            num_users: 4,
            num_subcarriers: 16,
            symbol_duration: 4e-6,
            slot_duration: 1e-3,
            doppler_hz: 30.0,
            rms_delay_spread: 216.5e-9,
            mean_snr_db: vec![13.0; 4],
            duration: 1.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::InvalidConfig(m));
        if self.num_users == 0 {
            return bad("num_users must be at least 1".into());
        }
        if self.num_subcarriers == 0 || !self.num_subcarriers.is_power_of_two() {
            return bad(format!(
                "num_subcarriers must be a power of two, got {}",
                self.num_subcarriers
            ));
        }
        if !(self.symbol_duration > 0.0 && self.symbol_duration.is_finite()) {
            return bad(format!("symbol_duration must be positive, got {}", self.symbol_duration));
        }
        if !(self.slot_duration > 0.0 && self.slot_duration.is_finite()) {
            return bad(format!("slot_duration must be positive, got {}", self.slot_duration));
        }
        if !(self.doppler_hz >= 0.0 && self.doppler_hz.is_finite()) {
            return bad(format!("doppler_hz must be non-negative, got {}", self.doppler_hz));
        }
        if !(self.rms_delay_spread >= 0.0 && self.rms_delay_spread.is_finite()) {
            return bad(format!(
                "rms_delay_spread must be non-negative, got {}",
                self.rms_delay_spread
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.mean_snr_db.len() != self.num_users {
            return bad(format!(
                "mean_snr_db has {} entries for {} users",
                self.mean_snr_db.len(),
                self.num_users
            ));
        }
        if let Some(x) = self.mean_snr_db.iter().find(|x| !x.is_finite()) {
            return bad(format!("mean_snr_db entry {x} is not finite"));
        }
        Ok(())
    }

    /// Number of slots in a trace, `floor(duration / slot_duration)`.
    pub fn num_slots(&self) -> usize {
        // Absorb representation error, e.g. 1.0 / 0.001.
        (self.duration / self.slot_duration + 1e-9).floor() as usize
    }

    /// Tap spacing of the delay line.
    pub fn sample_period(&self) -> f64 {
        self.symbol_duration / self.num_subcarriers as f64
    }

    pub fn mean_snr_linear(&self) -> Vec<f64> {
        self.mean_snr_db.iter().map(|&db| db_to_linear(db)).collect()
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Shannon rate in bits/symbol.
pub fn shannon_rate(snr: f64) -> f64 {
    (1.0 + snr).log2()
}

/// W-normalized Doppler frequency, `f_d * window_slots * slot_duration`.
pub fn normalized_doppler(cfg: &ChannelConfig, window_slots: usize) -> f64 {
    cfg.doppler_hz * window_slots as f64 * cfg.slot_duration
}

/// Per-slot rate matrices together with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrace {
    pub rates: Vec<RateMatrix>,
    pub config: ChannelConfig,
}

impl ChannelTrace {
    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ChannelError> {
        write_rates_csv(&self.rates, out)
    }
}

/// RMS delay of a power profile with taps at multiples of `sample_period`.
pub fn rms_delay(powers: &[f64], sample_period: f64) -> f64 {
    let total: f64 = powers.iter().sum();
    let (m1, m2) = powers.iter().enumerate().fold((0.0, 0.0), |(m1, m2), (l, &p)| {
        let d = l as f64 * sample_period;
        (m1 + p * d, m2 + p * d * d)
    });
    let mean = m1 / total;
    (m2 / total - mean * mean).max(0.0).sqrt()
}

fn truncated_profile(decay: f64, max_taps: usize) -> Vec<f64> {
    let mut taps = 1;
    let mut tail = decay;
    while tail >= TAIL_POWER && taps < max_taps {
        taps += 1;
        tail *= decay;
    }
    let mut powers: Vec<f64> = (0..taps).map(|l| decay.powi(l as i32)).collect();
    let total: f64 = powers.iter().sum();
    powers.iter_mut().for_each(|p| *p /= total);
    powers
}

/// Exponential power delay profile, normalized to unit total power, whose RMS
/// delay matches `cfg.rms_delay_spread`.
///
/// Tap powers decay as `rho^l`; taps are dropped once the remaining tail of
/// the untruncated profile falls under 0.1% of its power, and never exceed
/// the S taps of one OFDM symbol. `rho` is found by bisection.
pub fn power_delay_profile(cfg: &ChannelConfig) -> Result<Vec<f64>, ChannelError> {
    cfg.validate()?;
    let ts = cfg.sample_period();
    let target = cfg.rms_delay_spread;
    if target == 0.0 {
        return Ok(vec![1.0]);
    }
    let s = cfg.num_subcarriers;
    // A flat profile over all S taps is the widest one available.
    let max = ts * (((s * s) as f64 - 1.0) / 12.0).sqrt();
    if target > max * (1.0 + 1e-12) {
        return Err(ChannelError::UnrepresentableDelayProfile {
            requested: target,
            max,
            taps: s,
            sample_period: ts,
        });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rms_delay(&truncated_profile(mid, s), ts) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(truncated_profile(0.5 * (lo + hi), s))
}

/// One delay tap as a Clarke sum of sinusoids.
///
/// Arrival angles are evenly spaced around the circle with a random offset
/// per tap, and phases are independent. The offset is drawn from [1/8, 3/8]
/// of a grid step so that no angle is the mirror image of another. Mirrored
/// angles share a Doppler shift, and their slow beat keeps the time-averaged
/// power of short traces away from 1.
#[derive(Debug, Clone)]
struct TapProcess {
    amplitude: f64,
    doppler: [f64; SINUSOIDS_PER_TAP],
    phase: [f64; SINUSOIDS_PER_TAP],
}

impl TapProcess {
    fn new<R: Rng>(power: f64, doppler_hz: f64, rng: &mut R) -> Self {
        let mut doppler = [0.0; SINUSOIDS_PER_TAP];
        let mut phase = [0.0; SINUSOIDS_PER_TAP];
        let offset: f64 = PI / 4.0 + rng.random::<f64>() * PI / 2.0;
        for m in 0..SINUSOIDS_PER_TAP {
            let arrival = (2.0 * PI * m as f64 + offset) / SINUSOIDS_PER_TAP as f64;
            doppler[m] = doppler_hz * arrival.cos();
            phase[m] = rng.random::<f64>() * 2.0 * PI;
        }
        Self {
            amplitude: (power / SINUSOIDS_PER_TAP as f64).sqrt(),
            doppler,
            phase,
        }
    }

    fn at(&self, t: f64) -> Complex64 {
        let sum: Complex64 = self
            .doppler
            .iter()
            .zip(&self.phase)
            .map(|(&f, &ph)| Complex64::from_polar(1.0, 2.0 * PI * f * t + ph))
            .sum();
        sum * self.amplitude
    }
}

/// Complex subcarrier gains `H[i,k]` for every slot, with `E|H|^2 = 1`.
pub fn generate_gains(cfg: &ChannelConfig) -> Result<Vec<Array2<Complex64>>, ChannelError> {
    let profile = power_delay_profile(cfg)?;
    let (users, subcarriers) = (cfg.num_users, cfg.num_subcarriers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Users are generated one after another so that their processes are
    // independent draws from the same stream.
    let taps: Vec<Vec<TapProcess>> = (0..users)
        .map(|_| {
            profile
                .iter()
                .map(|&p| TapProcess::new(p, cfg.doppler_hz, &mut rng))
                .collect()
        })
        .collect();
    // twiddle[k][l] = exp(-j 2 pi k l / S)
    let twiddle: Vec<Vec<Complex64>> = (0..subcarriers)
        .map(|k| {
            (0..profile.len())
                .map(|l| {
                    let idx = (k * l) % subcarriers;
                    if idx == 0 {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::from_polar(1.0, -2.0 * PI * idx as f64 / subcarriers as f64)
                    }
                })
                .collect()
        })
        .collect();

    let mut tap_values = vec![Complex64::new(0.0, 0.0); profile.len()];
    let gains = (0..cfg.num_slots())
        .map(|n| {
            let t = n as f64 * cfg.slot_duration;
            let mut h = Array2::zeros((users, subcarriers));
            for (i, user_taps) in taps.iter().enumerate() {
                for (v, tap) in tap_values.iter_mut().zip(user_taps) {
                    *v = tap.at(t);
                }
                for k in 0..subcarriers {
                    h[[i, k]] = tap_values
                        .iter()
                        .zip(&twiddle[k])
                        .map(|(v, w)| v * w)
                        .sum::<Complex64>();
                }
            }
            h
        })
        .collect();
    Ok(gains)
}

/// Generates a rate trace: `b[i,k][n] = log2(1 + snr_i * |H[i,k][n]|^2)`.
pub fn generate_trace(cfg: &ChannelConfig) -> Result<ChannelTrace, ChannelError> {
    let snr = cfg.mean_snr_linear();
    let rates = generate_gains(cfg)?
        .into_iter()
        .map(|h| {
            let mut b = h.mapv(|g| g.norm_sqr());
            for (mut row, &s) in b.rows_mut().into_iter().zip(&snr) {
                row.mapv_inplace(|g| shannon_rate(s * g));
            }
            b
        })
        .collect();
    Ok(ChannelTrace {
        rates,
        config: cfg.clone(),
    })
}

/// Writes rate matrices as `slot,user,subcarrier,rate_bits_per_symbol` rows.
pub fn write_rates_csv<W: Write>(rates: &[RateMatrix], out: W) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_CSV_HEADER)?;
    for (n, b) in rates.iter().enumerate() {
        for ((i, k), &r) in b.indexed_iter() {
            w.write_record([
                n.to_string(),
                i.to_string(),
                k.to_string(),
                significant(r, 9),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace CSV back into per-slot rate matrices. Dimensions are
/// inferred from the largest indices; every (slot, user, subcarrier) cell
/// must appear exactly once.
pub fn read_rates_csv<R: Read>(input: R) -> Result<Vec<RateMatrix>, ChannelError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_CSV_HEADER {
        return Err(ChannelError::Csv(format!("unexpected header {header:?}")));
    }
    let mut cells = Vec::new();
    let (mut slots, mut users, mut subcarriers) = (0, 0, 0);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let parse_idx = |j: usize| -> Result<usize, ChannelError> {
            field(j).parse().map_err(|_| {
                ChannelError::Csv(format!("row {}: bad index {:?}", line + 2, field(j)))
            })
        };
        let (n, i, k) = (parse_idx(0)?, parse_idx(1)?, parse_idx(2)?);
        let r: f64 = field(3)
            .parse()
            .map_err(|_| ChannelError::Csv(format!("row {}: bad rate {:?}", line + 2, field(3))))?;
        if !(r >= 0.0 && r.is_finite()) {
            return Err(ChannelError::Csv(format!("row {}: rate {r} is not a finite non-negative value", line + 2)));
        }
        slots = slots.max(n + 1);
        users = users.max(i + 1);
        subcarriers = subcarriers.max(k + 1);
        cells.push((n, i, k, r));
    }
    let mut rates = vec![Array2::from_elem((users, subcarriers), f64::NAN); slots];
    for (n, i, k, r) in cells {
        let cell = &mut rates[n][[i, k]];
        if !cell.is_nan() {
            return Err(ChannelError::Csv(format!("duplicate cell ({n}, {i}, {k})")));
        }
        *cell = r;
    }
    for (n, b) in rates.iter().enumerate() {
        if let Some(((i, k), _)) = b.indexed_iter().find(|(_, r)| r.is_nan()) {
            return Err(ChannelError::Csv(format!("missing cell ({n}, {i}, {k})")));
        }
    }
    Ok(rates)
}
