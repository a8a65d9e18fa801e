//! Synthetic ground-truth cell.
//!
//! A single-RC Thevenin model with SOC-dependent elements stands in for the
//! laboratory cell. Three experiment classes are reproduced from a known
//! parameterization: the low-current OCV sweep, impedance spectroscopy at
//! rest, and dynamic pulse profiles.
//!
//! The discrete-time recursion is
//!
//! ```text
//! soc[k+1]  = soc[k] - tau_s / Q * eta[k] * i[k]          eta = 1 if i >= 0 else eta_c
//! i_r1[k+1] = alpha[k] * i_r1[k] + (1 - alpha[k]) * i[k]   alpha = exp(-tau_s / tau1(soc[k]))
//! v[k]      = OCV(soc[k]) - R1(soc[k]) * i_r1[k] - R0(soc[k]) * i[k]
//! ```
//!
//! with OCV and tau1 polynomials in SOC and R0, R1 of the form
//! `th1 * exp(-th2 * soc) + th3`.

use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{GeisDataset, GeisSpectrum, ImpedancePoint, Sample, TimeSeriesDataset, DEFAULT_TAU_S};
use crate::error::{Error, Result};
use crate::poly::polyval;

/// Seconds per hour, for C-rate conversions.
const HOUR: f64 = 3600.0;

/// `th[0] * exp(-th[1] * soc) + th[2]`
pub fn exp_curve(theta: &[f64; 3], soc: f64) -> f64 {
    theta[0] * (-theta[1] * soc).exp() + theta[2]
}

/// Thevenin-model parameterization, including the cell's voltage window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Total capacity in A·s.
    pub q_total: f64,
    /// Coulombic efficiency applied while charging.
    pub eta_c: f64,
    /// OCV polynomial in SOC, constant-first (V).
    pub theta_ocv: Vec<f64>,
    pub theta_r0: [f64; 3],
    pub theta_r1: [f64; 3],
    /// tau1 polynomial in SOC, constant-first (s).
    pub theta_tau1: Vec<f64>,
    /// Discharge cut-off (V).
    pub v_min: f64,
    /// Charge cut-off (V).
    pub v_max: f64,
}

impl Default for CellParams {
    /// A 4.9 A·h cell with a monotone 2.58-4.12 V OCV curve, resistances
    /// of 10-30 mΩ decaying with SOC and a 6-16 s RC time constant.
    fn default() -> Self {
        Self {
            q_total: 4.9 * HOUR,
            eta_c: 0.99,
            theta_ocv: vec![
                2.5803554246331357,
                7.165594590418077,
                -28.337905114584828,
                78.94424805557392,
                -148.7050138141016,
                188.32166492670012,
                -152.50802112092447,
                71.0315871734274,
                -14.37282392616274,
            ],
            theta_r0: [0.015, 5.0, 0.012],
            theta_r1: [0.012, 4.0, 0.010],
            theta_tau1: vec![6.0, 20.0, -24.0, 14.0],
            v_min: 2.5,
            v_max: 4.2,
        }
    }
}

impl CellParams {
    pub fn ocv(&self, soc: f64) -> f64 {
        polyval(&self.theta_ocv, soc)
    }

    pub fn r0(&self, soc: f64) -> f64 {
        exp_curve(&self.theta_r0, soc)
    }

    pub fn r1(&self, soc: f64) -> f64 {
        exp_curve(&self.theta_r1, soc)
    }

    pub fn tau1(&self, soc: f64) -> f64 {
        polyval(&self.theta_tau1, soc)
    }

    /// Noise-free terminal voltage.
    pub fn terminal_voltage(&self, soc: f64, i_r1: f64, i: f64) -> f64 {
        self.ocv(soc) - self.r1(soc) * i_r1 - self.r0(soc) * i
    }

    /// Checks positivity of the SOC-dependent elements on a fine grid of [0, 1].
    pub fn validate(&self) -> Result<()> {
        if !(self.q_total > 0.0) {
            return Err(Error::Parameterization(format!("capacity must be > 0, got {}", self.q_total)));
        }
        if !(self.eta_c > 0.0 && self.eta_c <= 1.0) {
            return Err(Error::Parameterization(format!("eta_c must lie in (0, 1], got {}", self.eta_c)));
        }
        if self.theta_ocv.is_empty() || self.theta_tau1.is_empty() {
            return Err(Error::Parameterization("empty polynomial coefficients".into()));
        }
        if !(self.v_max > self.v_min) {
            return Err(Error::Parameterization("v_max must exceed v_min".into()));
        }
        for n in 0..=1000 {
            let s = n as f64 / 1000.0;
            for (name, value) in [("R0", self.r0(s)), ("R1", self.r1(s)), ("tau1", self.tau1(s))] {
                if !(value > 0.0) {
                    return Err(Error::Parameterization(format!("{name}({s}) = {value} is not positive")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Artifact(format!("cell parameters: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("cell parameters always serialize")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// Truth-side measurement noise. Unrelated to the filter's tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_v_meas: f64,
    pub sigma_i_meas: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const fn none() -> Self {
        Self {
            sigma_v_meas: 0.0,
            sigma_i_meas: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentProfile {
    pub name: String,
    pub currents: Vec<f64>,
    pub tau_s: f64,
}

impl CurrentProfile {
    pub fn constant(name: &str, current: f64, n_steps: usize) -> Self {
        Self {
            name: name.to_owned(),
            currents: vec![current; n_steps],
            tau_s: DEFAULT_TAU_S,
        }
    }

    /// Joins profiles end to end; the seam indices are returned alongside.
    pub fn concat(parts: &[CurrentProfile]) -> (Self, Vec<usize>) {
        let mut currents = Vec::new();
        let mut seams = Vec::new();
        for p in parts {
            if !currents.is_empty() {
                seams.push(currents.len());
            }
            currents.extend_from_slice(&p.currents);
        }
        let name = parts.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join("+");
        let tau_s = parts.first().map_or(DEFAULT_TAU_S, |p| p.tau_s);
        (Self { name, currents, tau_s }, seams)
    }
}

/// Why a simulation stopped recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EndOfProfile,
    SocOutOfRange,
    LowerCutoff,
    UpperCutoff,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub data: TimeSeriesDataset,
    pub stop: StopReason,
    /// State after the last recorded step (may sit outside [0, 1]).
    pub next_soc: f64,
    pub next_i_r1: f64,
}

#[inline]
pub(crate) fn coulombic_efficiency(i: f64, eta_c: f64) -> f64 {
    if i >= 0.0 {
        1.0
    } else {
        eta_c
    }
}

#[inline]
pub(crate) fn soc_step(soc: f64, i: f64, q_total: f64, eta_c: f64, tau_s: f64) -> f64 {
    soc - tau_s / q_total * coulombic_efficiency(i, eta_c) * i
}

/// Runs the Thevenin recursion over `profile`, recording until the profile
/// ends, SOC leaves [0, 1], or the noise-free voltage crosses a cut-off.
pub fn simulate_ecm(
    p: &CellParams,
    profile: &CurrentProfile,
    soc0: f64,
    ir0: f64,
    noise: &NoiseSpec,
) -> Result<SimRun> {
    if !(0.0..=1.0).contains(&soc0) {
        return Err(Error::Contract(format!("initial soc {soc0} outside [0, 1]")));
    }
    let tau_s = profile.tau_s;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut soc = soc0;
    let mut i_r1 = ir0;
    let mut samples = Vec::with_capacity(profile.currents.len());
    let mut stop = StopReason::EndOfProfile;
    for (k, &i) in profile.currents.iter().enumerate() {
        if !(0.0..=1.0).contains(&soc) {
            stop = StopReason::SocOutOfRange;
            break;
        }
        let tau1 = p.tau1(soc);
        if !(tau1 > 0.0) {
            return Err(Error::Parameterization(format!("tau1({soc}) = {tau1} at step {k}")));
        }
        let v = p.terminal_voltage(soc, i_r1, i);
        if v < p.v_min {
            stop = StopReason::LowerCutoff;
            break;
        }
        if v > p.v_max {
            stop = StopReason::UpperCutoff;
            break;
        }
        let nv: f64 = rng.sample(StandardNormal);
        let ni: f64 = rng.sample(StandardNormal);
        samples.push(Sample {
            k: k as u64,
            i: i + noise.sigma_i_meas * ni,
            v: v + noise.sigma_v_meas * nv,
            soc: Some(soc),
        });
        let alpha = (-tau_s / tau1).exp();
        soc = soc_step(soc, i, p.q_total, p.eta_c, tau_s);
        i_r1 = alpha * i_r1 + (1.0 - alpha) * i;
    }
    Ok(SimRun {
        data: TimeSeriesDataset::new(samples, tau_s)?,
        stop,
        next_soc: soc,
        next_i_r1: i_r1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoulombCount {
    /// `soc[0] = soc0` followed by the state after each current sample
    /// (length `currents.len() + 1`).
    pub soc: Vec<f64>,
    /// Whether any value left [0, 1]. Values are never clamped.
    pub left_range: bool,
}

/// SOC by current integration with charge-side efficiency.
pub fn coulomb_count(currents: &[f64], q_total: f64, eta_c: f64, soc0: f64, tau_s: f64) -> Result<CoulombCount> {
    if !(q_total > 0.0) {
        return Err(Error::Contract(format!("capacity must be > 0, got {q_total}")));
    }
    let mut soc = Vec::with_capacity(currents.len() + 1);
    let mut s = soc0;
    soc.push(s);
    for &i in currents {
        s = soc_step(s, i, q_total, eta_c, tau_s);
        soc.push(s);
    }
    let left_range = soc.iter().any(|x| !(0.0..=1.0).contains(x));
    Ok(CoulombCount { soc, left_range })
}

/// Constant-current discharge from full then recharge, both at `c_rate`
/// (1/h). The multi-hour rest between them is replaced by resetting the RC
/// current to zero. Returns `(discharge, charge)`.
pub fn simulate_lc_ocv(
    p: &CellParams,
    c_rate: f64,
    noise: &NoiseSpec,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(c_rate > 0.0) {
        return Err(Error::Contract(format!("C-rate must be > 0, got {c_rate}")));
    }
    p.validate()?;
    let current = c_rate * p.q_total / HOUR;
    let max_steps = (2.0 * HOUR / c_rate / DEFAULT_TAU_S).ceil() as usize;
    let terminates = |stop: StopReason| stop != StopReason::EndOfProfile;

    let discharge = simulate_ecm(p, &CurrentProfile::constant("lc_discharge", current, max_steps), 1.0, 0.0, noise)?;
    if !terminates(discharge.stop) || discharge.data.len() < 2 {
        return Err(Error::Protocol(format!(
            "discharge at {current} A neither reached v_min nor emptied the cell ({} rows)",
            discharge.data.len()
        )));
    }
    let soc_start = discharge.next_soc.clamp(0.0, 1.0);
    let noise_c = NoiseSpec {
        seed: noise.seed.wrapping_add(1),
        ..*noise
    };
    let charge = simulate_ecm(p, &CurrentProfile::constant("lc_charge", -current, max_steps), soc_start, 0.0, &noise_c)?;
    if !terminates(charge.stop) || charge.data.len() < 2 {
        return Err(Error::Protocol(format!(
            "charge at {current} A neither reached v_max nor filled the cell ({} rows)",
            charge.data.len()
        )));
    }
    Ok((discharge.data, charge.data))
}

/// 60 points, ten per decade, from 10 kHz down, in rad/s.
pub fn default_geis_frequencies() -> Vec<f64> {
    (0..60)
        .map(|n| 2.0 * std::f64::consts::PI * 10f64.powf(4.0 - n as f64 / 10.0))
        .collect()
}

/// `R0 + R1 / (1 + j w tau1)`
pub fn linearized_impedance(r0: f64, r1: f64, tau1: f64, omega: f64) -> Complex64 {
    Complex64::new(r0, 0.0) + Complex64::new(r1, 0.0) / Complex64::new(1.0, omega * tau1)
}

/// Impedance spectra at each equilibrium, optionally perturbed by relative
/// complex Gaussian noise `z * (1 + noise_rel * (n_re + j n_im))`.
pub fn simulate_geis(
    p: &CellParams,
    soc_levels: &[f64],
    freqs: &[f64],
    noise_rel: f64,
    seed: u64,
) -> Result<GeisDataset> {
    if freqs.is_empty() {
        return Err(Error::Contract("empty frequency list".into()));
    }
    if let Some(w) = freqs.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::Contract(format!("non-positive frequency {w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectra = soc_levels
        .iter()
        .map(|&soc| {
            let (r0, r1, tau1) = (p.r0(soc), p.r1(soc), p.tau1(soc));
            let points = freqs
                .iter()
                .map(|&omega| {
                    let z = linearized_impedance(r0, r1, tau1, omega);
                    let n_re: f64 = rng.sample(StandardNormal);
                    let n_im: f64 = rng.sample(StandardNormal);
                    let z = if noise_rel > 0.0 {
                        z * Complex64::new(1.0 + noise_rel * n_re, noise_rel * n_im)
                    } else {
                        z
                    };
                    ImpedancePoint { omega, z }
                })
                .collect();
            GeisSpectrum { soc_bar: soc, points }
        })
        .collect();
    GeisDataset::new(spectra)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    PulseUrban,
    PulseHighway,
    Mixed,
}

impl FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pulse_urban" => Ok(Self::PulseUrban),
            "pulse_highway" => Ok(Self::PulseHighway),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Contract(format!("unknown profile kind `{other}`"))),
        }
    }
}

impl ProfileKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PulseUrban => "pulse_urban",
            Self::PulseHighway => "pulse_highway",
            Self::Mixed => "mixed",
        }
    }
}

/// Current bounds of the cell (A, both positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentLimits {
    pub discharge_max: f64,
    pub charge_max: f64,
}

impl Default for CurrentLimits {
    fn default() -> Self {
        Self {
            discharge_max: 9.8,
            charge_max: 4.9,
        }
    }
}

// (duration in steps, level). Positive levels are fractions of the discharge
// limit, negative ones fractions of the charge limit.
const URBAN_CYCLE: &[(usize, f64)] = &[
    (15, 0.0),
    (20, 0.25),
    (8, 0.6),
    (12, -0.35),
    (25, 0.12),
    (10, 0.45),
    (15, -0.2),
    (20, 0.3),
    (10, 0.0),
    (6, 0.8),
    (14, -0.4),
    (30, 0.15),
];

const HIGHWAY_CYCLE: &[(usize, f64)] = &[
    (60, 0.3),
    (30, 0.45),
    (20, 0.7),
    (40, 0.25),
    (15, -0.3),
    (50, 0.4),
    (10, 0.9),
    (25, -0.15),
    (45, 0.2),
    (20, 0.0),
];

/// Seeded repeating pulse train. Each segment of each repetition gets its
/// amplitude scaled by an independent factor in [0.6, 1.4].
pub fn gen_profile(kind: ProfileKind, n_steps: usize, limits: CurrentLimits, seed: u64) -> CurrentProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cycle: Vec<(usize, f64)> = match kind {
        ProfileKind::PulseUrban => URBAN_CYCLE.to_vec(),
        ProfileKind::PulseHighway => HIGHWAY_CYCLE.to_vec(),
        ProfileKind::Mixed => URBAN_CYCLE.iter().chain(HIGHWAY_CYCLE).copied().collect(),
    };
    let mut currents = Vec::with_capacity(n_steps);
    'outer: loop {
        for &(duration, level) in &cycle {
            let scale: f64 = rng.random_range(0.6..1.4);
            let amp = if level >= 0.0 {
                (level * scale * limits.discharge_max).min(limits.discharge_max)
            } else {
                (level * scale * limits.charge_max).max(-limits.charge_max)
            };
            for _ in 0..duration {
                if currents.len() == n_steps {
                    break 'outer;
                }
                currents.push(amp);
            }
        }
        if currents.len() == n_steps {
            break;
        }
    }
    CurrentProfile {
        name: kind.name().to_owned(),
        currents,
        tau_s: DEFAULT_TAU_S,
    }
}
