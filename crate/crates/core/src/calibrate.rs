//! Noise tuning for the filters: a weighted accuracy/smoothness cost and a
//! surrogate-based optimizer over a log-scaled box.
//!
//! The optimizer works on the unit cube `u ∈ [0, 1]^d` mapped to
//! `θ = 10^(log10 lb + u (log10 ub - log10 lb))`. Each iteration fits an
//! inverse-quadratic RBF interpolant to the normalized costs seen so far
//! and samples the minimizer of the interpolant minus an inverse-distance
//! exploration bonus whose weight decays linearly over the budget.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{rmse, total_variation, TimeSeriesDataset};
use crate::ekf::{run_filter, run_fusion_precomputed, EkfConfig, EkfNoise, EkfTrace, FilterMode};
use crate::error::{Error, Result};
use crate::virtual_sensor::VirtualSensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub v_max: f64,
    pub v_min: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w1: 0.5, w2: 1.0, w3: 5.0, v_max: 4.2, v_min: 2.5 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w1, self.w2, self.w3].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Contract("cost weights must be >= 0".into()));
        }
        if !(self.v_max > self.v_min) {
            return Err(Error::Contract("v_max must exceed v_min".into()));
        }
        Ok(())
    }

    pub fn combine(&self, j1: f64, j2: f64, j3: f64) -> f64 {
        self.w1 * j1 / (self.v_max - self.v_min) + self.w2 * j2 + self.w3 * j3
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub j: f64,
    /// Voltage RMSE.
    pub j1: f64,
    /// SOC RMSE.
    pub j2: f64,
    /// SOC total variation.
    pub j3: f64,
}

impl Cost {
    pub const FAILED: Cost = Cost { j: f64::INFINITY, j1: f64::INFINITY, j2: f64::INFINITY, j3: f64::INFINITY };
}

/// A supervised record together with the virtual-sensor readings that
/// fusion consumes. The readings do not depend on the filter noise, so
/// they are computed once.
#[derive(Debug, Clone)]
pub struct CalibrationData<'a> {
    pub data: &'a TimeSeriesDataset,
    soc: Vec<f64>,
    soc_y: Option<Vec<f64>>,
    warmup: usize,
}

impl<'a> CalibrationData<'a> {
    pub fn new(data: &'a TimeSeriesDataset, vs: Option<&VirtualSensor>) -> Result<Self> {
        let soc = data
            .reference_soc()
            .ok_or_else(|| Error::Contract("calibration needs the reference soc column".into()))?;
        let soc_y = vs.map(|vs| vs.run(&data.observations()).iter().map(|o| o.soc).collect());
        Ok(Self { data, soc, soc_y, warmup: vs.map_or(0, VirtualSensor::warmup) })
    }

    pub fn run(&self, cfg: &EkfConfig) -> Result<EkfTrace> {
        let obs = self.data.observations();
        match (cfg.mode, &self.soc_y) {
            (FilterMode::Baseline, _) => run_filter(cfg, &obs, |_, _, _| None, None),
            (FilterMode::Fusion, Some(y)) => run_fusion_precomputed(cfg, &obs, y, self.warmup),
            (FilterMode::Fusion, None) => Err(Error::Contract("fusion calibration needs a virtual sensor".into())),
        }
    }
}

/// Runs the filter with noise `theta` over the record and scores it.
/// Filter failures score as [`Cost::FAILED`].
pub fn cost_j(theta: EkfNoise, cfg: &EkfConfig, cal: &CalibrationData, weights: &CostWeights) -> Cost {
    let cfg = EkfConfig { noise: theta, ..cfg.clone() };
    let scored = cal.run(&cfg).and_then(|t| {
        let j1 = rmse(&cal.data.voltages(), &t.v_hat)?;
        let j2 = rmse(&cal.soc, &t.soc_hat)?;
        let j3 = total_variation(&t.soc_hat)?;
        Ok((j1, j2, j3))
    });
    match scored {
        Ok((j1, j2, j3)) => Cost { j: weights.combine(j1, j2, j3), j1, j2, j3 },
        Err(e) => {
            log::warn!("filter failed at θ = {:?}: {e}", theta.to_array());
            Cost::FAILED
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BboProblem {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub budget: usize,
    pub seed: u64,
    /// Replace the surrogate search by uniform random sampling.
    pub random_search: bool,
}

impl BboProblem {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, budget: usize, seed: u64) -> Self {
        Self { lower, upper, budget, seed, random_search: false }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::Contract("bounds must be non-empty and of equal length".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(*l > 0.0 && l < u && u.is_finite())) {
            return Err(Error::Contract("need 0 < lower < upper for log-scaled search".into()));
        }
        if self.budget < self.dim() + 2 {
            return Err(Error::Contract(format!("budget must be >= dim + 2 = {}", self.dim() + 2)));
        }
        Ok(())
    }

    fn to_theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, &u)| {
                let (lo, hi) = (self.lower[k].log10(), self.upper[k].log10());
                10f64.powf(lo + u.clamp(0.0, 1.0) * (hi - lo)).clamp(self.lower[k], self.upper[k])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BboResult {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    /// Every evaluation in order.
    pub history: Vec<(Vec<f64>, f64)>,
    /// Best value after each evaluation.
    pub incumbent: Vec<f64>,
}

/// Shape parameter of the RBF on the unit cube.
const RBF_EPSILON: f64 = 2.0;

fn rbf(r2: f64) -> f64 {
    1.0 / (1.0 + RBF_EPSILON * RBF_EPSILON * r2)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

struct Surrogate<'a> {
    pts: &'a [Vec<f64>],
    w: DVector<f64>,
}

impl Surrogate<'_> {
    fn fit<'a>(pts: &'a [Vec<f64>], f: &[f64]) -> Surrogate<'a> {
        let n = pts.len();
        let phi = DMatrix::from_fn(n, n, |a, b| rbf(sq_dist(&pts[a], &pts[b])));
        let rhs = DVector::from_column_slice(f);
        let mut ridge = 0.0;
        loop {
            let mut m = phi.clone();
            for d in 0..n {
                m[(d, d)] += ridge;
            }
            if let Some(w) = m.lu().solve(&rhs).filter(|w| w.iter().all(|x| x.is_finite())) {
                return Surrogate { pts, w };
            }
            ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
        }
    }

    fn value(&self, u: &[f64]) -> f64 {
        self.pts.iter().zip(self.w.iter()).map(|(p, w)| w * rbf(sq_dist(p, u))).sum()
    }

    /// `(2/π) atan(1 / Σ 1/d²)`: zero at samples, growing away from them.
    fn exploration(&self, u: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in self.pts {
            let d2 = sq_dist(p, u);
            if d2 == 0.0 {
                return 0.0;
            }
            s += 1.0 / d2;
        }
        2.0 / std::f64::consts::PI * (1.0 / s).atan()
    }
}

fn latin_hypercube(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    for k in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        for (p, &slot) in pts.iter_mut().zip(&perm) {
            p[k] = (slot as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Compass search on the unit cube from `start`.
fn pattern_search(f: &dyn Fn(&[f64]) -> f64, start: &[f64]) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut step = 0.1;
    while step > 1e-7 {
        let mut improved = false;
        for k in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[k] = (y[k] + dir * step).clamp(0.0, 1.0);
                let fy = f(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// Minimizes `f` over the box of `prob`. Deterministic given the seed and
/// `f`. Failures should be reported by `f` as `+∞`.
pub fn bbo_minimize(mut f: impl FnMut(&[f64]) -> f64, prob: &BboProblem) -> Result<BboResult> {
    prob.validate()?;
    let d = prob.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(prob.seed);
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(prob.budget);
    let mut fs: Vec<f64> = Vec::with_capacity(prob.budget);
    let mut result = BboResult { best_x: vec![], best_f: f64::INFINITY, history: vec![], incumbent: vec![] };
    let mut evaluate = |u: Vec<f64>, us: &mut Vec<Vec<f64>>, fs: &mut Vec<f64>, result: &mut BboResult| {
        let x = prob.to_theta(&u);
        let y = f(&x);
        let y = if y.is_nan() { f64::INFINITY } else { y };
        if y < result.best_f || result.best_x.is_empty() {
            result.best_f = y;
            result.best_x = x.clone();
        }
        result.history.push((x, y));
        result.incumbent.push(result.best_f);
        us.push(u);
        fs.push(y);
    };

    if prob.random_search {
        for _ in 0..prob.budget {
            let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            evaluate(u, &mut us, &mut fs, &mut result);
        }
        return Ok(result);
    }

    let n_init = (2 * d).max(8).min(prob.budget);
    for u in latin_hypercube(n_init, d, &mut rng) {
        evaluate(u, &mut us, &mut fs, &mut result);
    }
    while us.len() < prob.budget {
        let finite: Vec<f64> = fs.iter().copied().filter(|v| v.is_finite()).collect();
        let next = if finite.is_empty() {
            (0..d).map(|_| rng.random::<f64>()).collect()
        } else {
            let worst = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let best = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let sentinel = if worst > 0.0 { worst * 10.0 } else { worst + 10.0 * (worst - best).abs().max(1.0) };
            let filled: Vec<f64> = fs.iter().map(|v| if v.is_finite() { *v } else { sentinel }).collect();
            let lo = filled.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let normalized: Vec<f64> = filled.iter().map(|v| (v - lo) / span).collect();
            let sur = Surrogate::fit(&us, &normalized);
            let progress = (us.len() - n_init) as f64 / (prob.budget - n_init).max(1) as f64;
            let delta = 1.0 - progress;
            let acq = |u: &[f64]| sur.value(u) - delta * sur.exploration(u);

            let mut starts: Vec<Vec<f64>> = Vec::new();
            let mut order: Vec<usize> = (0..us.len()).collect();
            order.sort_by(|&a, &b| filled[a].total_cmp(&filled[b]));
            starts.extend(order.iter().take(3).map(|&k| us[k].clone()));
            starts.extend((0..8).map(|_| (0..d).map(|_| rng.random::<f64>()).collect::<Vec<f64>>()));
            let mut best: Option<(Vec<f64>, f64)> = None;
            for s in &starts {
                let (x, a) = pattern_search(&acq, s);
                if best.as_ref().is_none_or(|b| a < b.1) {
                    best = Some((x, a));
                }
            }
            let mut cand = best.expect("at least one start").0;
            // A repeated point would make the interpolation matrix singular.
            while us.iter().any(|p| sq_dist(p, &cand) < 1e-18) {
                for c in &mut cand {
                    *c = (*c + rng.random_range(-1e-4..1e-4)).clamp(0.0, 1.0);
                }
            }
            cand
        };
        evaluate(next, &mut us, &mut fs, &mut result);
    }
    Ok(result)
}

/// One row of the calibration log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub theta: EkfNoise,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub noise: EkfNoise,
    pub cost: Cost,
    pub log: Vec<EvalRecord>,
}

/// Tunes the filter noise of `cfg.mode` on `cal`. Baseline ignores the SOC
/// measurement noise, so its coordinate is held at the upper bound and the
/// search runs over the other three.
pub fn calibrate_filter(cfg: &EkfConfig, cal: &CalibrationData, prob: &BboProblem, weights: &CostWeights) -> Result<Calibration> {
    weights.validate()?;
    if prob.dim() != 4 {
        return Err(Error::Dimension { expected: 4, got: prob.dim() });
    }
    let fixed = match cfg.mode {
        FilterMode::Baseline => Some(prob.upper[3]),
        FilterMode::Fusion => None,
    };
    let sub = match fixed {
        Some(_) => BboProblem { lower: prob.lower[..3].to_vec(), upper: prob.upper[..3].to_vec(), ..prob.clone() },
        None => prob.clone(),
    };
    let expand = |x: &[f64]| -> EkfNoise {
        EkfNoise::from_array([x[0], x[1], x[2], fixed.unwrap_or_else(|| x[3])])
    };
    let mut log = Vec::with_capacity(prob.budget);
    let res = bbo_minimize(
        |x| {
            let theta = expand(x);
            let cost = cost_j(theta, cfg, cal, weights);
            log.push(EvalRecord { theta, cost });
            cost.j
        },
        &sub,
    )?;
    let noise = expand(&res.best_x);
    let cost = log
        .iter()
        .find(|r| r.theta == noise)
        .map(|r| r.cost)
        .unwrap_or_else(|| cost_j(noise, cfg, cal, weights));
    if !cost.j.is_finite() {
        return Err(Error::Numerical { step: 0, msg: "every calibration evaluation failed".into() });
    }
    Ok(Calibration { noise, cost, log })
}

pub const CALIBRATION_LOG_HEADER: &str = "eval,theta_soc,theta_ir,theta_v,theta_socy,J,J1,J2,J3";

pub fn write_calibration_log(log: &[EvalRecord], path: &Path) -> Result<()> {
    let mut out = String::from(CALIBRATION_LOG_HEADER);
    out.push('\n');
    for (n, r) in log.iter().enumerate() {
        let t = r.theta.to_array();
        let _ = writeln!(
            out,
            "{n},{},{},{},{},{},{},{},{}",
            t[0], t[1], t[2], t[3], r.cost.j, r.cost.j1, r.cost.j2, r.cost.j3
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_profile, simulate_ecm, CellParams, CurrentLimits, NoiseSpec, ProfileKind};

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| (v.log10() + 3.0).powi(2)).sum()
    }

    fn box4(budget: usize, seed: u64) -> BboProblem {
        BboProblem::new(vec![1e-6; 4], vec![1.0; 4], budget, seed)
    }

    #[test]
    fn weights_substitute_directly() {
        let w = CostWeights { v_max: 2.7, v_min: 1.0, ..CostWeights::default() };
        assert!((w.combine(0.17, 0.02, 0.001) - 0.075).abs() < 1e-12);
        let only_soc = CostWeights { w1: 0.0, w2: 1.0, w3: 0.0, ..CostWeights::default() };
        assert_eq!(only_soc.combine(0.3, 0.0123, 0.5), 0.0123);
    }

    #[test]
    fn sphere_beats_random_search() {
        let res = bbo_minimize(sphere, &box4(100, 7)).unwrap();
        let random = bbo_minimize(sphere, &BboProblem { random_search: true, ..box4(100, 7) }).unwrap();
        assert!(res.best_f <= 1e-2, "{}", res.best_f);
        assert!(res.best_f <= random.best_f);
        assert_eq!(res.history.len(), 100);
        assert!(res.incumbent.windows(2).all(|w| w[1] <= w[0]));
        for (x, _) in &res.history {
            assert!(x.iter().all(|v| (1e-6..=1.0).contains(v)));
        }
    }

    #[test]
    fn flat_objective_uses_the_whole_budget() {
        let res = bbo_minimize(|_| 3.0, &box4(20, 1)).unwrap();
        assert_eq!(res.history.len(), 20);
        assert_eq!(res.best_f, 3.0);
        assert!(res.history.iter().any(|(x, _)| *x == res.best_x));
    }

    #[test]
    fn failures_do_not_break_the_search() {
        let res = bbo_minimize(|x| if x[0] > 1e-2 { f64::INFINITY } else { sphere(x) }, &box4(40, 2)).unwrap();
        assert!(res.best_f.is_finite());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = bbo_minimize(sphere, &box4(30, 5)).unwrap();
        let b = bbo_minimize(sphere, &box4(30, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn problem_validation() {
        assert!(box4(5, 0).validate().is_err());
        assert!(BboProblem::new(vec![0.0; 4], vec![1.0; 4], 50, 0).validate().is_err());
    }

    fn record() -> TimeSeriesDataset {
        let p = CellParams::default();
        let profile = gen_profile(ProfileKind::PulseHighway, 1500, CurrentLimits::default(), 4);
        let noise = NoiseSpec { sigma_v_meas: 0.002, sigma_i_meas: 0.005, seed: 4 };
        simulate_ecm(&p, &profile, 0.9, 0.0, &noise).unwrap().data
    }

    #[test]
    fn cost_components_match_the_kernels() {
        let d = record();
        let cal = CalibrationData::new(&d, None).unwrap();
        let theta = EkfNoise { sigma_soc: 1e-4, sigma_ir: 1e-3, sigma_v: 1e-2, sigma_soc_y: 1.0 };
        let cfg = EkfConfig::new(FilterMode::Baseline, theta, CellParams::default());
        let c = cost_j(theta, &cfg, &cal, &CostWeights::default());
        let t = cal.run(&cfg).unwrap();
        assert_eq!(c.j1, rmse(&d.voltages(), &t.v_hat).unwrap());
        assert_eq!(c.j2, rmse(&d.reference_soc().unwrap(), &t.soc_hat).unwrap());
        assert_eq!(c.j3, total_variation(&t.soc_hat).unwrap());
        assert_eq!(c, cost_j(theta, &cfg, &cal, &CostWeights::default()));
    }

    #[test]
    fn baseline_calibration_dominates_corners_and_ignores_soc_noise() {
        let d = record();
        let cal = CalibrationData::new(&d, None).unwrap();
        let w = CostWeights::default();
        let cfg = EkfConfig::new(FilterMode::Baseline, EkfNoise::from_array([1e-3; 4]), CellParams::default());
        let prob = box4(30, 3);
        let res = calibrate_filter(&cfg, &cal, &prob, &w).unwrap();
        assert_eq!(res.log.len(), 30);
        assert_eq!(res.noise.sigma_soc_y, 1.0);
        for corner in [[1e-6; 4], [1.0; 4], [1e-3; 4]] {
            assert!(res.cost.j <= cost_j(EkfNoise::from_array(corner), &cfg, &cal, &w).j);
        }
        let moved = EkfNoise { sigma_soc_y: 1e-5, ..res.noise };
        assert_eq!(cost_j(moved, &cfg, &cal, &w), res.cost);
        let again = calibrate_filter(&cfg, &cal, &prob, &w).unwrap();
        assert_eq!(again.noise, res.noise);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.csv");
        write_calibration_log(&res.log, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().next(), Some(CALIBRATION_LOG_HEADER));
        assert_eq!(text.lines().count(), 31);
    }
}
