//! Recovers a [`CellParams`] from protocol data.
//!
//! Capacity and Coulombic efficiency come from the low-current sweep by
//! integrating current; the OCV polynomial is a least-squares fit over the
//! merged discharge and charge rows. Each impedance spectrum yields one
//! `[R0, R1, tau1]` triple by fitting `R0 + R1 / (1 + j w tau1)`, and the
//! triples are then smoothed into SOC-dependent curves.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::datamodel::{GeisDataset, ImpedancePoint, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::lm::{levenberg_marquardt, LmOptions};
use crate::poly::{lstsq, polyfit, polyval};
use crate::simulate::{exp_curve, CellParams};

/// Polynomial degree of the OCV curve.
pub const DEFAULT_OCV_DEGREE: usize = 8;
/// Polynomial degree of the tau1 curve.
pub const TAU1_DEGREE: usize = 3;
/// Number of log-spaced tau1 starting points in [0.1, 1000] s.
pub const IMPEDANCE_RESTARTS: usize = 8;

/// `[R0, R1, tau1]` at one equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumFit {
    pub soc_bar: f64,
    pub r0: f64,
    pub r1: f64,
    pub tau1: f64,
    /// RMS magnitude of the complex misfit (Ω).
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedanceFit {
    pub r0: f64,
    pub r1: f64,
    pub tau1: f64,
    pub residual: f64,
    /// Points dropped for having a positive imaginary part.
    pub n_excluded: usize,
}

impl ImpedanceFit {
    pub fn at(self, soc_bar: f64) -> EquilibriumFit {
        EquilibriumFit {
            soc_bar,
            r0: self.r0,
            r1: self.r1,
            tau1: self.tau1,
            residual: self.residual,
        }
    }
}

/// Total charge of a discharge-only record, `tau_s * Σ i`.
pub fn estimate_capacity(d_d: &TimeSeriesDataset) -> Result<f64> {
    if d_d.is_empty() {
        return Err(Error::Protocol("empty discharge dataset".into()));
    }
    if let Some(s) = d_d.samples().iter().find(|s| !(s.i > 0.0)) {
        return Err(Error::Protocol(format!("non-discharging row at step {}", s.k)));
    }
    Ok(d_d.tau_s() * d_d.samples().iter().map(|s| s.i).sum::<f64>())
}

/// Ratio of discharged to charged throughput.
pub fn estimate_coulombic_eff(d_d: &TimeSeriesDataset, d_c: &TimeSeriesDataset) -> Result<f64> {
    let discharged = estimate_capacity(d_d)?;
    if let Some(s) = d_c.samples().iter().find(|s| !(s.i < 0.0)) {
        return Err(Error::Protocol(format!("non-charging row at step {}", s.k)));
    }
    let charged = d_c.tau_s() * d_c.samples().iter().map(|s| -s.i).sum::<f64>();
    if !(charged > 0.0) {
        return Err(Error::Contract("zero charge throughput".into()));
    }
    Ok(discharged / charged)
}

/// Least-squares OCV polynomial (constant-first) of voltage against the
/// reference SOC column, over all rows of `parts`.
pub fn fit_ocv_poly(parts: &[&TimeSeriesDataset], degree: usize) -> Result<Vec<f64>> {
    let mut soc = Vec::new();
    let mut v = Vec::new();
    for d in parts {
        let reference = d
            .reference_soc()
            .ok_or_else(|| Error::Contract("OCV fit needs the reference soc column".into()))?;
        soc.extend(reference);
        v.extend(d.voltages());
    }
    polyfit(&soc, &v, degree)
}

fn impedance_residuals(points: &[ImpedancePoint], p: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (r0, r1, tau) = (p[0].exp(), p[1].exp(), p[2].exp());
    let n = points.len();
    let mut res = DVector::zeros(2 * n);
    let mut jac = DMatrix::zeros(2 * n, 3);
    for (k, pt) in points.iter().enumerate() {
        let denom = Complex64::new(1.0, pt.omega * tau);
        let g = Complex64::new(r0, 0.0) + r1 / denom;
        let diff = g - pt.z;
        res[2 * k] = diff.re;
        res[2 * k + 1] = diff.im;
        // Derivatives with respect to the log-parameters.
        let d_r0 = Complex64::new(r0, 0.0);
        let d_r1 = r1 / denom;
        let d_tau = -r1 * Complex64::new(0.0, pt.omega * tau) / (denom * denom);
        for (c, d) in [d_r0, d_r1, d_tau].into_iter().enumerate() {
            jac[(2 * k, c)] = d.re;
            jac[(2 * k + 1, c)] = d.im;
        }
    }
    (res, jac)
}

/// Linear least squares for `(R0, R1)` with tau1 held fixed.
fn linear_start(points: &[ImpedancePoint], tau: f64) -> (f64, f64) {
    let n = points.len();
    let mut a = DMatrix::zeros(2 * n, 2);
    let mut b = DVector::zeros(2 * n);
    for (k, pt) in points.iter().enumerate() {
        let basis = Complex64::new(1.0, 0.0) / Complex64::new(1.0, pt.omega * tau);
        a[(2 * k, 0)] = 1.0;
        a[(2 * k, 1)] = basis.re;
        a[(2 * k + 1, 1)] = basis.im;
        b[2 * k] = pt.z.re;
        b[2 * k + 1] = pt.z.im;
    }
    let scale = points.iter().map(|p| p.z.norm()).fold(0.0, f64::max).max(1e-12);
    let floor = 1e-6 * scale;
    match lstsq(&a, &b) {
        Ok(x) => (x[0].max(floor), x[1].max(floor)),
        Err(_) => (scale, floor),
    }
}

/// Fits `R0 + R1 / (1 + j w tau1)` to one spectrum by multi-start
/// Levenberg-Marquardt on log-parameters. Points with positive imaginary
/// part are excluded and counted.
pub fn fit_impedance(points: &[ImpedancePoint]) -> Result<ImpedanceFit> {
    let kept: Vec<ImpedancePoint> = points.iter().copied().filter(|p| p.z.im <= 0.0).collect();
    let n_excluded = points.len() - kept.len();
    if kept.len() < 3 {
        return Err(Error::Contract(format!(
            "impedance fit needs >= 3 points with non-positive imaginary part, got {}",
            kept.len()
        )));
    }
    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for j in 0..IMPEDANCE_RESTARTS {
        let tau0 = 10f64.powf(-1.0 + 4.0 * j as f64 / (IMPEDANCE_RESTARTS - 1) as f64);
        let (r0, r1) = linear_start(&kept, tau0);
        let x0 = DVector::from_vec(vec![r0.ln(), r1.ln(), tau0.ln()]);
        let res = levenberg_marquardt(x0, |p| impedance_residuals(&kept, p), LmOptions::default());
        if !res.cost.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((c, _, conv)) => (res.converged && !conv) || (res.converged == *conv && res.cost < *c),
        };
        if better {
            best = Some((res.cost, res.x, res.converged));
        }
    }
    let Some((cost, x, converged)) = best else {
        return Err(Error::Fit {
            context: "impedance: every start diverged".into(),
            best_residual: f64::INFINITY,
        });
    };
    let residual = (2.0 * cost / kept.len() as f64).sqrt();
    // A vanishing branch drives its log-parameter towards -inf without a
    // stationary point; an exact fit is still a fit.
    let scale = kept.iter().map(|p| p.z.norm()).fold(0.0, f64::max);
    if !converged && residual > 1e-12 * scale {
        return Err(Error::Fit {
            context: "impedance: iteration budget exhausted on every start".into(),
            best_residual: residual,
        });
    }
    Ok(ImpedanceFit {
        r0: x[0].exp(),
        r1: x[1].exp(),
        tau1: x[2].exp(),
        residual,
        n_excluded,
    })
}

/// Fits every spectrum of a GEIS dataset.
pub fn fit_all_equilibria(geis: &GeisDataset) -> Result<Vec<EquilibriumFit>> {
    geis.spectra()
        .iter()
        .map(|s| fit_impedance(&s.points).map(|f| f.at(s.soc_bar)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCurves {
    pub theta_r0: [f64; 3],
    pub theta_r1: [f64; 3],
    pub theta_tau1: Vec<f64>,
    /// Whether the R0 / R1 fit fell back to grid search plus linear solve.
    pub r0_fallback: bool,
    pub r1_fallback: bool,
}

fn exp_linear_subproblem(soc: &[f64], r: &[f64], rate: f64) -> Option<([f64; 3], f64)> {
    let a = DMatrix::from_fn(soc.len(), 2, |i, c| if c == 0 { (-rate * soc[i]).exp() } else { 1.0 });
    let b = DVector::from_column_slice(r);
    let x = lstsq(&a, &b).ok()?;
    let theta = [x[0], rate, x[1]];
    let cost = soc
        .iter()
        .zip(r)
        .map(|(&s, &y)| (exp_curve(&theta, s) - y).powi(2))
        .sum::<f64>();
    Some((theta, cost))
}

/// Coarse grid over the decay rate, then golden-section refinement, each
/// point solving the linear subproblem for amplitude and offset.
fn exp_grid_fit(soc: &[f64], r: &[f64]) -> ([f64; 3], f64) {
    let mut best = ([0.0, 0.0, r.iter().sum::<f64>() / r.len() as f64], f64::INFINITY);
    let grid: Vec<f64> = (0..=600).map(|n| -20.0 + 0.1 * n as f64).collect();
    let mut best_idx = 0;
    for (idx, &rate) in grid.iter().enumerate() {
        if let Some((theta, cost)) = exp_linear_subproblem(soc, r, rate) {
            if cost < best.1 {
                best = (theta, cost);
                best_idx = idx;
            }
        }
    }
    if !best.1.is_finite() {
        let mean = best.0[2];
        let cost = r.iter().map(|y| (y - mean).powi(2)).sum();
        return (best.0, cost);
    }
    let (mut lo, mut hi) = (grid[best_idx.saturating_sub(1)], grid[(best_idx + 1).min(grid.len() - 1)]);
    let eval = |rate: f64| exp_linear_subproblem(soc, r, rate).map_or(f64::INFINITY, |(_, c)| c);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if eval(a) < eval(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    if let Some((theta, cost)) = exp_linear_subproblem(soc, r, 0.5 * (lo + hi)) {
        if cost < best.1 {
            best = (theta, cost);
        }
    }
    best
}

fn fit_exp_curve(soc: &[f64], r: &[f64]) -> ([f64; 3], bool) {
    let (start, start_cost) = exp_grid_fit(soc, r);
    let res = levenberg_marquardt(
        DVector::from_column_slice(&start),
        |t| {
            let mut res = DVector::zeros(soc.len());
            let mut jac = DMatrix::zeros(soc.len(), 3);
            for (k, &s) in soc.iter().enumerate() {
                let e = (-t[1] * s).exp();
                res[k] = t[0] * e + t[2] - r[k];
                jac[(k, 0)] = e;
                jac[(k, 1)] = -t[0] * s * e;
                jac[(k, 2)] = 1.0;
            }
            (res, jac)
        },
        LmOptions::default(),
    );
    if res.converged && res.cost.is_finite() && 2.0 * res.cost <= start_cost {
        ([res.x[0], res.x[1], res.x[2]], false)
    } else {
        log::warn!("exponential curve fit fell back to grid search");
        (start, true)
    }
}

/// Smooths per-equilibrium triples into `R_j(s) = th1 exp(-th2 s) + th3`
/// and a cubic `tau1(s)`.
pub fn fit_param_curves(fits: &[EquilibriumFit]) -> Result<ParamCurves> {
    if fits.len() < 4 {
        return Err(Error::Contract(format!("curve fit needs >= 4 equilibria, got {}", fits.len())));
    }
    let soc: Vec<f64> = fits.iter().map(|f| f.soc_bar).collect();
    let span = soc.iter().copied().fold(f64::NEG_INFINITY, f64::max) - soc.iter().copied().fold(f64::INFINITY, f64::min);
    if span < 0.5 {
        return Err(Error::Contract(format!("equilibria span {span} of the SOC range, need >= 0.5")));
    }
    let r0: Vec<f64> = fits.iter().map(|f| f.r0).collect();
    let r1: Vec<f64> = fits.iter().map(|f| f.r1).collect();
    let tau: Vec<f64> = fits.iter().map(|f| f.tau1).collect();
    let (theta_r0, r0_fallback) = fit_exp_curve(&soc, &r0);
    let (theta_r1, r1_fallback) = fit_exp_curve(&soc, &r1);
    let theta_tau1 = polyfit(&soc, &tau, TAU1_DEGREE)?;
    Ok(ParamCurves {
        theta_r0,
        theta_r1,
        theta_tau1,
        r0_fallback,
        r1_fallback,
    })
}

/// Everything recovered from one set of protocol data.
#[derive(Debug, Clone)]
pub struct Identification {
    pub params: CellParams,
    pub fits: Vec<EquilibriumFit>,
    pub curves: ParamCurves,
}

/// Runs every identification step. Cut-off voltages are not identified and
/// are taken from `v_min`/`v_max`.
pub fn identify_cell(
    d_d: &TimeSeriesDataset,
    d_c: &TimeSeriesDataset,
    geis: &GeisDataset,
    ocv_degree: usize,
    v_min: f64,
    v_max: f64,
) -> Result<Identification> {
    let q_total = estimate_capacity(d_d)?;
    let eta_c = estimate_coulombic_eff(d_d, d_c)?;
    let theta_ocv = fit_ocv_poly(&[d_d, d_c], ocv_degree)?;
    let fits = fit_all_equilibria(geis)?;
    let curves = fit_param_curves(&fits)?;
    let params = CellParams {
        q_total,
        eta_c,
        theta_ocv,
        theta_r0: curves.theta_r0,
        theta_r1: curves.theta_r1,
        theta_tau1: curves.theta_tau1.clone(),
        v_min,
        v_max,
    };
    params.validate()?;
    Ok(Identification { params, fits, curves })
}

/// Writes the `soc_bar,r0,r1,tau1,residual` table.
pub fn write_fit_table(fits: &[EquilibriumFit], path: &Path) -> Result<()> {
    let mut out = String::from("soc_bar,r0,r1,tau1,residual\n");
    for f in fits {
        out.push_str(&format!("{},{},{},{},{}\n", f.soc_bar, f.r0, f.r1, f.tau1, f.residual));
    }
    std::fs::File::create(path)
        .and_then(|mut file| file.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Largest relative deviation of a curve from a reference over a SOC grid.
pub fn max_relative_deviation(f: impl Fn(f64) -> f64, reference: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    (0..=200)
        .map(|n| lo + (hi - lo) * n as f64 / 200.0)
        .map(|s| ((f(s) - reference(s)) / reference(s)).abs())
        .fold(0.0, f64::max)
}

/// Evaluates an OCV polynomial; convenience for comparisons.
pub fn ocv_curve(theta: &[f64], soc: f64) -> f64 {
    polyval(theta, soc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Sample;
    use crate::simulate::{default_geis_frequencies, linearized_impedance, simulate_geis, simulate_lc_ocv, NoiseSpec};

    fn constant_dataset(i: f64, n: usize) -> TimeSeriesDataset {
        let samples = (0..n)
            .map(|k| Sample { k: k as u64, i, v: 3.7, soc: Some(0.5) })
            .collect();
        TimeSeriesDataset::new(samples, 1.0).unwrap()
    }

    fn spectrum(r0: f64, r1: f64, tau1: f64) -> Vec<ImpedancePoint> {
        default_geis_frequencies()
            .into_iter()
            .map(|omega| ImpedancePoint { omega, z: linearized_impedance(r0, r1, tau1, omega) })
            .collect()
    }

    #[test]
    fn capacity_by_rectangle_integration() {
        let q = estimate_capacity(&constant_dataset(0.245, 72000)).unwrap();
        assert!((q - 17640.0).abs() < 1e-6);
        let empty = TimeSeriesDataset::new(vec![], 1.0).unwrap();
        assert!(estimate_capacity(&empty).is_err());
        assert!(matches!(estimate_capacity(&constant_dataset(-1.0, 3)), Err(Error::Protocol(_))));
    }

    #[test]
    fn coulombic_efficiency_ratios() {
        let d = constant_dataset(0.245, 1000);
        let c = constant_dataset(-0.245, 1000);
        assert!((estimate_coulombic_eff(&d, &c).unwrap() - 1.0).abs() < 1e-12);
        let d = constant_dataset(17640.0, 1);
        let c = constant_dataset(-17818.2, 1);
        let eta = estimate_coulombic_eff(&d, &c).unwrap();
        assert!((eta - 0.99).abs() < 1e-4, "{eta}");
    }

    #[test]
    fn protocol_round_trip_recovers_capacity_and_efficiency() {
        let p = CellParams::default();
        let (d, c) = simulate_lc_ocv(&p, 1.0 / 20.0, &NoiseSpec::none()).unwrap();
        let q = estimate_capacity(&d).unwrap();
        assert!((q - p.q_total).abs() <= 0.245 + 1e-6);
        let eta = estimate_coulombic_eff(&d, &c).unwrap();
        assert!((eta - p.eta_c).abs() < 1e-3);
    }

    #[test]
    fn ocv_fit_exact_on_polynomial_data() {
        let samples: Vec<Sample> = (0..200)
            .map(|k| {
                let s = k as f64 / 199.0;
                Sample { k, i: 0.1, v: 3.0 + 0.5 * s - 0.2 * s * s, soc: Some(s) }
            })
            .collect();
        let d = TimeSeriesDataset::new(samples, 1.0).unwrap();
        let theta = fit_ocv_poly(&[&d], 2).unwrap();
        for (got, want) in theta.iter().zip([3.0, 0.5, -0.2]) {
            assert!((got - want).abs() <= 1e-8);
        }
    }

    #[test]
    fn ocv_fit_of_constant_voltage_is_flat() {
        let samples: Vec<Sample> = (0..50)
            .map(|k| Sample { k, i: 0.1, v: 3.6, soc: Some(k as f64 / 49.0) })
            .collect();
        let d = TimeSeriesDataset::new(samples, 1.0).unwrap();
        let theta = fit_ocv_poly(&[&d], 4).unwrap();
        assert!((theta[0] - 3.6).abs() < 1e-9);
        assert!(theta[1..].iter().all(|c| c.abs() < 1e-7));
    }

    #[test]
    fn ocv_fit_on_low_current_data_is_within_ir_scale() {
        let p = CellParams::default();
        let (d, c) = simulate_lc_ocv(&p, 1.0 / 20.0, &NoiseSpec::none()).unwrap();
        let theta = fit_ocv_poly(&[&d, &c], DEFAULT_OCV_DEGREE).unwrap();
        let i = p.q_total / 20.0 / 3600.0;
        let ir_scale = (0..=100)
            .map(|n| n as f64 / 100.0)
            .map(|s| (p.r0(s) + p.r1(s)) * i)
            .fold(0.0, f64::max);
        let worst = (0..=180)
            .map(|n| 0.05 + 0.9 * n as f64 / 180.0)
            .map(|s| (polyval(&theta, s) - p.ocv(s)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 5.0 * ir_scale, "{worst} vs {ir_scale}");
    }

    #[test]
    fn ocv_residual_does_not_grow_with_degree() {
        let p = CellParams::default();
        let (d, c) = simulate_lc_ocv(&p, 1.0 / 20.0, &NoiseSpec::none()).unwrap();
        let soc: Vec<f64> = d.reference_soc().unwrap().into_iter().chain(c.reference_soc().unwrap()).collect();
        let v: Vec<f64> = d.voltages().into_iter().chain(c.voltages()).collect();
        let mut prev = f64::INFINITY;
        for degree in 1..=8 {
            let theta = fit_ocv_poly(&[&d, &c], degree).unwrap();
            let sse: f64 = soc.iter().zip(&v).map(|(&s, &y)| (polyval(&theta, s) - y).powi(2)).sum();
            assert!(sse <= prev * (1.0 + 1e-9), "degree {degree}: {sse} > {prev}");
            prev = sse;
        }
    }

    #[test]
    fn impedance_fit_recovers_noiseless_parameters() {
        let fit = fit_impedance(&spectrum(0.02, 0.015, 10.0)).unwrap();
        assert!((fit.r0 / 0.02 - 1.0).abs() < 1e-6);
        assert!((fit.r1 / 0.015 - 1.0).abs() < 1e-6);
        assert!((fit.tau1 / 10.0 - 1.0).abs() < 1e-6);
        assert_eq!(fit.n_excluded, 0);
    }

    #[test]
    fn impedance_fit_with_vanishing_rc_branch() {
        let pts: Vec<ImpedancePoint> = default_geis_frequencies()
            .into_iter()
            .map(|omega| ImpedancePoint { omega, z: Complex64::new(0.025, 0.0) })
            .collect();
        let fit = fit_impedance(&pts).unwrap();
        assert!((fit.r0 - 0.025).abs() < 1e-9);
        assert!(fit.r1 < 1e-6);
    }

    #[test]
    fn positive_imaginary_points_are_excluded() {
        let mut pts = spectrum(0.02, 0.015, 10.0);
        pts.push(ImpedancePoint { omega: 1e6, z: Complex64::new(0.5, 0.3) });
        pts.push(ImpedancePoint { omega: 2e6, z: Complex64::new(0.9, 0.1) });
        let fit = fit_impedance(&pts).unwrap();
        assert_eq!(fit.n_excluded, 2);
        assert!((fit.r0 / 0.02 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn impedance_fit_is_order_invariant() {
        let p = CellParams::default();
        let g = simulate_geis(&p, &[0.3], &default_geis_frequencies(), 0.01, 5).unwrap();
        let pts = g.spectra()[0].points.clone();
        let a = fit_impedance(&pts).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let b = fit_impedance(&rev).unwrap();
        for (x, y) in [(a.r0, b.r0), (a.r1, b.r1), (a.tau1, b.tau1)] {
            assert!((x / y - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = spectrum(0.02, 0.015, 10.0);
        assert!(fit_impedance(&pts[..2]).is_err());
    }

    fn fits_from(params: &CellParams, socs: &[f64]) -> Vec<EquilibriumFit> {
        socs.iter()
            .map(|&s| EquilibriumFit { soc_bar: s, r0: params.r0(s), r1: params.r1(s), tau1: params.tau1(s), residual: 0.0 })
            .collect()
    }

    #[test]
    fn curves_recover_exponential_and_cubic_coefficients() {
        let p = CellParams::default();
        let socs: Vec<f64> = (0..10).map(|n| 0.05 + 0.1 * n as f64).collect();
        let geis = simulate_geis(&p, &socs, &default_geis_frequencies(), 0.0, 0).unwrap();
        let fits = fit_all_equilibria(&geis).unwrap();
        let curves = fit_param_curves(&fits).unwrap();
        for (got, want) in curves.theta_r0.iter().zip(p.theta_r0) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-3), "{got} vs {want}");
        }
        for (got, want) in curves.theta_r1.iter().zip(p.theta_r1) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-3), "{got} vs {want}");
        }
        for (got, want) in curves.theta_tau1.iter().zip(&p.theta_tau1) {
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
        }
        assert!(!curves.r0_fallback && !curves.r1_fallback);
    }

    #[test]
    fn constant_resistances_give_flat_curves() {
        let socs = [0.1, 0.3, 0.5, 0.7, 0.9];
        let fits: Vec<EquilibriumFit> = socs
            .iter()
            .map(|&s| EquilibriumFit { soc_bar: s, r0: 0.02, r1: 0.01, tau1: 8.0 + s, residual: 0.0 })
            .collect();
        let curves = fit_param_curves(&fits).unwrap();
        for n in 0..=100 {
            let s = n as f64 / 100.0;
            assert!((exp_curve(&curves.theta_r0, s) - 0.02).abs() < 1e-8);
            assert!((exp_curve(&curves.theta_r1, s) - 0.01).abs() < 1e-8);
            assert!((polyval(&curves.theta_tau1, s) - (8.0 + s)).abs() < 1e-8);
        }
    }

    #[test]
    fn curve_fit_preconditions() {
        let p = CellParams::default();
        assert!(fit_param_curves(&fits_from(&p, &[0.1, 0.5, 0.9])).is_err());
        assert!(fit_param_curves(&fits_from(&p, &[0.1, 0.2, 0.3, 0.4])).is_err());
    }

    #[test]
    fn noisy_spectra_stay_within_ten_percent() {
        let p = CellParams::default();
        let socs: Vec<f64> = (0..10).map(|n| 0.05 + 0.1 * n as f64).collect();
        let geis = simulate_geis(&p, &socs, &default_geis_frequencies(), 0.01, 17).unwrap();
        let curves = fit_param_curves(&fit_all_equilibria(&geis).unwrap()).unwrap();
        let r0 = max_relative_deviation(|s| exp_curve(&curves.theta_r0, s), |s| p.r0(s), 0.05, 0.95);
        let r1 = max_relative_deviation(|s| exp_curve(&curves.theta_r1, s), |s| p.r1(s), 0.05, 0.95);
        let tau = max_relative_deviation(|s| polyval(&curves.theta_tau1, s), |s| p.tau1(s), 0.05, 0.95);
        assert!(r0 <= 0.10 && r1 <= 0.10 && tau <= 0.10, "{r0} {r1} {tau}");
    }
}
