//! Data-driven SOC sensor built from a bank of Luenberger observers.
//!
//! Training runs in three stages:
//!
//! 1. A network `M_LPV` maps SOC to the parameters `γ` of an affine ARX
//!    model of order `M`, fitted so that `φ[k]ᵀ γ(SOC[k])` predicts `v[k]`
//!    one step ahead.
//! 2. The γ trace over the training set is clustered with k-medoids; each
//!    medoid is realized in observer canonical form and given an observer
//!    gain that places its error poles on a circle.
//! 3. A second network `h_θ` maps a window of absolute innovations from
//!    every observer, together with `i[k]` and `v[k]`, to `SOC[k]`.
//!
//! The regressor is `φ[k] = [-v[k-M] .. -v[k-1], i[k-M] .. i[k-1], 1]` and
//! `γ = [a_M .. a_1, b_M .. b_1, c]`, so the one-step prediction reads
//! `v̂[k] = -Σ a_m v[k-m] + Σ b_m i[k-m] + c`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Observations, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::neural::{columns, train_objective, Loss, Mlp, MlpSpec, Objective, TrainLog, TrainSpec};
use crate::poly::lstsq;

const FORMAT_TAG: &str = "socfusion-vs";
const FORMAT_VERSION: u32 = 1;
/// Reported SOC estimates are clamped to this range.
pub const REPORT_RANGE: (f64, f64) = (-0.1, 1.1);
/// Relative tolerance of the pole-zero cancellation check.
pub const CANCELLATION_TOL: f64 = 1e-8;

/// Affine ARX parameters `[a_M .. a_1, b_M .. b_1, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxParams {
    pub gamma: Vec<f64>,
}

impl ArxParams {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.len() < 3 || gamma.len().is_multiple_of(2) {
            return Err(Error::Contract(format!("γ must have length 2M+1 with M >= 1, got {}", gamma.len())));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Contract("non-finite γ entry".into()));
        }
        Ok(Self { gamma })
    }

    /// Builds γ from `a = [a_1 .. a_M]`, `b = [b_1 .. b_M]` and `c`.
    pub fn from_coefficients(a: &[f64], b: &[f64], c: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Dimension { expected: a.len(), got: b.len() });
        }
        let mut gamma: Vec<f64> = a.iter().rev().copied().collect();
        gamma.extend(b.iter().rev());
        gamma.push(c);
        Self::new(gamma)
    }

    pub fn order(&self) -> usize {
        (self.gamma.len() - 1) / 2
    }

    /// `[a_1 .. a_M]`
    pub fn a(&self) -> Vec<f64> {
        self.gamma[..self.order()].iter().rev().copied().collect()
    }

    /// `[b_1 .. b_M]`
    pub fn b(&self) -> Vec<f64> {
        let m = self.order();
        self.gamma[m..2 * m].iter().rev().copied().collect()
    }

    pub fn c(&self) -> f64 {
        self.gamma[2 * self.order()]
    }
}

/// Regressor `φ[k]` for `k >= M`.
pub fn regressor(current: &[f64], voltage: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut phi = Vec::with_capacity(2 * m + 1);
    phi.extend((k - m..k).map(|j| -voltage[j]));
    phi.extend((k - m..k).map(|j| current[j]));
    phi.push(1.0);
    phi
}

/// One-step ARX prediction `φ[k]ᵀ γ`.
pub fn arx_predict(g: &ArxParams, current: &[f64], voltage: &[f64], k: usize) -> f64 {
    regressor(current, voltage, g.order(), k)
        .iter()
        .zip(&g.gamma)
        .map(|(p, g)| p * g)
        .sum()
}

/// Absolute (or squared) error of `φᵀγ` against `v`, with γ the network
/// output.
struct ArxChain {
    phi: DMatrix<f64>,
    v: Vec<f64>,
    loss: Loss,
}

impl Objective for ArxChain {
    fn len(&self) -> usize {
        self.v.len()
    }

    fn eval(&self, idx: &[usize], outputs: &DMatrix<f64>, mut grad: Option<&mut DMatrix<f64>>) -> f64 {
        let mut total = 0.0;
        for (col, &k) in idx.iter().enumerate() {
            let phi = self.phi.column(k);
            let r = phi.dot(&outputs.column(col)) - self.v[k];
            total += self.loss.value(r);
            if let Some(g) = grad.as_deref_mut() {
                g.set_column(col, &(phi * self.loss.slope(r)));
            }
        }
        total
    }
}

/// Output of [`train_mlpv`].
#[derive(Debug, Clone)]
pub struct MlpvFit {
    pub net: Mlp,
    /// `γ[k] = M_LPV(SOC[k])` for `k = M .. N-1`.
    pub gamma_trace: Vec<Vec<f64>>,
    pub soc_trace: Vec<f64>,
    pub log: TrainLog,
}

/// Voltage scale that one standardized unit of network output moves the
/// prediction by.
const GAMMA_OUTPUT_SCALE_V: f64 = 0.05;

/// Least squares for one global γ, with a small ridge when the regressors
/// are collinear.
fn global_arx(phi: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let b = DVector::from_column_slice(v);
    if let Ok(g) = lstsq(&phi.transpose(), &b) {
        return g;
    }
    let mut gram = phi * phi.transpose();
    let lambda = 1e-12 * gram.trace().max(1e-300) / gram.nrows() as f64;
    for d in 0..gram.nrows() {
        gram[(d, d)] += lambda;
    }
    let rhs = phi * b;
    gram.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(phi.nrows()))
}

/// Fits the SOC-scheduled ARX network. The output layer starts at zero so
/// the initial network is the best single ARX model.
pub fn train_mlpv(d_tr: &TimeSeriesDataset, m: usize, hidden: &[usize], train: &TrainSpec, seed: u64) -> Result<MlpvFit> {
    if m == 0 {
        return Err(Error::Contract("ARX order must be >= 1".into()));
    }
    let n = d_tr.len();
    if n <= m + 10 {
        return Err(Error::Contract(format!("M_LPV training needs more than M + 10 = {} rows, got {n}", m + 10)));
    }
    let soc = d_tr
        .reference_soc()
        .ok_or_else(|| Error::Contract("M_LPV training needs the reference soc column".into()))?;
    let (i, v) = (d_tr.currents(), d_tr.voltages());
    let n_gamma = 2 * m + 1;
    let ks: Vec<usize> = (m..n).collect();
    let phi = DMatrix::from_fn(n_gamma, ks.len(), |r, c| regressor(&i, &v, m, ks[c])[r]);
    let targets: Vec<f64> = ks.iter().map(|&k| v[k]).collect();
    let x = DMatrix::from_fn(1, ks.len(), |_, c| soc[ks[c]]);

    let mut net = Mlp::init(&MlpSpec::new(1, hidden, n_gamma, seed))?;
    net.fit_input_scaling(&x);
    net.out_mean = global_arx(&phi, &targets);
    for r in 0..n_gamma {
        let rms = (phi.row(r).iter().map(|p| p * p).sum::<f64>() / ks.len() as f64).sqrt();
        net.out_scale[r] = if rms > 1e-12 { GAMMA_OUTPUT_SCALE_V / rms } else { GAMMA_OUTPUT_SCALE_V };
    }
    let last = net.weights.len() - 1;
    net.weights[last].fill(0.0);
    net.biases[last].fill(0.0);

    let obj = ArxChain { phi, v: targets, loss: train.loss };
    let log = train_objective(&mut net, train, &x, &obj)?;
    let out = net.forward_batch(&x)?;
    let gamma_trace = out.column_iter().map(|c| c.iter().copied().collect()).collect();
    let soc_trace = ks.iter().map(|&k| soc[k]).collect();
    Ok(MlpvFit { net, gamma_trace, soc_trace, log })
}

/// A medoid model with the mean SOC of its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Representative {
    pub gamma: ArxParams,
    pub soc_tag: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sum over points of the distance to the nearest medoid.
pub fn medoid_objective(points: &[Vec<f64>], medoids: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| medoids.iter().map(|&m| dist(p, &points[m])).fold(f64::INFINITY, f64::min))
        .sum()
}

fn kmeanspp(d: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = d.nrows();
    let mut medoids = vec![rng.random_range(0..n)];
    while medoids.len() < k {
        let w: Vec<f64> = (0..n)
            .map(|p| medoids.iter().map(|&m| d[(p, m)]).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (p, wp) in w.iter().enumerate() {
            if u < *wp {
                pick = p;
                break;
            }
            u -= wp;
        }
        if !medoids.contains(&pick) {
            medoids.push(pick);
        }
    }
    medoids
}

fn cost_with(d: &DMatrix<f64>, medoids: &[usize]) -> f64 {
    (0..d.nrows())
        .map(|p| medoids.iter().map(|&m| d[(p, m)]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// k-medoids on a distance matrix: k-means++ seeding, alternating
/// assignment/update, then greedy swap refinement.
fn kmedoids(d: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = d.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = kmeanspp(d, k, &mut rng);
    for _ in 0..100 {
        let assign: Vec<usize> = (0..n)
            .map(|p| {
                (0..medoids.len())
                    .min_by(|&a, &b| d[(p, medoids[a])].total_cmp(&d[(p, medoids[b])]))
                    .expect("non-empty")
            })
            .collect();
        let mut next = medoids.clone();
        for (c, slot) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&p| assign[p] == c).collect();
            if let Some(best) = members
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let sa: f64 = members.iter().map(|&q| d[(a, q)]).sum();
                    let sb: f64 = members.iter().map(|&q| d[(b, q)]).sum();
                    sa.total_cmp(&sb)
                })
            {
                *slot = best;
            }
        }
        if next == medoids {
            break;
        }
        medoids = next;
    }
    let mut cost = cost_with(d, &medoids);
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..medoids.len() {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let mut trial = medoids.clone();
                trial[slot] = cand;
                let c = cost_with(d, &trial);
                if c < best.map_or(cost, |b| b.2) - 1e-12 * cost.abs() {
                    best = Some((slot, cand, c));
                }
            }
        }
        match best {
            Some((slot, cand, c)) => {
                medoids[slot] = cand;
                cost = c;
            }
            None => break,
        }
    }
    medoids
}

/// Picks `n_theta` medoids of the γ trace, tags each with the mean SOC of
/// its cluster and sorts by tag. Traces longer than `max_points` are
/// subsampled at a fixed stride first.
pub fn select_representatives(
    gamma_trace: &[Vec<f64>],
    soc_trace: &[f64],
    n_theta: usize,
    max_points: usize,
    seed: u64,
) -> Result<Vec<Representative>> {
    if gamma_trace.len() != soc_trace.len() {
        return Err(Error::Dimension { expected: gamma_trace.len(), got: soc_trace.len() });
    }
    if n_theta == 0 || gamma_trace.len() < n_theta {
        return Err(Error::Contract(format!(
            "need at least n_theta = {n_theta} >= 1 trace points, got {}",
            gamma_trace.len()
        )));
    }
    let stride = gamma_trace.len().div_ceil(max_points.max(n_theta));
    let idx: Vec<usize> = (0..gamma_trace.len()).step_by(stride).collect();
    let points: Vec<&Vec<f64>> = idx.iter().map(|&k| &gamma_trace[k]).collect();
    let n = points.len();
    let d = DMatrix::from_fn(n, n, |a, b| dist(points[a], points[b]));
    let mut medoids = kmedoids(&d, n_theta.min(n), seed);
    let before = medoids.len();
    let mut distinct: Vec<usize> = Vec::new();
    for m in medoids.drain(..) {
        if distinct.iter().all(|&q| d[(m, q)] > 0.0) {
            distinct.push(m);
        }
    }
    let medoids = distinct;
    if medoids.len() < n_theta {
        log::warn!(
            "γ trace has only {} distinct medoids ({} requested, {before} found); reducing N_θ",
            medoids.len(),
            n_theta
        );
    }
    let mut sums = vec![(0.0, 0usize); medoids.len()];
    for p in 0..n {
        let c = (0..medoids.len())
            .min_by(|&a, &b| d[(p, medoids[a])].total_cmp(&d[(p, medoids[b])]))
            .expect("non-empty");
        sums[c].0 += soc_trace[idx[p]];
        sums[c].1 += 1;
    }
    let mut reps: Vec<Representative> = medoids
        .iter()
        .zip(&sums)
        .map(|(&m, &(s, c))| {
            Ok(Representative { gamma: ArxParams::new(points[m].clone())?, soc_tag: s / c.max(1) as f64 })
        })
        .collect::<Result<_>>()?;
    reps.sort_by(|a, b| a.soc_tag.total_cmp(&b.soc_tag));
    Ok(reps)
}

/// Local model in observer canonical form with its Luenberger gain:
/// `χ[k+1] = A χ[k] + B i[k] + d - L (v̂[k] - v[k])`, `v̂[k] = C χ[k] + e`
/// with `C = [1, 0, .., 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObserver {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub d: DVector<f64>,
    pub e: f64,
    pub l: DVector<f64>,
    pub soc_tag: f64,
}

impl LocalObserver {
    pub fn order(&self) -> usize {
        self.b.len()
    }

    pub fn c(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(1, self.order());
        c[(0, 0)] = 1.0;
        c
    }

    /// `A - L C`
    pub fn error_dynamics(&self) -> DMatrix<f64> {
        let mut f = self.a.clone();
        for r in 0..self.order() {
            f[(r, 0)] -= self.l[r];
        }
        f
    }

    pub fn output(&self, state: &DVector<f64>) -> f64 {
        state[0] + self.e
    }

    /// Advances one step and returns the innovation `v̂[k] - v[k]`.
    pub fn step(&self, state: &mut DVector<f64>, i: f64, v: f64) -> f64 {
        let eps = self.output(state) - v;
        let mut next = &self.a * &*state;
        next.axpy(i, &self.b, 1.0);
        next += &self.d;
        next.axpy(-eps, &self.l, 1.0);
        *state = next;
        eps
    }
}

fn poly_roots(monic_tail: &[f64]) -> Vec<Complex64> {
    let m = monic_tail.len();
    if m == 0 {
        return vec![];
    }
    let comp = DMatrix::from_fn(m, m, |r, c| {
        if c == 0 {
            -monic_tail[r]
        } else if r + 1 == c {
            1.0
        } else {
            0.0
        }
    });
    comp.complex_eigenvalues().iter().copied().collect()
}

/// Evaluates `Σ coeffs[n] z^(len-1-n)` (highest power first).
fn horner_c(coeffs: &[f64], z: Complex64) -> Complex64 {
    coeffs.iter().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// Divides a highest-power-first polynomial by a monic divisor, dropping
/// the remainder.
fn deflate(p: &[f64], divisor: &[f64]) -> Vec<f64> {
    let dd = divisor.len() - 1;
    if p.len() <= dd {
        return vec![];
    }
    let mut rem = p.to_vec();
    let mut q = vec![0.0; p.len() - dd];
    for n in 0..q.len() {
        q[n] = rem[n];
        for (j, dj) in divisor.iter().enumerate().skip(1) {
            rem[n + j] -= q[n] * dj;
        }
    }
    q
}

/// Observer canonical realization of an ARX model (gain left at zero).
/// Modes that cancel in both the current and the affine channel are
/// removed, lowering the order.
pub fn arx_to_ss(g: &ArxParams, soc_tag: f64) -> Result<LocalObserver> {
    let mut den: Vec<f64> = std::iter::once(1.0).chain(g.a()).collect();
    let mut num = g.b();
    let c = g.c();
    loop {
        let m = den.len() - 1;
        if m == 0 {
            return Err(Error::Unobservable);
        }
        let scale = 1.0 + num.iter().map(|x| x.abs()).sum::<f64>();
        let cancelled = poly_roots(&den[1..]).into_iter().find(|&r| {
            let rm = r.norm().max(1.0).powi(m as i32 - 1);
            let num_zero = horner_c(&num, r).norm() <= CANCELLATION_TOL * scale * rm;
            let affine_zero = c == 0.0 || (c * r.powi(m as i32 - 1)).norm() <= CANCELLATION_TOL * (1.0 + c.abs()) * rm;
            num_zero && affine_zero
        });
        let Some(r) = cancelled else { break };
        let divisor = if r.im.abs() > CANCELLATION_TOL * r.norm().max(1.0) {
            vec![1.0, -2.0 * r.re, r.norm_sqr()]
        } else {
            vec![1.0, -r.re]
        };
        log::warn!("ARX model has a cancelling mode at {r}; reducing its order");
        den = deflate(&den, &divisor);
        num = deflate(&num, &divisor);
        num.resize(den.len() - 1, 0.0);
    }
    let m = den.len() - 1;
    let a_coef = &den[1..];
    let a = DMatrix::from_fn(m, m, |r, col| {
        if col == 0 {
            -a_coef[r]
        } else if r + 1 == col {
            1.0
        } else {
            0.0
        }
    });
    let mut d = DVector::zeros(m);
    d[0] = c;
    Ok(LocalObserver { a, b: DVector::from_vec(num), d, e: 0.0, l: DVector::zeros(m), soc_tag })
}

/// Placement of the `M` observer poles on the circle of radius `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolePattern {
    /// `p e^{±jθ_m}` with `θ_m = π (2m - M - 1) / (2M)`: distinct poles of
    /// modulus `p`, real when `M` is odd at `θ = 0`.
    Ring,
    /// `(z - p)^M`. Exact in coefficient space, but the computed
    /// eigenvalues of a defective matrix scatter by about `ε^{1/M}`.
    Repeated,
}

impl std::str::FromStr for PolePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Self::Ring),
            "repeated" => Ok(Self::Repeated),
            other => Err(Error::Contract(format!("unknown pole pattern `{other}`"))),
        }
    }
}

/// Target poles for an order-`m` observer.
pub fn target_poles(m: usize, radius: f64, pattern: PolePattern) -> Vec<Complex64> {
    (1..=m)
        .map(|k| match pattern {
            PolePattern::Repeated => Complex64::new(radius, 0.0),
            PolePattern::Ring => Complex64::from_polar(radius, PI * (2.0 * k as f64 - m as f64 - 1.0) / (2.0 * m as f64)),
        })
        .collect()
}

/// `[t_1 .. t_M]` of `Π (z - p_m) = z^M + t_1 z^{M-1} + .. + t_M`.
pub fn monic_coefficients(poles: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &p in poles {
        let mut next = c.clone();
        next.push(Complex64::new(0.0, 0.0));
        for (j, cj) in c.iter().enumerate() {
            next[j + 1] -= p * cj;
        }
        c = next;
    }
    c[1..].iter().map(|z| z.re).collect()
}

/// Sets `L` so that `A - L C` has the target characteristic polynomial. In
/// observer canonical coordinates this is `L_m = t_m - a_m`.
pub fn place_observer_gain(obs: &LocalObserver, radius: f64, pattern: PolePattern) -> Result<LocalObserver> {
    if !(0.0..1.0).contains(&radius) {
        return Err(Error::Contract(format!("pole radius must lie in [0, 1), got {radius}")));
    }
    let m = obs.order();
    // The first column carries -a; everything else must be the shift structure.
    for r in 0..m {
        for c in 1..m {
            let want = if r + 1 == c { 1.0 } else { 0.0 };
            if obs.a[(r, c)] != want {
                return Err(Error::Unobservable);
            }
        }
    }
    let t = monic_coefficients(&target_poles(m, radius, pattern));
    let l = DVector::from_fn(m, |r, _| t[r] + obs.a[(r, 0)]);
    Ok(LocalObserver { l, ..obs.clone() })
}

/// Signed innovations `ε_j[k]`, one row per observer, from zero initial
/// states.
pub fn run_observer_bank(observers: &[LocalObserver], obs: &Observations) -> Result<DMatrix<f64>> {
    let mut eps = DMatrix::zeros(observers.len(), obs.len());
    for (j, o) in observers.iter().enumerate() {
        let mut state = DVector::zeros(o.order());
        for k in 0..obs.len() {
            eps[(j, k)] = o.step(&mut state, obs.current[k], obs.voltage[k]);
            if !state.iter().all(|x| x.is_finite()) {
                return Err(Error::Numerical { step: k, msg: format!("observer {j} state is not finite") });
            }
        }
    }
    Ok(eps)
}

/// `[|ε_1[k]| .. |ε_1[k-ℓ]|, .., |ε_N[k]| .. |ε_N[k-ℓ]|]`
pub fn build_features(innovations: &DMatrix<f64>, ell: usize, k: usize) -> Result<Vec<f64>> {
    if k < ell {
        return Err(Error::InsufficientHistory { k, window: ell });
    }
    Ok(padded_features(innovations, ell, k))
}

/// As [`build_features`], with lags before the record start read as zero.
fn padded_features(innovations: &DMatrix<f64>, ell: usize, k: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(innovations.nrows() * (ell + 1));
    for j in 0..innovations.nrows() {
        f.extend((0..=ell).map(|q| if k >= q { innovations[(j, k - q)].abs() } else { 0.0 }));
    }
    f
}

fn predictor_input(features: &[f64], i: f64, v: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(features.len() + 2);
    x.extend_from_slice(features);
    x.push(i);
    x.push(v);
    x
}

/// Fits `h_θ` on `k = warmup .. N-1` with squared loss.
pub fn train_soc_predictor(
    d_tr: &TimeSeriesDataset,
    innovations: &DMatrix<f64>,
    ell: usize,
    warmup: usize,
    spec: &MlpSpec,
    train: &TrainSpec,
) -> Result<(Mlp, TrainLog)> {
    let soc = d_tr
        .reference_soc()
        .ok_or_else(|| Error::Contract("predictor training needs the reference soc column".into()))?;
    if innovations.ncols() != d_tr.len() {
        return Err(Error::Dimension { expected: d_tr.len(), got: innovations.ncols() });
    }
    let want = innovations.nrows() * (ell + 1) + 2;
    if spec.layer_sizes[0] != want {
        return Err(Error::Dimension { expected: want, got: spec.layer_sizes[0] });
    }
    let (i, v) = (d_tr.currents(), d_tr.voltages());
    let start = warmup.max(ell);
    let inputs: Vec<Vec<f64>> = (start..d_tr.len())
        .map(|k| predictor_input(&padded_features(innovations, ell, k), i[k], v[k]))
        .collect();
    let targets: Vec<Vec<f64>> = (start..d_tr.len()).map(|k| vec![soc[k]]).collect();
    let train = TrainSpec { loss: Loss::Squared, ..*train };
    crate::neural::mlp_train(spec, &train, &inputs, &targets)
}

/// One virtual-sensor reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsOutput {
    /// Estimate clamped to [`REPORT_RANGE`].
    pub soc: f64,
    pub raw: f64,
    pub clamped: bool,
}

impl VsOutput {
    fn from_raw(raw: f64) -> Self {
        let soc = raw.clamp(REPORT_RANGE.0, REPORT_RANGE.1);
        Self { soc, raw, clamped: soc != raw }
    }
}

/// Trained observer bank and predictor, plus streaming state.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSensor {
    pub observers: Vec<LocalObserver>,
    pub ell: usize,
    /// ARX order before any reduction.
    pub m: usize,
    pub predictor: Mlp,
    pub mlpv: Option<Mlp>,
    states: Vec<DVector<f64>>,
    window: Vec<f64>,
    input: DVector<f64>,
}

impl VirtualSensor {
    pub fn new(observers: Vec<LocalObserver>, ell: usize, m: usize, predictor: Mlp, mlpv: Option<Mlp>) -> Result<Self> {
        if observers.is_empty() {
            return Err(Error::Contract("virtual sensor needs at least one observer".into()));
        }
        predictor.validate()?;
        let want = observers.len() * (ell + 1) + 2;
        if predictor.input_dim() != want || predictor.output_dim() != 1 {
            return Err(Error::Dimension { expected: want, got: predictor.input_dim() });
        }
        let mut vs = Self {
            observers,
            ell,
            m,
            predictor,
            mlpv,
            states: vec![],
            window: vec![],
            input: DVector::zeros(want),
        };
        vs.reset();
        Ok(vs)
    }

    pub fn n_theta(&self) -> usize {
        self.observers.len()
    }

    /// Steps before the feature window holds only real innovations.
    pub fn warmup(&self) -> usize {
        self.m.max(self.ell)
    }

    /// Zero observer states and an all-zero feature window.
    pub fn reset(&mut self) {
        self.states = self.observers.iter().map(|o| DVector::zeros(o.order())).collect();
        self.window = vec![0.0; self.observers.len() * (self.ell + 1)];
    }

    fn predict(&mut self, i: f64, v: f64) -> f64 {
        let n = self.window.len();
        self.input.as_mut_slice()[..n].copy_from_slice(&self.window);
        self.input[n] = i;
        self.input[n + 1] = v;
        let x = DMatrix::from_column_slice(n + 2, 1, self.input.as_slice());
        self.predictor.forward_batch(&x).expect("dimensions checked at construction")[0]
    }

    /// Advances every observer on `(i, v)` and returns the SOC estimate.
    pub fn step(&mut self, i: f64, v: f64) -> VsOutput {
        let w = self.ell + 1;
        for (j, o) in self.observers.iter().enumerate() {
            let eps = o.step(&mut self.states[j], i, v);
            let slot = &mut self.window[j * w..(j + 1) * w];
            slot.copy_within(0..w - 1, 1);
            slot[0] = eps.abs();
        }
        VsOutput::from_raw(self.predict(i, v))
    }

    /// Estimates for a whole record from a fresh state, computed through
    /// the batch innovation matrix.
    pub fn predict_batch(&self, obs: &Observations) -> Result<Vec<VsOutput>> {
        let eps = run_observer_bank(&self.observers, obs)?;
        let mut scratch = self.clone();
        Ok((0..obs.len())
            .map(|k| {
                scratch.window = padded_features(&eps, self.ell, k);
                VsOutput::from_raw(scratch.predict(obs.current[k], obs.voltage[k]))
            })
            .collect())
    }

    /// Streams [`Self::step`] over a record from a fresh state.
    pub fn run(&self, obs: &Observations) -> Vec<VsOutput> {
        let mut s = self.clone();
        s.reset();
        obs.current.iter().zip(&obs.voltage).map(|(&i, &v)| s.step(i, v)).collect()
    }
}

/// Hyperparameters of the whole training procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct VsConfig {
    pub m: usize,
    pub n_theta: usize,
    pub ell: usize,
    pub pole_radius: f64,
    pub pole_pattern: PolePattern,
    pub mlpv_hidden: Vec<usize>,
    pub mlpv_train: TrainSpec,
    pub predictor_hidden: Vec<usize>,
    pub predictor_train: TrainSpec,
    /// Zero the affine ARX term after training.
    pub drop_affine: bool,
    pub max_cluster_points: usize,
    pub seed: u64,
}

impl Default for VsConfig {
    fn default() -> Self {
        Self {
            m: 4,
            n_theta: 4,
            ell: 5,
            pole_radius: 0.65,
            pole_pattern: PolePattern::Ring,
            mlpv_hidden: vec![50, 50],
            mlpv_train: TrainSpec { loss: Loss::Absolute, ..TrainSpec::default() },
            predictor_hidden: vec![30, 30],
            predictor_train: TrainSpec::default(),
            drop_affine: false,
            max_cluster_points: 2000,
            seed: 0,
        }
    }
}

/// Diagnostics from [`train_virtual_sensor`].
#[derive(Debug, Clone)]
pub struct VsTraining {
    pub mlpv_log: TrainLog,
    pub predictor_log: TrainLog,
    pub representatives: Vec<Representative>,
}

/// Runs the three training stages on `d_tr`. The observer innovations used
/// to train the predictor are recomputed with the selected observers.
pub fn train_virtual_sensor(d_tr: &TimeSeriesDataset, cfg: &VsConfig) -> Result<(VirtualSensor, VsTraining)> {
    let mlpv_train = TrainSpec { seed: cfg.seed, ..cfg.mlpv_train };
    let fit = train_mlpv(d_tr, cfg.m, &cfg.mlpv_hidden, &mlpv_train, cfg.seed)?;
    let mut reps = select_representatives(&fit.gamma_trace, &fit.soc_trace, cfg.n_theta, cfg.max_cluster_points, cfg.seed)?;
    if cfg.drop_affine {
        for r in &mut reps {
            let n = r.gamma.gamma.len();
            r.gamma.gamma[n - 1] = 0.0;
        }
    }
    let observers = reps
        .iter()
        .map(|r| place_observer_gain(&arx_to_ss(&r.gamma, r.soc_tag)?, cfg.pole_radius, cfg.pole_pattern))
        .collect::<Result<Vec<_>>>()?;
    let eps = run_observer_bank(&observers, &d_tr.observations())?;
    let spec = MlpSpec::new(observers.len() * (cfg.ell + 1) + 2, &cfg.predictor_hidden, 1, cfg.seed.wrapping_add(1));
    let predictor_train = TrainSpec { seed: cfg.seed.wrapping_add(1), ..cfg.predictor_train };
    let (predictor, predictor_log) =
        train_soc_predictor(d_tr, &eps, cfg.ell, cfg.m.max(cfg.ell), &spec, &predictor_train)?;
    let vs = VirtualSensor::new(observers, cfg.ell, cfg.m, predictor, Some(fit.net))?;
    Ok((vs, VsTraining { mlpv_log: fit.log, predictor_log, representatives: reps }))
}

fn write_vec(out: &mut String, name: &str, v: impl IntoIterator<Item = f64>) {
    out.push_str(name);
    for x in v {
        let _ = write!(out, " {x:e}");
    }
    out.push('\n');
}

impl VirtualSensor {
    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_TAG} {FORMAT_VERSION}\n");
        let _ = writeln!(out, "order {}", self.m);
        let _ = writeln!(out, "window {}", self.ell);
        let _ = writeln!(out, "observers {}", self.observers.len());
        for o in &self.observers {
            let _ = writeln!(out, "observer {}", o.order());
            write_vec(&mut out, "soc_tag", [o.soc_tag]);
            write_vec(&mut out, "a", o.a.transpose().iter().copied());
            write_vec(&mut out, "b", o.b.iter().copied());
            write_vec(&mut out, "d", o.d.iter().copied());
            write_vec(&mut out, "e", [o.e]);
            write_vec(&mut out, "l", o.l.iter().copied());
        }
        let p = self.predictor.to_text();
        let _ = writeln!(out, "predictor {}", p.lines().count());
        out.push_str(&p);
        if let Some(n) = &self.mlpv {
            let t = n.to_text();
            let _ = writeln!(out, "mlpv {}", t.lines().count());
            out.push_str(&t);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Artifact(format!("virtual sensor: {msg}"));
        let lines: Vec<&str> = text.lines().collect();
        let mut pos = 0;
        let mut next = |name: &str| -> Result<Vec<String>> {
            let line = lines.get(pos).ok_or_else(|| bad(format!("missing `{name}`")))?;
            pos += 1;
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or_default();
            if head != name {
                return Err(bad(format!("expected `{name}`, found `{head}`")));
            }
            Ok(parts.map(str::to_owned).collect())
        };
        let one_usize = |v: Vec<String>, name: &str| -> Result<usize> {
            match v.as_slice() {
                [s] => s.parse().map_err(|_| bad(format!("bad `{name}` value `{s}`"))),
                _ => Err(bad(format!("`{name}` takes one value"))),
            }
        };
        let floats = |v: Vec<String>, len: usize, name: &str| -> Result<Vec<f64>> {
            if v.len() != len {
                return Err(bad(format!("`{name}` has {} values, expected {len}", v.len())));
            }
            v.iter().map(|s| s.parse().map_err(|_| bad(format!("bad float `{s}`")))).collect()
        };
        let version = next(FORMAT_TAG)?;
        if version != [FORMAT_VERSION.to_string()] {
            return Err(bad(format!("unsupported version {version:?}")));
        }
        let m = one_usize(next("order")?, "order")?;
        let ell = one_usize(next("window")?, "window")?;
        let n_obs = one_usize(next("observers")?, "observers")?;
        let mut observers = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let k = one_usize(next("observer")?, "observer")?;
            if k == 0 {
                return Err(bad("observer order must be >= 1".into()));
            }
            let soc_tag = floats(next("soc_tag")?, 1, "soc_tag")?[0];
            let a = DMatrix::from_row_slice(k, k, &floats(next("a")?, k * k, "a")?);
            let b = DVector::from_vec(floats(next("b")?, k, "b")?);
            let d = DVector::from_vec(floats(next("d")?, k, "d")?);
            let e = floats(next("e")?, 1, "e")?[0];
            let l = DVector::from_vec(floats(next("l")?, k, "l")?);
            observers.push(LocalObserver { a, b, d, e, l, soc_tag });
        }
        let n_pred = one_usize(next("predictor")?, "predictor")?;
        let take = |pos: &mut usize, n: usize| -> Result<String> {
            if *pos + n > lines.len() {
                return Err(bad("truncated network block".into()));
            }
            let block = lines[*pos..*pos + n].join("\n");
            *pos += n;
            Ok(block)
        };
        let predictor = Mlp::from_text(&take(&mut pos, n_pred)?)?;
        let mlpv = match lines.get(pos) {
            Some(line) if line.starts_with("mlpv ") => {
                pos += 1;
                let n: usize = line[5..].trim().parse().map_err(|_| bad("bad `mlpv` count".into()))?;
                Some(Mlp::from_text(&take(&mut pos, n)?)?)
            }
            _ => None,
        };
        Self::new(observers, ell, m, predictor, mlpv)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Packs predictor inputs for a whole record; used by tests and tooling.
pub fn feature_matrix(innovations: &DMatrix<f64>, obs: &Observations, ell: usize) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = (0..obs.len())
        .map(|k| predictor_input(&padded_features(innovations, ell, k), obs.current[k], obs.voltage[k]))
        .collect();
    columns(&rows, innovations.nrows() * (ell + 1) + 2)
}
