//! Predictor-corrector extended Kalman filter on the Thevenin model, with
//! state `x = [SOC, i_R1]`.
//!
//! In baseline mode the only measurement is the terminal voltage. In fusion
//! mode the virtual sensor's SOC estimate is appended as a second, direct
//! measurement of the first state.
//!
//! Parameter curves are only trusted on [0, 1]. Outside it the OCV is
//! extended linearly from the nearest end and the resistances and time
//! constant are held at their end values. The state itself is never
//! clamped.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};

use crate::datamodel::{Observations, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::poly::{polyder, polyval};
use crate::simulate::{soc_step, CellParams};
use crate::virtual_sensor::{VirtualSensor, REPORT_RANGE};

/// Standard deviations of the process and measurement noises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfNoise {
    pub sigma_soc: f64,
    pub sigma_ir: f64,
    pub sigma_v: f64,
    pub sigma_soc_y: f64,
}

impl EkfNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_soc, self.sigma_ir, self.sigma_v, self.sigma_soc_y];
        if all.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Contract(format!("noise standard deviations must be > 0, got {all:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sigma_soc, self.sigma_ir, self.sigma_v, self.sigma_soc_y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { sigma_soc: a[0], sigma_ir: a[1], sigma_v: a[2], sigma_soc_y: a[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    Baseline,
    Fusion,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "fusion" => Ok(Self::Fusion),
            other => Err(Error::Contract(format!("unknown filter mode `{other}`"))),
        }
    }
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub x: Vector2<f64>,
    pub sigma: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfConfig {
    pub mode: FilterMode,
    pub noise: EkfNoise,
    pub params: CellParams,
    pub x0: [f64; 2],
    /// Diagonal of the initial covariance.
    pub sigma0: [f64; 2],
    /// Include `∂α/∂SOC` in the state Jacobian.
    pub cross_term: bool,
}

impl EkfConfig {
    pub fn new(mode: FilterMode, noise: EkfNoise, params: CellParams) -> Self {
        Self { mode, noise, params, x0: [0.0, 0.0], sigma0: [0.5, 0.001], cross_term: false }
    }

    pub fn initial_state(&self) -> EkfState {
        EkfState {
            x: Vector2::new(self.x0[0], self.x0[1]),
            sigma: Matrix2::new(self.sigma0[0], 0.0, 0.0, self.sigma0[1]),
        }
    }
}

/// Parameter curves and their derivatives, with the out-of-range rules
/// described in the module docs.
#[derive(Debug, Clone)]
pub struct Linearization {
    params: CellParams,
    d_ocv: Vec<f64>,
    d_tau1: Vec<f64>,
}

impl Linearization {
    pub fn new(params: &CellParams) -> Self {
        Self { params: params.clone(), d_ocv: polyder(&params.theta_ocv), d_tau1: polyder(&params.theta_tau1) }
    }

    pub fn ocv(&self, soc: f64) -> f64 {
        let b = soc.clamp(0.0, 1.0);
        self.params.ocv(b) + polyval(&self.d_ocv, b) * (soc - b)
    }

    pub fn ocv_prime(&self, soc: f64) -> f64 {
        polyval(&self.d_ocv, soc.clamp(0.0, 1.0))
    }

    pub fn r0(&self, soc: f64) -> f64 {
        self.params.r0(soc.clamp(0.0, 1.0))
    }

    pub fn r1(&self, soc: f64) -> f64 {
        self.params.r1(soc.clamp(0.0, 1.0))
    }

    pub fn tau1(&self, soc: f64) -> f64 {
        self.params.tau1(soc.clamp(0.0, 1.0))
    }

    fn inside(soc: f64) -> f64 {
        if (0.0..=1.0).contains(&soc) {
            1.0
        } else {
            0.0
        }
    }

    pub fn r0_prime(&self, soc: f64) -> f64 {
        Self::inside(soc) * exp_curve_prime(&self.params.theta_r0, soc)
    }

    pub fn r1_prime(&self, soc: f64) -> f64 {
        Self::inside(soc) * exp_curve_prime(&self.params.theta_r1, soc)
    }

    pub fn tau1_prime(&self, soc: f64) -> f64 {
        Self::inside(soc) * polyval(&self.d_tau1, soc)
    }

    pub fn voltage(&self, x: &Vector2<f64>, i: f64) -> f64 {
        self.ocv(x[0]) - self.r1(x[0]) * x[1] - self.r0(x[0]) * i
    }

    /// `[∂v/∂SOC, ∂v/∂i_R1]`
    pub fn voltage_row(&self, x: &Vector2<f64>, i: f64) -> [f64; 2] {
        let s = x[0];
        [self.ocv_prime(s) - self.r1_prime(s) * x[1] - self.r0_prime(s) * i, -self.r1(s)]
    }
}

/// `d/ds (θ1 e^{-θ2 s} + θ3)`
pub fn exp_curve_prime(theta: &[f64; 3], soc: f64) -> f64 {
    -theta[0] * theta[1] * (-theta[1] * soc).exp()
}

pub fn ocv_prime(p: &CellParams, soc: f64) -> f64 {
    polyval(&polyder(&p.theta_ocv), soc)
}

pub fn r0_prime(p: &CellParams, soc: f64) -> f64 {
    exp_curve_prime(&p.theta_r0, soc)
}

pub fn r1_prime(p: &CellParams, soc: f64) -> f64 {
    exp_curve_prime(&p.theta_r1, soc)
}

/// Result of one filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Voltage predicted from the prior state.
    pub v_hat: f64,
    /// Corrected SOC estimate.
    pub soc_hat: f64,
    /// `v - v̂`.
    pub innov_v: f64,
    /// `SOC_y - SOC⁻`, when a SOC measurement was used.
    pub innov_soc: Option<f64>,
    /// Norm of the voltage column of the gain.
    pub gain_v_norm: f64,
    /// Corrected SOC left the report range.
    pub out_of_range: bool,
}

fn joseph<const P: usize>(
    sigma: &Matrix2<f64>,
    h: &SMatrix<f64, P, 2>,
    r: &SMatrix<f64, P, P>,
    step: usize,
) -> Result<(SMatrix<f64, 2, P>, Matrix2<f64>)> {
    let s = h * sigma * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or_else(|| Error::Numerical {
        step,
        msg: format!("singular innovation covariance (Frobenius norm {:e})", s.norm()),
    })?;
    let k = sigma * h.transpose() * s_inv;
    let ikh = Matrix2::identity() - k * h;
    let post = ikh * sigma * ikh.transpose() + k * r * k.transpose();
    Ok((k, 0.5 * (post + post.transpose())))
}

/// Signals consumed by one filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    /// Current over the elapsed interval; drives the time update.
    pub i_prev: f64,
    pub i_now: f64,
    pub v: f64,
    /// SOC pseudo-measurement; `None` runs a voltage-only update.
    pub soc_y: Option<f64>,
}

/// Time update driven by `i_prev`, then measurement update with `v` (and
/// `soc_y` when given) at `i_now`. `step` only labels errors.
pub fn ekf_step(
    state: &EkfState,
    cfg: &EkfConfig,
    lin: &Linearization,
    tau_s: f64,
    input: StepInput,
    step: usize,
) -> Result<(EkfState, StepOutput)> {
    let StepInput { i_prev, i_now, v, soc_y } = input;
    let p = &cfg.params;
    let s = state.x[0];
    let tau1 = lin.tau1(s);
    let alpha = (-tau_s / tau1).exp();
    let x_prior = Vector2::new(soc_step(s, i_prev, p.q_total, p.eta_c, tau_s), alpha * state.x[1] + (1.0 - alpha) * i_prev);
    let f10 = if cfg.cross_term {
        (state.x[1] - i_prev) * alpha * tau_s / (tau1 * tau1) * lin.tau1_prime(s)
    } else {
        0.0
    };
    let f = Matrix2::new(1.0, 0.0, f10, alpha);
    let n = &cfg.noise;
    let q = Matrix2::new(n.sigma_soc * n.sigma_soc, 0.0, 0.0, n.sigma_ir * n.sigma_ir);
    let sigma_prior = f * state.sigma * f.transpose() + q;

    let v_hat = lin.voltage(&x_prior, i_now);
    let hv = lin.voltage_row(&x_prior, i_now);
    let innov_v = v - v_hat;
    let (x, sigma, gain_v_norm, innov_soc) = match soc_y {
        None => {
            let h = SMatrix::<f64, 1, 2>::new(hv[0], hv[1]);
            let r = SMatrix::<f64, 1, 1>::new(n.sigma_v * n.sigma_v);
            let (k, sigma) = joseph(&sigma_prior, &h, &r, step)?;
            (x_prior + k * innov_v, sigma, k.norm(), None)
        }
        Some(y) => {
            let h = SMatrix::<f64, 2, 2>::new(hv[0], hv[1], 1.0, 0.0);
            let r = SMatrix::<f64, 2, 2>::new(n.sigma_v * n.sigma_v, 0.0, 0.0, n.sigma_soc_y * n.sigma_soc_y);
            let (k, sigma) = joseph(&sigma_prior, &h, &r, step)?;
            let innov_soc = y - x_prior[0];
            let e = SVector::<f64, 2>::new(innov_v, innov_soc);
            (x_prior + k * e, sigma, k.column(0).norm(), Some(innov_soc))
        }
    };
    if !(x.iter().all(|v| v.is_finite()) && sigma.iter().all(|v| v.is_finite())) {
        return Err(Error::Numerical { step, msg: "non-finite filter state".into() });
    }
    let soc_hat = x[0];
    let out_of_range = !(REPORT_RANGE.0..=REPORT_RANGE.1).contains(&soc_hat);
    Ok((
        EkfState { x, sigma },
        StepOutput { v_hat, soc_hat, innov_v, innov_soc, gain_v_norm, out_of_range },
    ))
}

/// Per-step traces of a filter run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EkfTrace {
    pub soc_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub innov_v: Vec<f64>,
    pub innov_soc: Vec<Option<f64>>,
    pub gain_v_norm: Vec<f64>,
    /// Steps whose SOC estimate left the report range.
    pub out_of_range: usize,
}

impl EkfTrace {
    fn with_capacity(n: usize) -> Self {
        Self {
            soc_hat: Vec::with_capacity(n),
            v_hat: Vec::with_capacity(n),
            innov_v: Vec::with_capacity(n),
            innov_soc: Vec::with_capacity(n),
            gain_v_norm: Vec::with_capacity(n),
            out_of_range: 0,
        }
    }

    fn push(&mut self, o: StepOutput) {
        self.soc_hat.push(o.soc_hat);
        self.v_hat.push(o.v_hat);
        self.innov_v.push(o.innov_v);
        self.innov_soc.push(o.innov_soc);
        self.gain_v_norm.push(o.gain_v_norm);
        self.out_of_range += usize::from(o.out_of_range);
    }
}

/// Streams the filter over a record. `pseudo(k, i, v)` supplies the SOC
/// measurement for step `k`, or `None` to run a voltage-only update. Step
/// 0 reports the initial state without a correction. When `times` is
/// given it receives the wall time of each step, pseudo-measurement
/// included.
pub fn run_filter(
    cfg: &EkfConfig,
    obs: &Observations,
    mut pseudo: impl FnMut(usize, f64, f64) -> Option<f64>,
    mut times: Option<&mut Vec<f64>>,
) -> Result<EkfTrace> {
    cfg.noise.validate()?;
    let lin = Linearization::new(&cfg.params);
    let n = obs.len();
    let mut trace = EkfTrace::with_capacity(n);
    let mut state = cfg.initial_state();
    for k in 0..n {
        let start = times.is_some().then(Instant::now);
        let (i, v) = (obs.current[k], obs.voltage[k]);
        let y = pseudo(k, i, v);
        if k == 0 {
            let v_hat = lin.voltage(&state.x, i);
            trace.push(StepOutput {
                v_hat,
                soc_hat: state.x[0],
                innov_v: v - v_hat,
                innov_soc: None,
                gain_v_norm: 0.0,
                out_of_range: !(REPORT_RANGE.0..=REPORT_RANGE.1).contains(&state.x[0]),
            });
        } else {
            let (next, out) = ekf_step(&state, cfg, &lin, obs.tau_s, StepInput { i_prev: obs.current[k - 1], i_now: i, v, soc_y: y }, k)?;
            state = next;
            trace.push(out);
        }
        if let (Some(t), Some(s)) = (times.as_deref_mut(), start) {
            t.push(s.elapsed().as_secs_f64());
        }
    }
    Ok(trace)
}

/// Runs the configured filter. Fusion streams the virtual sensor alongside
/// and holds to voltage-only updates until its feature window is full.
pub fn run_ekf(cfg: &EkfConfig, obs: &Observations, vs: Option<&VirtualSensor>) -> Result<EkfTrace> {
    run_ekf_timed(cfg, obs, vs, None)
}

pub fn run_ekf_timed(
    cfg: &EkfConfig,
    obs: &Observations,
    vs: Option<&VirtualSensor>,
    times: Option<&mut Vec<f64>>,
) -> Result<EkfTrace> {
    match (cfg.mode, vs) {
        (FilterMode::Baseline, _) => run_filter(cfg, obs, |_, _, _| None, times),
        (FilterMode::Fusion, None) => Err(Error::Contract("fusion mode needs a virtual sensor".into())),
        (FilterMode::Fusion, Some(vs)) => {
            let mut sensor = vs.clone();
            sensor.reset();
            let warmup = sensor.warmup();
            run_filter(
                cfg,
                obs,
                |k, i, v| {
                    let out = sensor.step(i, v);
                    (k >= warmup).then_some(out.soc)
                },
                times,
            )
        }
    }
}

/// Fusion with virtual-sensor readings computed beforehand; identical to
/// streaming the sensor.
pub fn run_fusion_precomputed(cfg: &EkfConfig, obs: &Observations, soc_y: &[f64], warmup: usize) -> Result<EkfTrace> {
    if soc_y.len() != obs.len() {
        return Err(Error::Dimension { expected: obs.len(), got: soc_y.len() });
    }
    run_filter(cfg, obs, |k, _, _| (k >= warmup).then_some(soc_y[k]), None)
}

pub const TRACE_HEADER: &str = "k,soc_true,soc_hat,v,v_hat,innov_v,innov_soc";

/// Writes an estimate trace aligned with `data`. Estimators without a
/// voltage prediction pass `None` for the voltage columns.
pub fn write_trace(
    path: &Path,
    data: &TimeSeriesDataset,
    soc_hat: &[f64],
    v_hat: Option<&[f64]>,
    innov_v: Option<&[f64]>,
    innov_soc: Option<&[Option<f64>]>,
) -> Result<()> {
    if soc_hat.len() != data.len() {
        return Err(Error::Dimension { expected: data.len(), got: soc_hat.len() });
    }
    let mut out = String::with_capacity(64 * data.len());
    out.push_str(TRACE_HEADER);
    out.push('\n');
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (k, s) in data.samples().iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.k,
            opt(s.soc),
            soc_hat[k],
            s.v,
            opt(v_hat.map(|x| x[k])),
            opt(innov_v.map(|x| x[k])),
            opt(innov_soc.and_then(|x| x[k])),
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_profile, simulate_ecm, CurrentLimits, NoiseSpec, ProfileKind};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise() -> EkfNoise {
        EkfNoise { sigma_soc: 1e-5, sigma_ir: 1e-3, sigma_v: 1e-3, sigma_soc_y: 0.02 }
    }

    fn sim(soc0: f64, n: usize) -> TimeSeriesDataset {
        let p = CellParams::default();
        let profile = gen_profile(ProfileKind::PulseUrban, n, CurrentLimits::default(), 3);
        simulate_ecm(&p, &profile, soc0, 0.0, &NoiseSpec::none()).unwrap().data
    }

    #[test]
    fn derivatives_match_central_differences() {
        let p = CellParams::default();
        let h = 1e-6;
        for n in 1..100 {
            let s = n as f64 / 100.0;
            let fd = |f: &dyn Fn(f64) -> f64| (f(s + h) - f(s - h)) / (2.0 * h);
            let pairs = [
                (ocv_prime(&p, s), fd(&|x| p.ocv(x))),
                (r0_prime(&p, s), fd(&|x| p.r0(x))),
                (r1_prime(&p, s), fd(&|x| p.r1(x))),
            ];
            for (a, b) in pairs {
                assert!((a - b).abs() <= 1e-7 * a.abs().max(b.abs()), "{a} vs {b} at {s}");
            }
        }
        assert_eq!(polyder(&[3.0]), vec![0.0]);
        assert_eq!(polyder(&p.theta_ocv).len(), 8);
    }

    #[test]
    fn exact_model_from_truth_has_zero_innovation() {
        let d = sim(0.8, 2000);
        let mut cfg = EkfConfig::new(FilterMode::Baseline, noise(), CellParams::default());
        cfg.x0 = [0.8, 0.0];
        let trace = run_ekf(&cfg, &d.observations(), None).unwrap();
        let soc = d.reference_soc().unwrap();
        assert!(trace.innov_v.iter().all(|e| *e == 0.0));
        assert_eq!(trace.soc_hat, soc);
    }

    #[test]
    fn baseline_converges_from_empty() {
        let d = sim(0.9, 2000);
        let cfg = EkfConfig::new(FilterMode::Baseline, noise(), CellParams::default());
        let trace = run_ekf(&cfg, &d.observations(), None).unwrap();
        let soc = d.reference_soc().unwrap();
        let worst = (600..d.len()).map(|k| (trace.soc_hat[k] - soc[k]).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.01, "{worst}");
    }

    #[test]
    fn fusion_with_huge_soc_noise_matches_baseline() {
        let d = sim(0.7, 1500);
        let obs = d.observations();
        let mut n = noise();
        n.sigma_soc_y = 1e6;
        let base = run_ekf(&EkfConfig::new(FilterMode::Baseline, n, CellParams::default()), &obs, None).unwrap();
        let fake: Vec<f64> = (0..d.len()).map(|k| 0.3 + 0.1 * (k as f64).sin()).collect();
        let fused =
            run_fusion_precomputed(&EkfConfig::new(FilterMode::Fusion, n, CellParams::default()), &obs, &fake, 0).unwrap();
        let worst = base.soc_hat.iter().zip(&fused.soc_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
    }

    #[test]
    fn smooth_when_every_noise_is_tiny() {
        let d = sim(0.6, 3000);
        let tiny = EkfNoise { sigma_soc: 1e-6, sigma_ir: 1e-6, sigma_v: 1e-6, sigma_soc_y: 1e-6 };
        let mut cfg = EkfConfig::new(FilterMode::Baseline, tiny, CellParams::default());
        cfg.x0 = [0.6, 0.0];
        let trace = run_ekf(&cfg, &d.observations(), None).unwrap();
        let tv = crate::datamodel::total_variation(&trace.soc_hat).unwrap();
        let tv_true = crate::datamodel::total_variation(&d.reference_soc().unwrap()).unwrap();
        assert!(tv <= tv_true + 1e-6);
    }

    #[test]
    fn fusion_needs_a_sensor() {
        let d = sim(0.7, 10);
        let cfg = EkfConfig::new(FilterMode::Fusion, noise(), CellParams::default());
        assert!(run_ekf(&cfg, &d.observations(), None).is_err());
        let bad = EkfNoise { sigma_v: 0.0, ..noise() };
        assert!(run_ekf(&EkfConfig::new(FilterMode::Baseline, bad, CellParams::default()), &d.observations(), None).is_err());
    }

    fn min_eig(m: &Matrix2<f64>) -> f64 {
        m.symmetric_eigenvalues().min()
    }

    #[test]
    fn covariance_stays_psd_over_random_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = CellParams::default();
        let lin = Linearization::new(&p);
        for trial in 0..10 {
            let fusion = trial % 2 == 1;
            let n = EkfNoise {
                sigma_soc: 10f64.powf(rng.random_range(-6.0..0.0)),
                sigma_ir: 10f64.powf(rng.random_range(-6.0..0.0)),
                sigma_v: 10f64.powf(rng.random_range(-6.0..0.0)),
                sigma_soc_y: 10f64.powf(rng.random_range(-6.0..0.0)),
            };
            let cfg = EkfConfig::new(if fusion { FilterMode::Fusion } else { FilterMode::Baseline }, n, p.clone());
            let mut st = cfg.initial_state();
            for k in 0..10_000 {
                let i_prev = rng.random_range(-5.0..10.0);
                let i_now = rng.random_range(-5.0..10.0);
                let v = rng.random_range(2.5..4.2);
                let y = fusion.then(|| rng.random_range(0.0..1.0));
                st = ekf_step(&st, &cfg, &lin, 1.0, StepInput { i_prev, i_now, v, soc_y: y }, k).unwrap().0;
                assert_eq!(st.sigma, st.sigma.transpose());
                assert!(min_eig(&st.sigma) >= -1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig {
            cases: 200,
            rng_seed: proptest::test_runner::RngSeed::Fixed(0x6ef),
            ..ProptestConfig::default()
        })]

        #[test]
        fn joseph_update_keeps_psd(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0,
                                   h0 in -5.0f64..5.0, h1 in -5.0f64..5.0, r in 1e-6f64..1.0,
                                   k0 in -10.0f64..10.0, k1 in -10.0f64..10.0) {
            let l = Matrix2::new(a, 0.0, b, c);
            let sigma = l * l.transpose();
            let h = SMatrix::<f64, 1, 2>::new(h0, h1);
            let k = SMatrix::<f64, 2, 1>::new(k0, k1);
            let ikh = Matrix2::identity() - k * h;
            let post = ikh * sigma * ikh.transpose() + k * k.transpose() * r;
            let post = 0.5 * (post + post.transpose());
            prop_assert!(min_eig(&post) >= -1e-12 * (1.0 + post.norm()));
        }

        #[test]
        fn larger_voltage_noise_never_raises_the_voltage_gain(
            soc in 0.05f64..0.95, ir in -2.0f64..2.0, i in -5.0f64..10.0,
            sv in 1e-5f64..0.1, factor in 1.0f64..100.0, fusion in any::<bool>()) {
            let p = CellParams::default();
            let lin = Linearization::new(&p);
            let st = EkfState { x: Vector2::new(soc, ir), sigma: Matrix2::new(0.01, 0.001, 0.001, 0.002) };
            let gain = |sigma_v: f64| {
                let n = EkfNoise { sigma_v, ..noise() };
                let cfg = EkfConfig::new(FilterMode::Baseline, n, p.clone());
                let y = fusion.then_some(0.5);
                ekf_step(&st, &cfg, &lin, 1.0, StepInput { i_prev: i, i_now: i, v: 3.7, soc_y: y }, 1).unwrap().1.gain_v_norm
            };
            prop_assert!(gain(sv * factor) <= gain(sv) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn trace_csv_shape() {
        let d = sim(0.7, 20);
        let cfg = EkfConfig::new(FilterMode::Baseline, noise(), CellParams::default());
        let t = run_ekf(&cfg, &d.observations(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&path, &d, &t.soc_hat, Some(&t.v_hat), Some(&t.innov_v), Some(&t.innov_soc)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines.len(), d.len() + 1);
        assert!(lines[1].ends_with(','));
    }
}
