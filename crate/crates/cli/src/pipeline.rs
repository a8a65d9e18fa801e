//! The pipeline stages. Each reads its inputs from and writes its outputs
//! to a fixed layout under the output directory, so stages can be re-run
//! one at a time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use socfusion::calibrate::{calibrate_filter, write_calibration_log, CalibrationData};
use socfusion::datamodel::{
    read_geis, read_timeseries, rmse, total_variation, write_geis, write_timeseries, TimeSeriesDataset,
};
use socfusion::ekf::{run_ekf_timed, write_trace, EkfConfig, EkfNoise, FilterMode};
use socfusion::identify::{identify_cell, write_fit_table};
use socfusion::simulate::{
    default_geis_frequencies, gen_profile, simulate_ecm, simulate_geis, simulate_lc_ocv, CellParams, NoiseSpec,
};
use socfusion::virtual_sensor::{train_virtual_sensor, VirtualSensor};

use crate::config::PipelineConfig;
use crate::error::CliError;

// Offsets of the per-stage seeds from the global seed.
const SEED_LC: u64 = 1;
const SEED_GEIS: u64 = 2;
const SEED_TRAIN: u64 = 100;
const SEED_TEST: u64 = 200;
const SEED_VS: u64 = 300;
const SEED_CALIBRATION: u64 = 400;

/// Where every stage puts its files.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.root.join("artifacts").join(name)
    }

    fn result(&self, name: &str) -> PathBuf {
        self.root.join("results").join(name)
    }

    pub fn lc_ocv(&self) -> PathBuf {
        self.data("lc_ocv.csv")
    }
    pub fn geis(&self) -> PathBuf {
        self.data("geis.csv")
    }
    pub fn train(&self) -> PathBuf {
        self.data("train.csv")
    }
    pub fn test(&self) -> PathBuf {
        self.data("test.csv")
    }
    pub fn seams(&self) -> PathBuf {
        self.data("seams.csv")
    }
    pub fn truth_params(&self) -> PathBuf {
        self.data("truth_params.toml")
    }
    pub fn identified_params(&self) -> PathBuf {
        self.artifact("identified_params.toml")
    }
    pub fn fit_table(&self) -> PathBuf {
        self.artifact("equilibrium_fits.csv")
    }
    pub fn vs_bundle(&self) -> PathBuf {
        self.artifact("virtual_sensor.txt")
    }
    pub fn vs_training(&self) -> PathBuf {
        self.artifact("vs_training.csv")
    }
    pub fn representatives(&self) -> PathBuf {
        self.artifact("representatives.csv")
    }
    pub fn noise(&self, mode: FilterMode) -> PathBuf {
        self.artifact(&format!("noise_{}.toml", mode.name()))
    }
    pub fn calibration_log(&self, mode: FilterMode) -> PathBuf {
        self.result(&format!("calibration_{}.csv", mode.name()))
    }
    pub fn evaluation(&self) -> PathBuf {
        self.result("evaluation.csv")
    }
    pub fn trace(&self, method: Method) -> PathBuf {
        self.result(&format!("trace_{}.csv", method.name()))
    }
    pub fn report(&self) -> PathBuf {
        self.result("report.md")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    let dir = path.parent().expect("layout paths have a parent");
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn require<'a>(path: &'a Path, stage: &'static str) -> Result<&'a Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { stage, path: path.to_owned() })
    }
}

/// Where one simulated segment landed inside a merged dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Seam {
    pub dataset: &'static str,
    pub profile: String,
    pub start: usize,
    pub rows: usize,
    /// Current step between the last row of the previous segment and the
    /// first row of this one (zero for the first segment).
    pub current_jump: f64,
}

fn simulate_merged(
    cfg: &PipelineConfig,
    dataset: &'static str,
    profiles: &[socfusion::simulate::ProfileKind],
    seed: u64,
) -> Result<(TimeSeriesDataset, Vec<Seam>), CliError> {
    let s = &cfg.simulate;
    let mut parts: Vec<TimeSeriesDataset> = Vec::new();
    let mut seams = Vec::new();
    let mut start = 0;
    for (n, &kind) in profiles.iter().enumerate() {
        let n = n as u64;
        let profile = gen_profile(kind, s.max_steps, s.limits(), seed + 2 * n);
        let noise = NoiseSpec { sigma_v_meas: s.sigma_v_meas, sigma_i_meas: s.sigma_i_meas, seed: seed + 2 * n + 1 };
        let run = simulate_ecm(&cfg.cell, &profile, s.soc0, 0.0, &noise)?;
        let first = run.data.samples().first().map_or(0.0, |x| x.i);
        let current_jump = parts.last().and_then(|p| p.samples().last()).map_or(0.0, |x| first - x.i);
        seams.push(Seam { dataset, profile: kind.name().to_owned(), start, rows: run.data.len(), current_jump });
        start += run.data.len();
        parts.push(run.data);
    }
    Ok((TimeSeriesDataset::concat(&parts)?, seams))
}

/// Writes the protocol records and the merged train and test sets.
pub fn cmd_simulate(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<Seam>, CliError> {
    let s = &cfg.simulate;
    let lc_noise = NoiseSpec { sigma_v_meas: s.sigma_v_meas, sigma_i_meas: s.sigma_i_meas, seed: cfg.seed + SEED_LC };
    let (d_d, d_c) = simulate_lc_ocv(&cfg.cell, s.lc_c_rate, &lc_noise)?;
    let lc = TimeSeriesDataset::concat(&[d_d, d_c])?;
    let geis = simulate_geis(&cfg.cell, &s.geis_socs, &default_geis_frequencies(), s.geis_noise_rel, cfg.seed + SEED_GEIS)?;
    let (train, mut seams) = simulate_merged(cfg, "train", &s.train_profiles, cfg.seed + SEED_TRAIN)?;
    let (test, test_seams) = simulate_merged(cfg, "test", &s.test_profiles, cfg.seed + SEED_TEST)?;
    seams.extend(test_seams);

    for path in [layout.lc_ocv(), layout.geis(), layout.train(), layout.test()] {
        create_parent(&path)?;
    }
    write_timeseries(&lc, &layout.lc_ocv())?;
    write_geis(&geis, &layout.geis())?;
    write_timeseries(&train, &layout.train())?;
    write_timeseries(&test, &layout.test())?;
    cfg.cell.write(&layout.truth_params())?;
    let mut out = String::from("dataset,segment,profile,start,rows,current_jump_A\n");
    for (n, seam) in seams.iter().enumerate() {
        let _ = writeln!(out, "{},{n},{},{},{},{}", seam.dataset, seam.profile, seam.start, seam.rows, seam.current_jump);
    }
    write_text(&layout.seams(), &out)?;
    Ok(seams)
}

/// Splits the protocol record back into its discharge and charge halves.
fn split_lc(lc: &TimeSeriesDataset) -> Result<(TimeSeriesDataset, TimeSeriesDataset), CliError> {
    let at = lc
        .samples()
        .iter()
        .position(|s| s.i < 0.0)
        .ok_or_else(|| CliError::Core(socfusion::Error::Protocol("lc record has no charge half".into())))?;
    Ok((lc.slice(0..at)?, lc.slice(at..lc.len())?))
}

pub fn cmd_identify(cfg: &PipelineConfig, layout: &Layout) -> Result<CellParams, CliError> {
    let lc = read_timeseries(require(&layout.lc_ocv(), "simulate")?)?;
    let geis = read_geis(require(&layout.geis(), "simulate")?)?;
    let (d_d, d_c) = split_lc(&lc)?;
    let id = identify_cell(&d_d, &d_c, &geis, cfg.identify.ocv_degree, cfg.cell.v_min, cfg.cell.v_max)?;
    create_parent(&layout.identified_params())?;
    id.params.write(&layout.identified_params())?;
    write_fit_table(&id.fits, &layout.fit_table())?;
    Ok(id.params)
}

pub fn cmd_train_vs(cfg: &PipelineConfig, layout: &Layout) -> Result<VirtualSensor, CliError> {
    let train = read_timeseries(require(&layout.train(), "simulate")?)?;
    let vs_cfg = cfg.virtual_sensor.to_vs_config(cfg.seed + SEED_VS)?;
    let (vs, log) = train_virtual_sensor(&train, &vs_cfg)?;
    create_parent(&layout.vs_bundle())?;
    vs.write(&layout.vs_bundle())?;

    let mut out = String::from("epoch,mlpv_train,mlpv_val,predictor_train,predictor_val\n");
    let (a, b) = (&log.mlpv_log, &log.predictor_log);
    for e in 0..a.train_loss.len().max(b.train_loss.len()) {
        let cell = |v: &[f64]| v.get(e).map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{e},{},{},{},{}", cell(&a.train_loss), cell(&a.val_loss), cell(&b.train_loss), cell(&b.val_loss));
    }
    write_text(&layout.vs_training(), &out)?;

    let mut out = String::from("soc_tag,gamma\n");
    for r in &log.representatives {
        let gamma: Vec<String> = r.gamma.gamma.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{},{}", r.soc_tag, gamma.join(" "));
    }
    write_text(&layout.representatives(), &out)?;
    Ok(vs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct NoiseFile {
    sigma_soc: f64,
    sigma_ir: f64,
    sigma_v: f64,
    sigma_soc_y: f64,
}

impl From<EkfNoise> for NoiseFile {
    fn from(n: EkfNoise) -> Self {
        Self { sigma_soc: n.sigma_soc, sigma_ir: n.sigma_ir, sigma_v: n.sigma_v, sigma_soc_y: n.sigma_soc_y }
    }
}

fn read_noise(path: &Path) -> Result<EkfNoise, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let n: NoiseFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(EkfNoise { sigma_soc: n.sigma_soc, sigma_ir: n.sigma_ir, sigma_v: n.sigma_v, sigma_soc_y: n.sigma_soc_y })
}

/// The identified model as both filters see it, with the configured
/// capacity bias applied.
fn filter_config(cfg: &PipelineConfig, mode: FilterMode, params: &CellParams, noise: EkfNoise) -> EkfConfig {
    let params = CellParams { q_total: params.q_total * cfg.ekf.capacity_bias, ..params.clone() };
    EkfConfig { x0: cfg.ekf.x0, sigma0: cfg.ekf.sigma0, cross_term: cfg.ekf.cross_term, ..EkfConfig::new(mode, noise, params) }
}

pub fn cmd_calibrate(cfg: &PipelineConfig, layout: &Layout, mode: FilterMode) -> Result<EkfNoise, CliError> {
    let train = read_timeseries(require(&layout.train(), "simulate")?)?;
    let params = CellParams::read(require(&layout.identified_params(), "identify")?)?;
    let vs = match mode {
        FilterMode::Fusion => Some(VirtualSensor::read(require(&layout.vs_bundle(), "train-vs")?)?),
        FilterMode::Baseline => None,
    };
    let placeholder = EkfNoise::from_array(cfg.calibration.upper);
    let ekf = filter_config(cfg, mode, &params, placeholder);
    let cal = CalibrationData::new(&train, vs.as_ref())?;
    let offset = match mode {
        FilterMode::Baseline => 0,
        FilterMode::Fusion => 1,
    };
    let prob = cfg.calibration.problem(cfg.seed + SEED_CALIBRATION + offset);
    let result = calibrate_filter(&ekf, &cal, &prob, &cfg.calibration.weights())?;
    create_parent(&layout.calibration_log(mode))?;
    write_calibration_log(&result.log, &layout.calibration_log(mode))?;
    let text = toml::to_string(&NoiseFile::from(result.noise)).expect("plain struct serializes");
    write_text(&layout.noise(mode), &text)?;
    Ok(result.noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Bekf,
    Vs,
    Vsf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Bekf, Method::Vs, Method::Vsf];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bekf => "bekf",
            Self::Vs => "vs",
            Self::Vsf => "vsf",
        }
    }
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub method: Method,
    pub rmse: f64,
    pub tv: f64,
    pub median_step_ms: f64,
}

pub const EVALUATION_HEADER: &str = "dataset,method,rmse_soc,tv_soc,median_step_ms";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the three estimators on the test set with the reference column
/// removed, then scores them against it.
pub fn cmd_evaluate(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<Score>, CliError> {
    let test = read_timeseries(require(&layout.test(), "simulate")?)?;
    let params = CellParams::read(require(&layout.identified_params(), "identify")?)?;
    let vs = VirtualSensor::read(require(&layout.vs_bundle(), "train-vs")?)?;
    let noise_b = read_noise(require(&layout.noise(FilterMode::Baseline), "calibrate --mode baseline")?)?;
    let noise_f = read_noise(require(&layout.noise(FilterMode::Fusion), "calibrate --mode fusion")?)?;
    let truth = test
        .reference_soc()
        .ok_or_else(|| CliError::Config(format!("{} has no reference soc column to score against", layout.test().display())))?;
    let obs = test.without_reference().observations();

    let mut scores = Vec::new();
    create_parent(&layout.evaluation())?;
    for method in Method::ALL {
        let mut times = Vec::with_capacity(obs.len());
        let soc_hat = match method {
            Method::Bekf | Method::Vsf => {
                let (mode, noise, sensor) = match method {
                    Method::Bekf => (FilterMode::Baseline, noise_b, None),
                    _ => (FilterMode::Fusion, noise_f, Some(&vs)),
                };
                let trace = run_ekf_timed(&filter_config(cfg, mode, &params, noise), &obs, sensor, Some(&mut times))?;
                write_trace(&layout.trace(method), &test, &trace.soc_hat, Some(&trace.v_hat), Some(&trace.innov_v), Some(&trace.innov_soc))?;
                trace.soc_hat
            }
            Method::Vs => {
                let mut sensor = vs.clone();
                sensor.reset();
                let soc_hat: Vec<f64> = obs
                    .current
                    .iter()
                    .zip(&obs.voltage)
                    .map(|(&i, &v)| {
                        let start = Instant::now();
                        let out = sensor.step(i, v);
                        times.push(start.elapsed().as_secs_f64());
                        out.soc
                    })
                    .collect();
                write_trace(&layout.trace(method), &test, &soc_hat, None, None, None)?;
                soc_hat
            }
        };
        scores.push(Score {
            method,
            rmse: rmse(&truth, &soc_hat)?,
            tv: total_variation(&soc_hat)?,
            median_step_ms: 1e3 * median(times),
        });
    }

    let mut out = String::from(EVALUATION_HEADER);
    out.push('\n');
    for s in &scores {
        let _ = writeln!(out, "test,{},{},{},{}", s.method.name(), s.rmse, s.tv, s.median_step_ms);
    }
    write_text(&layout.evaluation(), &out)?;
    Ok(scores)
}

/// Renders the evaluation table and calibrated noise as Markdown.
pub fn cmd_report(layout: &Layout) -> Result<String, CliError> {
    let path = layout.evaluation();
    let path = require(&path, "evaluate")?;
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut md = String::from("# SOC estimation results\n\n| dataset | method | RMSE | TV | median step (ms) |\n|---|---|---|---|---|\n");
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let num = |k: usize| row.get(k).and_then(|x| x.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.6} | {:.4} |",
            row.get(0).unwrap_or(""),
            row.get(1).unwrap_or("").to_uppercase(),
            num(2),
            num(3),
            num(4)
        );
    }
    for mode in [FilterMode::Baseline, FilterMode::Fusion] {
        let noise = read_noise(require(&layout.noise(mode), "calibrate")?)?;
        let [a, b, c, d] = noise.to_array();
        let _ = write!(md, "\nCalibrated {} noise: σ_soc = {a:.3e}, σ_ir = {b:.3e}, σ_v = {c:.3e}", mode.name());
        if mode == FilterMode::Fusion {
            let _ = write!(md, ", σ_soc,y = {d:.3e}");
        }
        md.push('\n');
    }
    write_text(&layout.report(), &md)?;
    Ok(md)
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<Score>, CliError> {
    cmd_simulate(cfg, layout)?;
    cmd_identify(cfg, layout)?;
    cmd_train_vs(cfg, layout)?;
    cmd_calibrate(cfg, layout, FilterMode::Baseline)?;
    cmd_calibrate(cfg, layout, FilterMode::Fusion)?;
    let scores = cmd_evaluate(cfg, layout)?;
    cmd_report(layout)?;
    Ok(scores)
}
