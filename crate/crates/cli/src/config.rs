use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use socfusion::calibrate::{BboProblem, CostWeights};
use socfusion::neural::{Loss, TrainSpec};
use socfusion::simulate::{CellParams, CurrentLimits, ProfileKind};
use socfusion::virtual_sensor::{PolePattern, VsConfig};

use crate::error::CliError;

/// Everything the pipeline needs, loaded from one TOML file. Every table
/// and key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Truth-side cell used by the simulator.
    pub cell: CellParams,
    pub simulate: SimulateSection,
    pub identify: IdentifySection,
    pub virtual_sensor: VsSection,
    pub ekf: EkfSection,
    pub calibration: CalibrationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("out"),
            cell: CellParams::default(),
            simulate: SimulateSection::default(),
            identify: IdentifySection::default(),
            virtual_sensor: VsSection::default(),
            ekf: EkfSection::default(),
            calibration: CalibrationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub lc_c_rate: f64,
    pub geis_socs: Vec<f64>,
    pub geis_noise_rel: f64,
    pub sigma_v_meas: f64,
    pub sigma_i_meas: f64,
    pub discharge_max: f64,
    pub charge_max: f64,
    /// Each segment starts from this SOC and runs until a cut-off or
    /// `max_steps`.
    pub soc0: f64,
    pub max_steps: usize,
    pub train_profiles: Vec<ProfileKind>,
    pub test_profiles: Vec<ProfileKind>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let limits = CurrentLimits::default();
        Self {
            lc_c_rate: 0.05,
            geis_socs: (1..=19).map(|n| n as f64 * 0.05).collect(),
            geis_noise_rel: 0.0,
            sigma_v_meas: 0.002,
            sigma_i_meas: 0.005,
            discharge_max: limits.discharge_max,
            charge_max: limits.charge_max,
            soc0: 0.95,
            max_steps: 20_000,
            train_profiles: vec![ProfileKind::PulseUrban, ProfileKind::PulseHighway],
            test_profiles: vec![ProfileKind::Mixed, ProfileKind::PulseUrban],
        }
    }
}

impl SimulateSection {
    pub fn limits(&self) -> CurrentLimits {
        CurrentLimits { discharge_max: self.discharge_max, charge_max: self.charge_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySection {
    pub ocv_degree: usize,
}

impl Default for IdentifySection {
    fn default() -> Self {
        Self { ocv_degree: socfusion::identify::DEFAULT_OCV_DEGREE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsSection {
    pub m: usize,
    pub n_theta: usize,
    pub ell: usize,
    pub pole_radius: f64,
    /// `ring` or `repeated`.
    pub pole_pattern: String,
    pub mlpv_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub patience: Option<usize>,
    pub drop_affine: bool,
    pub max_cluster_points: usize,
}

impl Default for VsSection {
    fn default() -> Self {
        let d = VsConfig::default();
        Self {
            m: d.m,
            n_theta: d.n_theta,
            ell: d.ell,
            pole_radius: d.pole_radius,
            pole_pattern: "ring".into(),
            mlpv_hidden: d.mlpv_hidden,
            predictor_hidden: d.predictor_hidden,
            epochs: d.predictor_train.epochs,
            learning_rate: d.predictor_train.learning_rate,
            rho: d.predictor_train.rho,
            batch_size: d.predictor_train.batch_size,
            validation_fraction: d.predictor_train.validation_fraction,
            patience: d.predictor_train.patience,
            drop_affine: d.drop_affine,
            max_cluster_points: d.max_cluster_points,
        }
    }
}

impl VsSection {
    pub fn to_vs_config(&self, seed: u64) -> Result<VsConfig, CliError> {
        let pole_pattern: PolePattern = self.pole_pattern.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let train = TrainSpec {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            rho: self.rho,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            seed,
            ..TrainSpec::default()
        };
        let cfg = VsConfig {
            m: self.m,
            n_theta: self.n_theta,
            ell: self.ell,
            pole_radius: self.pole_radius,
            pole_pattern,
            mlpv_hidden: self.mlpv_hidden.clone(),
            mlpv_train: TrainSpec { loss: Loss::Absolute, ..train },
            predictor_hidden: self.predictor_hidden.clone(),
            predictor_train: TrainSpec { loss: Loss::Squared, seed: seed.wrapping_add(1), ..train },
            drop_affine: self.drop_affine,
            max_cluster_points: self.max_cluster_points,
            seed,
        };
        cfg.predictor_train.validate().map_err(|e| CliError::Config(format!("virtual_sensor: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfSection {
    pub x0: [f64; 2],
    pub sigma0: [f64; 2],
    /// Multiplier on the identified capacity handed to both filters.
    pub capacity_bias: f64,
    pub cross_term: bool,
}

impl Default for EkfSection {
    fn default() -> Self {
        Self { x0: [0.0, 0.0], sigma0: [0.5, 0.001], capacity_bias: 0.95, cross_term: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub lower: [f64; 4],
    pub upper: [f64; 4],
    pub budget: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let w = CostWeights::default();
        Self { w1: w.w1, w2: w.w2, w3: w.w3, v_max: w.v_max, v_min: w.v_min, lower: [1e-6; 4], upper: [1.0; 4], budget: 100 }
    }
}

impl CalibrationSection {
    pub fn weights(&self) -> CostWeights {
        CostWeights { w1: self.w1, w2: self.w2, w3: self.w3, v_max: self.v_max, v_min: self.v_min }
    }

    pub fn problem(&self, seed: u64) -> BboProblem {
        BboProblem::new(self.lower.to_vec(), self.upper.to_vec(), self.budget, seed)
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.cell.validate().map_err(|e| CliError::Config(format!("cell: {e}")))?;
        let s = &self.simulate;
        if !(s.lc_c_rate > 0.0) {
            return bad(format!("simulate.lc_c_rate must be > 0, got {}", s.lc_c_rate));
        }
        if !(0.0..=1.0).contains(&s.soc0) {
            return bad(format!("simulate.soc0 must lie in [0, 1], got {}", s.soc0));
        }
        if s.train_profiles.is_empty() || s.test_profiles.is_empty() {
            return bad("simulate: train_profiles and test_profiles must be non-empty".into());
        }
        if s.sigma_v_meas < 0.0 || s.sigma_i_meas < 0.0 || s.geis_noise_rel < 0.0 {
            return bad("simulate: noise levels must be >= 0".into());
        }
        if s.max_steps < 100 {
            return bad(format!("simulate.max_steps must be >= 100, got {}", s.max_steps));
        }
        let v = &self.virtual_sensor;
        if v.m == 0 || v.n_theta == 0 || v.ell == 0 {
            return bad("virtual_sensor: m, n_theta and ell must be >= 1".into());
        }
        if !(v.pole_radius > 0.0 && v.pole_radius < 1.0) {
            return bad(format!("virtual_sensor.pole_radius must lie in (0, 1), got {}", v.pole_radius));
        }
        v.to_vs_config(self.seed)?;
        if !(self.ekf.capacity_bias > 0.0) {
            return bad("ekf.capacity_bias must be > 0".into());
        }
        self.calibration.weights().validate().map_err(|e| CliError::Config(format!("calibration: {e}")))?;
        self.calibration.problem(0).validate().map_err(|e| CliError::Config(format!("calibration: {e}")))?;
        Ok(())
    }
}
