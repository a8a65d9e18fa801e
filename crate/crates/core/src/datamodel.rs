//! Value types shared by every stage, the two scoring kernels, and the CSV
//! formats datasets travel in.
//!
//! Time series are sampled at a fixed period carried once per dataset; each
//! row holds the step index, load current (positive while discharging),
//! terminal voltage and an optional reference state of charge. Estimators
//! never see the reference column: they consume [`Observations`], which
//! only carries current and voltage.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const DEFAULT_TAU_S: f64 = 1.0;

pub const TIMESERIES_HEADER: [&str; 4] = ["k", "i_A", "v_V", "soc"];
pub const GEIS_HEADER: [&str; 4] = ["soc_bar", "omega_rad_s", "re_ohm", "im_ohm"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub k: u64,
    /// Load current in A, positive while discharging.
    pub i: f64,
    /// Terminal voltage in V.
    pub v: f64,
    /// Reference state of charge, absent when withheld.
    pub soc: Option<f64>,
}

/// Uniformly sampled (current, voltage, reference SOC) record.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    samples: Vec<Sample>,
    tau_s: f64,
}

impl TimeSeriesDataset {
    pub fn new(samples: Vec<Sample>, tau_s: f64) -> Result<Self> {
        if !(tau_s > 0.0 && tau_s.is_finite()) {
            return Err(Error::Contract(format!("sampling period must be > 0, got {tau_s}")));
        }
        for pair in samples.windows(2) {
            if pair[1].k != pair[0].k + 1 {
                return Err(Error::Contract(format!(
                    "step indices must increase by 1 ({} followed by {})",
                    pair[0].k, pair[1].k
                )));
            }
        }
        for s in &samples {
            if !(s.i.is_finite() && s.v.is_finite()) {
                return Err(Error::Contract(format!("non-finite value at step {}", s.k)));
            }
            if s.v < 0.0 {
                return Err(Error::Contract(format!("negative voltage at step {}", s.k)));
            }
            if let Some(soc) = s.soc {
                if !(0.0..=1.0).contains(&soc) {
                    return Err(Error::Contract(format!(
                        "reference soc {soc} outside [0, 1] at step {}",
                        s.k
                    )));
                }
            }
        }
        Ok(Self { samples, tau_s })
    }

    /// Builds a dataset indexed from zero out of parallel columns.
    pub fn from_columns(
        current: &[f64],
        voltage: &[f64],
        soc: Option<&[f64]>,
        tau_s: f64,
    ) -> Result<Self> {
        if current.len() != voltage.len() {
            return Err(Error::Dimension {
                expected: current.len(),
                got: voltage.len(),
            });
        }
        if let Some(s) = soc {
            if s.len() != current.len() {
                return Err(Error::Dimension {
                    expected: current.len(),
                    got: s.len(),
                });
            }
        }
        let samples = current
            .iter()
            .zip(voltage)
            .enumerate()
            .map(|(k, (&i, &v))| Sample {
                k: k as u64,
                i,
                v,
                soc: soc.map(|s| s[k]),
            })
            .collect();
        Self::new(samples, tau_s)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn tau_s(&self) -> f64 {
        self.tau_s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn currents(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.i).collect()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.v).collect()
    }

    /// The reference SOC column, or `None` if any row lacks it.
    pub fn reference_soc(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.soc).collect()
    }

    /// The estimator-facing view: current and voltage only.
    pub fn observations(&self) -> Observations {
        Observations {
            current: self.currents(),
            voltage: self.voltages(),
            tau_s: self.tau_s,
        }
    }

    /// Copy with the reference column blanked, as shipped to deployment.
    pub fn without_reference(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| Sample { soc: None, ..*s })
                .collect(),
            tau_s: self.tau_s,
        }
    }

    /// Concatenates datasets end to end, renumbering steps from zero.
    pub fn concat(parts: &[TimeSeriesDataset]) -> Result<Self> {
        let tau_s = parts.first().map_or(DEFAULT_TAU_S, |p| p.tau_s);
        if parts.iter().any(|p| p.tau_s != tau_s) {
            return Err(Error::Contract("cannot merge datasets with different sampling periods".into()));
        }
        let samples = parts
            .iter()
            .flat_map(|p| p.samples.iter())
            .enumerate()
            .map(|(k, s)| Sample { k: k as u64, ..*s })
            .collect();
        Self::new(samples, tau_s)
    }

    /// Rows `range` renumbered from zero.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let samples = self.samples[range]
            .iter()
            .enumerate()
            .map(|(k, s)| Sample { k: k as u64, ..*s })
            .collect();
        Self::new(samples, self.tau_s)
    }
}

/// Measured signals only. This is the sole input type estimators accept.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub tau_s: f64,
}

impl Observations {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedancePoint {
    /// Angular frequency in rad/s.
    pub omega: f64,
    /// Complex impedance in Ω.
    pub z: Complex64,
}

/// One frequency sweep taken at a resting equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct GeisSpectrum {
    pub soc_bar: f64,
    pub points: Vec<ImpedancePoint>,
}

/// Impedance spectra keyed by equilibrium SOC, kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeisDataset {
    spectra: Vec<GeisSpectrum>,
}

impl GeisDataset {
    pub fn new(mut spectra: Vec<GeisSpectrum>) -> Result<Self> {
        spectra.sort_by(|a, b| a.soc_bar.total_cmp(&b.soc_bar));
        for s in &spectra {
            if !(0.0..=1.0).contains(&s.soc_bar) {
                return Err(Error::Contract(format!("equilibrium soc {} outside [0, 1]", s.soc_bar)));
            }
            if s.points.len() < 2 {
                return Err(Error::Contract(format!(
                    "equilibrium {} has {} impedance points, need at least 2",
                    s.soc_bar,
                    s.points.len()
                )));
            }
            if let Some(p) = s.points.iter().find(|p| !(p.omega > 0.0)) {
                return Err(Error::Contract(format!("non-positive frequency {}", p.omega)));
            }
        }
        if spectra.windows(2).any(|w| w[0].soc_bar == w[1].soc_bar) {
            return Err(Error::Contract("duplicate equilibrium soc".into()));
        }
        Ok(Self { spectra })
    }

    pub fn spectra(&self) -> &[GeisSpectrum] {
        &self.spectra
    }
}

/// Raw scores of one estimate trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse_v: f64,
    pub rmse_soc: f64,
    pub tv_soc: f64,
}

/// Root mean squared elementwise difference.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("rmse of sequences with lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("rmse of empty sequences".into()));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Mean absolute step-to-step change.
pub fn total_variation(s: &[f64]) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::Contract(format!("total variation needs at least 2 values, got {}", s.len())));
    }
    let sum: f64 = s.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(sum / (s.len() - 1) as f64)
}

fn parse_f64(field: &str, path: &Path, line: u64, column: &str) -> Result<f64> {
    let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_owned(),
        line,
        msg: format!("column `{column}`: cannot parse `{field}` as a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line,
            msg: format!("column `{column}`: non-finite value `{field}`"),
        });
    }
    Ok(value)
}

fn check_header(headers: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_owned(),
        line,
        msg: e.to_string(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// Parses a time-series CSV (`k,i_A,v_V,soc`). The sampling period is not
/// stored in the file; `tau_s` supplies it.
pub fn read_timeseries_from<R: Read>(reader: R, path: &Path, tau_s: f64) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(rdr.headers().map_err(|e| csv_error(path, e))?, &TIMESERIES_HEADER, path)?;
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let k_field = record[0].trim();
        let k: u64 = k_field.parse().map_err(|_| Error::Parse {
            path: path.to_owned(),
            line,
            msg: format!("column `k`: cannot parse `{k_field}` as a step index"),
        })?;
        let i = parse_f64(&record[1], path, line, "i_A")?;
        let v = parse_f64(&record[2], path, line, "v_V")?;
        let soc = match record[3].trim() {
            "" => None,
            s => Some(parse_f64(s, path, line, "soc")?),
        };
        samples.push(Sample { k, i, v, soc });
    }
    TimeSeriesDataset::new(samples, tau_s).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn read_timeseries(path: &Path) -> Result<TimeSeriesDataset> {
    read_timeseries_from(open(path)?, path, DEFAULT_TAU_S)
}

pub fn write_timeseries_to<W: Write>(data: &TimeSeriesDataset, w: W) -> Result<()> {
    let mut wtr = writer(w);
    let to_err = |e: csv::Error| Error::Artifact(e.to_string());
    wtr.write_record(TIMESERIES_HEADER).map_err(to_err)?;
    for s in &data.samples {
        let soc = s.soc.map(|x| x.to_string()).unwrap_or_default();
        wtr.write_record([s.k.to_string(), s.i.to_string(), s.v.to_string(), soc])
            .map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::Artifact(e.to_string()))
}

pub fn write_timeseries(data: &TimeSeriesDataset, path: &Path) -> Result<()> {
    write_timeseries_to(data, create(path)?)
}

/// Parses a GEIS CSV (`soc_bar,omega_rad_s,re_ohm,im_ohm`); rows sharing a
/// `soc_bar` value form one spectrum, in file order.
pub fn read_geis_from<R: Read>(reader: R, path: &Path) -> Result<GeisDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(rdr.headers().map_err(|e| csv_error(path, e))?, &GEIS_HEADER, path)?;
    let mut spectra: Vec<GeisSpectrum> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let soc_bar = parse_f64(&record[0], path, line, "soc_bar")?;
        let omega = parse_f64(&record[1], path, line, "omega_rad_s")?;
        let re = parse_f64(&record[2], path, line, "re_ohm")?;
        let im = parse_f64(&record[3], path, line, "im_ohm")?;
        let point = ImpedancePoint {
            omega,
            z: Complex64::new(re, im),
        };
        match spectra.iter_mut().find(|s| s.soc_bar == soc_bar) {
            Some(s) => s.points.push(point),
            None => spectra.push(GeisSpectrum {
                soc_bar,
                points: vec![point],
            }),
        }
    }
    GeisDataset::new(spectra).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn read_geis(path: &Path) -> Result<GeisDataset> {
    read_geis_from(open(path)?, path)
}

pub fn write_geis_to<W: Write>(data: &GeisDataset, w: W) -> Result<()> {
    let mut wtr = writer(w);
    let to_err = |e: csv::Error| Error::Artifact(e.to_string());
    wtr.write_record(GEIS_HEADER).map_err(to_err)?;
    for s in &data.spectra {
        for p in &s.points {
            wtr.write_record([
                s.soc_bar.to_string(),
                p.omega.to_string(),
                p.z.re.to_string(),
                p.z.im.to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::Artifact(e.to_string()))
}

pub fn write_geis(data: &GeisDataset, path: &Path) -> Result<()> {
    write_geis_to(data, create(path)?)
}

/// Writes a two-column `metric,value` report.
pub fn write_metrics_report(rows: &[(String, f64)], path: &Path) -> Result<()> {
    let mut wtr = writer(create(path)?);
    let to_err = |e: csv::Error| Error::Artifact(e.to_string());
    wtr.write_record(["metric", "value"]).map_err(to_err)?;
    for (name, value) in rows {
        wtr.write_record([name.as_str(), &value.to_string()]).map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}
