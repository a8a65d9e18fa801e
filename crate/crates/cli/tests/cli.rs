use std::path::Path;
use std::process::Command;

use socfusion::ekf::FilterMode;
use socfusion_cli::pipeline::{cmd_evaluate, run_all, Layout, EVALUATION_HEADER};
use socfusion_cli::{Method, PipelineConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_socfusion"))
}

fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.virtual_sensor.epochs = 15;
    cfg.calibration.budget = 15;
    cfg
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|row| row.unwrap()[idx].to_owned()).collect()
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["identify", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulate"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[virtual_sensor]\npole_radius = 2.0\n").unwrap();
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["simulate", "--budget", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_four_datasets_with_a_seam() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["simulate", "--seed", "5", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let layout = Layout::new(dir.path());
    for path in [layout.lc_ocv(), layout.geis(), layout.train(), layout.test()] {
        assert!(std::fs::read_to_string(&path).unwrap().lines().count() > 100, "{}", path.display());
    }
    let profiles = column(&layout.seams(), "profile");
    let datasets = column(&layout.seams(), "dataset");
    let train: Vec<_> = profiles.iter().zip(&datasets).filter(|(_, d)| *d == "train").map(|(p, _)| p).collect();
    let test: Vec<_> = profiles.iter().zip(&datasets).filter(|(_, d)| *d == "test").map(|(p, _)| p).collect();
    assert_ne!(train, test);
    let jumps: Vec<f64> = column(&layout.seams(), "current_jump_A").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(jumps[0], 0.0);
    assert!(jumps[1].abs() > 0.1);
}

#[test]
fn evaluation_shape_alignment_and_label_blindness() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = quick_config();
    run_all(&cfg, &layout).unwrap();

    let table = std::fs::read_to_string(layout.evaluation()).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some(EVALUATION_HEADER));
    assert_eq!(lines.count(), 3);
    assert!(layout.calibration_log(FilterMode::Baseline).exists());
    assert!(layout.report().exists());

    let n_test = column(&layout.test(), "k").len();
    let before: Vec<Vec<String>> = Method::ALL
        .iter()
        .map(|&m| {
            let k = column(&layout.trace(m), "k");
            assert_eq!(k, (0..n_test).map(|i| i.to_string()).collect::<Vec<_>>());
            column(&layout.trace(m), "soc_hat")
        })
        .collect();

    // Scramble the reference column; estimates must not move.
    let text = std::fs::read_to_string(layout.test()).unwrap();
    let mut out = String::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 {
            out.push_str(line);
        } else {
            let (head, _) = line.rsplit_once(',').unwrap();
            out.push_str(&format!("{head},{}", (n * 37 % 101) as f64 / 100.0));
        }
        out.push('\n');
    }
    std::fs::write(layout.test(), out).unwrap();
    cmd_evaluate(&cfg, &layout).unwrap();
    for (&m, soc_hat) in Method::ALL.iter().zip(&before) {
        assert_eq!(&column(&layout.trace(m), "soc_hat"), soc_hat, "{}", m.name());
    }
}
