use socfusion::calibrate::{calibrate_filter, BboProblem, CalibrationData, CostWeights};
use socfusion::datamodel::{read_timeseries, rmse, total_variation, write_timeseries, TimeSeriesDataset};
use socfusion::ekf::{run_ekf, EkfConfig, EkfNoise, FilterMode};
use socfusion::identify::identify_cell;
use socfusion::simulate::{
    default_geis_frequencies, gen_profile, simulate_ecm, simulate_geis, simulate_lc_ocv, CellParams, CurrentLimits,
    NoiseSpec, ProfileKind,
};
use socfusion::virtual_sensor::{train_virtual_sensor, VirtualSensor, VsConfig};

fn drive(kinds: &[ProfileKind], seed: u64) -> TimeSeriesDataset {
    let p = CellParams::default();
    let parts: Vec<TimeSeriesDataset> = kinds
        .iter()
        .enumerate()
        .map(|(n, &kind)| {
            let profile = gen_profile(kind, 20_000, CurrentLimits::default(), seed + n as u64);
            let noise = NoiseSpec { sigma_v_meas: 0.002, sigma_i_meas: 0.005, seed: seed + 50 + n as u64 };
            simulate_ecm(&p, &profile, 0.95, 0.0, &noise).unwrap().data
        })
        .collect();
    TimeSeriesDataset::concat(&parts).unwrap()
}

#[test]
fn virtual_sensor_generalizes_to_unseen_profiles() {
    let train = drive(&[ProfileKind::PulseUrban, ProfileKind::PulseHighway], 1);
    let test = drive(&[ProfileKind::Mixed], 2);
    let (vs, _) = train_virtual_sensor(&train, &VsConfig { seed: 3, ..VsConfig::default() }).unwrap();

    let obs = test.without_reference().observations();
    let soc_hat: Vec<f64> = vs.run(&obs).iter().map(|o| o.soc).collect();
    let err = rmse(&test.reference_soc().unwrap(), &soc_hat).unwrap();
    assert!(err <= 0.05, "test SOC RMSE {err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vs.txt");
    vs.write(&path).unwrap();
    let back = VirtualSensor::read(&path).unwrap();
    let again: Vec<f64> = back.run(&obs).iter().map(|o| o.soc).collect();
    assert_eq!(again, soc_hat);
}

#[test]
fn identified_model_drives_a_calibrated_filter() {
    let truth = CellParams::default();
    let noise = NoiseSpec { sigma_v_meas: 0.002, sigma_i_meas: 0.005, seed: 9 };
    let (d_d, d_c) = simulate_lc_ocv(&truth, 0.05, &noise).unwrap();
    let socs: Vec<f64> = (1..=19).map(|n| n as f64 * 0.05).collect();
    let geis = simulate_geis(&truth, &socs, &default_geis_frequencies(), 0.01, 9).unwrap();
    let id = identify_cell(&d_d, &d_c, &geis, 8, truth.v_min, truth.v_max).unwrap();
    assert!((id.params.q_total / truth.q_total - 1.0).abs() < 5e-3);

    let train = drive(&[ProfileKind::PulseHighway], 4);
    let test = drive(&[ProfileKind::PulseUrban], 5);
    let cfg = EkfConfig::new(FilterMode::Baseline, EkfNoise::from_array([1e-3; 4]), id.params.clone());
    let cal = CalibrationData::new(&train, None).unwrap();
    let prob = BboProblem::new(vec![1e-6; 4], vec![1.0; 4], 30, 6);
    let tuned = calibrate_filter(&cfg, &cal, &prob, &CostWeights::default()).unwrap();

    let trace = run_ekf(&EkfConfig { noise: tuned.noise, ..cfg }, &test.without_reference().observations(), None).unwrap();
    let soc = test.reference_soc().unwrap();
    let settled = rmse(&soc[600..], &trace.soc_hat[600..]).unwrap();
    assert!(settled < 0.02, "settled RMSE {settled}");
    assert!(total_variation(&trace.soc_hat).unwrap() < 0.01);
}

#[test]
fn datasets_survive_a_csv_round_trip() {
    let d = drive(&[ProfileKind::Mixed], 7).slice(0..500).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_timeseries(&d, &path).unwrap();
    assert_eq!(read_timeseries(&path).unwrap(), d);
}
