use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use spikemix::certificate::BasinCertificate;
use spikemix::experiment::{certify, ExperimentConfig};
use spikemix::kernels::LorentzKernel;
use spikemix::libs::{
    estimate_concentrations, fit_spectrum, synthesize_spectrum, synthetic_al_si_database,
    synthetic_al_si_spectrum, ConcentrationMap, FitSettings, LineDatabase, SpectrumObservation,
    SyntheticSpectrum,
};
use spikemix::model::MixtureParams;
use spikemix::solver::solve;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const SMALL: &str = r#"
deltas = [1.0]
[grid]
T = 16.0
N = 321
[support]
counts = [2, 2]
[params]
theta = [0.3, 0.6]
[metrics]
lipschitz_samples = 5
"#;

#[test]
fn shipped_configs_parse() {
    for name in [
        "interleaved_lorentz.toml",
        "coherence_sweep.toml",
        "radius_sweep.toml",
        "success_curve.toml",
    ] {
        ExperimentConfig::from_path(&configs_dir().join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let synth: SyntheticSpectrum =
        toml::from_str(&fs::read_to_string(configs_dir().join("libs_synth.toml")).unwrap())
            .unwrap();
    assert_eq!(synth, synthetic_al_si_spectrum(0, Some(40.0)));
    let fit: FitSettings =
        toml::from_str(&fs::read_to_string(configs_dir().join("libs_fit.toml")).unwrap()).unwrap();
    assert_eq!(fit, FitSettings::default());
    let db = LineDatabase::from_path(&configs_dir().join("al_si_lines.csv")).unwrap();
    assert_eq!(db, synthetic_al_si_database());
}

#[test]
fn line_database_and_spectrum_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let db = synthetic_al_si_database();
    let lines = dir.path().join("lines.csv");
    let mut buf = Vec::new();
    db.write_csv(&mut buf).unwrap();
    fs::write(&lines, &buf).unwrap();
    assert_eq!(LineDatabase::from_path(&lines).unwrap(), db);

    let map = ConcentrationMap::from_strengths(&db).unwrap();
    let (obs, _) = synthesize_spectrum(
        &db,
        &map,
        &LorentzKernel::new(),
        &synthetic_al_si_spectrum(3, Some(40.0)),
    )
    .unwrap();
    let spectrum = dir.path().join("spectrum.csv");
    let mut buf = Vec::new();
    obs.write_csv(&mut buf).unwrap();
    fs::write(&spectrum, &buf).unwrap();
    let back = SpectrumObservation::from_path(&spectrum).unwrap();
    assert_eq!(back.intensities, obs.intensities);
    assert_eq!(back.transfer, obs.transfer);
    assert_eq!(back.len(), obs.len());
}

#[test]
fn fit_without_baseline_recovers_widths_exactly() {
    let db = synthetic_al_si_database();
    let map = ConcentrationMap::from_strengths(&db).unwrap();
    let family = Arc::new(LorentzKernel::new());
    let mut spec = synthetic_al_si_spectrum(0, None);
    spec.baseline_offset = 0.0;
    spec.baseline_slope = 0.0;
    let (mut obs, truth) = synthesize_spectrum(&db, &map, family.as_ref(), &spec).unwrap();
    obs.baseline = Some(vec![0.0; obs.len()]);
    obs.preprocessed = Some(obs.intensities.clone());
    let fit = fit_spectrum(&db, &obs, family, None, &FitSettings::default()).unwrap();
    for (hat, want) in fit.report.params.theta.iter().zip(&truth.theta) {
        assert!((hat - want).abs() < 1e-6 * want, "{hat} vs {want}");
    }
    assert!(fit.relative_residual < 1e-8);
    let nu = estimate_concentrations(&map, &fit.report.params.eta).unwrap();
    for (hat, want) in nu.iter().zip(&spec.nu) {
        assert!((hat - want).abs() < 1e-6 * want, "{hat} vs {want}");
    }
}

#[test]
fn noiseless_pipeline_with_baseline_estimates_concentrations_within_one_percent() {
    let db = synthetic_al_si_database();
    let map = ConcentrationMap::from_strengths(&db).unwrap();
    let family = Arc::new(LorentzKernel::new());
    let spec = synthetic_al_si_spectrum(0, None);
    let (mut obs, _) = synthesize_spectrum(&db, &map, family.as_ref(), &spec).unwrap();
    let settings = FitSettings::default();
    obs.preprocess(&settings.baseline).unwrap();
    let fit = fit_spectrum(&db, &obs, family, None, &settings).unwrap();
    let nu = estimate_concentrations(&map, &fit.report.params.eta).unwrap();
    let err = nu
        .iter()
        .zip(&spec.nu)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
        / spec.nu.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err < 0.01, "{nu:?}");
}

#[test]
fn solver_recovers_ground_truth_of_a_small_experiment() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let (pb, truth) = cfg.problem(1.0).unwrap();
    let init = MixtureParams::new(vec![0.33, 0.55], truth.eta.clone());
    let rep = solve(&pb, &init, &cfg.solver, Some(&truth)).unwrap();
    assert!(rep.converged);
    let (dt, de) = rep.distance.unwrap();
    assert!(dt < 1e-8 && de < 1e-8, "{dt} {de}");
    let mut csv = Vec::new();
    rep.write_trace_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), rep.iterations + 2);
}

#[test]
fn certificate_json_round_trips() {
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let setup = certify(&cfg, 1.0).unwrap();
    let json = setup.certificate.to_json().unwrap();
    let back: BasinCertificate = serde_json::from_str(&json).unwrap();
    assert_eq!(back, setup.certificate);
    assert!(back.provenance.is_some());
}
