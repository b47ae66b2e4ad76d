//! Acceptance suite: one PASS/FAIL line per criterion, each against an
//! independent reference and within its time budget.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikemix::certificate::convexity_pair;
use spikemix::experiment::{certify, monte_carlo, ExperimentConfig, SuccessCurve};
use spikemix::hessian::{audit_lemmas, extreme_eigenvalues};
use spikemix::kernels::LorentzKernel;
use spikemix::libs::{
    round_trip, synthetic_al_si_database, synthetic_al_si_spectrum, write_fit_csv,
    ConcentrationMap, FitSettings,
};
use spikemix::metrics::{coherence_mu, CoherenceTable};
use spikemix::model::{MixtureParams, SamplingGrid};
use spikemix_validation::{
    fd_gradient, fd_hessian, hessian_relative_error, lorentz, lorentz_correlation, run_criterion,
    sample_sum_ball, Verdict,
};

const DELTA: f64 = 1e-3;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn derivatives() -> Verdict {
    let cfg = config("interleaved_lorentz.toml");
    let (pb, truth) = cfg.problem(DELTA).unwrap();
    let p = truth.theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let theta: Vec<f64> = truth
            .theta
            .iter()
            .map(|t| t * rng.gen_range(-2f64.ln()..2f64.ln()).exp())
            .collect();
        let eta: Vec<f64> = truth
            .eta
            .iter()
            .map(|e| e * rng.gen_range(0.5..1.5))
            .collect();
        let params = MixtureParams::new(theta, eta);
        let x = params.to_vector();
        let loss = |v: &DVector<f64>| pb.loss(&MixtureParams::from_vector(v, p)).unwrap();

        // compare in log-parameter coordinates so that widths and amplitudes weigh alike
        let scale: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let g = pb.gradient(&params).unwrap();
        let g_steps: Vec<f64> = scale.iter().map(|s| 1e-6 * s).collect();
        let g_fd = fd_gradient(loss, &x, &g_steps);
        let d = DVector::from_column_slice(&scale);
        let rel =
            (g_fd.component_mul(&d) - g.component_mul(&d)).norm() / g.component_mul(&d).norm();
        worst_g = worst_g.max(rel);

        let h = pb.hessian(&params).unwrap().h;
        // 3e-4 balances the h² truncation of the cross rule against cancellation
        let h_steps: Vec<f64> = scale.iter().map(|s| 3e-4 * s).collect();
        let h_fd = fd_hessian(loss, &x, &h_steps);
        worst_h = worst_h.max(hessian_relative_error(&h, &h_fd));
    }
    Verdict::new(
        worst_g <= 1e-6 && worst_h <= 1e-4,
        format!(
            "200 points, N = {}, {} parameters: worst gradient error {worst_g:.2e} (tol 1e-6), worst Hessian entry error {worst_h:.2e} (tol 1e-4)",
            pb.grid.len,
            pb.dim()
        ),
    )
}

fn correlation_oracle() -> Verdict {
    let k = LorentzKernel::new();
    let delta = 0.5;
    let mut worst = 0.0f64;
    for &t1 in &[0.1, 0.2] {
        for &t2 in &[0.1, 0.2] {
            let grid = SamplingGrid::new(100.0 * (t1 + t2), 100_000).unwrap();
            for &d in &[0.0, delta, 2.0 * delta] {
                let mu = coherence_mu(&k, &grid, 0, 0, t1, t2, d).unwrap() * grid.continuum_scale();
                let want = lorentz_correlation(t1, t2, d);
                worst = worst.max((mu - want).abs() / want);
            }
        }
    }
    Verdict::new(
        worst <= 1e-3,
        format!("12 cases with Delta = {delta}: worst relative error {worst:.2e} (tol 1e-3)"),
    )
}

fn coherence_asymptotics() -> Verdict {
    let cfg = config("coherence_sweep.toml");
    let k = LorentzKernel::new();
    let (t1, t2) = (cfg.params.theta[0], cfg.params.theta[1]);
    let table = CoherenceTable::build(
        &k,
        &cfg.grid,
        &cfg.params.theta,
        &cfg.deltas,
        &cfg.metrics.series,
    )
    .unwrap();
    let sweep = |a: usize| -> Vec<f64> {
        cfg.deltas
            .iter()
            .map(|&d| table.c(a, a, 0, 0, d).unwrap())
            .collect()
    };
    let mut notes = Vec::new();
    let mut pass = true;
    for a in [0, 1] {
        let c = sweep(a);
        let decreasing = c.windows(2).all(|w| w[1] < w[0]);
        let ratio = c[c.len() - 1] / c[0];
        let ok = decreasing && ratio <= 0.05;
        pass &= ok;
        notes.push(format!(
            "C{a}{a} {} with final/initial {ratio:.3}",
            if decreasing {
                "decreasing"
            } else {
                "not decreasing"
            }
        ));
    }
    let last = *cfg.deltas.last().unwrap();
    let mu10 = coherence_mu(&k, &cfg.grid, 1, 0, t1, t2, 0.0).unwrap();
    let c10 = table.c(1, 0, 0, 1, last).unwrap();
    let gap = (c10 - 2.0 * mu10).abs() / (2.0 * mu10);
    pass &= gap <= 0.05;
    notes.push(format!(
        "|C10 - 2 mu10(0)| / 2 mu10(0) = {gap:.3} (tol 0.05)"
    ));
    let i0 = table.interference(0, 0, last).unwrap();
    let peak = lorentz(t1, 0.0);
    let excess = (i0 - peak).abs() / peak;
    pass &= excess <= 0.02;
    notes.push(format!(
        "I0({t1}, {last}) = {i0:.4} vs 1/({t1} pi) = {:.4}, off by {:.2}% (tol 2%)",
        1.0 / (t1 * PI),
        100.0 * excess
    ));
    Verdict::new(pass, notes.join("; "))
}

fn sandwich_audit() -> Verdict {
    let cfg = config("interleaved_lorentz.toml");
    let setup = certify(&cfg, DELTA).unwrap();
    let cert = &setup.certificate;
    let (pb, truth) = cfg.problem(DELTA).unwrap();
    if !cert.feasible {
        let rep = audit_lemmas(
            &pb,
            &truth,
            &truth,
            0.0,
            &setup.table,
            &setup.lipschitz,
            cert,
        )
        .unwrap();
        let failed: Vec<&str> = rep.failed().iter().map(|r| r.id.as_str()).collect();
        return Verdict::new(
            false,
            format!(
                "certificate infeasible (r* = {:.3e} >= c- = {:.3e}), so no admissible epsilon exists; audit at the ground truth: {}/{} inequalities hold, failing {:?}",
                cert.r_star,
                cert.c_minus,
                rep.rows.len() - failed.len(),
                rep.rows.len(),
                failed
            ),
        );
    }
    let eps = 0.5 * cert.epsilon_0;
    let (xi, gamma) = convexity_pair(cert, eps).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut eig_ok, mut audit_ok) = (0, 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let (u, v) = sample_sum_ball(&mut rng, truth.theta.len(), truth.eta.len(), eps);
        let params = MixtureParams::new(
            truth.theta.iter().zip(&u).map(|(a, b)| a + b).collect(),
            truth.eta.iter().zip(&v).map(|(a, b)| a + b).collect(),
        );
        let (lmin, lmax) = extreme_eigenvalues(&pb.hessian(&params).unwrap().h);
        lo = lo.min(lmin);
        hi = hi.max(lmax);
        if lmin >= xi - 1e-8 * gamma && lmax <= gamma + 1e-8 * gamma {
            eig_ok += 1;
        }
        let rep = audit_lemmas(
            &pb,
            &params,
            &truth,
            eps,
            &setup.table,
            &setup.lipschitz,
            cert,
        )
        .unwrap();
        if rep.all_pass() {
            audit_ok += 1;
        }
    }
    Verdict::new(
        eig_ok == 100 && audit_ok == 100,
        format!(
            "eps = {eps:.3e}, xi = {xi:.3e}, gamma = {gamma:.3e}; eigenvalues in [{lo:.3e}, {hi:.3e}]; sandwich holds at {eig_ok}/100, audit at {audit_ok}/100"
        ),
    )
}

fn success_curve() -> (SuccessCurve, Vec<u8>) {
    let cfg = config("interleaved_lorentz.toml");
    let cert = certify(&cfg, DELTA).unwrap().certificate;
    let curve = monte_carlo(&cfg, DELTA, Some(&cert)).unwrap();
    let mut bytes = Vec::new();
    curve.write_csv(&mut bytes).unwrap();
    (curve, bytes)
}

fn monte_carlo_verdict(curve: &SuccessCurve) -> Verdict {
    let eps0 = curve.epsilon_0.unwrap_or(0.0);
    let below: Vec<_> = curve.bins.iter().filter(|b| b.distance < eps0).collect();
    let below_ok = below.iter().all(|b| b.successes == b.trials);
    let above_fail = curve
        .bins
        .iter()
        .any(|b| b.distance > 10.0 * eps0 && b.rate < 1.0);
    let rates: Vec<String> = curve
        .bins
        .iter()
        .map(|b| format!("{:.2}", b.rate))
        .collect();
    let eps_note = match curve.epsilon_0 {
        Some(e) => format!("epsilon0 = {e:.3e}"),
        None => "certificate infeasible, epsilon0 = 0 and no bin lies below it".into(),
    };
    Verdict::new(
        below_ok && above_fail,
        format!(
            "{eps_note}; {} bins below epsilon0 all at rate 1: {below_ok}; a bin above 10 epsilon0 below rate 1: {above_fail}; rates [{}] over distances {:.0e}..{:.0e}",
            below.len(),
            rates.join(", "),
            curve.bins[0].distance,
            curve.bins[curve.bins.len() - 1].distance
        ),
    )
}

fn radius_trend() -> Verdict {
    let cfg = config("interleaved_lorentz.toml");
    let certs: Vec<_> = cfg
        .deltas
        .iter()
        .map(|&d| certify(&cfg, d).unwrap().certificate)
        .collect();
    let eps: Vec<f64> = certs.iter().map(|c| c.epsilon_0).collect();
    let decreasing = eps.windows(2).all(|w| w[1] < w[0]);
    let feasible: Vec<bool> = certs.iter().map(|c| c.feasible).collect();
    Verdict::new(
        decreasing,
        format!(
            "Delta {} -> epsilon0 {}, feasible {feasible:?}, c- {}, r* {}",
            sci(&cfg.deltas),
            sci(&eps),
            sci(&certs.iter().map(|c| c.c_minus).collect::<Vec<_>>()),
            sci(&certs.iter().map(|c| c.r_star).collect::<Vec<_>>())
        ),
    )
}

fn libs_round_trips() -> (Vec<f64>, Vec<u8>) {
    let db = synthetic_al_si_database();
    let map = ConcentrationMap::from_strengths(&db).unwrap();
    let family = Arc::new(LorentzKernel::new());
    let settings = FitSettings::default();
    let mut errors = Vec::new();
    let mut bytes = Vec::new();
    for seed in 0..20 {
        let spec = synthetic_al_si_spectrum(seed, Some(40.0));
        let (rt, obs, fit) = round_trip(&db, &map, family.clone(), &spec, &settings).unwrap();
        let num: f64 = rt
            .nu_hat
            .iter()
            .zip(&spec.nu)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = spec.nu.iter().map(|v| v * v).sum::<f64>().sqrt();
        errors.push(num / den);
        obs.write_csv(&mut bytes).unwrap();
        write_fit_csv(&obs, &fit, &mut bytes).unwrap();
    }
    (errors, bytes)
}

fn libs_verdict(errors: &[f64]) -> Verdict {
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    Verdict::new(
        mean <= 0.01,
        format!(
            "{} seeds at 40 dB: mean relative concentration error {:.3}% (tol 1%), worst {:.3}%",
            errors.len(),
            100.0 * mean,
            100.0 * worst
        ),
    )
}

#[allow(clippy::vec_init_then_push)]
fn main() {
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let mut results = Vec::new();
    results.push(run_criterion(
        1,
        "derivative correctness",
        minutes(1),
        derivatives,
    ));
    results.push(run_criterion(
        2,
        "Lorentz correlation oracle",
        minutes(1),
        correlation_oracle,
    ));
    results.push(run_criterion(
        3,
        "coherence and interference asymptotics",
        minutes(1),
        coherence_asymptotics,
    ));
    results.push(run_criterion(
        4,
        "Hessian sandwich and lemma audit",
        minutes(5),
        sandwich_audit,
    ));
    let mut first_mc = None;
    results.push(run_criterion(
        5,
        "Monte Carlo success curve",
        minutes(10),
        || {
            let (curve, bytes) = success_curve();
            let v = monte_carlo_verdict(&curve);
            first_mc = Some(bytes);
            v
        },
    ));
    results.push(run_criterion(
        6,
        "certified radius against separation",
        minutes(2),
        radius_trend,
    ));
    let mut first_libs = None;
    results.push(run_criterion(
        7,
        "synthetic LIBS round trip",
        minutes(5),
        || {
            let (errors, bytes) = libs_round_trips();
            first_libs = Some(bytes);
            libs_verdict(&errors)
        },
    ));
    results.push(run_criterion(8, "determinism of criteria 5 and 7", minutes(15), || {
        let (_, mc) = success_curve();
        let (_, libs) = libs_round_trips();
        let mc_same = first_mc.as_deref() == Some(mc.as_slice());
        let libs_same = first_libs.as_deref() == Some(libs.as_slice());
        Verdict::new(
            mc_same && libs_same,
            format!(
                "Monte Carlo CSV ({} bytes) identical: {mc_same}; LIBS CSVs ({} bytes) identical: {libs_same}",
                mc.len(),
                libs.len()
            ),
        )
    }));
    let results: Vec<bool> = results.into_iter().flatten().collect();
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed} of {} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
