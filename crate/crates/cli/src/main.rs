mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use spikemix::certificate::BasinCertificate;
use spikemix::experiment::{self, ExperimentConfig};
use spikemix::libs::{
    self, ConcentrationMap, FitSettings, LineDatabase, SpectrumObservation, SyntheticSpectrum,
};
use spikemix::metrics::CoherenceTable;
use spikemix::model::MixtureParams;
use spikemix::solver::solve;
use spikemix::{Error, Result};

use output::{sha256_hex, InputRecord, Manifest, OutputDir};

#[derive(Parser, Debug)]
#[command(
    name = "spikemix",
    version,
    about = "Spike-mixture fitting and basin certification"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo and metric tables (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with status 2 when a computed certificate is infeasible.
    #[arg(long, global = true)]
    require_feasible: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coherence tables, Lipschitz estimates and the basin certificate per separation.
    Certify(DeltaArgs),
    /// One local solve from a perturbed or explicit initialization.
    Solve(SolveArgs),
    /// Loss over a log-spaced (theta1, theta2) grid at fixed amplitudes.
    Landscape(CertArgs),
    /// Success rate against initialization distance.
    Montecarlo(CertArgs),
    /// Coherence and interference tables at the configured widths and separations.
    Metrics,
    /// Baseline correction, fit and concentration estimate for a measured spectrum.
    LibsFit(LibsFitArgs),
    /// Generate a synthetic spectrum from a line list.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct DeltaArgs {
    /// Only this separation instead of the configured list.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct CertArgs {
    #[command(flatten)]
    delta: DeltaArgs,
    /// Do not compute the certificate used to annotate epsilon0.
    #[arg(long)]
    skip_certificate: bool,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    delta: DeltaArgs,
    /// Initial widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    init_theta: Option<Vec<f64>>,
    /// Relative perturbation of the true widths when --init-theta is absent.
    #[arg(long, default_value_t = 0.05)]
    perturb: f64,
}

#[derive(Args, Debug)]
struct LibsFitArgs {
    /// Spectrum CSV: wavelength_nm,intensity[,transfer].
    #[arg(long)]
    spectrum: PathBuf,
    /// Line list CSV.
    #[arg(long)]
    lines: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Line list CSV; the built-in Al/Si fixture when absent.
    #[arg(long)]
    lines: Option<PathBuf>,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(run(argv))
}

fn run(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let informational =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            if informational {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(&cli, argv) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::Infeasible) => {
            eprintln!("error: certificate infeasible and --require-feasible was set");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

enum Outcome {
    Success,
    Infeasible,
}

struct Run {
    out: OutputDir,
    inputs: Vec<InputRecord>,
    config_sha256: Option<String>,
}

impl Run {
    fn new(g: &GlobalArgs) -> Result<Self> {
        let mut run = Self {
            out: OutputDir::create(&g.out)?,
            inputs: Vec::new(),
            config_sha256: None,
        };
        if let Some(path) = &g.config {
            let bytes = run.record_input("config", path)?;
            run.config_sha256 = Some(sha256_hex(&bytes));
        }
        Ok(run)
    }

    fn record_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputRecord {
            role: role.into(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn finish<T: Serialize>(
        mut self,
        cli: &Cli,
        argv: Vec<String>,
        seed: Option<u64>,
        settings: &T,
    ) -> Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: spikemix::VERSION,
            command: command_name(&cli.command).into(),
            argv,
            seed,
            threads: cli.global.threads,
            config_sha256: self.config_sha256.take(),
            inputs: std::mem::take(&mut self.inputs),
            effective_settings: serde_json::to_value(settings)?,
            outputs: self.out.outputs().clone(),
        };
        self.out.write_json("manifest.json", &manifest)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Certify(_) => "certify",
        Command::Solve(_) => "solve",
        Command::Landscape(_) => "landscape",
        Command::Montecarlo(_) => "montecarlo",
        Command::Metrics => "metrics",
        Command::LibsFit(_) => "libs-fit",
        Command::Synth(_) => "synth",
    }
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<Outcome> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    match &cli.command {
        Command::Certify(a) => cmd_certify(cli, argv, a),
        Command::Solve(a) => cmd_solve(cli, argv, a),
        Command::Landscape(a) => cmd_landscape(cli, argv, a),
        Command::Montecarlo(a) => cmd_montecarlo(cli, argv, a),
        Command::Metrics => cmd_metrics(cli, argv),
        Command::LibsFit(a) => cmd_libs_fit(cli, argv, a),
        Command::Synth(a) => cmd_synth(cli, argv, a),
    }
}

fn load_experiment(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Validation("this command needs --config".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = g.seed {
        cfg.montecarlo.seed = seed;
    }
    Ok(cfg)
}

fn selected_deltas(cfg: &ExperimentConfig, a: &DeltaArgs) -> Result<Vec<f64>> {
    match a.delta {
        Some(d) if d > 0.0 && d.is_finite() => Ok(vec![d]),
        Some(d) => Err(Error::Validation(format!(
            "--delta must be positive, got {d}"
        ))),
        None => Ok(cfg.deltas.clone()),
    }
}

fn tag(delta: f64) -> String {
    format!("{delta:e}")
}

fn maybe_certificate(
    cfg: &ExperimentConfig,
    delta: f64,
    skip: bool,
) -> Result<Option<BasinCertificate>> {
    if skip {
        return Ok(None);
    }
    Ok(Some(experiment::certify(cfg, delta)?.certificate))
}

fn cmd_certify(cli: &Cli, argv: Vec<String>, a: &DeltaArgs) -> Result<Outcome> {
    let cfg = load_experiment(&cli.global)?;
    let mut run = Run::new(&cli.global)?;
    let mut all_feasible = true;
    for delta in selected_deltas(&cfg, a)? {
        let setup = experiment::certify(&cfg, delta)?;
        let t = tag(delta);
        let c = &setup.certificate;
        run.out.write_bytes(
            &format!("certificate_{t}.json"),
            (c.to_json()? + "\n").as_bytes(),
        )?;
        run.out
            .write_json(&format!("lipschitz_{t}.json"), &setup.lipschitz)?;
        run.out.write_with(&format!("coherence_{t}.csv"), |w| {
            setup.table.write_coherence_csv(w)
        })?;
        run.out.write_with(&format!("interference_{t}.csv"), |w| {
            setup.table.write_interference_csv(w)
        })?;
        println!(
            "delta={t} c-={:e} c+={:e} r*={:e} q*={:e} feasible={} epsilon0={:e}",
            c.c_minus, c.c_plus, c.r_star, c.q_star, c.feasible, c.epsilon_0
        );
        all_feasible &= c.feasible;
    }
    run.finish(cli, argv, None, &cfg)?;
    Ok(if cli.global.require_feasible && !all_feasible {
        Outcome::Infeasible
    } else {
        Outcome::Success
    })
}

fn cmd_solve(cli: &Cli, argv: Vec<String>, a: &SolveArgs) -> Result<Outcome> {
    let cfg = load_experiment(&cli.global)?;
    let delta = selected_deltas(&cfg, &a.delta)?[0];
    let (pb, truth) = cfg.problem(delta)?;
    let theta = match &a.init_theta {
        Some(t) => t.clone(),
        None => truth.theta.iter().map(|t| t * (1.0 + a.perturb)).collect(),
    };
    let init = MixtureParams::new(theta, truth.eta.clone());
    let mut run = Run::new(&cli.global)?;
    let report = solve(&pb, &init, &cfg.solver, Some(&truth))?;
    run.out.write_json("solve.json", &report)?;
    run.out
        .write_with("trace.csv", |w| report.write_trace_csv(w))?;
    println!(
        "converged={} iterations={} loss={:e} theta={:?}",
        report.converged,
        report.iterations,
        report.loss_trace.last().copied().unwrap_or(f64::NAN),
        report.params.theta
    );
    #[derive(Serialize)]
    struct Settings<'a> {
        config: &'a ExperimentConfig,
        delta: f64,
        init: &'a MixtureParams,
    }
    run.finish(
        cli,
        argv,
        None,
        &Settings {
            config: &cfg,
            delta,
            init: &init,
        },
    )?;
    Ok(Outcome::Success)
}

fn cmd_landscape(cli: &Cli, argv: Vec<String>, a: &CertArgs) -> Result<Outcome> {
    let cfg = load_experiment(&cli.global)?;
    let mut run = Run::new(&cli.global)?;
    let mut infeasible = false;
    for delta in selected_deltas(&cfg, &a.delta)? {
        let cert = maybe_certificate(&cfg, delta, a.skip_certificate)?;
        infeasible |= cert.as_ref().is_some_and(|c| !c.feasible);
        let land = experiment::landscape(&cfg, delta, cert.as_ref())?;
        run.out
            .write_with(&format!("landscape_{}.csv", tag(delta)), |w| {
                land.write_csv(w)
            })?;
        let (k1, k2) = land.argmin();
        println!(
            "delta={} argmin=({:e}, {:e})",
            tag(delta),
            land.theta1[k1],
            land.theta2[k2]
        );
    }
    run.out
        .write_bytes("plot_spec.toml", experiment::plot_spec().as_bytes())?;
    run.finish(cli, argv, None, &cfg)?;
    Ok(feasibility_outcome(cli, infeasible))
}

fn cmd_montecarlo(cli: &Cli, argv: Vec<String>, a: &CertArgs) -> Result<Outcome> {
    let cfg = load_experiment(&cli.global)?;
    let mut run = Run::new(&cli.global)?;
    let mut infeasible = false;
    for delta in selected_deltas(&cfg, &a.delta)? {
        let cert = maybe_certificate(&cfg, delta, a.skip_certificate)?;
        infeasible |= cert.as_ref().is_some_and(|c| !c.feasible);
        let curve = experiment::monte_carlo(&cfg, delta, cert.as_ref())?;
        run.out
            .write_with(&format!("success_{}.csv", tag(delta)), |w| {
                curve.write_csv(w)
            })?;
        let rates: Vec<String> = curve
            .bins
            .iter()
            .map(|b| format!("{:.2}", b.rate))
            .collect();
        println!("delta={} rates=[{}]", tag(delta), rates.join(", "));
    }
    run.out
        .write_bytes("plot_spec.toml", experiment::plot_spec().as_bytes())?;
    run.finish(cli, argv, Some(cfg.montecarlo.seed), &cfg)?;
    Ok(feasibility_outcome(cli, infeasible))
}

fn feasibility_outcome(cli: &Cli, infeasible: bool) -> Outcome {
    if cli.global.require_feasible && infeasible {
        Outcome::Infeasible
    } else {
        Outcome::Success
    }
}

fn cmd_metrics(cli: &Cli, argv: Vec<String>) -> Result<Outcome> {
    let cfg = load_experiment(&cli.global)?;
    let family = cfg.family_impl()?;
    let mut run = Run::new(&cli.global)?;
    let table = CoherenceTable::build(
        family.as_ref(),
        &cfg.grid,
        &cfg.params.theta,
        &cfg.deltas,
        &cfg.metrics.series,
    )?;
    run.out
        .write_with("coherence.csv", |w| table.write_coherence_csv(w))?;
    run.out
        .write_with("interference.csv", |w| table.write_interference_csv(w))?;
    run.out
        .write_bytes("plot_spec.toml", experiment::plot_spec().as_bytes())?;
    println!(
        "{} coherence rows, {} interference rows",
        table.coherence.len(),
        table.interference.len()
    );
    run.finish(cli, argv, None, &cfg)?;
    Ok(Outcome::Success)
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Serialize)]
struct FitSummary {
    species: Vec<String>,
    theta_hat: Vec<f64>,
    eta_hat: Vec<f64>,
    nu_hat: Vec<f64>,
    converged: bool,
    iterations: usize,
    residual_norm: f64,
    relative_residual: f64,
    negative_eta: Vec<usize>,
}

fn cmd_libs_fit(cli: &Cli, argv: Vec<String>, a: &LibsFitArgs) -> Result<Outcome> {
    let mut run = Run::new(&cli.global)?;
    let settings: FitSettings = match &cli.global.config {
        Some(p) => load_toml(p)?,
        None => FitSettings::default(),
    };
    run.record_input("spectrum", &a.spectrum)?;
    run.record_input("lines", &a.lines)?;
    let db = LineDatabase::from_path(&a.lines)?;
    let mut obs = SpectrumObservation::from_path(&a.spectrum)?;
    obs.preprocess(&settings.baseline)?;
    let map = ConcentrationMap::from_strengths(&db)?;
    let family = std::sync::Arc::new(spikemix::kernels::LorentzKernel::new());
    let fit = libs::fit_spectrum(&db, &obs, family, None, &settings)?;
    let nu_hat = libs::estimate_concentrations(&map, &fit.report.params.eta)?;
    let summary = FitSummary {
        species: db.species(),
        theta_hat: fit.report.params.theta.clone(),
        eta_hat: fit.report.params.eta.clone(),
        nu_hat,
        converged: fit.report.converged,
        iterations: fit.report.iterations,
        residual_norm: fit.residual_norm,
        relative_residual: fit.relative_residual,
        negative_eta: fit.negative_eta.clone(),
    };
    run.out.write_json("fit.json", &summary)?;
    run.out
        .write_with("fit.csv", |w| libs::write_fit_csv(&obs, &fit, w))?;
    run.out
        .write_with("trace.csv", |w| fit.report.write_trace_csv(w))?;
    let parts: Vec<String> = summary
        .species
        .iter()
        .zip(&summary.nu_hat)
        .map(|(s, v)| format!("{s}={v:.4}"))
        .collect();
    println!(
        "nu_hat: {} (relative residual {:.3e})",
        parts.join(" "),
        summary.relative_residual
    );
    run.finish(cli, argv, None, &settings)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct SynthTruth {
    species: Vec<String>,
    nu: Vec<f64>,
    theta: Vec<f64>,
    eta: Vec<f64>,
}

fn cmd_synth(cli: &Cli, argv: Vec<String>, a: &SynthArgs) -> Result<Outcome> {
    let mut run = Run::new(&cli.global)?;
    let db = match &a.lines {
        Some(p) => {
            run.record_input("lines", p)?;
            LineDatabase::from_path(p)?
        }
        None => libs::synthetic_al_si_database(),
    };
    let mut spec: SyntheticSpectrum = match &cli.global.config {
        Some(p) => load_toml(p)?,
        None => libs::synthetic_al_si_spectrum(0, Some(40.0)),
    };
    if let Some(seed) = cli.global.seed {
        spec.seed = seed;
    }
    let map = ConcentrationMap::from_strengths(&db)?;
    let family = spikemix::kernels::LorentzKernel::new();
    let (obs, truth) = libs::synthesize_spectrum(&db, &map, &family, &spec)?;
    run.out.write_with("spectrum.csv", |w| obs.write_csv(w))?;
    run.out.write_with("lines.csv", |w| db.write_csv(w))?;
    run.out.write_json(
        "truth.json",
        &SynthTruth {
            species: db.species(),
            nu: spec.nu.clone(),
            theta: truth.theta,
            eta: truth.eta,
        },
    )?;
    println!(
        "{} samples written to {}",
        obs.len(),
        run.out.path("spectrum.csv").display()
    );
    run.finish(cli, argv, Some(spec.seed), &spec)?;
    Ok(Outcome::Success)
}
