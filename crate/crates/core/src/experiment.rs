//! Synthetic experiments: certified radii across separations, restricted loss
//! landscapes over `(θ₁, θ₂)` and Monte Carlo success curves of the local
//! solver against the initialization distance.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{compute_constants, BasinCertificate, RStarGrouping};
use crate::error::{Error, Result};
use crate::hessian::LossProblem;
use crate::kernels::{KernelFamily, LorentzKernel, Order};
use crate::metrics::{estimate_lipschitz, CoherenceTable, LipschitzEstimates, SeriesSettings};
use crate::model::{build_dictionary_upto, MixtureParams, SamplingGrid, SupportSpec};
use crate::solver::{solve, SolveConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportRecipe {
    /// Spikes per modality, placed by round-robin interleaving at spacing Δ.
    #[serde(default)]
    pub counts: Vec<usize>,
    /// Explicit locations; overrides `counts` and the Δ list.
    #[serde(default)]
    pub locations: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsRecipe {
    pub theta: Vec<f64>,
    /// Explicit amplitudes; when absent every spike of modality `i` gets `1/L_i`.
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub trials: usize,
    pub bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
    /// Perturb `η` jointly with `θ` instead of starting at `η*`.
    pub joint_eta: bool,
    /// Success when `‖θ̂ - θ*‖∞ <= success_rel_tol · ‖θ*‖∞`.
    pub success_rel_tol: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            bins: 12,
            d_min: 1e-7,
            d_max: 1e-1,
            seed: 0,
            joint_eta: false,
            success_rel_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub resolution: usize,
    /// The θ box spans `θ*_i · 10^[-decades, +decades]` on each axis.
    pub decades: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            resolution: 41,
            decades: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub series: SeriesSettings,
    /// Half-width of the Lipschitz sampling box relative to `θ*`.
    pub lipschitz_rel_box: f64,
    pub lipschitz_samples: usize,
    pub grouping: RStarGrouping,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            series: SeriesSettings::default(),
            lipschitz_rel_box: 0.1,
            lipschitz_samples: 21,
            grouping: RStarGrouping::FullBracket,
        }
    }
}

fn default_family() -> String {
    "lorentz".into()
}

fn default_deltas() -> Vec<f64> {
    vec![1e-3, 5e-4, 2.5e-4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_family")]
    pub family: String,
    pub grid: SamplingGrid,
    pub support: SupportRecipe,
    pub params: ParamsRecipe,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub montecarlo: MonteCarloConfig,
    #[serde(default)]
    pub landscape: LandscapeConfig,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        SamplingGrid::new(self.grid.width, self.grid.len)?;
        self.family_impl()?;
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Validation(
                "deltas must be a non-empty list of positive values".into(),
            ));
        }
        let p = self.params.theta.len();
        match &self.support.locations {
            Some(l) if l.len() != p => {
                return Err(Error::Validation(format!(
                    "{} location groups for {p} modalities",
                    l.len()
                )))
            }
            None if self.support.counts.len() != p => {
                return Err(Error::Validation(format!(
                    "{} spike counts for {p} modalities",
                    self.support.counts.len()
                )))
            }
            _ => {}
        }
        let mc = &self.montecarlo;
        if mc.trials == 0 || mc.bins == 0 || !(mc.d_min > 0.0 && mc.d_max >= mc.d_min) {
            return Err(Error::Validation(
                "montecarlo needs trials, bins >= 1 and 0 < d_min <= d_max".into(),
            ));
        }
        if !(mc.success_rel_tol > 0.0) {
            return Err(Error::Validation("success_rel_tol must be positive".into()));
        }
        if self.landscape.resolution < 2 || !(self.landscape.decades > 0.0) {
            return Err(Error::Validation(
                "landscape needs resolution >= 2 and decades > 0".into(),
            ));
        }
        if !(self.metrics.lipschitz_rel_box > 0.0 && self.metrics.lipschitz_rel_box < 1.0)
            || self.metrics.lipschitz_samples < 2
        {
            return Err(Error::Validation(
                "lipschitz box must be in (0, 1) with >= 2 samples".into(),
            ));
        }
        Ok(())
    }

    pub fn family_impl(&self) -> Result<Arc<dyn KernelFamily>> {
        match self.family.to_ascii_lowercase().as_str() {
            "lorentz" | "lorentzian" | "cauchy" => Ok(Arc::new(LorentzKernel::new())),
            other => Err(Error::Validation(format!(
                "unknown kernel family '{other}'"
            ))),
        }
    }

    pub fn support_for(&self, delta: f64) -> Result<SupportSpec> {
        match &self.support.locations {
            Some(l) => SupportSpec::new(l.clone()),
            None => SupportSpec::interleaved(delta, &self.support.counts),
        }
    }

    pub fn truth(&self, support: &SupportSpec) -> Result<MixtureParams> {
        let params = match &self.params.eta {
            Some(eta) => MixtureParams::new(self.params.theta.clone(), eta.clone()),
            None => MixtureParams::uniform_eta(self.params.theta.clone(), support),
        };
        params.check(support)?;
        Ok(params)
    }

    /// Log-spaced Monte Carlo distances.
    pub fn distances(&self) -> Vec<f64> {
        log_space(
            self.montecarlo.d_min,
            self.montecarlo.d_max,
            self.montecarlo.bins,
        )
    }

    pub fn problem(&self, delta: f64) -> Result<(LossProblem, MixtureParams)> {
        let support = self.support_for(delta)?;
        let truth = self.truth(&support)?;
        let pb = LossProblem::from_ground_truth(self.family_impl()?, self.grid, support, &truth)?;
        Ok((pb, truth))
    }
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => (a + (b - a) * k as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Everything needed to certify one separation.
#[derive(Clone, Debug)]
pub struct CertifiedSetup {
    pub delta: f64,
    pub support: SupportSpec,
    pub truth: MixtureParams,
    pub table: CoherenceTable,
    pub lipschitz: LipschitzEstimates,
    pub certificate: BasinCertificate,
}

pub fn certify(cfg: &ExperimentConfig, delta: f64) -> Result<CertifiedSetup> {
    let family = cfg.family_impl()?;
    let support = cfg.support_for(delta)?;
    let truth = cfg.truth(&support)?;
    let sep = support.min_separation();
    if sep.degenerate {
        return Err(Error::Input("certificate needs at least two spikes".into()));
    }
    let d = sep.delta;
    let m = &cfg.metrics;
    let table = CoherenceTable::build(family.as_ref(), &cfg.grid, &truth.theta, &[d], &m.series)?;
    let theta_box: Vec<(f64, f64)> = truth
        .theta
        .iter()
        .map(|t| {
            (
                t * (1.0 - m.lipschitz_rel_box),
                t * (1.0 + m.lipschitz_rel_box),
            )
        })
        .collect();
    let lipschitz = estimate_lipschitz(
        family.as_ref(),
        &cfg.grid,
        &support,
        d,
        &theta_box,
        m.lipschitz_samples,
        &m.series,
    )?;
    let certificate = compute_constants(&table, &lipschitz, &support, &truth, m.grouping)?;
    Ok(CertifiedSetup {
        delta: d,
        support,
        truth,
        table,
        lipschitz,
        certificate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    /// `loss[(k1, k2)] = L((theta1[k1], theta2[k2]), η*)`.
    pub loss: DMatrix<f64>,
    pub epsilon_0: Option<f64>,
}

impl Landscape {
    pub fn argmin(&self) -> (usize, usize) {
        let (mut best, mut at) = (f64::INFINITY, (0, 0));
        for k1 in 0..self.theta1.len() {
            for k2 in 0..self.theta2.len() {
                if self.loss[(k1, k2)] < best {
                    best = self.loss[(k1, k2)];
                    at = (k1, k2);
                }
            }
        }
        at
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["theta1", "theta2", "loss"])?;
        for (k1, t1) in self.theta1.iter().enumerate() {
            for (k2, t2) in self.theta2.iter().enumerate() {
                out.write_record([
                    t1.to_string(),
                    t2.to_string(),
                    self.loss[(k1, k2)].to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn axis(center: f64, decades: f64, n: usize, domain: (f64, f64)) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let e = if 2 * k + 1 == n {
                0.0
            } else {
                decades * (2.0 * k as f64 / (n - 1) as f64 - 1.0)
            };
            (center * 10f64.powf(e)).clamp(domain.0, domain.1)
        })
        .collect()
}

/// Restricted loss `θ ↦ L(θ, η*)` on a log-spaced box around `θ*` (two modalities).
pub fn landscape(
    cfg: &ExperimentConfig,
    delta: f64,
    cert: Option<&BasinCertificate>,
) -> Result<Landscape> {
    let (pb, truth) = cfg.problem(delta)?;
    if truth.theta.len() != 2 {
        return Err(Error::Input(format!(
            "2-D landscape needs exactly 2 modalities, got {}",
            truth.theta.len()
        )));
    }
    let dom = pb.family.domain();
    let n = cfg.landscape.resolution;
    let theta1 = axis(truth.theta[0], cfg.landscape.decades, n, (dom.lo, dom.hi));
    let theta2 = axis(truth.theta[1], cfg.landscape.decades, n, (dom.lo, dom.hi));
    let values: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let q = MixtureParams::new(vec![theta1[idx / n], theta2[idx % n]], truth.eta.clone());
            pb.loss(&q)
        })
        .collect::<Result<_>>()?;
    Ok(Landscape {
        loss: DMatrix::from_row_slice(n, n, &values),
        theta1,
        theta2,
        epsilon_0: cert.filter(|c| c.feasible).map(|c| c.epsilon_0),
    })
}

/// `L(θ*_1 + s, θ*_2, …)`-style slice along modality `axis_index` for any `p`.
pub fn landscape_slice(
    cfg: &ExperimentConfig,
    delta: f64,
    axis_index: usize,
) -> Result<Vec<(f64, f64)>> {
    let (pb, truth) = cfg.problem(delta)?;
    if axis_index >= truth.theta.len() {
        return Err(Error::Input(format!("axis {axis_index} out of range")));
    }
    let dom = pb.family.domain();
    let xs = axis(
        truth.theta[axis_index],
        cfg.landscape.decades,
        cfg.landscape.resolution,
        (dom.lo, dom.hi),
    );
    xs.par_iter()
        .map(|&x| {
            let mut q = truth.clone();
            q.theta[axis_index] = x;
            Ok((x, pb.loss(&q)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub distance: f64,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub delta: f64,
    pub bins: Vec<CurveBin>,
    /// Certified radius, omitted when the certificate is infeasible.
    pub epsilon_0: Option<f64>,
}

impl SuccessCurve {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["distance", "trials", "successes", "rate", "epsilon0"])?;
        let eps = self.epsilon_0.map(|e| e.to_string()).unwrap_or_default();
        for b in &self.bins {
            out.write_record([
                b.distance.to_string(),
                b.trials.to_string(),
                b.successes.to_string(),
                b.rate.to_string(),
                eps.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Isotonic (non-increasing) fit of the rates and whether every raw rate
    /// lies within `z` binomial standard errors of it.
    pub fn monotone_trend(&self, z: f64) -> (Vec<f64>, bool) {
        let rates: Vec<f64> = self.bins.iter().map(|b| b.rate).collect();
        let weights: Vec<f64> = self.bins.iter().map(|b| b.trials as f64).collect();
        let fit = isotonic_nonincreasing(&rates, &weights);
        let ok = self.bins.iter().zip(&fit).all(|(b, f)| {
            let se = (f * (1.0 - f) / b.trials as f64)
                .sqrt()
                .max(0.5 / b.trials as f64);
            (b.rate - f).abs() <= z * se
        });
        (fit, ok)
    }
}

/// Weighted pool-adjacent-violators fit constrained to be non-increasing.
pub fn isotonic_nonincreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, n1 + n2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Uniform sample on the `∞`-sphere of radius `d` in `ℝⁿ`.
pub fn sample_inf_sphere(rng: &mut impl Rng, n: usize, d: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-d..=d)).collect();
    let face = rng.gen_range(0..n);
    v[face] = if rng.gen::<bool>() { d } else { -d };
    v
}

/// Generator for trial `trial` of bin `bin`: the seed selects the key and
/// `(bin, trial)` the stream, so results do not depend on scheduling.
pub fn trial_rng(seed: u64, bin: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((bin as u64) << 32) | trial as u64);
    rng
}

/// Whether one solve from `θ* + offset` recovers `θ*`.
fn run_trial(
    pb: &LossProblem,
    truth: &MixtureParams,
    cfg: &ExperimentConfig,
    d: f64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let p = truth.theta.len();
    let dom = pb.family.domain();
    let bounds: Vec<(f64, f64)> = match &cfg.solver.theta_bounds {
        Some(b) => b
            .iter()
            .map(|&(lo, hi)| (lo.max(dom.lo), hi.min(dom.hi)))
            .collect(),
        None => vec![(dom.lo, dom.hi); p],
    };
    let mut init = truth.clone();
    let dim = if cfg.montecarlo.joint_eta {
        truth.dim()
    } else {
        p
    };
    let offset = sample_inf_sphere(rng, dim, d);
    for i in 0..p {
        init.theta[i] = (truth.theta[i] + offset[i]).clamp(bounds[i].0, bounds[i].1);
    }
    if cfg.montecarlo.joint_eta {
        for (k, e) in init.eta.iter_mut().enumerate() {
            *e += offset[p + k];
        }
    }
    let tol =
        cfg.montecarlo.success_rel_tol * truth.theta.iter().map(|t| t.abs()).fold(0.0, f64::max);
    match solve(pb, &init, &cfg.solver, Some(truth)) {
        Ok(rep) => Ok(rep.distance.map(|(dt, _)| dt <= tol).unwrap_or(false)),
        Err(e) if e.is_numerical() => Ok(false),
        Err(e) => Err(e),
    }
}

/// Success rate of the configured solver per initialization distance.
pub fn monte_carlo(
    cfg: &ExperimentConfig,
    delta: f64,
    cert: Option<&BasinCertificate>,
) -> Result<SuccessCurve> {
    monte_carlo_at(cfg, delta, &cfg.distances(), cert)
}

/// [`monte_carlo`] over explicit distances.
pub fn monte_carlo_at(
    cfg: &ExperimentConfig,
    delta: f64,
    distances: &[f64],
    cert: Option<&BasinCertificate>,
) -> Result<SuccessCurve> {
    let (pb, truth) = cfg.problem(delta)?;
    let trials = cfg.montecarlo.trials;
    let outcomes: Vec<bool> = (0..distances.len() * trials)
        .into_par_iter()
        .map(|idx| {
            let (bin, trial) = (idx / trials, idx % trials);
            let mut rng = trial_rng(cfg.montecarlo.seed, bin, trial);
            run_trial(&pb, &truth, cfg, distances[bin], &mut rng)
        })
        .collect::<Result<_>>()?;
    let bins = distances
        .iter()
        .enumerate()
        .map(|(b, &d)| {
            let successes = outcomes[b * trials..(b + 1) * trials]
                .iter()
                .filter(|&&s| s)
                .count();
            CurveBin {
                distance: d,
                trials,
                successes,
                rate: successes as f64 / trials as f64,
            }
        })
        .collect();
    Ok(SuccessCurve {
        delta: pb.support.min_separation().delta,
        bins,
        epsilon_0: cert.filter(|c| c.feasible).map(|c| c.epsilon_0),
    })
}

/// Axis/scale description for the CSV outputs, consumable by any plotting tool.
pub fn plot_spec() -> String {
    "\
[coherence]
file = \"coherence.csv\"
x = \"Delta\"
y = \"C\"
x_scale = \"log\"
y_scale = \"log\"
series = [\"a\", \"b\", \"i\", \"j\"]

[interference]
file = \"interference.csv\"
x = \"Delta\"
y = \"I\"
x_scale = \"log\"
y_scale = \"log\"
series = [\"a\", \"i\"]

[landscape]
file = \"landscape.csv\"
x = \"theta1\"
y = \"theta2\"
z = \"loss\"
x_scale = \"log\"
y_scale = \"log\"
kind = \"contour\"
overlay = \"epsilon0 square around theta*\"

[success]
file = \"success.csv\"
x = \"distance\"
y = \"rate\"
x_scale = \"log\"
y_scale = \"linear\"
vline = \"epsilon0\"
"
    .to_string()
}

/// Build `G₀` at the ground truth for a configured separation.
pub fn truth_dictionary(
    cfg: &ExperimentConfig,
    delta: f64,
) -> Result<crate::model::DictionaryStack> {
    let support = cfg.support_for(delta)?;
    let truth = cfg.truth(&support)?;
    build_dictionary_upto(
        cfg.family_impl()?.as_ref(),
        &cfg.grid,
        &support,
        &truth.theta,
        Order::Value,
    )
}
