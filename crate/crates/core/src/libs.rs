//! Laser-induced breakdown spectroscopy: line databases, baseline removal,
//! transfer-function weighted fitting and concentration estimates.
//!
//! Wavelengths are measured in nm. A spectrum on `[λ_lo, λ_hi]` maps to a
//! [`SamplingGrid`] of width `λ_hi - λ_lo` centred on the window midpoint,
//! so line positions enter the dictionary as `λ - λ_mid`.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::LossProblem;
use crate::kernels::{KernelFamily, Order};
use crate::model::{MixtureParams, SamplingGrid, SupportSpec};
use crate::solver::{solve, solve_eta_linear, SolveConfig, SolveReport, CONDITION_LIMIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionLine {
    pub wavelength_nm: f64,
    pub strength: f64,
    pub coeff: Option<f64>,
}

/// Lines of one (species, ionization stage) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineGroup {
    pub species: String,
    pub ion: String,
    pub lines: Vec<EmissionLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineDatabase {
    /// One group per modality, in order of first appearance in the file.
    pub groups: Vec<LineGroup>,
}

#[derive(Deserialize)]
struct LineRecord {
    species: String,
    ion: String,
    wavelength_nm: f64,
    strength: f64,
    #[serde(default)]
    coeff: Option<f64>,
}

impl LineDatabase {
    /// Parse `species,ion,wavelength_nm,strength[,coeff]` CSV.
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = rdr.headers()?.clone();
        for need in ["species", "ion", "wavelength_nm", "strength"] {
            if !headers.iter().any(|h| h == need) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("missing column '{need}'"),
                });
            }
        }
        let mut groups: Vec<LineGroup> = Vec::new();
        let mut seen = HashSet::new();
        for rec in rdr.deserialize::<LineRecord>() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line_no = groups.iter().map(|g| g.lines.len() as u64).sum::<u64>() + 2;
            if rec.species.is_empty() || rec.ion.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty species or ion".into(),
                });
            }
            if !(rec.wavelength_nm > 0.0 && rec.wavelength_nm.is_finite()) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("wavelength must be positive, got {}", rec.wavelength_nm),
                });
            }
            if !(rec.strength >= 0.0 && rec.strength.is_finite()) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("strength must be non-negative, got {}", rec.strength),
                });
            }
            if let Some(c) = rec.coeff {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("coeff must be non-negative, got {c}"),
                    });
                }
            }
            let key = (
                rec.species.clone(),
                rec.ion.clone(),
                rec.wavelength_nm.to_bits(),
            );
            if !seen.insert(key) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "duplicate line {} {} {} nm",
                        rec.species, rec.ion, rec.wavelength_nm
                    ),
                });
            }
            let line = EmissionLine {
                wavelength_nm: rec.wavelength_nm,
                strength: rec.strength,
                coeff: rec.coeff,
            };
            match groups
                .iter_mut()
                .find(|g| g.species == rec.species && g.ion == rec.ion)
            {
                Some(g) => g.lines.push(line),
                None => groups.push(LineGroup {
                    species: rec.species,
                    ion: rec.ion,
                    lines: vec![line],
                }),
            }
        }
        if groups.is_empty() {
            return Err(Error::Validation("line database has no lines".into()));
        }
        for g in &mut groups {
            g.lines
                .sort_by(|a, b| a.wavelength_nm.total_cmp(&b.wavelength_nm));
        }
        Ok(Self { groups })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn modalities(&self) -> usize {
        self.groups.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.lines.len()).collect()
    }

    /// Distinct species in order of first appearance.
    pub fn species(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(&g.species) {
                out.push(g.species.clone());
            }
        }
        out
    }

    /// Line positions relative to `center`.
    pub fn support(&self, center: f64) -> Result<SupportSpec> {
        SupportSpec::new(
            self.groups
                .iter()
                .map(|g| g.lines.iter().map(|l| l.wavelength_nm - center).collect())
                .collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(["species", "ion", "wavelength_nm", "strength", "coeff"])?;
        for g in &self.groups {
            for l in &g.lines {
                out.write_record([
                    g.species.clone(),
                    g.ion.clone(),
                    l.wavelength_nm.to_string(),
                    l.strength.to_string(),
                    l.coeff.map(|c| c.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `η = A ν`: amplitudes of every line from species concentrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationMap {
    pub species: Vec<String>,
    /// `L̄ × q`, rows in line order, columns in species order.
    pub a: DMatrix<f64>,
}

impl ConcentrationMap {
    pub fn new(species: Vec<String>, a: DMatrix<f64>) -> Result<Self> {
        if a.ncols() != species.len() {
            return Err(Error::Dimension {
                what: "concentration map columns",
                expected: species.len(),
                found: a.ncols(),
            });
        }
        if a.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Validation(
                "concentration map must be entrywise non-negative".into(),
            ));
        }
        Ok(Self { species, a })
    }

    /// Column `j` holds the line strengths (or `coeff` where given) of
    /// species `j`, normalized to unit sum.
    pub fn from_strengths(db: &LineDatabase) -> Result<Self> {
        let species = db.species();
        let rows: usize = db.counts().iter().sum();
        let mut a = DMatrix::zeros(rows, species.len());
        let mut r = 0;
        for g in &db.groups {
            let j = species.iter().position(|s| *s == g.species).unwrap_or(0);
            for l in &g.lines {
                a[(r, j)] = l.coeff.unwrap_or(l.strength);
                r += 1;
            }
        }
        for mut col in a.column_iter_mut() {
            let s: f64 = col.sum();
            if s > 0.0 {
                col /= s;
            }
        }
        Self::new(species, a)
    }

    pub fn amplitudes(&self, nu: &[f64]) -> Result<Vec<f64>> {
        if nu.len() != self.species.len() {
            return Err(Error::Dimension {
                what: "concentrations",
                expected: self.species.len(),
                found: nu.len(),
            });
        }
        Ok((&self.a * DVector::from_column_slice(nu))
            .iter()
            .copied()
            .collect())
    }
}

/// Non-negative projection of the least-squares solution of `A ν ≈ η̂`.
pub fn estimate_concentrations(map: &ConcentrationMap, eta_hat: &[f64]) -> Result<Vec<f64>> {
    let a = &map.a;
    if eta_hat.len() != a.nrows() {
        return Err(Error::Dimension {
            what: "eta_hat",
            expected: a.nrows(),
            found: eta_hat.len(),
        });
    }
    if a.ncols() > a.nrows() {
        return Err(Error::Conditioning {
            condition: f64::INFINITY,
            modality_a: 0,
            modality_b: 0,
        });
    }
    let sv = a.clone().singular_values();
    let cond = if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    };
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::Conditioning {
            condition: cond,
            modality_a: 0,
            modality_b: a.ncols().saturating_sub(1),
        });
    }
    let qr = a.clone().qr();
    let rhs = qr.q().tr_mul(&DVector::from_column_slice(eta_hat));
    let nu = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or(Error::Conditioning {
            condition: cond,
            modality_a: 0,
            modality_b: 0,
        })?;
    Ok(nu.iter().map(|v| v.max(0.0)).collect())
}

/// Asymmetric least-squares smoothing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub lambda: f64,
    pub asymmetry: f64,
    pub iterations: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            lambda: 1e5,
            asymmetry: 0.01,
            iterations: 10,
        }
    }
}

/// Solve `A z = b` for a symmetric positive definite pentadiagonal `A` with
/// diagonal `a0`, first superdiagonal `a1` and second superdiagonal `a2`.
fn solve_pentadiagonal(a0: &[f64], a1: &[f64], a2: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a0.len();
    let (mut l0, mut l1, mut l2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        if i >= 2 {
            l2[i] = a2[i - 2] / l0[i - 2];
        }
        if i >= 1 {
            l1[i] = (a1[i - 1] - if i >= 2 { l2[i] * l1[i - 1] } else { 0.0 }) / l0[i - 1];
        }
        l0[i] = (a0[i] - l1[i] * l1[i] - l2[i] * l2[i]).sqrt();
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        if i >= 1 {
            s -= l1[i] * y[i - 1];
        }
        if i >= 2 {
            s -= l2[i] * y[i - 2];
        }
        y[i] = s / l0[i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        if i + 1 < n {
            s -= l1[i + 1] * x[i + 1];
        }
        if i + 2 < n {
            s -= l2[i + 2] * x[i + 2];
        }
        x[i] = s / l0[i];
    }
    x
}

/// Baseline of `y` by asymmetric least squares with a second-difference penalty.
pub fn als_baseline(y: &[f64], s: &BaselineSettings) -> Vec<f64> {
    let n = y.len();
    if n < 3 {
        return y.to_vec();
    }
    let (mut d0, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n - 1], vec![0.0; n - 2]);
    for k in 0..n - 2 {
        d0[k] += 1.0;
        d0[k + 1] += 4.0;
        d0[k + 2] += 1.0;
        d1[k] -= 2.0;
        d1[k + 1] -= 2.0;
        d2[k] += 1.0;
    }
    let a1: Vec<f64> = d1.iter().map(|v| s.lambda * v).collect();
    let a2: Vec<f64> = d2.iter().map(|v| s.lambda * v).collect();
    let mut w = vec![1.0; n];
    let mut z = vec![0.0; n];
    for _ in 0..s.iterations.max(1) {
        let a0: Vec<f64> = (0..n).map(|k| w[k] + s.lambda * d0[k]).collect();
        let rhs: Vec<f64> = (0..n).map(|k| w[k] * y[k]).collect();
        z = solve_pentadiagonal(&a0, &a1, &a2, &rhs);
        for k in 0..n {
            w[k] = if y[k] > z[k] {
                s.asymmetry
            } else {
                1.0 - s.asymmetry
            };
        }
    }
    z
}

/// `b̂` from `x_obs` and the diagonal transfer function, estimated on `Ξ⁻¹ x_obs`.
pub fn estimate_baseline(x_obs: &[f64], xi: &[f64], s: &BaselineSettings) -> Result<Vec<f64>> {
    if x_obs.len() != xi.len() {
        return Err(Error::Dimension {
            what: "transfer function",
            expected: x_obs.len(),
            found: xi.len(),
        });
    }
    if xi.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Input(
            "transfer function entries must be positive".into(),
        ));
    }
    let y: Vec<f64> = x_obs.iter().zip(xi).map(|(x, t)| x / t).collect();
    Ok(als_baseline(&y, s))
}

/// A uniformly sampled spectrum with its transfer function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumObservation {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub intensities: Vec<f64>,
    pub transfer: Vec<f64>,
    pub baseline: Option<Vec<f64>>,
    pub preprocessed: Option<Vec<f64>>,
}

impl SpectrumObservation {
    pub fn new(
        lambda_lo: f64,
        lambda_hi: f64,
        intensities: Vec<f64>,
        transfer: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = intensities.len();
        SamplingGrid::new(lambda_hi - lambda_lo, n)?;
        let transfer = transfer.unwrap_or_else(|| vec![1.0; n]);
        if transfer.len() != n {
            return Err(Error::Dimension {
                what: "transfer function",
                expected: n,
                found: transfer.len(),
            });
        }
        if transfer.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Input(
                "transfer function entries must be positive".into(),
            ));
        }
        if intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("intensities must be finite".into()));
        }
        Ok(Self {
            lambda_lo,
            lambda_hi,
            intensities,
            transfer,
            baseline: None,
            preprocessed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lambda_lo + self.lambda_hi)
    }

    pub fn grid(&self) -> SamplingGrid {
        SamplingGrid {
            width: self.lambda_hi - self.lambda_lo,
            len: self.len(),
        }
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        let g = self.grid();
        let c = self.center();
        (0..g.len).map(|s| c + g.at(s)).collect()
    }

    /// Estimate the baseline and store `x̃ = x_obs - Ξ b̂`.
    pub fn preprocess(&mut self, s: &BaselineSettings) -> Result<()> {
        let b = estimate_baseline(&self.intensities, &self.transfer, s)?;
        self.preprocessed = Some(
            self.intensities
                .iter()
                .zip(&self.transfer)
                .zip(&b)
                .map(|((x, t), b)| x - t * b)
                .collect(),
        );
        self.baseline = Some(b);
        Ok(())
    }

    /// Read `wavelength_nm,intensity[,transfer]` CSV on a uniform grid.
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(wc), Some(ic)) = (col("wavelength_nm"), col("intensity")) else {
            return Err(Error::Parse {
                line: 1,
                msg: "expected columns wavelength_nm,intensity[,transfer]".into(),
            });
        };
        let tc = col("transfer");
        let (mut wl, mut x, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for (k, rec) in rdr.records().enumerate() {
            let line = k as u64 + 2;
            let rec = rec?;
            let field = |c: usize| -> Result<f64> {
                rec.get(c)
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: "missing field".into(),
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse {
                        line,
                        msg: e.to_string(),
                    })
            };
            wl.push(field(wc)?);
            x.push(field(ic)?);
            if let Some(c) = tc {
                t.push(field(c)?);
            }
        }
        if wl.len() < 2 {
            return Err(Error::Validation(
                "spectrum needs at least two samples".into(),
            ));
        }
        let (lo, hi) = (wl[0], wl[wl.len() - 1]);
        let h = (hi - lo) / (wl.len() - 1) as f64;
        for (k, w) in wl.iter().enumerate() {
            if (w - (lo + h * k as f64)).abs()
                > 1e-6 * h.abs().max(f64::MIN_POSITIVE) + 1e-9 * w.abs()
            {
                return Err(Error::Parse {
                    line: k as u64 + 2,
                    msg: "wavelengths must be uniformly spaced and increasing".into(),
                });
            }
        }
        if !(h > 0.0) {
            return Err(Error::Validation("wavelengths must increase".into()));
        }
        Self::new(lo, hi, x, tc.map(|_| t))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(["wavelength_nm", "intensity", "transfer"])?;
        for ((l, x), t) in self
            .wavelengths()
            .iter()
            .zip(&self.intensities)
            .zip(&self.transfer)
        {
            out.write_record([l.to_string(), x.to_string(), t.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub baseline: BaselineSettings,
    pub solver: SolveConfig,
    /// Log-spaced θ candidates per modality for the initial scan.
    pub scan_points: usize,
    /// Scan range `[lo, hi]` in nm; `None` uses `[h/10, T/20]`.
    pub scan_range: Option<(f64, f64)>,
    pub scan_sweeps: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            baseline: BaselineSettings::default(),
            solver: SolveConfig::default(),
            scan_points: 40,
            scan_range: None,
            scan_sweeps: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFit {
    pub report: SolveReport,
    pub initial: MixtureParams,
    /// Indices of negative fitted amplitudes.
    pub negative_eta: Vec<usize>,
    /// `‖Ξ G(θ̂) η̂ - x̃‖₂`.
    pub residual_norm: f64,
    /// Residual norm relative to `‖x̃‖₂`.
    pub relative_residual: f64,
    pub fitted: Vec<f64>,
}

fn problem_for(
    db: &LineDatabase,
    obs: &SpectrumObservation,
    family: Arc<dyn KernelFamily>,
) -> Result<LossProblem> {
    let target = obs
        .preprocessed
        .clone()
        .ok_or_else(|| Error::Input("spectrum has not been preprocessed".into()))?;
    let support = db.support(obs.center())?;
    LossProblem::new(family, obs.grid(), support, DVector::from_vec(target))?
        .with_row_weights(DVector::from_column_slice(&obs.transfer))
}

fn linear_residual(pb: &LossProblem, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
    let d = pb.dictionary(theta, Order::Value)?;
    let eta = solve_eta_linear(&d, &pb.target)?;
    let r = d.order(Order::Value) * &eta - &pb.target;
    Ok((r.norm_squared(), eta))
}

/// Coordinate-wise log-grid scan of θ with `η` solved linearly at each candidate.
pub fn initial_guess(pb: &LossProblem, settings: &FitSettings) -> Result<MixtureParams> {
    let g = pb.grid;
    let (lo, hi) = settings
        .scan_range
        .unwrap_or((g.spacing() / 10.0, g.width / 20.0));
    let dom = pb.family.domain();
    let (lo, hi) = (lo.max(dom.lo), hi.min(dom.hi));
    if !(lo < hi) || settings.scan_points < 2 {
        return Err(Error::Validation("empty theta scan range".into()));
    }
    let cands: Vec<f64> = (0..settings.scan_points)
        .map(|k| {
            (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (settings.scan_points - 1) as f64).exp()
        })
        .collect();
    let p = pb.support.modalities();
    let mut theta = vec![(lo * hi).sqrt(); p];
    for _ in 0..settings.scan_sweeps.max(1) {
        for i in 0..p {
            let mut best = (f64::INFINITY, theta[i]);
            for &c in &cands {
                let mut t = theta.clone();
                t[i] = c;
                let (res, _) = match linear_residual(pb, &t) {
                    Ok(v) => v,
                    Err(e) if e.is_numerical() => continue,
                    Err(e) => return Err(e),
                };
                if res < best.0 {
                    best = (res, c);
                }
            }
            theta[i] = best.1;
        }
    }
    let (_, eta) = linear_residual(pb, &theta)?;
    Ok(MixtureParams::new(theta, eta.iter().copied().collect()))
}

/// Fit `½‖Ξ G(θ) η - x̃‖²` for a preprocessed spectrum.
pub fn fit_spectrum(
    db: &LineDatabase,
    obs: &SpectrumObservation,
    family: Arc<dyn KernelFamily>,
    init: Option<&MixtureParams>,
    settings: &FitSettings,
) -> Result<SpectrumFit> {
    let pb = problem_for(db, obs, family)?;
    let initial = match init {
        Some(i) => i.clone(),
        None => initial_guess(&pb, settings)?,
    };
    let report = solve(&pb, &initial, &settings.solver, None)?;
    let r = pb.residual(&report.params)?;
    let fitted: Vec<f64> = (&r + &pb.target).iter().copied().collect();
    let negative_eta = report
        .params
        .eta
        .iter()
        .enumerate()
        .filter(|(_, v)| **v < 0.0)
        .map(|(k, _)| k)
        .collect();
    let residual_norm = r.norm();
    let tn = pb.target.norm();
    Ok(SpectrumFit {
        initial,
        negative_eta,
        relative_residual: if tn > 0.0 {
            residual_norm / tn
        } else {
            residual_norm
        },
        residual_norm,
        fitted,
        report,
    })
}

/// Write `wavelength_nm,observed,baseline,preprocessed,fitted`.
pub fn write_fit_csv<W: Write>(obs: &SpectrumObservation, fit: &SpectrumFit, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record([
        "wavelength_nm",
        "observed",
        "baseline",
        "preprocessed",
        "fitted",
    ])?;
    let n = obs.len();
    let zeros = vec![0.0; n];
    let b = obs.baseline.as_ref().unwrap_or(&zeros);
    let xt = obs.preprocessed.as_ref().unwrap_or(&obs.intensities);
    for (k, l) in obs.wavelengths().iter().enumerate() {
        out.write_record([
            l.to_string(),
            obs.intensities[k].to_string(),
            (obs.transfer[k] * b[k]).to_string(),
            xt[k].to_string(),
            fit.fitted[k].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Shape of the smooth transfer function used for synthetic spectra.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransferShape {
    Identity,
    /// `1 + amplitude · sin(π (λ - λ_lo) / (λ_hi - λ_lo))`.
    Bump {
        amplitude: f64,
    },
    /// Linear from `start` at `λ_lo` to `end` at `λ_hi`.
    Ramp {
        start: f64,
        end: f64,
    },
}

/// Recipe for a synthetic spectrum drawn from a line database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpectrum {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub samples: usize,
    /// Line width θ per modality, nm.
    pub theta: Vec<f64>,
    /// Species concentrations, in species order.
    pub nu: Vec<f64>,
    /// Baseline `b(λ) = offset + slope · (λ - λ_lo)`.
    pub baseline_offset: f64,
    pub baseline_slope: f64,
    pub transfer: TransferShape,
    /// Signal-to-noise ratio in dB against the mean squared noiseless signal.
    /// `None` gives a noiseless spectrum.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl SyntheticSpectrum {
    fn transfer_at(&self, lambda: f64) -> f64 {
        let s = (lambda - self.lambda_lo) / (self.lambda_hi - self.lambda_lo);
        match self.transfer {
            TransferShape::Identity => 1.0,
            TransferShape::Bump { amplitude } => 1.0 + amplitude * (std::f64::consts::PI * s).sin(),
            TransferShape::Ramp { start, end } => start + (end - start) * s,
        }
    }
}

/// Draw `x_obs = Ξ(G(θ) A ν + b) + n` with zero-mean scaled `χ²₂` noise.
/// Returns the observation and the ground-truth parameters.
pub fn synthesize_spectrum(
    db: &LineDatabase,
    map: &ConcentrationMap,
    family: &dyn KernelFamily,
    spec: &SyntheticSpectrum,
) -> Result<(SpectrumObservation, MixtureParams)> {
    let eta = map.amplitudes(&spec.nu)?;
    let truth = MixtureParams::new(spec.theta.clone(), eta);
    let mut obs = SpectrumObservation::new(
        spec.lambda_lo,
        spec.lambda_hi,
        vec![0.0; spec.samples],
        None,
    )?;
    let support = db.support(obs.center())?;
    truth.check(&support)?;
    let d = crate::model::build_dictionary_upto(
        family,
        &obs.grid(),
        &support,
        &truth.theta,
        Order::Value,
    )?;
    let peaks = d.order(Order::Value) * DVector::from_column_slice(&truth.eta);
    let wl = obs.wavelengths();
    let xi: Vec<f64> = wl.iter().map(|&l| spec.transfer_at(l)).collect();
    if xi.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Input("transfer function must stay positive".into()));
    }
    let clean: Vec<f64> = (0..spec.samples)
        .map(|k| {
            xi[k]
                * (peaks[k] + spec.baseline_offset + spec.baseline_slope * (wl[k] - spec.lambda_lo))
        })
        .collect();
    let noisy = match spec.snr_db {
        None => clean,
        Some(db_snr) => {
            let power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
            let sigma = (power / 10f64.powf(db_snr / 10.0)).sqrt();
            let chi = ChiSquared::new(2.0).map_err(|e| Error::Input(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            clean
                .iter()
                .map(|v| v + sigma * (chi.sample(&mut rng) - 2.0) / 2.0)
                .collect()
        }
    };
    obs.intensities = noisy;
    obs.transfer = xi;
    Ok((obs, truth))
}

/// Outcome of one synthetic generate → preprocess → fit → concentrations run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub nu_true: Vec<f64>,
    pub nu_hat: Vec<f64>,
    /// `‖ν̂ - ν*‖₂ / ‖ν*‖₂`.
    pub relative_error: f64,
    pub theta_hat: Vec<f64>,
    pub relative_residual: f64,
}

pub fn round_trip(
    db: &LineDatabase,
    map: &ConcentrationMap,
    family: Arc<dyn KernelFamily>,
    spec: &SyntheticSpectrum,
    settings: &FitSettings,
) -> Result<(RoundTrip, SpectrumObservation, SpectrumFit)> {
    let (mut obs, _) = synthesize_spectrum(db, map, family.as_ref(), spec)?;
    obs.preprocess(&settings.baseline)?;
    let fit = fit_spectrum(db, &obs, family, None, settings)?;
    let nu_hat = estimate_concentrations(map, &fit.report.params.eta)?;
    let num: f64 = nu_hat
        .iter()
        .zip(&spec.nu)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = spec.nu.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((
        RoundTrip {
            nu_true: spec.nu.clone(),
            relative_error: num / den,
            theta_hat: fit.report.params.theta.clone(),
            relative_residual: fit.relative_residual,
            nu_hat,
        },
        obs,
        fit,
    ))
}

/// Aluminium/silicon-like 15-line fixture: 10 `Al I` and 5 `Si I` lines
/// between 300 and 320 nm. Wavelengths and strengths are synthetic.
pub fn synthetic_al_si_database() -> LineDatabase {
    let al = [
        (300.52, 0.45),
        (302.13, 0.60),
        (303.91, 0.80),
        (305.01, 0.35),
        (306.64, 0.50),
        (308.215, 1.00),
        (309.271, 0.95),
        (311.40, 0.30),
        (313.02, 0.40),
        (316.20, 0.55),
    ];
    let si = [
        (301.31, 0.70),
        (304.50, 0.40),
        (310.22, 1.00),
        (314.71, 0.60),
        (318.33, 0.50),
    ];
    let group = |species: &str, lines: &[(f64, f64)]| LineGroup {
        species: species.into(),
        ion: "I".into(),
        lines: lines
            .iter()
            .map(|&(w, s)| EmissionLine {
                wavelength_nm: w,
                strength: s,
                coeff: None,
            })
            .collect(),
    };
    LineDatabase {
        groups: vec![group("Al", &al), group("Si", &si)],
    }
}

/// Default synthetic spectrum for [`synthetic_al_si_database`].
pub fn synthetic_al_si_spectrum(seed: u64, snr_db: Option<f64>) -> SyntheticSpectrum {
    SyntheticSpectrum {
        lambda_lo: 298.0,
        lambda_hi: 322.0,
        samples: 961,
        theta: vec![0.0105, 0.007],
        nu: vec![97.686, 2.313],
        baseline_offset: 5.0,
        baseline_slope: 0.2,
        transfer: TransferShape::Bump { amplitude: 0.3 },
        snr_db,
        seed,
    }
}

/// Group line counts by species (diagnostic helper for reports).
pub fn lines_per_species(db: &LineDatabase) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for g in &db.groups {
        *m.entry(g.species.clone()).or_insert(0) += g.lines.len();
    }
    m
}
