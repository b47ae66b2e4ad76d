//! Coherence `μ_{a,b}`, coherence functions `C_{a,b}`, interference functions
//! `I_a`, and sampled Lipschitz constants of those maps.
//!
//! All inner products are raw sums over the sampling grid (no `T/(N-1)`
//! weighting), so the values scale with the sampling density exactly like the
//! Hessian entries they are meant to bound. Multiply by
//! [`SamplingGrid::continuum_scale`] for the integral view.
//!
//! The supremum over shifts `|δ| >= Δ` is evaluated on a profile of the
//! correlation `δ ↦ ∂_a g(θ_i,·)ᵀ ∂_b g(θ_j,· - δ)`: nodes are spaced
//! `min(θ_i, θ_j, h)/50` near the origin and geometrically (1/200 relative
//! step) further out up to `2T`, interior maxima are polished by golden-section
//! search, and past `2T` the correlation is bounded by
//! `‖∂_a g(θ_i,·)‖₁ · sup_{|s| >= δ - T/2} |∂_b g(θ_j, s)|`. Negative shifts
//! mirror positive ones because kernels are even and the grid is symmetric.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, Order};
use crate::model::{build_dictionary_upto, SamplingGrid, SupportSpec};

/// Truncation policy for the Δ-spaced series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesSettings {
    /// Stop at the first term below `rel_tol × (running sum + 1e-300)`.
    pub rel_tol: f64,
    pub max_terms: usize,
    /// Largest admissible recorded residual, relative to the series value.
    pub residual_tol: f64,
}

impl Default for SeriesSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_terms: 1_000_000,
            residual_tol: 1e-3,
        }
    }
}

/// A truncated series together with its truncation diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    pub terms: usize,
    pub last_term: f64,
    /// Tail estimate `last_term × last_index`; an upper bound whenever the
    /// terms decay at least like `m⁻²`, which holds for every Lorentz series.
    pub residual: f64,
}

/// Sum `scale × Σ_{m >= first} term(m)` under `settings`.
pub fn sum_series(
    first: usize,
    scale: f64,
    settings: &SeriesSettings,
    mut term: impl FnMut(usize) -> f64,
) -> Result<SeriesValue> {
    let mut sum = 0.0;
    let mut last;
    let mut m = first;
    let mut count = 0;
    loop {
        let t = term(m);
        if !t.is_finite() {
            return Err(Error::NonConvergent {
                partial_sum: scale * sum,
                last_term: scale * t,
                terms: count,
            });
        }
        count += 1;
        last = t;
        if t < settings.rel_tol * (sum + 1e-300) {
            break;
        }
        sum += t;
        if count >= settings.max_terms {
            // The cap is acceptable only while the remaining tail is negligible.
            if t * (m.max(1) as f64) > settings.residual_tol * sum {
                return Err(Error::NonConvergent {
                    partial_sum: scale * sum,
                    last_term: scale * t,
                    terms: count,
                });
            }
            break;
        }
        m += 1;
    }
    let value = scale * sum;
    Ok(SeriesValue {
        value,
        terms: count,
        last_term: scale * last,
        residual: scale * last * m.max(1) as f64,
    })
}

const PROFILE_NEAR_DIVISOR: f64 = 50.0;
const PROFILE_REL_STEP: f64 = 1.0 / 200.0;
const GOLDEN_ITERS: usize = 48;

/// Absolute correlation `|f(δ)|` sampled on `[start, 2T]`, with exact
/// evaluation and a decay bound beyond.
pub struct CorrelationProfile<'a> {
    family: &'a dyn KernelFamily,
    u: Vec<f64>,
    v: Vec<f64>,
    v_l1: f64,
    half_width: f64,
    b: Order,
    theta_j: f64,
    nodes: Vec<f64>,
    values: Vec<f64>,
    suffix_arg: Vec<usize>,
    far: f64,
}

impl<'a> CorrelationProfile<'a> {
    pub fn new(
        family: &'a dyn KernelFamily,
        grid: &SamplingGrid,
        a: Order,
        b: Order,
        theta_i: f64,
        theta_j: f64,
        start: f64,
    ) -> Result<Self> {
        let domain = family.domain();
        domain.check(theta_i)?;
        domain.check(theta_j)?;
        if !(start >= 0.0 && start.is_finite()) {
            return Err(Error::Input(format!(
                "shift lower bound must be >= 0, got {start}"
            )));
        }
        let u = grid.timestamps();
        let mut v = vec![0.0; u.len()];
        family.fill_shifted(a, theta_i, 0.0, &u, &mut v);
        let v_l1 = v.iter().map(|x| x.abs()).sum();
        let far = 2.0 * grid.width;

        let near = theta_i.min(theta_j).min(grid.spacing()) / PROFILE_NEAR_DIVISOR;
        let mut nodes = vec![start];
        let mut d = start;
        while d < far {
            d += near.max(d * PROFILE_REL_STEP);
            nodes.push(d.min(far));
        }
        let mut p = Self {
            family,
            u,
            v,
            v_l1,
            half_width: 0.5 * grid.width,
            b,
            theta_j,
            nodes: Vec::new(),
            values: Vec::new(),
            suffix_arg: Vec::new(),
            far,
        };
        p.values = nodes.iter().map(|&d| p.correlation(d).abs()).collect();
        p.nodes = nodes;
        let n = p.nodes.len();
        let mut suffix = vec![0; n];
        suffix[n - 1] = n - 1;
        for k in (0..n - 1).rev() {
            let best = suffix[k + 1];
            suffix[k] = if p.values[k] >= p.values[best] {
                k
            } else {
                best
            };
        }
        p.suffix_arg = suffix;
        Ok(p)
    }

    /// Signed correlation `∂_a g(θ_i,·)ᵀ ∂_b g(θ_j,· - δ)` on the grid.
    pub fn correlation(&self, delta: f64) -> f64 {
        self.family
            .weighted_shift_sum(self.b, self.theta_j, delta, &self.u, &self.v)
    }

    /// Bound on `|f(δ')|` for every `δ' >= δ >= T/2`.
    fn tail_bound(&self, delta: f64) -> f64 {
        self.v_l1
            * self
                .family
                .envelope(self.b, self.theta_j, delta - self.half_width)
    }

    fn golden_max(&self, mut lo: f64, mut hi: f64) -> f64 {
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let f = |d: f64| self.correlation(d).abs();
        let mut x1 = hi - r * (hi - lo);
        let mut x2 = lo + r * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        let mut best = f1.max(f2);
        for _ in 0..GOLDEN_ITERS {
            if f1 > f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - r * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + r * (hi - lo);
                f2 = f(x2);
            }
            best = best.max(f1).max(f2);
        }
        best
    }

    /// `sup_{|δ| >= delta} |f(δ)|`.
    pub fn sup_from(&self, delta: f64) -> f64 {
        if delta >= self.far {
            return self.tail_bound(delta);
        }
        let beyond = self.tail_bound(self.far);
        let at = self.correlation(delta).abs();
        // first node strictly above delta
        let k0 = self.nodes.partition_point(|&d| d <= delta);
        if k0 >= self.nodes.len() {
            return at.max(beyond);
        }
        let kb = self.suffix_arg[k0];
        let node_best = self.values[kb];
        let refined = if kb == k0 {
            if node_best <= at {
                at
            } else {
                let hi = self.nodes.get(k0 + 1).copied().unwrap_or(self.far);
                self.golden_max(delta, hi).max(node_best)
            }
        } else {
            let lo = self.nodes[kb - 1];
            let hi = self.nodes.get(kb + 1).copied().unwrap_or(self.far);
            self.golden_max(lo, hi).max(node_best)
        };
        at.max(refined).max(beyond)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Coherence `μ_{a,b}(θ_i, θ_j, Δ) = sup_{|δ|>=Δ} |∂_a g(θ_i,·)ᵀ ∂_b g(θ_j,·-δ)|` (raw inner products).
pub fn coherence_mu(
    family: &dyn KernelFamily,
    grid: &SamplingGrid,
    a: usize,
    b: usize,
    theta_i: f64,
    theta_j: f64,
    delta: f64,
) -> Result<f64> {
    check_delta(delta, false)?;
    let (a, b) = (coherence_order(a)?, coherence_order(b)?);
    Ok(CorrelationProfile::new(family, grid, a, b, theta_i, theta_j, delta)?.sup_from(delta))
}

/// Coherence function `C_{a,b}`: twice the sum of `μ_{a,b}(·, mΔ)` over
/// `m >= 1` when `same_modality_same_order`, over `m >= 0` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn coherence_function(
    family: &dyn KernelFamily,
    grid: &SamplingGrid,
    a: usize,
    b: usize,
    theta_i: f64,
    theta_j: f64,
    delta: f64,
    same_modality_same_order: bool,
    settings: &SeriesSettings,
) -> Result<SeriesValue> {
    check_delta(delta, true)?;
    let (a, b) = (coherence_order(a)?, coherence_order(b)?);
    let profile = CorrelationProfile::new(family, grid, a, b, theta_i, theta_j, 0.0)?;
    coherence_series(&profile, delta, same_modality_same_order, settings)
}

fn coherence_series(
    profile: &CorrelationProfile<'_>,
    delta: f64,
    skip_zero: bool,
    settings: &SeriesSettings,
) -> Result<SeriesValue> {
    let first = usize::from(skip_zero);
    sum_series(first, 2.0, settings, |m| profile.sup_from(m as f64 * delta))
}

/// Interference `I_a(θ, Δ) = |∂_a g(θ, 0)| + 2 Σ_{m>=1} sup_{|δ|>=mΔ} |∂_a g(θ, δ)|`.
pub fn interference(
    family: &dyn KernelFamily,
    a: usize,
    theta: f64,
    delta: f64,
    settings: &SeriesSettings,
) -> Result<SeriesValue> {
    check_delta(delta, true)?;
    let order = Order::from_index(a)?;
    family.domain().check(theta)?;
    let peak = family.eval(order, theta, 0.0).abs();
    let tail = sum_series(1, 2.0, settings, |m| {
        family.envelope(order, theta, m as f64 * delta)
    })?;
    Ok(SeriesValue {
        value: peak + tail.value,
        ..tail
    })
}

fn check_delta(delta: f64, strictly_positive: bool) -> Result<()> {
    let ok = delta.is_finite()
        && if strictly_positive {
            delta > 0.0
        } else {
            delta >= 0.0
        };
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!("invalid separation Delta = {delta}")))
    }
}

fn coherence_order(a: usize) -> Result<Order> {
    match a {
        0 | 1 => Order::from_index(a),
        _ => Err(Error::Input(format!(
            "coherence is defined for orders 0 and 1, got {a}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceEntry {
    pub a: usize,
    pub b: usize,
    pub i: usize,
    pub j: usize,
    pub delta: f64,
    pub mu: f64,
    /// Coherence function; absent at `Δ = 0` where the series is undefined.
    pub c: Option<SeriesValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceEntry {
    pub a: usize,
    pub i: usize,
    pub delta: f64,
    pub value: SeriesValue,
}

/// All coherence and interference values needed by a certificate, for a set of
/// modality parameters and separations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTable {
    pub family: String,
    pub grid: SamplingGrid,
    pub thetas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub series: SeriesSettings,
    pub coherence: Vec<CoherenceEntry>,
    pub interference: Vec<InterferenceEntry>,
}

fn same_delta(x: f64, y: f64) -> bool {
    x == y || (x - y).abs() <= 1e-12 * x.abs().max(y.abs())
}

impl CoherenceTable {
    /// Evaluate `μ_{a,b}` at `Δ = 0` and at every requested Δ, `C_{a,b}` at every
    /// requested Δ (`a, b ∈ {0,1}`), and `I_a` for `a ∈ {0,1,2}`, for all
    /// modality pairs.
    pub fn build(
        family: &dyn KernelFamily,
        grid: &SamplingGrid,
        thetas: &[f64],
        deltas: &[f64],
        series: &SeriesSettings,
    ) -> Result<Self> {
        for &d in deltas {
            check_delta(d, true)?;
        }
        let p = thetas.len();
        let jobs: Vec<(usize, usize, usize, usize)> = (0..2)
            .flat_map(|a| {
                (0..2)
                    .flat_map(move |b| (0..p).flat_map(move |i| (0..p).map(move |j| (a, b, i, j))))
            })
            .collect();
        let coherence: Vec<Vec<CoherenceEntry>> = jobs
            .par_iter()
            .map(|&(a, b, i, j)| -> Result<Vec<CoherenceEntry>> {
                let profile = CorrelationProfile::new(
                    family,
                    grid,
                    Order::from_index(a)?,
                    Order::from_index(b)?,
                    thetas[i],
                    thetas[j],
                    0.0,
                )?;
                let mut out = vec![CoherenceEntry {
                    a,
                    b,
                    i,
                    j,
                    delta: 0.0,
                    mu: profile.sup_from(0.0),
                    c: None,
                }];
                for &d in deltas {
                    let c = coherence_series(&profile, d, i == j && a == b, series)?;
                    out.push(CoherenceEntry {
                        a,
                        b,
                        i,
                        j,
                        delta: d,
                        mu: profile.sup_from(d),
                        c: Some(c),
                    });
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut interference_rows = Vec::new();
        for a in 0..3 {
            for (i, &th) in thetas.iter().enumerate() {
                for &d in deltas {
                    interference_rows.push(InterferenceEntry {
                        a,
                        i,
                        delta: d,
                        value: interference(family, a, th, d, series)?,
                    });
                }
            }
        }
        Ok(Self {
            family: family.name().to_string(),
            grid: *grid,
            thetas: thetas.to_vec(),
            deltas: deltas.to_vec(),
            series: *series,
            coherence: coherence.into_iter().flatten().collect(),
            interference: interference_rows,
        })
    }

    fn entry(&self, a: usize, b: usize, i: usize, j: usize, delta: f64) -> Result<&CoherenceEntry> {
        self.coherence
            .iter()
            .find(|e| e.a == a && e.b == b && e.i == i && e.j == j && same_delta(e.delta, delta))
            .ok_or_else(|| {
                Error::MissingEntry(format!(
                    "mu/C (a={a}, b={b}, i={i}, j={j}, Delta={delta:e})"
                ))
            })
    }

    pub fn mu(&self, a: usize, b: usize, i: usize, j: usize, delta: f64) -> Result<f64> {
        Ok(self.entry(a, b, i, j, delta)?.mu)
    }

    pub fn c(&self, a: usize, b: usize, i: usize, j: usize, delta: f64) -> Result<f64> {
        self.entry(a, b, i, j, delta)?
            .c
            .map(|s| s.value)
            .ok_or_else(|| {
                Error::MissingEntry(format!("C (a={a}, b={b}, i={i}, j={j}) at Delta=0"))
            })
    }

    pub fn interference(&self, a: usize, i: usize, delta: f64) -> Result<f64> {
        self.interference
            .iter()
            .find(|e| e.a == a && e.i == i && same_delta(e.delta, delta))
            .map(|e| e.value.value)
            .ok_or_else(|| Error::MissingEntry(format!("I (a={a}, i={i}, Delta={delta:e})")))
    }

    /// CSV with header `a,b,i,j,Delta,mu,C` (C empty at Δ = 0).
    pub fn write_coherence_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wtr.write_record(["a", "b", "i", "j", "Delta", "mu", "C"])?;
        for e in &self.coherence {
            wtr.write_record([
                e.a.to_string(),
                e.b.to_string(),
                e.i.to_string(),
                e.j.to_string(),
                e.delta.to_string(),
                e.mu.to_string(),
                e.c.map(|c| c.value.to_string()).unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// CSV with header `a,i,Delta,I`.
    pub fn write_interference_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wtr.write_record(["a", "i", "Delta", "I"])?;
        for e in &self.interference {
            wtr.write_record([
                e.a.to_string(),
                e.i.to_string(),
                e.delta.to_string(),
                e.value.value.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Sampled Lipschitz constants assumed by the basin certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    /// Lipschitz constant of `θ ↦ C_{a,b}(θ, θ', Δ)` and `θ ↦ I_a(θ, Δ)`.
    pub c_delta: f64,
    /// Lipschitz constant of `θ ↦ G(θ)` from `ℓ∞` to the induced `∞`-norm.
    pub k: f64,
    /// Largest sampled slopes before the safety factor.
    pub raw_c_delta: f64,
    pub raw_k: f64,
    pub safety_factor: f64,
    pub samples_per_axis: usize,
    pub theta_box: Vec<(f64, f64)>,
    pub delta: f64,
}

pub const LIPSCHITZ_SAFETY: f64 = 1.25;

/// Induced `∞`-norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Finite-difference Lipschitz estimates over `theta_box`.
///
/// Each coordinate is swept over `samples` equispaced points with the others
/// held at the box centre; `C_Δ` is the largest slope of any `C_{a,b}`
/// (`a, b ∈ {0,1}`, second argument at the centre) or `I_a` (`a ∈ {0,1,2}`),
/// and `K` the largest ratio `‖G(θ) - G(θ')‖∞ / ‖θ - θ'‖∞` over consecutive
/// points of those sweeps and of the box diagonal. Both are multiplied by
/// [`LIPSCHITZ_SAFETY`].
pub fn estimate_lipschitz(
    family: &dyn KernelFamily,
    grid: &SamplingGrid,
    support: &SupportSpec,
    delta: f64,
    theta_box: &[(f64, f64)],
    samples: usize,
    series: &SeriesSettings,
) -> Result<LipschitzEstimates> {
    check_delta(delta, true)?;
    let p = support.modalities();
    if theta_box.len() != p {
        return Err(Error::Dimension {
            what: "theta box",
            expected: p,
            found: theta_box.len(),
        });
    }
    if samples < 2 {
        return Err(Error::Input(
            "Lipschitz estimation needs at least 2 samples per axis".into(),
        ));
    }
    let domain = family.domain();
    for &(lo, hi) in theta_box {
        if !(lo < hi) || !domain.contains(lo) || !domain.contains(hi) {
            return Err(Error::Input(format!(
                "degenerate or out-of-domain theta box [{lo}, {hi}] (domain [{}, {}])",
                domain.lo, domain.hi
            )));
        }
    }
    let centre: Vec<f64> = theta_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
    let axes: Vec<Vec<f64>> = theta_box
        .iter()
        .map(|&(lo, hi)| linspace(lo, hi, samples))
        .collect();

    let slope = |vals: &[f64], xs: &[f64]| {
        vals.windows(2)
            .zip(xs.windows(2))
            .map(|(v, x)| (v[1] - v[0]).abs() / (x[1] - x[0]))
            .fold(0.0, f64::max)
    };

    // C_{a,b}(θ, θ'_j) along axis i
    let jobs: Vec<(usize, usize, usize, usize)> = (0..p)
        .flat_map(|i| {
            (0..p).flat_map(move |j| (0..2).flat_map(move |a| (0..2).map(move |b| (i, j, a, b))))
        })
        .collect();
    let c_slopes: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, j, a, b)| -> Result<f64> {
            let vals = axes[i]
                .iter()
                .map(|&th| {
                    coherence_function(
                        family,
                        grid,
                        a,
                        b,
                        th,
                        centre[j],
                        delta,
                        i == j && a == b,
                        series,
                    )
                    .map(|s| s.value)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(slope(&vals, &axes[i]))
        })
        .collect::<Result<_>>()?;
    let mut raw_c = c_slopes.into_iter().fold(0.0, f64::max);
    for axis in &axes {
        for a in 0..3 {
            let vals = axis
                .iter()
                .map(|&th| interference(family, a, th, delta, series).map(|s| s.value))
                .collect::<Result<Vec<_>>>()?;
            raw_c = raw_c.max(slope(&vals, axis));
        }
    }

    // lines through the centre along each axis, plus the box diagonal
    let mut lines: Vec<Vec<Vec<f64>>> = (0..p)
        .map(|i| {
            axes[i]
                .iter()
                .map(|&th| {
                    let mut t = centre.clone();
                    t[i] = th;
                    t
                })
                .collect()
        })
        .collect();
    if p > 1 {
        lines.push(
            (0..samples)
                .map(|k| axes.iter().map(|ax| ax[k]).collect())
                .collect(),
        );
    }
    let k_slopes: Vec<f64> = lines
        .par_iter()
        .map(|line| -> Result<f64> {
            let mats = line
                .iter()
                .map(|th| {
                    build_dictionary_upto(family, grid, support, th, Order::Value)
                        .map(|d| d.g[0].clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut best: f64 = 0.0;
            for k in 1..line.len() {
                let dist = line[k]
                    .iter()
                    .zip(&line[k - 1])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                best = best.max(inf_norm(&(&mats[k] - &mats[k - 1])) / dist);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let raw_k = k_slopes.into_iter().fold(0.0, f64::max);

    Ok(LipschitzEstimates {
        c_delta: LIPSCHITZ_SAFETY * raw_c,
        k: LIPSCHITZ_SAFETY * raw_k,
        raw_c_delta: raw_c,
        raw_k,
        safety_factor: LIPSCHITZ_SAFETY,
        samples_per_axis: samples,
        theta_box: theta_box.to_vec(),
        delta,
    })
}
