//! Least-squares loss, gradient, exact Hessian with its Gauss-Newton /
//! residual split, Weyl-type spectral bounds and numerical audits of the
//! per-block inequalities behind the basin certificate.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::certificate::BasinCertificate;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, Order};
use crate::metrics::{inf_norm, CoherenceTable, LipschitzEstimates};
use crate::model::{
    build_dictionary_upto, DictionaryStack, MixtureParams, SamplingGrid, SupportSpec,
};

/// `½‖W(G(θ)η - x)‖²` for a fixed family, grid, support and target `x`,
/// with optional diagonal row weights `W`.
#[derive(Clone, Debug)]
pub struct LossProblem {
    pub family: Arc<dyn KernelFamily>,
    pub grid: SamplingGrid,
    pub support: SupportSpec,
    pub target: DVector<f64>,
    pub row_weights: Option<DVector<f64>>,
}

impl LossProblem {
    pub fn new(
        family: Arc<dyn KernelFamily>,
        grid: SamplingGrid,
        support: SupportSpec,
        target: DVector<f64>,
    ) -> Result<Self> {
        if target.len() != grid.len {
            return Err(Error::Dimension {
                what: "target",
                expected: grid.len,
                found: target.len(),
            });
        }
        support.validate()?;
        Ok(Self {
            family,
            grid,
            support,
            target,
            row_weights: None,
        })
    }

    /// Noiseless target synthesized from `truth`.
    pub fn from_ground_truth(
        family: Arc<dyn KernelFamily>,
        grid: SamplingGrid,
        support: SupportSpec,
        truth: &MixtureParams,
    ) -> Result<Self> {
        truth.check(&support)?;
        let d =
            build_dictionary_upto(family.as_ref(), &grid, &support, &truth.theta, Order::Value)?;
        let x = d.order(Order::Value) * DVector::from_column_slice(&truth.eta);
        Self::new(family, grid, support, x)
    }

    /// Weights multiply the rows of every dictionary; the target is taken
    /// as already weighted.
    pub fn with_row_weights(mut self, w: DVector<f64>) -> Result<Self> {
        if w.len() != self.grid.len {
            return Err(Error::Dimension {
                what: "row weights",
                expected: self.grid.len,
                found: w.len(),
            });
        }
        self.row_weights = Some(w);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.support.modalities() + self.support.total()
    }

    pub fn dictionary(&self, theta: &[f64], max_order: Order) -> Result<DictionaryStack> {
        let mut d = build_dictionary_upto(
            self.family.as_ref(),
            &self.grid,
            &self.support,
            theta,
            max_order,
        )?;
        if let Some(w) = &self.row_weights {
            d.scale_rows(w)?;
        }
        Ok(d)
    }

    fn check(&self, params: &MixtureParams) -> Result<()> {
        params.check(&self.support)
    }

    fn residual_with(&self, d: &DictionaryStack, params: &MixtureParams) -> DVector<f64> {
        d.order(Order::Value) * DVector::from_column_slice(&params.eta) - &self.target
    }

    /// `r = G(θ)η - x`.
    pub fn residual(&self, params: &MixtureParams) -> Result<DVector<f64>> {
        self.check(params)?;
        let d = self.dictionary(&params.theta, Order::Value)?;
        Ok(self.residual_with(&d, params))
    }

    pub fn loss(&self, params: &MixtureParams) -> Result<f64> {
        Ok(0.5 * self.residual(params)?.norm_squared())
    }

    /// Jacobian `[G₁ⁱη_i … | G₀]` of the residual and the residual itself.
    pub fn jacobian(&self, params: &MixtureParams) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check(params)?;
        let d = self.dictionary(&params.theta, Order::First)?;
        let r = self.residual_with(&d, params);
        Ok((jacobian_from(&d, params), r))
    }

    pub fn gradient(&self, params: &MixtureParams) -> Result<DVector<f64>> {
        let (j, r) = self.jacobian(params)?;
        Ok(j.tr_mul(&r))
    }

    pub fn hessian(&self, params: &MixtureParams) -> Result<HessianBlocks> {
        self.check(params)?;
        let d = self.dictionary(&params.theta, Order::Second)?;
        let r = self.residual_with(&d, params);
        let j = jacobian_from(&d, params);
        let e = j.tr_mul(&j);
        let p = self.support.modalities();
        let n = e.nrows();
        let mut rp = DMatrix::<f64>::zeros(n, n);
        for i in 0..p {
            let range = d.range(i);
            let eta_i = DVector::from_column_slice(&params.eta[range.clone()]);
            let g2 = d.modality_view(Order::Second, i) * &eta_i;
            rp[(i, i)] = r.dot(&g2);
            let cross = d.modality_view(Order::First, i).tr_mul(&r);
            for (k, v) in cross.iter().enumerate() {
                rp[(i, p + range.start + k)] = *v;
                rp[(p + range.start + k, i)] = *v;
            }
        }
        let h = &e + &rp;
        let dpart = DVector::from_iterator(n, e.diagonal().iter().copied());
        Ok(HessianBlocks {
            h,
            e,
            r_part: rp,
            d: dpart,
            residual: r,
        })
    }
}

fn jacobian_from(d: &DictionaryStack, params: &MixtureParams) -> DMatrix<f64> {
    let p = d.modalities();
    let l = d.cols();
    let n = d.rows();
    let mut j = DMatrix::<f64>::zeros(n, p + l);
    for i in 0..p {
        let range = d.range(i);
        let eta_i = DVector::from_column_slice(&params.eta[range]);
        j.set_column(i, &(d.modality_view(Order::First, i) * eta_i));
    }
    j.columns_mut(p, l).copy_from(d.order(Order::Value));
    j
}

/// The Hessian `H = E + R` with `E = JᵀJ`, `D = diag(E)` and the residual.
#[derive(Clone, Debug)]
pub struct HessianBlocks {
    pub h: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub r_part: DMatrix<f64>,
    pub d: DVector<f64>,
    pub residual: DVector<f64>,
}

impl HessianBlocks {
    /// `H - diag(E)`.
    pub fn off_diagonal(&self) -> DMatrix<f64> {
        let mut m = self.h.clone();
        for (k, v) in self.d.iter().enumerate() {
            m[(k, k)] -= v;
        }
        m
    }
}

/// Exact `(λ_min, λ_max)` of a symmetric matrix.
pub fn extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// `(λ_min(D) - ‖H - D‖∞, λ_max(D) + ‖H - D‖∞)`.
pub fn weyl_bounds(blocks: &HessianBlocks) -> (f64, f64) {
    let off = inf_norm(&blocks.off_diagonal());
    let dmin = blocks.d.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = blocks.d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (dmin - off, dmax + off)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

impl AuditRow {
    fn new(id: String, lhs: f64, rhs: f64) -> Self {
        let slack = rhs - lhs;
        let pass = slack >= -1e-12 * lhs.abs().max(rhs.abs());
        Self {
            id,
            lhs,
            rhs,
            slack,
            pass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub epsilon: f64,
    /// `‖θ - θ*‖∞ + ‖η - η*‖∞` of the audited point.
    pub distance: f64,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failed(&self) -> Vec<&AuditRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    /// Whether every row whose id starts with `prefix` passes.
    pub fn group_pass(&self, prefix: &str) -> bool {
        self.rows
            .iter()
            .filter(|r| r.id.starts_with(prefix))
            .all(|r| r.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluate every block inequality at `params`, a point declared to lie in
/// the ε-ball around `star`.
///
/// Row ids: `bound_D.lower`, `bound_D.upper`, `bound_G.interference[a,i]`,
/// `bound_G.coherence[a,b,i,j]` and `bound_offdiag`. For `i = j`, `a = b`
/// the coherence row measures `G_aⁱᵀG_aⁱ` without its diagonal, matching
/// the `m >= 1` series.
#[allow(clippy::too_many_arguments)]
pub fn audit_lemmas(
    problem: &LossProblem,
    params: &MixtureParams,
    star: &MixtureParams,
    epsilon: f64,
    table: &CoherenceTable,
    lip: &LipschitzEstimates,
    cert: &BasinCertificate,
) -> Result<AuditReport> {
    problem.check(params)?;
    star.check(&problem.support)?;
    let (dt, de) = params.distance(star);
    let delta = problem.support.min_separation().delta;
    let blocks = problem.hessian(params)?;
    let d = problem.dictionary(&params.theta, Order::Second)?;
    let p = problem.support.modalities();

    let dmin = blocks.d.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = blocks.d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut rows = vec![
        AuditRow::new("bound_D.lower".into(), cert.c_minus, dmin),
        AuditRow::new("bound_D.upper".into(), dmax, cert.c_plus),
    ];
    for a in 0..3 {
        for i in 0..p {
            let g = d.modality_view(Order::ALL[a], i).clone_owned();
            let rhs = table.interference(a, i, delta)? + lip.c_delta * epsilon;
            rows.push(AuditRow::new(
                format!("bound_G.interference[a={a},i={i}]"),
                inf_norm(&g),
                rhs,
            ));
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            for i in 0..p {
                for j in 0..p {
                    let ga = d.modality_view(Order::ALL[a], i);
                    let gb = d.modality_view(Order::ALL[b], j);
                    let mut m = ga.tr_mul(&gb);
                    if i == j && a == b {
                        m.fill_diagonal(0.0);
                    }
                    let rhs = table.c(a, b, i, j, delta)? + 2.0 * lip.c_delta * epsilon;
                    rows.push(AuditRow::new(
                        format!("bound_G.coherence[a={a},b={b},i={i},j={j}]"),
                        inf_norm(&m),
                        rhs,
                    ));
                }
            }
        }
    }
    rows.push(AuditRow::new(
        "bound_offdiag".into(),
        inf_norm(&blocks.off_diagonal()),
        cert.r_star + cert.q_star * epsilon,
    ));
    Ok(AuditReport {
        epsilon,
        distance: dt + de,
        rows,
    })
}
