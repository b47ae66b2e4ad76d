//! Local minimization of the least-squares loss: fixed-step gradient descent
//! and Levenberg-Marquardt, plus the linear amplitude solve used for
//! initialization.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certificate::{convexity_pair, BasinCertificate};
use crate::error::{Error, Result};
use crate::hessian::{extreme_eigenvalues, LossProblem};
use crate::kernels::Order;
use crate::model::{DictionaryStack, MixtureParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GradientDescent,
    #[default]
    LevenbergMarquardt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub method: Method,
    /// Gradient-descent step. `None` uses `1/λ_max(H)` at the initial point.
    pub step: Option<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Relative parameter change below which an iteration counts as stalled.
    pub step_tol: f64,
    /// Initial LM damping. `None` uses `1e-3 · tr(E) / (p + L̄)`.
    pub lm_damping_init: Option<f64>,
    /// Per-modality `[lo, hi]` box for θ. `None` uses the family domain.
    pub theta_bounds: Option<Vec<(f64, f64)>>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            method: Method::LevenbergMarquardt,
            step: None,
            max_iters: 200,
            grad_tol: 1e-10,
            step_tol: 1e-15,
            lm_damping_init: None,
            theta_bounds: None,
        }
    }
}

impl SolveConfig {
    /// Gradient descent with step `1/γ(ε)` taken from a certificate.
    pub fn gradient_descent_certified(cert: &BasinCertificate, epsilon: f64) -> Result<Self> {
        let (_, gamma) = convexity_pair(cert, epsilon)?;
        Ok(Self {
            method: Method::GradientDescent,
            step: Some(1.0 / gamma),
            ..Self::default()
        })
    }

    fn validate(&self, p: usize) -> Result<()> {
        if !(self.grad_tol > 0.0) || !(self.step_tol >= 0.0) {
            return Err(Error::Validation("tolerances must be positive".into()));
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!("step must be positive, got {s}")));
            }
        }
        if let Some(d) = self.lm_damping_init {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Validation(format!(
                    "damping must be non-negative, got {d}"
                )));
            }
        }
        if let Some(b) = &self.theta_bounds {
            if b.len() != p {
                return Err(Error::Dimension {
                    what: "theta_bounds",
                    expected: p,
                    found: b.len(),
                });
            }
            if b.iter().any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::Validation("theta bounds need lo < hi".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub params: MixtureParams,
    pub converged: bool,
    pub iterations: usize,
    pub loss_trace: Vec<f64>,
    pub final_grad_norm: f64,
    /// `(‖θ̂ - θ*‖∞, ‖η̂ - η*‖∞)` when a ground truth was supplied.
    pub distance: Option<(f64, f64)>,
    pub history: Vec<TraceRow>,
}

impl SolveReport {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let (p, l) = self
            .history
            .first()
            .map(|r| (r.theta.len(), r.eta.len()))
            .unwrap_or((0, 0));
        let mut header = vec!["iter".to_string(), "loss".into(), "grad_norm".into()];
        header.extend((0..p).map(|i| format!("theta_{i}")));
        header.extend((0..l).map(|k| format!("eta_{k}")));
        out.write_record(&header)?;
        for r in &self.history {
            let mut rec = vec![
                r.iter.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
            ];
            rec.extend(r.theta.iter().map(|v| v.to_string()));
            rec.extend(r.eta.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn bounds_for(problem: &LossProblem, config: &SolveConfig) -> Vec<(f64, f64)> {
    let dom = problem.family.domain();
    match &config.theta_bounds {
        Some(b) => b
            .iter()
            .map(|&(lo, hi)| (lo.max(dom.lo), hi.min(dom.hi)))
            .collect(),
        None => vec![(dom.lo, dom.hi); problem.support.modalities()],
    }
}

fn clamp(v: &mut DVector<f64>, bounds: &[(f64, f64)]) {
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        v[i] = v[i].clamp(lo, hi);
    }
}

/// One Levenberg-Marquardt increment `-(JᵀJ + λI)⁻¹ Jᵀr`.
pub fn lm_step(
    problem: &LossProblem,
    params: &MixtureParams,
    damping: f64,
) -> Result<DVector<f64>> {
    let (j, r) = problem.jacobian(params)?;
    damped_solve(&j.tr_mul(&j), &j.tr_mul(&r), damping).ok_or(Error::Conditioning {
        condition: f64::INFINITY,
        modality_a: 0,
        modality_b: 0,
    })
}

fn damped_solve(a: &DMatrix<f64>, g: &DVector<f64>, damping: f64) -> Option<DVector<f64>> {
    let mut m = a.clone();
    for k in 0..m.nrows() {
        m[(k, k)] += damping;
    }
    let sol = m.cholesky()?.solve(&(-g));
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

struct Tracker<'a> {
    rows: Vec<TraceRow>,
    losses: Vec<f64>,
    initial: f64,
    p: usize,
    _pb: &'a LossProblem,
}

impl Tracker<'_> {
    fn push(&mut self, v: &DVector<f64>, loss: f64, grad_norm: f64) -> Result<()> {
        self.losses.push(loss);
        let iter = self.rows.len();
        self.rows.push(TraceRow {
            iter,
            loss,
            grad_norm,
            theta: v.rows(0, self.p).iter().copied().collect(),
            eta: v.rows(self.p, v.len() - self.p).iter().copied().collect(),
        });
        if !loss.is_finite() || loss > 1e12 * self.initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                trace: self.losses.clone(),
            });
        }
        Ok(())
    }
}

/// Minimize the loss from `init`.
pub fn solve(
    problem: &LossProblem,
    init: &MixtureParams,
    config: &SolveConfig,
    truth: Option<&MixtureParams>,
) -> Result<SolveReport> {
    let p = problem.support.modalities();
    config.validate(p)?;
    init.check(&problem.support)?;
    let bounds = bounds_for(problem, config);
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(init.theta[i] >= lo && init.theta[i] <= hi) {
            return Err(Error::Input(format!(
                "initial theta[{i}] = {} outside [{lo}, {hi}]",
                init.theta[i]
            )));
        }
    }
    let mut v = init.to_vector();
    let (mut jac, mut r) = problem.jacobian(init)?;
    let mut loss = 0.5 * r.norm_squared();
    if !loss.is_finite() {
        return Err(Error::Input(
            "loss is not finite at the initial point".into(),
        ));
    }
    let mut grad = jac.tr_mul(&r);
    let mut tracker = Tracker {
        rows: Vec::new(),
        losses: Vec::new(),
        initial: loss,
        p,
        _pb: problem,
    };
    tracker.push(&v, loss, grad.amax())?;

    let step = match (config.method, config.step) {
        (Method::GradientDescent, Some(s)) => s,
        (Method::GradientDescent, None) => {
            let (_, hmax) = extreme_eigenvalues(&problem.hessian(init)?.h);
            1.0 / hmax.max(f64::MIN_POSITIVE)
        }
        _ => 0.0,
    };
    let mut damping = config.lm_damping_init.unwrap_or_else(|| {
        let tr: f64 = jac.column_iter().map(|c| c.norm_squared()).sum();
        1e-3 * tr / v.len() as f64
    });

    let mut iterations = 0;
    while iterations < config.max_iters && !(grad.amax() < config.grad_tol) {
        let candidate = match config.method {
            Method::GradientDescent => {
                let mut c = &v - step * &grad;
                clamp(&mut c, &bounds);
                Some(c)
            }
            Method::LevenbergMarquardt => {
                let a = jac.tr_mul(&jac);
                let mut accepted = None;
                for _ in 0..60 {
                    let Some(delta) = damped_solve(&a, &grad, damping) else {
                        damping = (damping * 3.0).max(1e-300);
                        continue;
                    };
                    let mut c = &v + delta;
                    clamp(&mut c, &bounds);
                    let trial = MixtureParams::from_vector(&c, p);
                    let trial_loss = problem.loss(&trial)?;
                    if trial_loss < loss {
                        damping /= 2.0;
                        accepted = Some(c);
                        break;
                    }
                    damping = (damping * 3.0).max(1e-300);
                }
                accepted
            }
        };
        let Some(c) = candidate else { break };
        let moved = (&c - &v).amax();
        v = c;
        let params = MixtureParams::from_vector(&v, p);
        (jac, r) = problem.jacobian(&params)?;
        loss = 0.5 * r.norm_squared();
        grad = jac.tr_mul(&r);
        iterations += 1;
        tracker.push(&v, loss, grad.amax())?;
        if moved <= config.step_tol * v.amax() {
            break;
        }
    }

    let params = MixtureParams::from_vector(&v, p);
    let final_grad_norm = grad.amax();
    Ok(SolveReport {
        distance: truth.map(|t| params.distance(t)),
        params,
        converged: final_grad_norm < config.grad_tol,
        iterations,
        loss_trace: tracker.losses,
        final_grad_norm,
        history: tracker.rows,
    })
}

/// Condition-number threshold above which `G₀` is treated as rank deficient.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Least-squares amplitudes `argmin_η ½‖G₀η - x‖²` through a QR factorization.
pub fn solve_eta_linear(dict: &DictionaryStack, x: &DVector<f64>) -> Result<DVector<f64>> {
    let g = dict.order(Order::Value);
    if x.len() != g.nrows() {
        return Err(Error::Dimension {
            what: "x_star",
            expected: g.nrows(),
            found: x.len(),
        });
    }
    let n = g.ncols();
    if n > g.nrows() {
        return Err(Error::Input(format!(
            "{} columns exceed {} samples",
            n,
            g.nrows()
        )));
    }
    let sv = g.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition <= CONDITION_LIMIT) {
        let (a, b) = most_collinear_columns(g);
        let owner = |c: usize| {
            (0..dict.modalities())
                .find(|&i| dict.range(i).contains(&c))
                .unwrap_or(0)
        };
        return Err(Error::Conditioning {
            condition,
            modality_a: owner(a),
            modality_b: owner(b),
        });
    }
    let qr = g.clone().qr();
    let qtx = qr.q().tr_mul(x);
    qr.r()
        .solve_upper_triangular(&qtx)
        .ok_or(Error::Conditioning {
            condition,
            modality_a: 0,
            modality_b: 0,
        })
}

fn most_collinear_columns(g: &DMatrix<f64>) -> (usize, usize) {
    let norms: Vec<f64> = g.column_iter().map(|c| c.norm()).collect();
    let mut best = (0, 0, -1.0);
    for a in 0..g.ncols() {
        for b in a + 1..g.ncols() {
            let cos = if norms[a] == 0.0 || norms[b] == 0.0 {
                1.0
            } else {
                (g.column(a).dot(&g.column(b)) / (norms[a] * norms[b])).abs()
            };
            if cos > best.2 {
                best = (a, b, cos);
            }
        }
    }
    if g.ncols() == 1 {
        return (0, 0);
    }
    (best.0, best.1)
}
