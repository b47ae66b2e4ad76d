//! Reference computations that share no code with `spikemix`: closed-form
//! Lorentz quantities, plain finite differences and an exact sampler for the
//! sum-of-norms ball. The acceptance suite compares the library against these.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution};

/// `θ / (π (θ² + t²))`.
pub fn lorentz(theta: f64, t: f64) -> f64 {
    theta / (PI * (theta * theta + t * t))
}

/// `∫ g(θ₁, t) g(θ₂, t - δ) dt = g(θ₁ + θ₂, δ)`.
pub fn lorentz_correlation(theta1: f64, theta2: f64, delta: f64) -> f64 {
    lorentz(theta1 + theta2, delta)
}

/// Central differences with per-coordinate steps.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    steps: &[f64],
) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += steps[j];
        xm[j] -= steps[j];
        (f(&xp) - f(&xm)) / (2.0 * steps[j])
    })
}

/// Second-order central differences of `f` itself: the three-point rule on
/// the diagonal and the four-point cross rule off it.
pub fn fd_hessian<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    steps: &[f64],
) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let shifted = |j: usize, sj: f64, k: usize, sk: f64| {
        let mut y = x.clone();
        y[j] += sj;
        y[k] += sk;
        f(&y)
    };
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let hj = steps[j];
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += hj;
        xm[j] -= hj;
        h[(j, j)] = (f(&xp) - 2.0 * f0 + f(&xm)) / (hj * hj);
        for k in 0..j {
            let hk = steps[k];
            let v = (shifted(j, hj, k, hk) - shifted(j, hj, k, -hk) - shifted(j, -hj, k, hk)
                + shifted(j, -hj, k, -hk))
                / (4.0 * hj * hk);
            h[(j, k)] = v;
            h[(k, j)] = v;
        }
    }
    h
}

/// Worst elementwise discrepancy, each entry scaled by
/// `max(|a_jk|, sqrt(|a_jj a_kk|))`.
pub fn hessian_relative_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let n = analytic.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for k in 0..n {
            let scale = analytic[(j, k)]
                .abs()
                .max((analytic[(j, j)] * analytic[(k, k)]).abs().sqrt());
            if scale > 0.0 {
                worst = worst.max((analytic[(j, k)] - reference[(j, k)]).abs() / scale);
            }
        }
    }
    worst
}

/// Uniform point on the surface `‖v‖∞ = r` in `ℝⁿ`.
fn inf_sphere(rng: &mut impl Rng, n: usize, r: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-r..=r)).collect();
    let face = rng.gen_range(0..n);
    v[face] = if rng.gen::<bool>() { r } else { -r };
    v
}

/// Uniform sample of `{(u, v) ∈ ℝᵖ × ℝˡ : ‖u‖∞ + ‖v‖∞ < ε}`.
///
/// With `s = ‖u‖∞` and `t = ‖v‖∞` the volume element is proportional to
/// `s^(p-1) t^(l-1)`, so `R = s + t` has density `∝ R^(p+l-1)` on `[0, ε)`
/// and `s / R ~ Beta(p, l)` independently of `R`.
pub fn sample_sum_ball(rng: &mut impl Rng, p: usize, l: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = eps * rng.gen::<f64>().powf(1.0 / (p + l) as f64);
    let split = Beta::new(p as f64, l as f64)
        .expect("positive shape parameters")
        .sample(rng);
    let s = radius * split;
    (inf_sphere(rng, p, s), inf_sphere(rng, l, radius - s))
}

/// Outcome of one acceptance criterion.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Criteria selected by `SPIKEMIX_ACCEPTANCE_ONLY` (comma-separated ids); all when unset.
pub fn selected(id: u32) -> bool {
    match std::env::var("SPIKEMIX_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

/// Runs a criterion, enforces its time budget and prints one status line.
/// Returns `None` when the criterion is filtered out.
pub fn run_criterion<F: FnOnce() -> Verdict>(
    id: u32,
    title: &str,
    budget: Duration,
    body: F,
) -> Option<bool> {
    if !selected(id) {
        return None;
    }
    let start = Instant::now();
    let v = body();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = v.pass && in_time;
    let timing = if in_time {
        format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs())
    } else {
        format!(
            "{:.1}s exceeds the {}s budget",
            elapsed.as_secs_f64(),
            budget.as_secs()
        )
    };
    println!(
        "{} criterion {id} ({title}): {} [{timing}]",
        if pass { "PASS" } else { "FAIL" },
        v.detail
    );
    Some(pass)
}
