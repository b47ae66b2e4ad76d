//! Parametric point-spread-function families `g(θ, t)` and their θ-derivatives.
//!
//! A family is even in `t` for every `θ` and twice differentiable in `θ`. The
//! [`LorentzKernel`] ships with closed-form derivatives; arbitrary families can
//! be plugged in through [`CustomKernel`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Derivative order with respect to the shape parameter θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Order {
    Value,
    First,
    Second,
}

impl Order {
    pub const ALL: [Order; 3] = [Order::Value, Order::First, Order::Second];

    pub fn index(self) -> usize {
        match self {
            Order::Value => 0,
            Order::First => 1,
            Order::Second => 2,
        }
    }

    pub fn from_index(a: usize) -> Result<Self> {
        match a {
            0 => Ok(Order::Value),
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            _ => Err(Error::Input(format!(
                "derivative order must be 0, 1 or 2, got {a}"
            ))),
        }
    }
}

/// Closed interval of admissible shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaDomain {
    pub lo: f64,
    pub hi: f64,
}

impl ThetaDomain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Input(format!("invalid theta domain [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.lo && theta <= self.hi
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.lo, self.hi)
    }

    pub fn check(&self, theta: f64) -> Result<()> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(Error::Domain {
                theta,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

/// A smooth one-parameter family of even PSFs.
///
/// Implementations must satisfy `eval(a, θ, t) == eval(a, θ, -t)`; the
/// conditioning metrics fold negative shifts onto positive ones using this.
pub trait KernelFamily: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn domain(&self) -> ThetaDomain;

    /// `∂_order g(θ, t)` without any domain check.
    fn eval(&self, order: Order, theta: f64, t: f64) -> f64;

    /// Decay envelope `sup_{|s| >= r} |∂_order g(θ, s)|` for `r >= 0`.
    ///
    /// The default scans `[r, r + 10 max(θ, r)]` and assumes the kernel is
    /// already decaying past that window. Families with known shape should
    /// override it with an exact expression.
    fn envelope(&self, order: Order, theta: f64, r: f64) -> f64 {
        numeric_envelope(self, order, theta, r)
    }

    /// `out[s] = ∂_order g(θ, u[s] - shift)`.
    fn fill_shifted(&self, order: Order, theta: f64, shift: f64, u: &[f64], out: &mut [f64]) {
        for (o, &us) in out.iter_mut().zip(u) {
            *o = self.eval(order, theta, us - shift);
        }
    }

    /// `Σ_s w[s] ∂_order g(θ, u[s] - shift)`.
    fn weighted_shift_sum(
        &self,
        order: Order,
        theta: f64,
        shift: f64,
        u: &[f64],
        w: &[f64],
    ) -> f64 {
        u.iter()
            .zip(w)
            .map(|(&us, &ws)| ws * self.eval(order, theta, us - shift))
            .sum()
    }
}

/// Checked evaluation of `∂_order g(θ, t)`.
pub fn eval_kernel(family: &dyn KernelFamily, order: usize, theta: f64, t: f64) -> Result<f64> {
    let order = Order::from_index(order)?;
    family.domain().check(theta)?;
    if !t.is_finite() {
        return Err(Error::Input(format!("non-finite kernel argument t = {t}")));
    }
    Ok(family.eval(order, theta, t))
}

const ENVELOPE_SCAN_POINTS: usize = 512;

fn numeric_envelope<K: KernelFamily + ?Sized>(family: &K, order: Order, theta: f64, r: f64) -> f64 {
    let r = r.abs();
    let width = 10.0 * theta.max(r);
    (0..=ENVELOPE_SCAN_POINTS)
        .map(|k| {
            let s = r + width * k as f64 / ENVELOPE_SCAN_POINTS as f64;
            family.eval(order, theta, s).abs()
        })
        .fold(0.0, f64::max)
}

/// Lorentz (Cauchy) profile `g(θ, t) = θ / (π (θ² + t²))`, unit mass, HWHM θ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorentzKernel {
    domain: ThetaDomain,
}

impl LorentzKernel {
    pub const DEFAULT_DOMAIN: ThetaDomain = ThetaDomain { lo: 1e-6, hi: 10.0 };

    pub fn new() -> Self {
        Self {
            domain: Self::DEFAULT_DOMAIN,
        }
    }

    pub fn with_domain(domain: ThetaDomain) -> Result<Self> {
        if domain.lo <= 0.0 {
            return Err(Error::Input(
                "Lorentz kernels need a strictly positive theta domain".into(),
            ));
        }
        Ok(Self { domain })
    }
}

impl Default for LorentzKernel {
    fn default() -> Self {
        Self::new()
    }
}

impl KernelFamily for LorentzKernel {
    fn name(&self) -> &str {
        "lorentz"
    }

    fn domain(&self) -> ThetaDomain {
        self.domain
    }

    #[inline]
    fn eval(&self, order: Order, theta: f64, t: f64) -> f64 {
        let th2 = theta * theta;
        let t2 = t * t;
        let q = th2 + t2;
        match order {
            Order::Value => theta / (PI * q),
            Order::First => (t2 - th2) / (PI * q * q),
            Order::Second => 2.0 * theta * (th2 - 3.0 * t2) / (PI * q * q * q),
        }
    }

    fn envelope(&self, order: Order, theta: f64, r: f64) -> f64 {
        let r = r.abs();
        let at = |s: f64| self.eval(order, theta, s).abs();
        match order {
            // monotone in |t|
            Order::Value => at(r),
            // |∂₁g| falls on [0, θ], rises to a lobe at √3 θ, then decays
            Order::First => at(r).max(at(r.max(3f64.sqrt() * theta))),
            // |∂₂g| falls on [0, θ/√3], rises to a lobe at θ, then decays
            Order::Second => at(r).max(at(r.max(theta))),
        }
    }
}

type KernelFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// User-supplied family given by closures `(θ, t) -> value`.
///
/// Derivatives that are not supplied fall back to central finite differences
/// in θ, which costs several orders of magnitude of accuracy.
#[derive(Clone)]
pub struct CustomKernel {
    name: String,
    domain: ThetaDomain,
    value: KernelFn,
    first: Option<KernelFn>,
    second: Option<KernelFn>,
}

impl CustomKernel {
    pub fn new(
        name: impl Into<String>,
        domain: ThetaDomain,
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            domain,
            value: Arc::new(value),
            first: None,
            second: None,
        }
    }

    pub fn with_derivatives(
        mut self,
        first: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        second: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.first = Some(Arc::new(first));
        self.second = Some(Arc::new(second));
        self
    }

    pub fn uses_finite_differences(&self) -> bool {
        self.first.is_none() || self.second.is_none()
    }

    fn fd_step(theta: f64, rel: f64) -> f64 {
        rel * theta.abs().max(1e-300)
    }
}

impl fmt::Debug for CustomKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomKernel")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("finite_differences", &self.uses_finite_differences())
            .finish()
    }
}

impl KernelFamily for CustomKernel {
    fn name(&self) -> &str {
        &self.name
    }

    fn domain(&self) -> ThetaDomain {
        self.domain
    }

    fn eval(&self, order: Order, theta: f64, t: f64) -> f64 {
        let g = &self.value;
        match order {
            Order::Value => g(theta, t),
            Order::First => match &self.first {
                Some(d1) => d1(theta, t),
                None => {
                    let h = Self::fd_step(theta, 1e-6);
                    (g(theta + h, t) - g(theta - h, t)) / (2.0 * h)
                }
            },
            Order::Second => match &self.second {
                Some(d2) => d2(theta, t),
                None => {
                    let h = Self::fd_step(theta, 1e-4);
                    (g(theta + h, t) - 2.0 * g(theta, t) + g(theta - h, t)) / (h * h)
                }
            },
        }
    }
}
