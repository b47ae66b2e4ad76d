//! Sampling grid, spike support, mixture parameters and the dictionary stacks
//! `G_a(θ)` whose columns are sampled kernel derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, Order};

/// `N` uniform samples over `[-T/2, T/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    #[serde(rename = "T")]
    pub width: f64,
    #[serde(rename = "N")]
    pub len: usize,
}

pub fn make_grid(width: f64, len: usize) -> Result<SamplingGrid> {
    SamplingGrid::new(width, len)
}

impl SamplingGrid {
    pub fn new(width: f64, len: usize) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::Input(format!(
                "grid width T must be positive, got {width}"
            )));
        }
        if len < 2 {
            return Err(Error::Input(format!(
                "grid needs at least 2 samples, got {len}"
            )));
        }
        Ok(Self { width, len })
    }

    pub fn spacing(&self) -> f64 {
        self.width / (self.len - 1) as f64
    }

    /// Timestamp `u_s` for zero-based `s`.
    ///
    /// Computed from the signed offset `2s - (N-1)` so that the grid is exactly
    /// antisymmetric, `u_s == -u_{N-1-s}`, with exact endpoints.
    #[inline]
    pub fn at(&self, s: usize) -> f64 {
        let last = self.len - 1;
        if s == 0 {
            return -0.5 * self.width;
        }
        if s == last {
            return 0.5 * self.width;
        }
        let k = 2.0 * s as f64 - last as f64;
        self.width * k / (2.0 * last as f64)
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.len).map(|s| self.at(s)).collect()
    }

    /// Factor turning raw inner products into Riemann-sum approximations of integrals.
    pub fn continuum_scale(&self) -> f64 {
        self.spacing()
    }
}

/// Known spike locations, one list per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub locations: Vec<Vec<f64>>,
}

/// Result of [`SupportSpec::min_separation`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub delta: f64,
    /// Set when the support has fewer than two spikes and Δ is undefined (reported as +∞).
    pub degenerate: bool,
}

impl SupportSpec {
    pub fn new(locations: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { locations };
        s.validate()?;
        Ok(s)
    }

    /// Modality `i` gets spikes at positions `(i + p k) Δ`, `k = 0..L_i`, so that
    /// modalities interleave and the minimal separation is exactly Δ. The
    /// pattern is then translated to be centred on the origin.
    pub fn interleaved(delta: f64, counts: &[usize]) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Input(format!(
                "separation must be positive, got {delta}"
            )));
        }
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Input(
                "every modality needs at least one spike".into(),
            ));
        }
        let p = counts.len();
        let slots: Vec<Vec<usize>> = counts
            .iter()
            .enumerate()
            .map(|(i, &l)| (0..l).map(|k| i + p * k).collect())
            .collect();
        let hi = slots.iter().flatten().copied().max().unwrap_or(0);
        let shift = 0.5 * hi as f64;
        let locations = slots
            .into_iter()
            .map(|v| v.into_iter().map(|k| (k as f64 - shift) * delta).collect())
            .collect();
        Self::new(locations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations.is_empty() {
            return Err(Error::Validation(
                "support needs at least one modality".into(),
            ));
        }
        for (i, m) in self.locations.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Validation(format!("modality {i} has no spikes")));
            }
            if let Some(t) = m.iter().find(|t| !t.is_finite()) {
                return Err(Error::Validation(format!(
                    "modality {i} has non-finite location {t}"
                )));
            }
        }
        if self.total() >= 2 && self.min_separation().delta <= 0.0 {
            return Err(Error::Validation(
                "spike locations must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn modalities(&self) -> usize {
        self.locations.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.locations.iter().map(Vec::len).collect()
    }

    /// `L̄`, the total number of spikes.
    pub fn total(&self) -> usize {
        self.locations.iter().map(Vec::len).sum()
    }

    /// Column offset of each modality in the dictionary, plus the total at the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.modalities() + 1);
        let mut acc = 0;
        out.push(0);
        for m in &self.locations {
            acc += m.len();
            out.push(acc);
        }
        out
    }

    /// Modality owning each dictionary column.
    pub fn column_modality(&self) -> Vec<usize> {
        self.locations
            .iter()
            .enumerate()
            .flat_map(|(i, m)| std::iter::repeat_n(i, m.len()))
            .collect()
    }

    /// Smallest distance between any two spikes, across and within modalities.
    pub fn min_separation(&self) -> Separation {
        let mut all: Vec<f64> = self.locations.iter().flatten().copied().collect();
        if all.len() < 2 {
            return Separation {
                delta: f64::INFINITY,
                degenerate: true,
            };
        }
        all.sort_by(f64::total_cmp);
        let delta = all
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        Separation {
            delta,
            degenerate: false,
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            locations: order.iter().map(|&i| self.locations[i].clone()).collect(),
        }
    }
}

/// Shape parameters θ (one per modality) and amplitudes η in dictionary column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl MixtureParams {
    pub fn new(theta: Vec<f64>, eta: Vec<f64>) -> Self {
        Self { theta, eta }
    }

    /// Amplitudes `1/L_i` on every spike of modality `i`.
    pub fn uniform_eta(theta: Vec<f64>, support: &SupportSpec) -> Self {
        let eta = support
            .counts()
            .into_iter()
            .flat_map(|l| std::iter::repeat_n(1.0 / l as f64, l))
            .collect();
        Self { theta, eta }
    }

    pub fn check(&self, support: &SupportSpec) -> Result<()> {
        if self.theta.len() != support.modalities() {
            return Err(Error::Dimension {
                what: "theta",
                expected: support.modalities(),
                found: self.theta.len(),
            });
        }
        if self.eta.len() != support.total() {
            return Err(Error::Dimension {
                what: "eta",
                expected: support.total(),
                found: self.eta.len(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.eta.len()
    }

    /// Stacked vector `[θ; η]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.theta.iter().chain(&self.eta).copied())
    }

    pub fn from_vector(v: &DVector<f64>, p: usize) -> Self {
        Self {
            theta: v.rows(0, p).iter().copied().collect(),
            eta: v.rows(p, v.len() - p).iter().copied().collect(),
        }
    }

    /// Per-modality slices of η.
    pub fn eta_blocks<'a>(&'a self, support: &SupportSpec) -> Vec<&'a [f64]> {
        let off = support.offsets();
        (0..support.modalities())
            .map(|i| &self.eta[off[i]..off[i + 1]])
            .collect()
    }

    /// `(‖θ - θ'‖∞, ‖η - η'‖∞)`.
    pub fn distance(&self, other: &Self) -> (f64, f64) {
        let d = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        (d(&self.theta, &other.theta), d(&self.eta, &other.eta))
    }
}

/// Sampled dictionaries `G_0, G_1, G_2`, each `N × L̄`.
#[derive(Clone, Debug)]
pub struct DictionaryStack {
    pub g: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
}

impl DictionaryStack {
    pub fn order(&self, a: Order) -> &DMatrix<f64> {
        &self.g[a.index()]
    }

    /// Highest derivative order that was assembled.
    pub fn max_order(&self) -> Order {
        Order::ALL[self.g.len() - 1]
    }

    pub fn modalities(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Column range of modality `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// `G_aⁱ`, the columns of modality `i`.
    pub fn modality_view(&self, a: Order, i: usize) -> nalgebra::DMatrixView<'_, f64> {
        let r = self.range(i);
        self.order(a).columns(r.start, r.len())
    }

    pub fn rows(&self) -> usize {
        self.g[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.g[0].ncols()
    }

    /// Multiply every row `s` of each stack by `w[s]` (a diagonal transfer function).
    pub fn scale_rows(&mut self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.rows() {
            return Err(Error::Dimension {
                what: "row weights",
                expected: self.rows(),
                found: w.len(),
            });
        }
        for g in &mut self.g {
            for mut col in g.column_iter_mut() {
                col.component_mul_assign(w);
            }
        }
        Ok(())
    }
}

/// Assemble `G_0`, `G_1` and `G_2` at `theta`.
pub fn build_dictionary(
    family: &dyn KernelFamily,
    grid: &SamplingGrid,
    support: &SupportSpec,
    theta: &[f64],
) -> Result<DictionaryStack> {
    build_dictionary_upto(family, grid, support, theta, Order::Second)
}

/// Assemble the stacks up to and including derivative order `max_order`.
pub fn build_dictionary_upto(
    family: &dyn KernelFamily,
    grid: &SamplingGrid,
    support: &SupportSpec,
    theta: &[f64],
    max_order: Order,
) -> Result<DictionaryStack> {
    if theta.len() != support.modalities() {
        return Err(Error::Dimension {
            what: "theta",
            expected: support.modalities(),
            found: theta.len(),
        });
    }
    let domain = family.domain();
    for &th in theta {
        domain.check(th)?;
    }
    let n = grid.len;
    let u = grid.timestamps();
    let cols = support.total();
    let g = Order::ALL[..=max_order.index()]
        .iter()
        .map(|&a| {
            let mut m = DMatrix::<f64>::zeros(n, cols);
            let mut c = 0;
            for (i, locs) in support.locations.iter().enumerate() {
                for &t in locs {
                    family.fill_shifted(a, theta[i], t, &u, m.column_mut(c).as_mut_slice());
                    c += 1;
                }
            }
            m
        })
        .collect();
    Ok(DictionaryStack {
        g,
        offsets: support.offsets(),
    })
}

/// Noiseless measurements `x = G_0 η`.
pub fn synthesize(dict: &DictionaryStack, eta: &[f64]) -> Result<DVector<f64>> {
    if eta.len() != dict.cols() {
        return Err(Error::Dimension {
            what: "eta",
            expected: dict.cols(),
            found: eta.len(),
        });
    }
    Ok(dict.order(Order::Value) * DVector::from_column_slice(eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::LorentzKernel;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn grid_examples() {
        let g = make_grid(1.0, 5).unwrap();
        assert_eq!(g.timestamps(), vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
        assert_eq!(make_grid(2.0, 2).unwrap().timestamps(), vec![-1.0, 1.0]);
        assert_eq!(make_grid(1.0, 3).unwrap().spacing(), 0.5);
        assert!(make_grid(0.0, 3).is_err());
        assert!(make_grid(1.0, 1).is_err());
        assert!(make_grid(f64::NAN, 3).is_err());
    }

    #[test]
    fn grid_is_antisymmetric() {
        let g = make_grid(0.03, 6001).unwrap();
        let u = g.timestamps();
        for s in 0..g.len {
            assert_eq!(u[s], -u[g.len - 1 - s]);
        }
        assert_eq!(u[0], -0.015);
        assert_eq!(u[6000], 0.015);
    }

    fn brute_min_sep(s: &SupportSpec) -> f64 {
        let all: Vec<f64> = s.locations.iter().flatten().copied().collect();
        let mut best = f64::INFINITY;
        for i in 0..all.len() {
            for j in 0..all.len() {
                if i != j {
                    best = best.min((all[i] - all[j]).abs());
                }
            }
        }
        best
    }

    #[test]
    fn min_separation_examples() {
        let s = SupportSpec::new(vec![vec![0.0, 0.5, 1.2]]).unwrap();
        assert_eq!(s.min_separation().delta, 0.5);
        let s = SupportSpec::new(vec![vec![0.0], vec![1e-3]]).unwrap();
        assert_eq!(s.min_separation().delta, 1e-3);
        let s = SupportSpec::new(vec![vec![0.3]]).unwrap();
        let sep = s.min_separation();
        assert!(sep.degenerate && sep.delta.is_infinite());
        assert!(SupportSpec::new(vec![vec![0.0, 1.0], vec![1.0]]).is_err());
        assert!(SupportSpec::new(vec![vec![]]).is_err());
    }

    #[test]
    fn interleaved_support_has_exact_separation() {
        let delta = 1e-3;
        let s = SupportSpec::interleaved(delta, &[10, 5]).unwrap();
        assert_eq!(s.counts(), vec![10, 5]);
        let brute = brute_min_sep(&s);
        assert!((brute - delta).abs() < 1e-15, "{brute}");
        assert!((s.min_separation().delta - brute).abs() < 1e-18);
        // centred
        let all: Vec<f64> = s.locations.iter().flatten().copied().collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo + hi).abs() < 1e-15);
        assert!((hi - lo - 18.0 * delta).abs() < 1e-15);
    }

    #[test]
    fn single_column_dictionary() {
        let k = LorentzKernel::new();
        let grid = make_grid(2.0, 3).unwrap();
        let s = SupportSpec::new(vec![vec![0.0]]).unwrap();
        let d = build_dictionary(&k, &grid, &s, &[1.0]).unwrap();
        let col: Vec<f64> = d.order(Order::Value).column(0).iter().copied().collect();
        let want = [1.0 / (2.0 * PI), 1.0 / PI, 1.0 / (2.0 * PI)];
        for (a, b) in col.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let x = synthesize(&d, &[2.0]).unwrap();
        for (a, b) in x.iter().zip(want) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert_eq!(synthesize(&d, &[0.0]).unwrap().norm(), 0.0);
        assert!(matches!(
            synthesize(&d, &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn interleaved_config_shape_and_pointwise_synthesis() {
        let k = LorentzKernel::new();
        let grid = make_grid(0.03, 3001).unwrap();
        let s = SupportSpec::interleaved(1e-3, &[10, 5]).unwrap();
        let theta = [2e-5, 1e-3];
        let d = build_dictionary(&k, &grid, &s, &theta).unwrap();
        assert_eq!((d.rows(), d.cols()), (3001, 15));
        let params = MixtureParams::uniform_eta(theta.to_vec(), &s);
        assert_eq!(params.eta[0], 0.1);
        assert_eq!(params.eta[14], 0.2);
        let x = synthesize(&d, &params.eta).unwrap();
        // direct double sum over modalities and spikes
        for (sidx, &u) in grid.timestamps().iter().enumerate().step_by(7) {
            let mut direct = 0.0;
            let mut c = 0;
            for (i, locs) in s.locations.iter().enumerate() {
                for &t in locs {
                    direct +=
                        params.eta[c] * theta[i] / (PI * (theta[i] * theta[i] + (u - t) * (u - t)));
                    c += 1;
                }
            }
            assert!((x[sidx] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn dictionary_matches_pointwise_kernel_evaluations() {
        let k = LorentzKernel::new();
        let grid = make_grid(3.0, 17).unwrap();
        let s = SupportSpec::new(vec![vec![-0.5, 0.7], vec![0.1]]).unwrap();
        let theta = [0.2, 0.35];
        let d = build_dictionary(&k, &grid, &s, &theta).unwrap();
        for a in Order::ALL {
            let mut c = 0;
            for (i, locs) in s.locations.iter().enumerate() {
                for &t in locs {
                    for sidx in 0..grid.len {
                        let want =
                            crate::kernels::eval_kernel(&k, a.index(), theta[i], grid.at(sidx) - t)
                                .unwrap();
                        assert_eq!(d.order(a)[(sidx, c)], want);
                    }
                    c += 1;
                }
            }
        }
        assert_eq!(d.modality_view(Order::First, 0).ncols(), 2);
        assert_eq!(d.range(1), 2..3);
    }

    #[test]
    fn symmetric_support_gives_symmetric_columns_sum() {
        let k = LorentzKernel::new();
        let grid = make_grid(4.0, 41).unwrap();
        let s = SupportSpec::new(vec![vec![-0.6, 0.6]]).unwrap();
        let d = build_dictionary(&k, &grid, &s, &[0.3]).unwrap();
        let x = synthesize(&d, &[1.0, 1.0]).unwrap();
        for sidx in 0..grid.len {
            assert!((x[sidx] - x[grid.len - 1 - sidx]).abs() < 1e-14);
        }
    }

    #[test]
    fn permuting_modalities_permutes_columns() {
        let k = LorentzKernel::new();
        let grid = make_grid(3.0, 31).unwrap();
        let s = SupportSpec::new(vec![vec![-0.5, 0.7], vec![0.1]]).unwrap();
        let d = build_dictionary(&k, &grid, &s, &[0.2, 0.4]).unwrap();
        let sp = s.permuted(&[1, 0]);
        let dp = build_dictionary(&k, &grid, &sp, &[0.4, 0.2]).unwrap();
        for a in Order::ALL {
            assert_eq!(d.order(a).column(2), dp.order(a).column(0));
            assert_eq!(d.order(a).column(0), dp.order(a).column(1));
            assert_eq!(d.order(a).column(1), dp.order(a).column(2));
        }
    }

    #[test]
    fn theta_domain_errors_propagate() {
        let k = LorentzKernel::new();
        let grid = make_grid(1.0, 5).unwrap();
        let s = SupportSpec::new(vec![vec![0.0]]).unwrap();
        assert!(matches!(
            build_dictionary(&k, &grid, &s, &[-1.0]),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            build_dictionary(&k, &grid, &s, &[1.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #[test]
        fn synthesize_is_linear(e1 in proptest::collection::vec(-5.0f64..5.0, 3),
                                e2 in proptest::collection::vec(-5.0f64..5.0, 3),
                                a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let k = LorentzKernel::new();
            let grid = make_grid(3.0, 25).unwrap();
            let s = SupportSpec::new(vec![vec![-0.5, 0.7], vec![0.1]]).unwrap();
            let d = build_dictionary(&k, &grid, &s, &[0.2, 0.4]).unwrap();
            let mix: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
            let lhs = synthesize(&d, &mix).unwrap();
            let rhs = synthesize(&d, &e1).unwrap() * a + synthesize(&d, &e2).unwrap() * b;
            let scale = lhs.amax().max(1.0);
            prop_assert!((lhs - rhs).amax() <= 1e-12 * scale);
        }

        #[test]
        fn min_separation_matches_brute_force(locs in proptest::collection::vec(-10.0f64..10.0, 2..20), split in 1usize..19) {
            let split = split.min(locs.len() - 1);
            let s = SupportSpec { locations: vec![locs[..split].to_vec(), locs[split..].to_vec()] };
            prop_assert_eq!(s.min_separation().delta, brute_min_sep(&s));
        }
    }

    #[test]
    fn min_separation_dense_mixed_support() {
        // 10 spikes spaced 1e-3 plus 5 spikes interleaved at offsets ≥ 1e-3
        let a: Vec<f64> = (0..10).map(|k| k as f64 * 2e-3).collect();
        let b: Vec<f64> = (0..5).map(|k| 1e-3 + k as f64 * 4e-3).collect();
        let s = SupportSpec::new(vec![a, b]).unwrap();
        assert!((s.min_separation().delta - brute_min_sep(&s)).abs() < 1e-18);
        assert!((s.min_separation().delta - 1e-3).abs() < 1e-12);
    }
}
