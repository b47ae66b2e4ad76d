//! Strong-basin certificate: constants `c⁻`, `c⁺`, `r*`, `q*`, the radius
//! `ε₀ = (c⁻ - r*) / q*` and the convexity/smoothness pair `(ξ, γ)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{CoherenceTable, LipschitzEstimates};
use crate::model::{MixtureParams, SupportSpec};

/// How the modality sum in `r*` is grouped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RStarGrouping {
    /// `Σ_j [η_{j,max} C₀₁ + C₀₀]` and `η_{i,max} Σ_j [η_{j,max} C₁₁ + C₁₀]`:
    /// the sum (and the `η_{i,max}` factor) covers the whole bracket.
    #[default]
    FullBracket,
    /// Second branch read as `η_{i,max} Σ_j η_{j,max} C₁₁ + Σ_j C₁₀`.
    SplitSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub table_sha256: String,
    pub lipschitz_sha256: String,
    pub grouping: RStarGrouping,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinCertificate {
    pub c_minus: f64,
    pub c_plus: f64,
    pub r_star: f64,
    pub q_star: f64,
    pub feasible: bool,
    pub epsilon_0: f64,
    pub delta: f64,
    pub eta_mins: Vec<f64>,
    pub eta_maxs: Vec<f64>,
    pub provenance: Option<Provenance>,
}

fn sha256_json<T: Serialize>(v: &T) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl BasinCertificate {
    /// Certificate from already-computed constants.
    pub fn from_constants(c_minus: f64, c_plus: f64, r_star: f64, q_star: f64) -> Self {
        let feasible = r_star < c_minus;
        let epsilon_0 = if feasible {
            (c_minus - r_star) / q_star
        } else {
            0.0
        };
        Self {
            c_minus,
            c_plus,
            r_star,
            q_star,
            feasible,
            epsilon_0,
            delta: f64::NAN,
            eta_mins: Vec::new(),
            eta_maxs: Vec::new(),
            provenance: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluate the certificate constants at the ground truth `star`.
///
/// `table` must hold `μ_{0,0}`, `μ_{1,1}` at `Δ = 0`, `C_{a,b}` for
/// `a, b ∈ {0,1}` and `I_1`, `I_2` at the support's minimal separation, for
/// every modality pair, computed at `star.theta`.
pub fn compute_constants(
    table: &CoherenceTable,
    lip: &LipschitzEstimates,
    support: &SupportSpec,
    star: &MixtureParams,
    grouping: RStarGrouping,
) -> Result<BasinCertificate> {
    star.check(support)?;
    let p = support.modalities();
    if table.thetas.len() != p
        || table
            .thetas
            .iter()
            .zip(&star.theta)
            .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs())
    {
        return Err(Error::MissingEntry(format!(
            "table was computed at theta = {:?}, certificate requested at {:?}",
            table.thetas, star.theta
        )));
    }
    let sep = support.min_separation();
    if sep.degenerate {
        return Err(Error::Input("certificate needs at least two spikes".into()));
    }
    let delta = sep.delta;

    let blocks = star.eta_blocks(support);
    let eta_mins: Vec<f64> = blocks
        .iter()
        .map(|b| b.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let eta_maxs: Vec<f64> = blocks
        .iter()
        .map(|b| b.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let eta_inf = star.eta.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let mut c_minus = f64::INFINITY;
    let mut c_plus = f64::NEG_INFINITY;
    for i in 0..p {
        let mu11 = table.mu(1, 1, i, i, 0.0)?;
        let mu00 = table.mu(0, 0, i, i, 0.0)?;
        c_minus = c_minus.min((eta_mins[i] * eta_mins[i] * mu11).min(mu00));
        c_plus = c_plus.max((eta_maxs[i] * eta_maxs[i] * mu11).max(mu00));
    }
    c_minus *= 0.5;
    c_plus *= 1.5;

    let mut r_star = f64::NEG_INFINITY;
    for i in 0..p {
        let mut eta_row = 0.0;
        let mut c11 = 0.0;
        let mut c10 = 0.0;
        for j in 0..p {
            eta_row += eta_maxs[j] * table.c(0, 1, i, j, delta)? + table.c(0, 0, i, j, delta)?;
            c11 += eta_maxs[j] * table.c(1, 1, i, j, delta)?;
            c10 += table.c(1, 0, i, j, delta)?;
        }
        let theta_row = match grouping {
            RStarGrouping::FullBracket => eta_maxs[i] * (c11 + c10),
            RStarGrouping::SplitSum => eta_maxs[i] * c11 + c10,
        };
        r_star = r_star.max(eta_row.max(theta_row));
    }

    let mut q_star = f64::NEG_INFINITY;
    for i in 0..p {
        let l1: f64 = blocks[i].iter().map(|x| x.abs()).sum();
        let li = blocks[i].len() as f64;
        q_star = q_star
            .max(l1 * table.interference(2, i, delta)? + li * table.interference(1, i, delta)?);
    }
    q_star += lip.k * eta_inf + 4.0 * p as f64 * lip.c_delta * eta_inf.powi(2).max(1.0);

    let mut cert = BasinCertificate::from_constants(c_minus, c_plus, r_star, q_star);
    cert.delta = delta;
    cert.eta_mins = eta_mins;
    cert.eta_maxs = eta_maxs;
    cert.provenance = Some(Provenance {
        table_sha256: sha256_json(table)?,
        lipschitz_sha256: sha256_json(lip)?,
        grouping,
        notes: vec![
            match grouping {
                RStarGrouping::FullBracket => "r*: modality sum and eta_i,max factor applied to the full bracket".into(),
                RStarGrouping::SplitSum => "r*: split-sum grouping (sensitivity variant)".into(),
            },
            format!(
                "C_Delta = {:e} and K = {:e} are sampled finite-difference estimates ({} points per axis, safety factor {})",
                lip.c_delta, lip.k, lip.samples_per_axis, lip.safety_factor
            ),
            format!("inner products are raw sums over N = {} samples", table.grid.len),
        ],
    });
    Ok(cert)
}

/// `(ξ, γ) = (c⁻ - r* - q* ε, c⁺ + r* + q* ε)` for `0 <= ε < ε₀`.
pub fn convexity_pair(cert: &BasinCertificate, epsilon: f64) -> Result<(f64, f64)> {
    if !cert.feasible {
        return Err(Error::Infeasible {
            r_star: cert.r_star,
            c_minus: cert.c_minus,
        });
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Input(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    if epsilon >= cert.epsilon_0 {
        return Err(Error::OutOfBasin {
            epsilon,
            epsilon_0: cert.epsilon_0,
        });
    }
    let xi = cert.c_minus - cert.r_star - cert.q_star * epsilon;
    let gamma = cert.c_plus + cert.r_star + cert.q_star * epsilon;
    Ok((xi, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::LorentzKernel;
    use crate::metrics::{estimate_lipschitz, SeriesSettings};
    use crate::model::make_grid;
    use proptest::prelude::*;

    #[test]
    fn radius_from_synthetic_constants() {
        let c = BasinCertificate::from_constants(1.0, 3.0, 0.25, 5.0);
        assert!(c.feasible);
        assert!((c.epsilon_0 - 0.15).abs() < 1e-15);
        let infeasible = BasinCertificate::from_constants(1.0, 3.0, 1.0, 5.0);
        assert!(!infeasible.feasible);
        assert_eq!(infeasible.epsilon_0, 0.0);
    }

    #[test]
    fn convexity_pair_endpoints_and_errors() {
        let c = BasinCertificate::from_constants(1.0, 3.0, 0.25, 5.0);
        assert_eq!(convexity_pair(&c, 0.0).unwrap(), (0.75, 3.25));
        let (xi, _) = convexity_pair(&c, c.epsilon_0 * (1.0 - 1e-12)).unwrap();
        assert!(xi > 0.0 && xi < 1e-10);
        assert!(matches!(
            convexity_pair(&c, 0.15),
            Err(Error::OutOfBasin { .. })
        ));
        assert!(matches!(convexity_pair(&c, -0.1), Err(Error::Input(_))));
        let bad = BasinCertificate::from_constants(1.0, 3.0, 2.0, 5.0);
        assert!(matches!(
            convexity_pair(&bad, 0.0),
            Err(Error::Infeasible { .. })
        ));
    }

    proptest! {
        #[test]
        fn pair_is_affine_in_epsilon(c in 1.0f64..10.0, r in 0.0f64..0.9, q in 0.1f64..10.0, s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let cert = BasinCertificate::from_constants(c, 3.0 * c, r * c, q);
            let e0 = cert.epsilon_0;
            let (x1, g1) = convexity_pair(&cert, s * e0 * 0.999).unwrap();
            let (x2, g2) = convexity_pair(&cert, t * e0 * 0.999).unwrap();
            let de = (t - s) * e0 * 0.999;
            prop_assert!(((x2 - x1) + q * de).abs() <= 1e-9 * (c + q));
            prop_assert!(((g2 - g1) - q * de).abs() <= 1e-9 * (c + q));
        }

        #[test]
        fn radius_nonincreasing_in_r_and_q(c in 1.0f64..10.0, r in 0.0f64..0.9, q in 0.1f64..10.0, dr in 0.0f64..1.0, dq in 0.0f64..5.0) {
            let base = BasinCertificate::from_constants(c, 3.0 * c, r * c, q);
            let more_r = BasinCertificate::from_constants(c, 3.0 * c, r * c + dr, q);
            let more_q = BasinCertificate::from_constants(c, 3.0 * c, r * c, q + dq);
            prop_assert!(more_r.epsilon_0 <= base.epsilon_0);
            prop_assert!(more_q.epsilon_0 <= base.epsilon_0);
            prop_assert!(base.epsilon_0 >= 0.0);
            prop_assert_eq!(base.feasible, base.epsilon_0 > 0.0);
        }
    }

    fn single_spike_setup() -> (
        CoherenceTable,
        LipschitzEstimates,
        SupportSpec,
        MixtureParams,
    ) {
        let k = LorentzKernel::new();
        let grid = make_grid(20.0, 2001).unwrap();
        let support = SupportSpec::new(vec![vec![0.0, 3.0]]).unwrap();
        let star = MixtureParams::new(vec![0.2], vec![1.0, 1.0]);
        let s = SeriesSettings::default();
        let table = CoherenceTable::build(&k, &grid, &star.theta, &[3.0], &s).unwrap();
        let lip = estimate_lipschitz(&k, &grid, &support, 3.0, &[(0.18, 0.22)], 5, &s).unwrap();
        (table, lip, support, star)
    }

    #[test]
    fn single_modality_constants_match_definitions() {
        let (table, lip, support, star) = single_spike_setup();
        let cert =
            compute_constants(&table, &lip, &support, &star, RStarGrouping::FullBracket).unwrap();
        let mu11 = table.mu(1, 1, 0, 0, 0.0).unwrap();
        let mu00 = table.mu(0, 0, 0, 0, 0.0).unwrap();
        assert_eq!(cert.c_minus, 0.5 * mu11.min(mu00));
        assert_eq!(cert.c_plus, 1.5 * mu11.max(mu00));
        // per-branch factor of 3 between the two constants
        assert_eq!(1.5 * mu11, 3.0 * (0.5 * mu11));
        assert!(cert.c_minus <= 3.0 * cert.c_plus);
        let d = 3.0;
        let r_eta = table.c(0, 1, 0, 0, d).unwrap() + table.c(0, 0, 0, 0, d).unwrap();
        let r_theta = table.c(1, 1, 0, 0, d).unwrap() + table.c(1, 0, 0, 0, d).unwrap();
        assert_eq!(cert.r_star, r_eta.max(r_theta));
        let q = 2.0 * table.interference(2, 0, d).unwrap()
            + 2.0 * table.interference(1, 0, d).unwrap()
            + lip.k
            + 4.0 * lip.c_delta;
        assert!((cert.q_star - q).abs() <= 1e-12 * q);
        assert_eq!(cert.eta_mins, vec![1.0]);
        assert_eq!(cert.feasible, cert.epsilon_0 > 0.0);
        let json = cert.to_json().unwrap();
        assert!(json.contains("\"epsilon_0\"") && json.contains("table_sha256"));
    }

    #[test]
    fn grouping_variants_differ_only_in_theta_branch() {
        let (table, lip, support, _) = single_spike_setup();
        let star = MixtureParams::new(vec![0.2], vec![3.0, 2.0]);
        let a =
            compute_constants(&table, &lip, &support, &star, RStarGrouping::FullBracket).unwrap();
        let b = compute_constants(&table, &lip, &support, &star, RStarGrouping::SplitSum).unwrap();
        assert_eq!(a.c_minus, b.c_minus);
        assert_eq!(a.q_star, b.q_star);
        assert!(a.r_star >= b.r_star);
    }

    #[test]
    fn missing_entries_are_named() {
        let (table, lip, _, _) = single_spike_setup();
        let other = SupportSpec::new(vec![vec![0.0, 1.0]]).unwrap();
        let star = MixtureParams::new(vec![0.2], vec![1.0, 1.0]);
        match compute_constants(&table, &lip, &other, &star, RStarGrouping::FullBracket) {
            Err(Error::MissingEntry(msg)) => assert!(msg.contains("Delta")),
            other => panic!("{other:?}"),
        }
        let star = MixtureParams::new(vec![0.3], vec![1.0, 1.0]);
        let support = SupportSpec::new(vec![vec![0.0, 3.0]]).unwrap();
        assert!(matches!(
            compute_constants(&table, &lip, &support, &star, RStarGrouping::FullBracket),
            Err(Error::MissingEntry(_))
        ));
    }
}
