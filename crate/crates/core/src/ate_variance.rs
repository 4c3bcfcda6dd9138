//! Horvitz–Thompson ATE and plug-in estimators of its design variance.
//!
//! The exact variance `(1/n²) Σ (Y₀ᵢ + Y₁ᵢ)²` involves both potential outcomes
//! of every unit. Each estimator replaces the missing one: the Bregman–Sinkhorn
//! estimator with its conditional law under `π_ρ`, Fréchet–Hoeffding with the
//! comonotone imputation, Neyman with a Cauchy–Schwarz bound on marginals.

use serde::{Deserialize, Serialize};

use crate::copula::{comonotone_map, BregmanSinkhornCopula, JointModel};
use crate::empirical::{EmpiricalMeasure, ObservedDataset};
use crate::error::{Error, Result};
use crate::special::normal_quantile;

/// Which arm receives which imputation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FhConvention {
    /// Controls are paired with `Ĝ⁻¹∘F̂(Yᵢ)` (or `φ̇`), treated units with
    /// `F̂⁻¹∘Ĝ(Yᵢ)` (or `ψ̇`): each unit's missing outcome is imputed.
    #[default]
    ImputeMissing,
    /// The opposite assignment.
    AsDisplayed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub schema_version: u32,
    pub rho: f64,
    pub tau_hat: f64,
    pub var_sb: f64,
    pub var_fh: f64,
    pub var_neyman: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_true: Option<f64>,
}

impl VarianceReport {
    /// All estimators for one realized assignment; `truth` carries the full
    /// potential outcomes when they are known.
    pub fn compute(
        d: &ObservedDataset,
        model: &JointModel,
        convention: FhConvention,
        truth: Option<(&[f64], &[f64])>,
    ) -> Result<Self> {
        let (mu, nu) = d.split_by_treatment()?;
        Ok(Self {
            schema_version: crate::SCHEMA_VERSION,
            rho: model.rho(),
            tau_hat: horvitz_thompson_ate(d)?,
            var_sb: var_joint(d, model, convention)?,
            var_fh: var_fh(d, &mu, &nu, convention)?,
            var_neyman: var_neyman(d)?,
            var_true: truth.map(|(a, b)| true_variance(a, b)).transpose()?,
        })
    }

    /// Normal-approximation interval for the ATE from `var_sb`.
    pub fn confidence_interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Domain(format!("confidence level {level} outside (0, 1)")));
        }
        let z = normal_quantile(0.5 + level / 2.0);
        let half = z * self.var_sb.max(0.0).sqrt();
        Ok((self.tau_hat - half, self.tau_hat + half))
    }
}

/// `(2/n) Σ Yᵢ Tᵢ − (2/n) Σ Yᵢ (1 − Tᵢ)`.
pub fn horvitz_thompson_ate(d: &ObservedDataset) -> Result<f64> {
    d.require_both_arms()?;
    let n = d.len() as f64;
    let (mut t, mut c) = (0.0, 0.0);
    for (y, &treated) in d.outcomes().iter().zip(d.treatments()) {
        if treated {
            t += y;
        } else {
            c += y;
        }
    }
    Ok(2.0 / n * t - 2.0 / n * c)
}

fn sum_by_arm(d: &ObservedDataset, control: impl Fn(f64) -> f64, treated: impl Fn(f64) -> f64) -> f64 {
    let n = d.len() as f64;
    let total: f64 = d
        .outcomes()
        .iter()
        .zip(d.treatments())
        .map(|(&y, &t)| if t { treated(y) } else { control(y) })
        .sum();
    total / (n * n)
}

/// Bregman–Sinkhorn plug-in: `(1/n²) Σ [Yᵢ + ṁ(Yᵢ)]² + ε m̈(Yᵢ)` with the
/// conditional mean and variance of the missing outcome.
pub fn var_sb(d: &ObservedDataset, c: &BregmanSinkhornCopula, convention: FhConvention) -> Result<f64> {
    d.require_both_arms()?;
    let forward = |y: f64| {
        let k = c.conditional_distribution(y);
        let m = y + k.mean();
        m * m + k.variance()
    };
    let backward = |y: f64| {
        let k = c.reverse_conditional(y);
        let m = y + k.mean();
        m * m + k.variance()
    };
    Ok(match convention {
        FhConvention::ImputeMissing => sum_by_arm(d, forward, backward),
        FhConvention::AsDisplayed => sum_by_arm(d, backward, forward),
    })
}

/// Fréchet–Hoeffding plug-in with comonotone imputations.
pub fn var_fh(d: &ObservedDataset, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, convention: FhConvention) -> Result<f64> {
    d.require_both_arms()?;
    let forward = |y: f64| {
        let s = y + comonotone_map(mu, nu, y);
        s * s
    };
    let backward = |y: f64| {
        let s = y + comonotone_map(nu, mu, y);
        s * s
    };
    Ok(match convention {
        FhConvention::ImputeMissing => sum_by_arm(d, forward, backward),
        FhConvention::AsDisplayed => sum_by_arm(d, backward, forward),
    })
}

/// `var_sb` for a fitted model; at `ρ = 1` this is `var_fh`.
pub fn var_joint(d: &ObservedDataset, model: &JointModel, convention: FhConvention) -> Result<f64> {
    match model {
        JointModel::Sinkhorn(c) => var_sb(d, c, convention),
        JointModel::Comonotone { mu, nu } => var_fh(d, mu, nu, convention),
    }
}

/// `(1/n)(V̂₀ + V̂₁ + 2√(V̂₀V̂₁))` with raw second moments `V̂ₜ = (2/n) Σ_{arm t} Yᵢ²`.
pub fn var_neyman(d: &ObservedDataset) -> Result<f64> {
    d.require_both_arms()?;
    let n = d.len() as f64;
    let (mut v0, mut v1) = (0.0, 0.0);
    for (y, &t) in d.outcomes().iter().zip(d.treatments()) {
        if t {
            v1 += y * y;
        } else {
            v0 += y * y;
        }
    }
    v0 *= 2.0 / n;
    v1 *= 2.0 / n;
    Ok((v0 + v1 + 2.0 * (v0 * v1).sqrt()) / n)
}

/// `(1/n²) Σ (y₀ᵢ + y₁ᵢ)²`.
pub fn true_variance(y0: &[f64], y1: &[f64]) -> Result<f64> {
    if y0.len() != y1.len() || y0.is_empty() {
        return Err(Error::Domain(format!(
            "potential outcome vectors have lengths {} and {}",
            y0.len(),
            y1.len()
        )));
    }
    let n = y0.len() as f64;
    Ok(y0.iter().zip(y1).map(|(a, b)| (a + b) * (a + b)).sum::<f64>() / (n * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinkhorn::{SolverOptions, Stickiness};

    fn data(y: &[f64], t: &[u8]) -> ObservedDataset {
        ObservedDataset::from_flags(y.to_vec(), t).unwrap()
    }

    #[test]
    fn ht_examples() {
        assert_eq!(horvitz_thompson_ate(&data(&[1.0, 1.0, 3.0, 3.0], &[0, 0, 1, 1])).unwrap(), 2.0);
        assert_eq!(horvitz_thompson_ate(&data(&[0.0; 4], &[0, 1, 0, 1])).unwrap(), 0.0);
        assert_eq!(horvitz_thompson_ate(&data(&[1.0, 5.0, 5.0, 1.0], &[0, 0, 1, 1])).unwrap(), 0.0);
        assert!(horvitz_thompson_ate(&data(&[1.0, 2.0], &[1, 1])).is_err());
    }

    #[test]
    fn fh_hand_example() {
        let d = data(&[1.0, 2.0, 10.0, 20.0], &[0, 0, 1, 1]);
        let (mu, nu) = d.split_by_treatment().unwrap();
        assert!((var_fh(&d, &mu, &nu, FhConvention::ImputeMissing).unwrap() - 75.625).abs() < 1e-12);
        // Literal display: treated 10 ↦ Ĝ⁻¹(F̂(10)) = 20, controls ↦ F̂⁻¹(0) = 1.
        let literal = (900.0 + 1600.0 + 4.0 + 9.0) / 16.0;
        assert!((var_fh(&d, &mu, &nu, FhConvention::AsDisplayed).unwrap() - literal).abs() < 1e-12);
    }

    #[test]
    fn fh_identical_arms() {
        let d = data(&[1.0, 3.0, 1.0, 3.0], &[0, 0, 1, 1]);
        let (mu, nu) = d.split_by_treatment().unwrap();
        let expected = (4.0 + 36.0 + 4.0 + 36.0) / 16.0;
        assert!((var_fh(&d, &mu, &nu, FhConvention::ImputeMissing).unwrap() - expected).abs() < 1e-12);
        let z = data(&[0.0; 4], &[0, 0, 1, 1]);
        let (mu, nu) = z.split_by_treatment().unwrap();
        assert_eq!(var_fh(&z, &mu, &nu, FhConvention::ImputeMissing).unwrap(), 0.0);
    }

    #[test]
    fn neyman_examples() {
        assert_eq!(var_neyman(&data(&[0.0; 4], &[0, 0, 1, 1])).unwrap(), 0.0);
        assert!((var_neyman(&data(&[1.0; 4], &[0, 0, 1, 1])).unwrap() - 1.0).abs() < 1e-15);
        let d = data(&[1.0, 2.0, 4.0, 3.0, 0.5], &[0, 1, 1, 0, 1]);
        let n = 5.0;
        let v0 = 2.0 / n * (1.0 + 9.0);
        let v1 = 2.0 / n * (4.0 + 16.0 + 0.25);
        let alt = (v0 as f64).sqrt() + (v1 as f64).sqrt();
        assert!((var_neyman(&d).unwrap() - alt * alt / n).abs() < 1e-14);
    }

    #[test]
    fn true_variance_examples() {
        assert_eq!(true_variance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(true_variance(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert!(true_variance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sb_single_atom_target() {
        let d = data(&[0.5, 1.5, 2.0, 2.0], &[0, 0, 1, 1]);
        let (mu, nu) = d.split_by_treatment().unwrap();
        assert_eq!(nu.len(), 1);
        let c = BregmanSinkhornCopula::fit(&mu, &nu, Stickiness::new(0.9).unwrap(), &SolverOptions::default()).unwrap();
        let got = var_sb(&d, &c, FhConvention::ImputeMissing).unwrap();
        // Controls: (Y + 2)² exactly. Treated: Y₀ | Y₁ = 2 is μ itself.
        let treated_term = 2.0 * (mu.variance() + (2.0 + mu.mean()).powi(2));
        let expected = ((0.5f64 + 2.0).powi(2) + (1.5f64 + 2.0).powi(2) + treated_term) / 16.0;
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn report_zero_outcomes() {
        let d = data(&[0.0; 6], &[0, 1, 0, 1, 0, 1]);
        let (mu, nu) = d.split_by_treatment().unwrap();
        let model = JointModel::fit(&mu, &nu, 1.0, &SolverOptions::default()).unwrap();
        let r = VarianceReport::compute(&d, &model, FhConvention::default(), Some((&[0.0; 6], &[0.0; 6]))).unwrap();
        assert_eq!((r.tau_hat, r.var_sb, r.var_fh, r.var_neyman, r.var_true), (0.0, 0.0, 0.0, 0.0, Some(0.0)));
        let (lo, hi) = r.confidence_interval(0.95).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
    }
}
