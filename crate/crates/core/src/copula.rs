//! Conditional structure of the Bregman–Sinkhorn copula.
//!
//! Given fitted potentials, `Y₁ | Y₀ = y₀` is the exponential tilt of `ν` with
//! natural parameter `y₀ / ε` and log-partition `φ(y₀) / ε`, so its mean and
//! variance are `φ̇(y₀)` and `ε φ̈(y₀)`. Off the support of `μ`, `φ` is
//! re-evaluated from its Sinkhorn equation rather than interpolated.

use std::io::Write;

use serde::Serialize;

use crate::empirical::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::sinkhorn::{
    coupling_from_potentials, solve_potentials, Coupling, SinkhornPotentials, SolverOptions, Stickiness,
};
use crate::special::normal_quantile;

/// A probability vector on a sorted support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteConditional {
    support: Vec<f64>,
    probabilities: Vec<f64>,
}

impl DiscreteConditional {
    /// Normalizes `exp(log_weights)` in the log domain.
    pub fn from_log_weights(support: &[f64], log_weights: &[f64]) -> Self {
        let lse = log_sum_exp(log_weights);
        let probabilities = log_weights.iter().map(|l| (l - lse).exp()).collect();
        Self {
            support: support.to_vec(),
            probabilities,
        }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probabilities).map(|(y, p)| y * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.support
            .iter()
            .zip(&self.probabilities)
            .map(|(y, p)| p * (y - m) * (y - m))
            .sum()
    }

    /// Mass strictly below `lo` plus mass strictly above `hi`.
    pub fn mass_outside(&self, lo: f64, hi: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.probabilities)
            .filter(|(y, _)| **y < lo || **y > hi)
            .map(|(_, p)| p)
            .sum()
    }

    /// Mean and variance of `g(Y)`.
    pub fn moments_of(&self, g: impl Fn(f64) -> f64) -> (f64, f64) {
        let vals: Vec<f64> = self.support.iter().map(|&y| g(y)).collect();
        let m: f64 = vals.iter().zip(&self.probabilities).map(|(v, p)| v * p).sum();
        let v = vals
            .iter()
            .zip(&self.probabilities)
            .map(|(x, p)| p * (x - m) * (x - m))
            .sum();
        (m, v)
    }
}

/// The fitted copula `π_ρ` with its potentials and marginals.
#[derive(Debug, Clone)]
pub struct BregmanSinkhornCopula {
    potentials: SinkhornPotentials,
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    log_mu: Vec<f64>,
    log_nu: Vec<f64>,
}

impl BregmanSinkhornCopula {
    pub fn fit(
        mu: &EmpiricalMeasure,
        nu: &EmpiricalMeasure,
        stickiness: Stickiness,
        options: &SolverOptions,
    ) -> Result<Self> {
        let p = solve_potentials(mu, nu, stickiness, options)?;
        Self::from_potentials(p, mu.clone(), nu.clone())
    }

    pub fn from_potentials(potentials: SinkhornPotentials, mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> Result<Self> {
        if potentials.mu_atoms != mu.atoms() || potentials.nu_atoms != nu.atoms() {
            return Err(Error::Domain("potentials were fitted on different supports".into()));
        }
        if !(potentials.epsilon > 0.0) {
            return Err(Error::Unsupported("copula requires rho < 1".into()));
        }
        let log_mu = mu.weights().iter().map(|w| w.ln()).collect();
        let log_nu = nu.weights().iter().map(|w| w.ln()).collect();
        Ok(Self {
            potentials,
            mu,
            nu,
            log_mu,
            log_nu,
        })
    }

    pub fn potentials(&self) -> &SinkhornPotentials {
        &self.potentials
    }

    pub fn mu(&self) -> &EmpiricalMeasure {
        &self.mu
    }

    pub fn nu(&self) -> &EmpiricalMeasure {
        &self.nu
    }

    pub fn epsilon(&self) -> f64 {
        self.potentials.epsilon
    }

    pub fn rho(&self) -> f64 {
        self.potentials.rho
    }

    pub fn coupling(&self) -> Result<Coupling> {
        coupling_from_potentials(&self.potentials, &self.mu, &self.nu)
    }

    fn tilt_y1(&self, y0: f64) -> Vec<f64> {
        let eps = self.epsilon();
        self.nu
            .atoms()
            .iter()
            .zip(&self.potentials.psi)
            .zip(&self.log_nu)
            .map(|((y, psi), ln)| ln + (y0 * y - psi) / eps)
            .collect()
    }

    fn tilt_y0(&self, y1: f64) -> Vec<f64> {
        let eps = self.epsilon();
        self.mu
            .atoms()
            .iter()
            .zip(&self.potentials.phi)
            .zip(&self.log_mu)
            .map(|((x, phi), lm)| lm + (x * y1 - phi) / eps)
            .collect()
    }

    /// `φ(y₀) = ε log Σⱼ νⱼ exp((y₀ yⱼ − ψⱼ)/ε)` at any real `y₀`.
    pub fn phi_at(&self, y0: f64) -> f64 {
        self.epsilon() * log_sum_exp(&self.tilt_y1(y0))
    }

    /// `ψ(y₁) = ε log Σᵢ μᵢ exp((xᵢ y₁ − φᵢ)/ε)` at any real `y₁`.
    pub fn psi_at(&self, y1: f64) -> f64 {
        self.epsilon() * log_sum_exp(&self.tilt_y0(y1))
    }

    /// Law of `Y₁` given `Y₀ = y₀`, on the atoms of `ν`.
    pub fn conditional_distribution(&self, y0: f64) -> DiscreteConditional {
        DiscreteConditional::from_log_weights(self.nu.atoms(), &self.tilt_y1(y0))
    }

    /// Law of `Y₀` given `Y₁ = y₁`, on the atoms of `μ`.
    pub fn reverse_conditional(&self, y1: f64) -> DiscreteConditional {
        DiscreteConditional::from_log_weights(self.mu.atoms(), &self.tilt_y0(y1))
    }

    pub fn conditional_mean(&self, y0: f64) -> f64 {
        self.conditional_distribution(y0).mean()
    }

    pub fn conditional_variance(&self, y0: f64) -> f64 {
        self.conditional_distribution(y0).variance()
    }

    /// `φ̇(y₀)`, the conditional mean of `Y₁`.
    pub fn phi_dot(&self, y0: f64) -> f64 {
        self.conditional_mean(y0)
    }

    /// `φ̈(y₀)`, the conditional variance of `Y₁` divided by `ε`.
    pub fn phi_ddot(&self, y0: f64) -> f64 {
        self.conditional_variance(y0) / self.epsilon()
    }

    /// `ψ̇(y₁)`, the conditional mean of `Y₀`.
    pub fn psi_dot(&self, y1: f64) -> f64 {
        self.reverse_conditional(y1).mean()
    }

    pub fn psi_ddot(&self, y1: f64) -> f64 {
        self.reverse_conditional(y1).variance() / self.epsilon()
    }

    /// Discrete conjugate `ψ*(y₀) = maxⱼ {y₀ yⱼ − ψⱼ}` and the maximizing index.
    pub fn psi_star(&self, y0: f64) -> (f64, usize) {
        legendre(self.nu.atoms(), &self.potentials.psi, y0)
    }

    /// `B_ψ(y₁ | ∇ψ*(y₀)) = ψ*(y₀) − y₀ y₁ + ψ(y₁)` for an atom `y₁` of `ν`.
    pub fn bregman_divergence(&self, y1: f64, y0_anchor: f64) -> Result<f64> {
        let j = self
            .nu
            .index_of(y1)
            .ok_or_else(|| Error::Domain(format!("{y1} is not an atom of nu")))?;
        let (star, _) = self.psi_star(y0_anchor);
        Ok((star - y0_anchor * y1 + self.potentials.psi[j]).max(0.0))
    }

    /// The conditional written as `exp(−B/ε)` against `ν`.
    pub fn conditional_from_bregman(&self, y0: f64) -> DiscreteConditional {
        bregman_conditional(self.nu.atoms(), &self.log_nu, &self.potentials.psi, y0, self.epsilon())
    }

    /// `c(u₀, u₁) = exp((F⁻¹(u₀) G⁻¹(u₁) − φ(F⁻¹(u₀)) − ψ(G⁻¹(u₁)))/ε)`.
    pub fn copula_density_unit_square(&self, u0: f64, u1: f64) -> Result<f64> {
        let i = self.mu.quantile_index(u0)?;
        let j = self.nu.quantile_index(u1)?;
        let (x, y) = (self.mu.atoms()[i], self.nu.atoms()[j]);
        let p = &self.potentials;
        Ok(((x * y - p.phi[i] - p.psi[j]) / p.epsilon).exp())
    }

    /// Density on the midpoints of a `k × k` lattice of the unit square.
    pub fn density_grid(&self, k: usize) -> Result<Vec<(f64, f64, f64)>> {
        let mut out = Vec::with_capacity(k * k);
        for a in 0..k {
            let u0 = (a as f64 + 0.5) / k as f64;
            for b in 0..k {
                let u1 = (b as f64 + 0.5) / k as f64;
                out.push((u0, u1, self.copula_density_unit_square(u0, u1)?));
            }
        }
        Ok(out)
    }

    /// Writes the lattice as CSV `u0,u1,density`.
    pub fn write_density_grid_csv<W: Write>(&self, k: usize, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["u0", "u1", "density"])?;
        for (u0, u1, d) in self.density_grid(k)? {
            w.serialize((u0, u1, d))?;
        }
        w.flush()?;
        Ok(())
    }

    /// `P(Y₁ ∉ [G⁻¹(u−δ), G⁻¹(u+δ)] | Y₀ = F⁻¹(u))`.
    pub fn rank_violation_probability(&self, u: f64, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta < u.min(1.0 - u)) {
            return Err(Error::Domain(format!("delta = {delta} must lie in (0, min(u, 1-u)) for u = {u}")));
        }
        let y0 = self.mu.quantile(u)?;
        let lo = self.nu.quantile(u - delta)?;
        let hi = self.nu.quantile(u + delta)?;
        Ok(self.conditional_distribution(y0).mass_outside(lo, hi))
    }
}

fn legendre(atoms: &[f64], psi: &[f64], y0: f64) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (j, (y, p)) in atoms.iter().zip(psi).enumerate() {
        let v = y0 * y - p;
        // Strict comparison keeps the smallest maximizing atom.
        if v > best.0 {
            best = (v, j);
        }
    }
    best
}

fn bregman_conditional(atoms: &[f64], log_nu: &[f64], psi: &[f64], y0: f64, eps: f64) -> DiscreteConditional {
    let (star, _) = legendre(atoms, psi, y0);
    let logw: Vec<f64> = atoms
        .iter()
        .zip(psi)
        .zip(log_nu)
        .map(|((y, p), ln)| ln - (star - y0 * y + p).max(0.0) / eps)
        .collect();
    DiscreteConditional::from_log_weights(atoms, &logw)
}

/// Gaussian copula density with correlation `ρ ∈ (−1, 1)`.
pub fn gaussian_copula_density(rho: f64, u0: f64, u1: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("|rho| = {} must be below 1", rho.abs())));
    }
    for u in [u0, u1] {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("u = {u} outside (0, 1)")));
        }
    }
    let a = normal_quantile(u0);
    let b = normal_quantile(u1);
    let r2 = rho * rho;
    let e = (2.0 * rho * a * b - r2 * a * a - r2 * b * b) / (2.0 * (1.0 - r2));
    Ok(e.exp() / (1.0 - r2).sqrt())
}

/// `G⁻¹(F(y₀))`; points below the support of `μ` map to the smallest atom of `ν`.
pub fn comonotone_map(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, y0: f64) -> f64 {
    let u = mu.ecdf(y0);
    nu.quantile_closed(u).expect("ecdf lies in [0, 1]")
}

/// Convex potential on the atoms of `ν` whose conjugate's argmax is `G⁻¹ ∘ F`
/// on the atoms of `μ`, normalized by `ψ(y₁) = 0`.
///
/// Between `yⱼ` and `yⱼ₊₁` the slope is the midpoint of the last `μ`-atom sent
/// to `yⱼ` or below and the first one sent above it, so unsplit atoms of `μ`
/// lie strictly inside the subdifferential of their image.
pub fn brenier_potential(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let y = nu.atoms();
    let x = mu.atoms();
    let range = (mu.max() - mu.min()).max(1.0);
    let mut psi = vec![0.0; y.len()];
    for j in 0..y.len().saturating_sub(1) {
        let g = nu.cumulative()[j];
        let k = mu.cumulative().partition_point(|&c| c <= g + crate::empirical::CDF_SLACK);
        let slope = match (k.checked_sub(1).map(|i| x[i]), x.get(k)) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (None, Some(b)) => b - range,
            (Some(a), None) => a + range,
            (None, None) => unreachable!("measures are non-empty"),
        };
        psi[j + 1] = psi[j] + (y[j + 1] - y[j]) * slope;
    }
    psi
}

/// Either a fitted Sinkhorn copula or the comonotone coupling at `ρ = 1`.
#[derive(Debug, Clone)]
pub enum JointModel {
    Sinkhorn(BregmanSinkhornCopula),
    Comonotone { mu: EmpiricalMeasure, nu: EmpiricalMeasure },
}

impl JointModel {
    pub fn fit(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, rho: f64, options: &SolverOptions) -> Result<Self> {
        let s = Stickiness::new(rho)?;
        if s.is_comonotone() {
            Ok(Self::Comonotone {
                mu: mu.clone(),
                nu: nu.clone(),
            })
        } else {
            Ok(Self::Sinkhorn(BregmanSinkhornCopula::fit(mu, nu, s, options)?))
        }
    }

    pub fn rho(&self) -> f64 {
        match self {
            Self::Sinkhorn(c) => c.rho(),
            Self::Comonotone { .. } => 1.0,
        }
    }

    pub fn mu(&self) -> &EmpiricalMeasure {
        match self {
            Self::Sinkhorn(c) => c.mu(),
            Self::Comonotone { mu, .. } => mu,
        }
    }

    pub fn nu(&self) -> &EmpiricalMeasure {
        match self {
            Self::Sinkhorn(c) => c.nu(),
            Self::Comonotone { nu, .. } => nu,
        }
    }

    /// Joint weights with marginals matched exactly.
    pub fn coupling(&self) -> Result<Coupling> {
        match self {
            Self::Sinkhorn(c) => Ok(c.coupling()?.round_to_marginals()),
            Self::Comonotone { mu, nu } => Ok(Coupling::comonotone(mu, nu)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankStickinessPoint {
    pub epsilon: f64,
    pub mean_rank: f64,
    pub var_rank: f64,
}

/// Conditional rank moments of `G(Y₁) | F(Y₀) = u₀` under the Bregman tilt of
/// `ψ_ρ` at each regularization in `eps_sequence`.
///
/// At `ρ = 1` the potential is [`brenier_potential`]; otherwise `ψ_ρ` is fitted
/// once at `ε(ρ)` and only the tilt temperature varies.
pub fn rank_stickiness_profile(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    rho: f64,
    eps_sequence: &[f64],
    u0: f64,
    options: &SolverOptions,
) -> Result<Vec<RankStickinessPoint>> {
    let s = Stickiness::new(rho)?;
    let psi = if s.is_comonotone() {
        brenier_potential(mu, nu)
    } else {
        solve_potentials(mu, nu, s, options)?.psi
    };
    let y0 = mu.quantile(u0)?;
    let log_nu: Vec<f64> = nu.weights().iter().map(|w| w.ln()).collect();
    eps_sequence
        .iter()
        .map(|&eps| {
            if !(eps > 0.0) {
                return Err(Error::Domain(format!("epsilon = {eps} must be positive")));
            }
            let cond = bregman_conditional(nu.atoms(), &log_nu, &psi, y0, eps);
            let (mean_rank, var_rank) = cond.moments_of(|y| nu.ecdf(y));
            Ok(RankStickinessPoint {
                epsilon: eps,
                mean_rank,
                var_rank: var_rank.max(0.0),
            })
        })
        .collect()
}
