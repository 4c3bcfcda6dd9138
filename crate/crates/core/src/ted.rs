//! Treatment-effect distributions: the law of `Y₁ − Y₀` under a coupling.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::copula::BregmanSinkhornCopula;
use crate::empirical::{EmpiricalMeasure, CDF_SLACK};
use crate::error::{Error, Result};
use crate::sinkhorn::Coupling;

/// Differences closer than this are merged into one atom.
pub const MERGE_TOL: f64 = 1e-12;
/// Above this many coupling cells, CSV export switches to a histogram.
pub const HISTOGRAM_THRESHOLD: usize = 1_000_000;

/// Weighted atoms of `y₁ − y₀`, sorted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TedDistribution {
    atoms: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip)]
    cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantilePoint {
    pub u: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TedSummary {
    pub schema_version: u32,
    pub mean: f64,
    pub variance: f64,
    pub quantiles: Vec<QuantilePoint>,
    pub negative_effect_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub mass: f64,
}

impl TedDistribution {
    /// Merges sorted `(value, weight)` pairs whose values agree within [`MERGE_TOL`].
    fn from_pairs(mut pairs: Vec<(f64, f64)>, cells: usize) -> Result<Self> {
        pairs.retain(|p| p.1 > 0.0);
        if pairs.is_empty() {
            return Err(Error::Domain("treatment-effect distribution has no mass".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut anchor = f64::NAN;
        for (v, w) in pairs {
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite effect {v}")));
            }
            if !atoms.is_empty() && v - anchor <= MERGE_TOL {
                *weights.last_mut().unwrap() += w;
            } else {
                anchor = v;
                atoms.push(v);
                weights.push(w);
            }
        }
        Ok(Self { atoms, weights, cells })
    }

    /// Uniform distribution over observed individual effects.
    pub fn from_effects(effects: &[f64]) -> Result<Self> {
        let w = 1.0 / effects.len() as f64;
        Self::from_pairs(effects.iter().map(|&e| (e, w)).collect(), effects.len())
    }

    /// Mixture `Σ wₖ Tₖ` of distributions.
    pub fn mixture(components: &[(f64, &TedDistribution)]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut cells = 0;
        for (w, t) in components {
            if !(*w >= 0.0) {
                return Err(Error::Domain(format!("mixture weight {w} is negative")));
            }
            cells += t.cells;
            pairs.extend(t.atoms.iter().zip(&t.weights).map(|(a, b)| (*a, w * b)));
        }
        Self::from_pairs(pairs, cells)
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| w * (a - m) * (a - m))
            .sum()
    }

    pub fn to_measure(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_weighted(&self.atoms, &self.weights)
    }

    /// `P(Y₁ − Y₀ ≤ δ)`.
    pub fn cdf(&self, delta: f64) -> f64 {
        let k = self.atoms.partition_point(|&a| a <= delta);
        self.weights[..k].iter().sum::<f64>().min(1.0)
    }

    /// Left-continuous generalized inverse of [`Self::cdf`].
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u <= 1.0) {
            return Err(Error::Domain(format!("quantile level {u} outside (0, 1]")));
        }
        let mut acc = 0.0;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            acc += w;
            if acc >= u - CDF_SLACK {
                return Ok(*a);
            }
        }
        Ok(*self.atoms.last().unwrap())
    }

    /// `P(Y₁ − Y₀ < 0)`.
    pub fn negative_effect_mass(&self) -> f64 {
        let k = self.atoms.partition_point(|&a| a < 0.0);
        self.weights[..k].iter().fold(0.0, |acc, w| acc + w)
    }

    pub fn summary(&self) -> Result<TedSummary> {
        let quantiles = (1..=19)
            .map(|k| {
                let u = k as f64 * 0.05;
                Ok(QuantilePoint {
                    u,
                    value: self.quantile(u)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TedSummary {
            schema_version: crate::SCHEMA_VERSION,
            mean: self.mean(),
            variance: self.variance(),
            quantiles,
            negative_effect_mass: self.negative_effect_mass(),
        })
    }

    /// Freedman–Diaconis histogram, with the sample size taken as the
    /// effective number of atoms `1 / Σ w²`.
    pub fn fd_histogram(&self) -> Result<Vec<HistogramBin>> {
        let lo = self.atoms[0];
        let hi = *self.atoms.last().unwrap();
        let iqr = self.quantile(0.75)? - self.quantile(0.25)?;
        let n_eff = 1.0 / self.weights.iter().map(|w| w * w).sum::<f64>();
        let width = 2.0 * iqr / n_eff.cbrt();
        let bins = if width > 0.0 && hi > lo {
            (((hi - lo) / width).ceil() as usize).clamp(1, 100_000)
        } else {
            1
        };
        let step = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut mass = vec![0.0; bins];
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            let k = (((a - lo) / step) as usize).min(bins - 1);
            mass[k] += w;
        }
        Ok(mass
            .into_iter()
            .enumerate()
            .map(|(k, m)| HistogramBin {
                bin_left: lo + k as f64 * step,
                bin_right: if k + 1 == bins { hi.max(lo + step) } else { lo + (k + 1) as f64 * step },
                mass: m,
            })
            .collect())
    }

    /// CSV `atom,weight`, or `bin_left,bin_right,mass` when the source
    /// coupling had more than [`HISTOGRAM_THRESHOLD`] cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.cells > HISTOGRAM_THRESHOLD {
            w.write_record(["bin_left", "bin_right", "mass"])?;
            for b in self.fd_histogram()? {
                w.serialize((b.bin_left, b.bin_right, b.mass))?;
            }
        } else {
            w.write_record(["atom", "weight"])?;
            for (a, p) in self.atoms.iter().zip(&self.weights) {
                w.serialize((a, p))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Pushes a coupling forward through `(y₀, y₁) ↦ y₁ − y₀`.
pub fn impute_ted(c: &Coupling) -> Result<TedDistribution> {
    let pairs = c.support().map(|(y0, y1, w)| (y1 - y0, w)).collect();
    TedDistribution::from_pairs(pairs, c.rows() * c.cols())
}

pub fn ted_quantile(t: &TedDistribution, u: f64) -> Result<f64> {
    t.quantile(u)
}

pub fn ted_cdf(t: &TedDistribution, delta: f64) -> f64 {
    t.cdf(delta)
}

pub fn negative_effect_mass(t: &TedDistribution) -> f64 {
    t.negative_effect_mass()
}

/// `n` draws of `(y₀, y₁)`: `y₀ ~ μ`, then `y₁` from the fitted conditional.
pub fn sample_joint(c: &BregmanSinkhornCopula, n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    let mu = c.mu();
    let nu = c.nu();
    let tables: Vec<Vec<f64>> = mu
        .atoms()
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            c.conditional_distribution(x)
                .probabilities()
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let i = draw(mu.cumulative(), rng.random::<f64>());
        let j = draw(&tables[i], rng.random::<f64>());
        out.push((mu.atoms()[i], nu.atoms()[j]));
    }
    Ok(out)
}

/// Inverse-CDF lookup on a cumulative table.
pub(crate) fn draw(cumulative: &[f64], u: f64) -> usize {
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}
