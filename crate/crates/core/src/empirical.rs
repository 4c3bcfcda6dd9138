//! Weighted empirical measures on the real line and the observed-data record.
//!
//! Quantiles follow the left-continuous generalized inverse
//! `F⁻¹(u) = inf { y : F(y) ≥ u }`, so `G⁻¹ ∘ F` is well defined on atoms.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Slack used when comparing a probability level against cumulative weights.
pub const CDF_SLACK: f64 = 1e-12;

/// Finitely supported probability measure with strictly increasing atoms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Uniform measure over the samples; repeated values are merged.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let w = vec![1.0; samples.len()];
        Self::from_weighted(samples, &w)
    }

    /// Builds a measure from arbitrary atoms and nonnegative weights.
    ///
    /// Atoms are sorted, equal atoms merged, zero-weight atoms dropped and the
    /// weights renormalized to one.
    pub fn from_weighted(atoms: &[f64], weights: &[f64]) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::Domain(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.is_empty() {
            return Err(Error::Estimation("empty sample".into()));
        }
        let mut pairs = Vec::with_capacity(atoms.len());
        for (&a, &w) in atoms.iter().zip(weights) {
            if !a.is_finite() {
                return Err(Error::Domain(format!("non-finite atom {a}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Domain(format!("invalid weight {w}")));
            }
            if w > 0.0 {
                pairs.push((a, w));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Domain("all weights are zero".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged_atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut merged_weights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match merged_atoms.last() {
                Some(&last) if last == a => *merged_weights.last_mut().unwrap() += w,
                _ => {
                    merged_atoms.push(a);
                    merged_weights.push(w);
                }
            }
        }
        let total: f64 = merged_weights.iter().sum();
        for w in merged_weights.iter_mut() {
            *w /= total;
        }
        Ok(Self::from_parts(merged_atoms, merged_weights))
    }

    /// Dirac mass at `a`.
    pub fn point_mass(a: f64) -> Result<Self> {
        Self::from_weighted(&[a], &[1.0])
    }

    /// Discretizes a density on `[lo, hi]`: `n` midpoint atoms weighted by `density`.
    pub fn from_density(lo: f64, hi: f64, n: usize, density: impl Fn(f64) -> f64) -> Result<Self> {
        if !(lo < hi) || n == 0 {
            return Err(Error::Domain(format!("empty grid [{lo}, {hi}] with {n} atoms")));
        }
        let h = (hi - lo) / n as f64;
        let atoms: Vec<f64> = (0..n).map(|k| lo + (k as f64 + 0.5) * h).collect();
        let weights: Vec<f64> = atoms.iter().map(|&a| density(a)).collect();
        Self::from_weighted(&atoms, &weights)
    }

    fn from_parts(atoms: Vec<f64>, weights: Vec<f64>) -> Self {
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Self {
            atoms,
            weights,
            cumulative,
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Cumulative weights `F(aᵢ)` at each atom.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.atoms[0]
    }

    pub fn max(&self) -> f64 {
        self.atoms[self.atoms.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * a * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| (a - m).powi(2) * w)
            .sum()
    }

    /// Index of `y` among the atoms, if it is one.
    pub fn index_of(&self, y: f64) -> Option<usize> {
        self.atoms.binary_search_by(|a| a.total_cmp(&y)).ok()
    }

    /// Right-continuous distribution function `F(y) = μ((-∞, y])`.
    pub fn ecdf(&self, y: f64) -> f64 {
        let k = self.atoms.partition_point(|&a| a <= y);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Index of the smallest atom whose cumulative weight reaches `u`.
    pub fn quantile_index(&self, u: f64) -> Result<usize> {
        if !(u > 0.0 && u <= 1.0) {
            return Err(Error::Domain(format!("quantile level {u} outside (0, 1]")));
        }
        let i = self.cumulative.partition_point(|&c| c < u - CDF_SLACK);
        Ok(i.min(self.atoms.len() - 1))
    }

    /// Left-continuous generalized inverse `inf { y : F(y) ≥ u }` for `u ∈ (0, 1]`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        Ok(self.atoms[self.quantile_index(u)?])
    }

    /// Quantile extended to `u = 0` by the smallest atom.
    pub fn quantile_closed(&self, u: f64) -> Result<f64> {
        if u == 0.0 {
            Ok(self.atoms[0])
        } else {
            self.quantile(u)
        }
    }

    /// Pushforward of the measure through `f`.
    pub fn map_atoms(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mapped: Vec<f64> = self.atoms.iter().map(|&a| f(a)).collect();
        Self::from_weighted(&mapped, &self.weights)
    }
}

/// 1-Wasserstein distance `∫ |F_a − F_b| dy` between two measures on the line.
pub fn wasserstein1(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let (xa, xb) = (a.atoms(), b.atoms());
    let (ca, cb) = (a.cumulative(), b.cumulative());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut fa, mut fb) = (0.0_f64, 0.0_f64);
    let mut prev: Option<f64> = None;
    let mut total = 0.0_f64;
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total += (fa - fb).abs() * (next - p);
        }
        while i < xa.len() && xa[i] == next {
            fa = ca[i];
            i += 1;
        }
        while j < xb.len() && xb[j] == next {
            fb = cb[j];
            j += 1;
        }
        prev = Some(next);
    }
    total
}

/// Observed `(Y, T[, X])` records from an experiment or observational study.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedDataset {
    outcomes: Vec<f64>,
    treatments: Vec<bool>,
    covariates: Option<Vec<String>>,
}

impl ObservedDataset {
    pub fn new(
        outcomes: Vec<f64>,
        treatments: Vec<bool>,
        covariates: Option<Vec<String>>,
    ) -> Result<Self> {
        if outcomes.len() != treatments.len() {
            return Err(Error::Domain(format!(
                "{} outcomes but {} treatment flags",
                outcomes.len(),
                treatments.len()
            )));
        }
        if let Some(x) = &covariates {
            if x.len() != outcomes.len() {
                return Err(Error::Domain(format!(
                    "{} outcomes but {} covariate labels",
                    outcomes.len(),
                    x.len()
                )));
            }
        }
        if let Some(bad) = outcomes.iter().find(|y| !y.is_finite()) {
            return Err(Error::Domain(format!("non-finite outcome {bad}")));
        }
        Ok(Self {
            outcomes,
            treatments,
            covariates,
        })
    }

    /// Builds a dataset from 0/1 treatment flags.
    pub fn from_flags(outcomes: Vec<f64>, flags: &[u8]) -> Result<Self> {
        let mut t = Vec::with_capacity(flags.len());
        for &f in flags {
            match f {
                0 => t.push(false),
                1 => t.push(true),
                other => return Err(Error::Domain(format!("treatment flag {other} not in {{0,1}}"))),
            }
        }
        Self::new(outcomes, t, None)
    }

    /// Reads `y,t[,x]` CSV records.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let with_x = match names.as_slice() {
            ["y", "t"] => false,
            ["y", "t", "x"] => true,
            _ => {
                return Err(Error::Parse {
                    row: 1,
                    message: format!("expected header `y,t[,x]`, found `{}`", names.join(",")),
                })
            }
        };
        let width = if with_x { 3 } else { 2 };
        let mut outcomes = Vec::new();
        let mut treatments = Vec::new();
        let mut labels = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() != width || record.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {width} non-empty fields, found `{}`", record.iter().collect::<Vec<_>>().join(",")),
                });
            }
            let y: f64 = record[0].parse().map_err(|_| Error::Parse {
                row,
                message: format!("outcome `{}` is not a number", &record[0]),
            })?;
            if !y.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("outcome `{}` is not finite", &record[0]),
                });
            }
            let t = match &record[1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        row,
                        message: format!("treatment `{other}` is not 0 or 1"),
                    })
                }
            };
            outcomes.push(y);
            treatments.push(t);
            if with_x {
                labels.push(record[2].to_string());
            }
        }
        Self::new(outcomes, treatments, with_x.then_some(labels))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[bool] {
        &self.treatments
    }

    pub fn covariates(&self) -> Option<&[String]> {
        self.covariates.as_deref()
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.treatments.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }

    pub fn control_outcomes(&self) -> Vec<f64> {
        self.arm(false)
    }

    pub fn treated_outcomes(&self) -> Vec<f64> {
        self.arm(true)
    }

    fn arm(&self, treated: bool) -> Vec<f64> {
        self.outcomes
            .iter()
            .zip(&self.treatments)
            .filter(|(_, &t)| t == treated)
            .map(|(&y, _)| y)
            .collect()
    }

    /// Errors unless both arms are non-empty.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.n_control() == 0 {
            return Err(Error::Estimation("control arm is empty".into()));
        }
        if self.n_treated() == 0 {
            return Err(Error::Estimation("treated arm is empty".into()));
        }
        Ok(())
    }

    /// Empirical marginals `(μₙ, νₙ)` of the control and treated arms.
    pub fn split_by_treatment(&self) -> Result<(EmpiricalMeasure, EmpiricalMeasure)> {
        self.require_both_arms()?;
        Ok((
            EmpiricalMeasure::from_samples(&self.control_outcomes())?,
            EmpiricalMeasure::from_samples(&self.treated_outcomes())?,
        ))
    }

    /// Sub-datasets per covariate label, ordered by label.
    pub fn strata(&self) -> Result<BTreeMap<String, ObservedDataset>> {
        let labels = self
            .covariates
            .as_ref()
            .ok_or_else(|| Error::Domain("dataset has no covariate column".into()))?;
        let mut groups: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for ((y, t), x) in self.outcomes.iter().zip(&self.treatments).zip(labels) {
            let g = groups.entry(x.clone()).or_default();
            g.0.push(*y);
            g.1.push(*t);
        }
        groups
            .into_iter()
            .map(|(label, (y, t))| Ok((label, ObservedDataset::new(y, t, None)?)))
            .collect()
    }
}
