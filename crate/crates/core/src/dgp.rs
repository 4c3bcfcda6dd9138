//! Data-generating processes and the simulation harness.
//!
//! A panel holds both potential outcomes for `n` units. Experiments split it
//! by a random assignment, refit the copula on the observed arms and compare
//! against quantities computed from the full panel.
//!
//! Randomness: the panel draws from stream 0 of `ChaCha8Rng` seeded with
//! `seed`; assignment `k` draws from stream 1 seeded with `seed + k`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ate_variance::{FhConvention, VarianceReport};
use crate::copula::{BregmanSinkhornCopula, JointModel};
use crate::empirical::{wasserstein1, EmpiricalMeasure, ObservedDataset};
use crate::error::{Error, Result};
use crate::numeric::ols_slope;
use crate::sinkhorn::{SolverOptions, Stickiness};
use crate::special::{normal_cdf, normal_pdf};
use crate::ted::{impute_ted, sample_joint, TedDistribution, TedSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Finite normal mixture truncated to `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMarginal {
    pub components: Vec<NormalComponent>,
    pub lower: f64,
    pub upper: f64,
}

impl MixtureMarginal {
    pub fn new(components: Vec<NormalComponent>, lower: f64, upper: f64) -> Result<Self> {
        let m = Self {
            components,
            lower,
            upper,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn normal(mean: f64, sd: f64, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![NormalComponent { weight: 1.0, mean, sd }], lower, upper)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Domain("mixture has no components".into()));
        }
        if !(self.lower < self.upper) {
            return Err(Error::Domain(format!("empty support [{}, {}]", self.lower, self.upper)));
        }
        for c in &self.components {
            if !(c.weight > 0.0 && c.sd > 0.0 && c.mean.is_finite()) {
                return Err(Error::Domain(format!("invalid mixture component {c:?}")));
            }
        }
        if !(self.mass() > 1e-12) {
            return Err(Error::Domain("mixture puts no mass on its support".into()));
        }
        Ok(())
    }

    fn raw_cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * normal_cdf((x - c.mean) / c.sd))
            .sum()
    }

    fn mass(&self) -> f64 {
        self.raw_cdf(self.upper) - self.raw_cdf(self.lower)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lower || x > self.upper {
            return 0.0;
        }
        let raw: f64 = self
            .components
            .iter()
            .map(|c| c.weight * normal_pdf((x - c.mean) / c.sd) / c.sd)
            .sum();
        raw / self.mass()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        ((self.raw_cdf(x) - self.raw_cdf(self.lower)) / self.mass()).clamp(0.0, 1.0)
    }

    /// Inverse of [`Self::cdf`] by bisection.
    pub fn quantile(&self, u: f64) -> f64 {
        let (mut lo, mut hi) = (self.lower, self.upper);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * (1.0 + hi.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn mean(&self) -> f64 {
        let grid = self.grid(4000).expect("validated mixture");
        grid.mean()
    }

    /// `n` midpoint atoms on the support, weighted by the density.
    pub fn grid(&self, n: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_density(self.lower, self.upper, n, |x| self.pdf(x))
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| self.quantile(open_unit(rng))).collect()
    }

    /// Control outcomes of the bimodal effect design: low mode at 0, high at 1.5.
    pub fn bimodal_control() -> Self {
        Self::bimodal(0.0, 1.5)
    }

    /// Treated outcomes of the bimodal effect design: modes shifted by −0.3 and +0.5.
    pub fn bimodal_treated() -> Self {
        Self::bimodal(-0.3, 2.0)
    }

    fn bimodal(low: f64, high: f64) -> Self {
        Self {
            components: vec![
                NormalComponent {
                    weight: 0.6,
                    mean: low,
                    sd: 0.2,
                },
                NormalComponent {
                    weight: 0.4,
                    mean: high,
                    sd: 0.2,
                },
            ],
            lower: -1.5,
            upper: 3.5,
        }
    }
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianCopula,
    SinkhornCopula,
    Comonotone,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: Family,
    /// Copula parameter: correlation for the Gaussian copula, stickiness for Sinkhorn.
    pub rho0: f64,
    pub control: MixtureMarginal,
    pub treated: MixtureMarginal,
    pub n: usize,
    pub seed: u64,
    /// Atoms per marginal grid when the Sinkhorn copula is fitted.
    #[serde(default = "default_grid_atoms")]
    pub grid_atoms: usize,
}

fn default_grid_atoms() -> usize {
    500
}

impl DgpSpec {
    /// Bimodal effect design with 60% negative effects.
    pub fn bimodal(family: Family) -> Self {
        Self {
            family,
            rho0: if family == Family::GaussianCopula { 0.9 } else { 0.99 },
            control: MixtureMarginal::bimodal_control(),
            treated: MixtureMarginal::bimodal_treated(),
            n: 2000,
            seed: 20_240_601,
            grid_atoms: 500,
        }
    }

    /// Truncated-normal outcomes for the variance comparison:
    /// `N(0, 0.7²)` controls and `N(0.14, 0.77²)` treated, cut at 4.5 control sd.
    pub fn variance_design(family: Family) -> Self {
        Self {
            family,
            rho0: 0.95,
            control: MixtureMarginal::normal(0.0, 0.7, -3.15, 3.15).expect("valid"),
            treated: MixtureMarginal::normal(0.14, 0.77, -3.15, 3.15).expect("valid"),
            n: 1000,
            seed: 20_240_602,
            grid_atoms: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        self.treated.validate()?;
        if self.n < 2 {
            return Err(Error::Domain(format!("panel size {} must be at least 2", self.n)));
        }
        let ok = match self.family {
            Family::GaussianCopula => self.rho0 > -1.0 && self.rho0 < 1.0,
            Family::SinkhornCopula => self.rho0 > 0.0 && self.rho0 < 1.0,
            Family::Comonotone | Family::Independent => true,
        };
        if !ok {
            return Err(Error::Domain(format!("rho0 = {} invalid for {:?}", self.rho0, self.family)));
        }
        if self.family == Family::SinkhornCopula && self.grid_atoms < 2 {
            return Err(Error::Domain("grid_atoms must be at least 2".into()));
        }
        Ok(())
    }
}

/// Full potential outcomes plus any number of assignment vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedPanel {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub assignments: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentScheme {
    /// Exactly `⌊n/2⌋` treated units.
    #[default]
    Balanced,
    /// Independent fair coins, redrawn until both arms are non-empty.
    Bernoulli,
}

fn panel_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn assignment_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
    rng.set_stream(1);
    rng
}

/// Draws one panel of `(Y₀, Y₁)` from the spec's joint law.
pub fn simulate(spec: &DgpSpec) -> Result<SimulatedPanel> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = panel_rng(spec.seed);
    let (y0, y1) = match spec.family {
        Family::SinkhornCopula => {
            let mu = spec.control.grid(spec.grid_atoms)?;
            let nu = spec.treated.grid(spec.grid_atoms)?;
            let c = BregmanSinkhornCopula::fit(&mu, &nu, Stickiness::new(spec.rho0)?, &SolverOptions::default())?;
            let seed = rng.random::<u64>();
            sample_joint(&c, n, seed)?.into_iter().unzip()
        }
        Family::GaussianCopula | Family::Comonotone | Family::Independent => {
            let mut y0 = Vec::with_capacity(n);
            let mut y1 = Vec::with_capacity(n);
            for _ in 0..n {
                let (u0, u1) = match spec.family {
                    Family::GaussianCopula => {
                        let z0: f64 = rng.sample(StandardNormal);
                        let xi: f64 = rng.sample(StandardNormal);
                        let z1 = spec.rho0 * z0 + (1.0 - spec.rho0 * spec.rho0).sqrt() * xi;
                        (normal_cdf(z0), normal_cdf(z1))
                    }
                    Family::Comonotone => {
                        let u = open_unit(&mut rng);
                        (u, u)
                    }
                    _ => (open_unit(&mut rng), open_unit(&mut rng)),
                };
                y0.push(spec.control.quantile(u0));
                y1.push(spec.treated.quantile(u1));
            }
            (y0, y1)
        }
    };
    Ok(SimulatedPanel {
        y0,
        y1,
        assignments: Vec::new(),
    })
}

impl SimulatedPanel {
    pub fn new(y0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        if y0.len() != y1.len() || y0.len() < 2 {
            return Err(Error::Domain(format!(
                "panel needs two equal-length columns of at least 2 values, got {} and {}",
                y0.len(),
                y1.len()
            )));
        }
        if y0.iter().chain(&y1).any(|v| !v.is_finite()) {
            return Err(Error::Domain("panel outcomes must be finite".into()));
        }
        Ok(Self {
            y0,
            y1,
            assignments: Vec::new(),
        })
    }

    /// Reads `y0,y1` CSV records, as written by [`SimulatedPanel::write_csv`].
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["y0", "y1"] {
            return Err(Error::Parse {
                row: 1,
                message: format!("expected header `y0,y1`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let (mut y0, mut y1) = (Vec::new(), Vec::new());
        for record in rdr.records() {
            let record = record?;
            let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let parse = |k: usize| -> Result<f64> {
                record
                    .get(k)
                    .and_then(|f| f.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        message: format!("expected two finite numbers, found `{}`", record.iter().collect::<Vec<_>>().join(",")),
                    })
            };
            if record.len() != 2 {
                parse(usize::MAX)?;
            }
            y0.push(parse(0)?);
            y1.push(parse(1)?);
        }
        Self::new(y0, y1)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    /// Appends `reps` assignments, the `k`-th drawn from `seed + k`.
    pub fn draw_assignments(&mut self, reps: usize, seed: u64, scheme: AssignmentScheme) {
        let n = self.len();
        for k in 0..reps {
            let mut rng = assignment_rng(seed, k);
            let t = match scheme {
                AssignmentScheme::Balanced => {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng);
                    let mut t = vec![false; n];
                    for &i in &idx[..n / 2] {
                        t[i] = true;
                    }
                    t
                }
                AssignmentScheme::Bernoulli => loop {
                    let t: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
                    if t.iter().any(|&v| v) && t.iter().any(|&v| !v) {
                        break t;
                    }
                },
            };
            self.assignments.push(t);
        }
    }

    /// Observed data under assignment `k`.
    pub fn observe(&self, k: usize) -> Result<ObservedDataset> {
        let t = self
            .assignments
            .get(k)
            .ok_or_else(|| Error::Domain(format!("no assignment {k}")))?;
        let y = self
            .y0
            .iter()
            .zip(&self.y1)
            .zip(t)
            .map(|((a, b), &treated)| if treated { *b } else { *a })
            .collect();
        ObservedDataset::new(y, t.clone(), None)
    }

    /// Individual effects `y₁ᵢ − y₀ᵢ` as a distribution.
    pub fn true_ted(&self) -> Result<TedDistribution> {
        let effects: Vec<f64> = self.y0.iter().zip(&self.y1).map(|(a, b)| b - a).collect();
        TedDistribution::from_effects(&effects)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["y0", "y1"])?;
        for (a, b) in self.y0.iter().zip(&self.y1) {
            w.serialize((a, b))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Spearman rank correlation of paired samples (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut l = k;
            while l + 1 < idx.len() && v[idx[l + 1]] == v[idx[k]] {
                l += 1;
            }
            let avg = (k + l) as f64 / 2.0;
            for &i in &idx[k..=l] {
                r[i] = avg;
            }
            k = l + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TedSweepRow {
    pub rho: f64,
    pub w1: f64,
    pub negative_effect_mass: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TedSweep {
    pub rows: Vec<TedSweepRow>,
    pub true_summary: TedSummary,
    #[serde(skip)]
    pub imputed: Vec<TedDistribution>,
    #[serde(skip)]
    pub truth: TedDistribution,
}

impl TedSweep {
    /// Row with the smallest W1 distance to the panel's TED.
    pub fn best(&self) -> &TedSweepRow {
        self.rows
            .iter()
            .min_by(|a, b| a.w1.total_cmp(&b.w1))
            .expect("sweep has at least one row")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One panel, one Bernoulli(1/2) split, one fit per `ρ`; W1 of each imputed
/// TED to the panel's TED.
pub fn run_ted_sweep(spec: &DgpSpec, rho_grid: &[f64], options: &SolverOptions) -> Result<TedSweep> {
    if rho_grid.is_empty() {
        return Err(Error::Domain("empty rho grid".into()));
    }
    let mut panel = simulate(spec)?;
    panel.draw_assignments(1, spec.seed, AssignmentScheme::Bernoulli);
    let data = panel.observe(0)?;
    let (mu, nu) = data.split_by_treatment()?;
    let truth = panel.true_ted()?;
    let truth_measure = truth.to_measure()?;
    let mut rows = Vec::with_capacity(rho_grid.len());
    let mut imputed = Vec::with_capacity(rho_grid.len());
    for &rho in rho_grid {
        let model = JointModel::fit(&mu, &nu, rho, options)?;
        let ted = impute_ted(&model.coupling()?)?;
        rows.push(TedSweepRow {
            rho,
            w1: wasserstein1(&ted.to_measure()?, &truth_measure),
            negative_effect_mass: ted.negative_effect_mass(),
            mean: ted.mean(),
            variance: ted.variance(),
        });
        imputed.push(ted);
    }
    Ok(TedSweep {
        rows,
        true_summary: truth.summary()?,
        imputed,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub rep: usize,
    pub tau_hat: f64,
    pub var_sb: f64,
    pub var_fh: f64,
    pub var_neyman: f64,
    pub var_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceAggregate {
    pub reps: usize,
    pub var_true: f64,
    pub mean_tau_hat: f64,
    pub mean_var_sb: f64,
    pub mean_var_fh: f64,
    pub mean_var_neyman: f64,
    /// `|mean(var_sb) − var_true| / var_true`; zero when the truth is zero.
    pub relative_error_sb: f64,
    pub frac_sb_above_true: f64,
    pub frac_fh_above_true: f64,
    pub frac_neyman_above_true: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComparison {
    pub rows: Vec<VarianceRow>,
    pub aggregate: VarianceAggregate,
}

impl VarianceComparison {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixes a panel and evaluates every estimator over `reps` fresh assignments,
/// refitting the copula at `rho` each time.
pub fn run_variance_comparison(
    spec: &DgpSpec,
    reps: usize,
    rho: f64,
    scheme: AssignmentScheme,
    convention: FhConvention,
    options: &SolverOptions,
) -> Result<VarianceComparison> {
    let panel = simulate(spec)?;
    variance_comparison_on(panel, spec.seed, reps, rho, scheme, convention, options)
}

/// [`run_variance_comparison`] on a given panel.
pub fn variance_comparison_on(
    mut panel: SimulatedPanel,
    seed: u64,
    reps: usize,
    rho: f64,
    scheme: AssignmentScheme,
    convention: FhConvention,
    options: &SolverOptions,
) -> Result<VarianceComparison> {
    if reps == 0 {
        return Err(Error::Domain("reps must be positive".into()));
    }
    panel.assignments.clear();
    panel.draw_assignments(reps, seed, scheme);
    let mut rows = Vec::with_capacity(reps);
    for k in 0..reps {
        let data = panel.observe(k)?;
        let (mu, nu) = data.split_by_treatment()?;
        let model = JointModel::fit(&mu, &nu, rho, options)?;
        let r = VarianceReport::compute(&data, &model, convention, Some((&panel.y0, &panel.y1)))?;
        rows.push(VarianceRow {
            rep: k,
            tau_hat: r.tau_hat,
            var_sb: r.var_sb,
            var_fh: r.var_fh,
            var_neyman: r.var_neyman,
            var_true: r.var_true.unwrap_or(0.0),
        });
    }
    let m = reps as f64;
    let var_true = rows[0].var_true;
    let mean = |f: fn(&VarianceRow) -> f64| rows.iter().map(f).sum::<f64>() / m;
    let frac = |f: fn(&VarianceRow) -> f64| rows.iter().filter(|r| f(r) > r.var_true).count() as f64 / m;
    let mean_var_sb = mean(|r| r.var_sb);
    let aggregate = VarianceAggregate {
        reps,
        var_true,
        mean_tau_hat: mean(|r| r.tau_hat),
        mean_var_sb,
        mean_var_fh: mean(|r| r.var_fh),
        mean_var_neyman: mean(|r| r.var_neyman),
        relative_error_sb: if var_true > 0.0 {
            (mean_var_sb - var_true).abs() / var_true
        } else {
            0.0
        },
        frac_sb_above_true: frac(|r| r.var_sb),
        frac_fh_above_true: frac(|r| r.var_fh),
        frac_neyman_above_true: frac(|r| r.var_neyman),
    };
    Ok(VarianceComparison { rows, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub control: MixtureMarginal,
    pub treated: MixtureMarginal,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    /// `ρ = 1` measures the comonotone map, `ρ < 1` the Sinkhorn potentials.
    pub rho: f64,
    #[serde(default = "default_reference_atoms")]
    pub reference_atoms: usize,
    pub seed: u64,
}

fn default_reference_atoms() -> usize {
    2000
}

impl RateConfig {
    pub fn new(rho: f64) -> Self {
        Self {
            control: MixtureMarginal::normal(0.4, 0.3, 0.0, 1.0).expect("valid"),
            treated: MixtureMarginal::normal(0.6, 0.25, 0.0, 1.0).expect("valid"),
            n_grid: vec![100, 200, 400, 800, 1600],
            reps: 50,
            rho,
            reference_atoms: 2000,
            seed: 20_240_603,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        self.treated.validate()?;
        Stickiness::new(self.rho)?;
        if self.n_grid.len() < 2 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] < 2 {
            return Err(Error::Domain("n_grid must be increasing with at least two sizes".into()));
        }
        if self.reps < 20 {
            return Err(Error::Domain(format!("rate experiments need at least 20 reps, got {}", self.reps)));
        }
        if self.reference_atoms < 2 {
            return Err(Error::Domain("reference grid needs at least two atoms".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub mean_error: f64,
    pub sd_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateResult {
    pub rho: f64,
    pub rows: Vec<RateRow>,
    /// Least-squares slope of log mean error against log n.
    pub slope: f64,
}

impl RateResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `sup_{x,y} |a(x) + b(y)|` over grids of the two difference functions.
fn sup_of_sum(a: &[f64], b: &[f64]) -> f64 {
    let fold = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (alo, ahi) = fold(a);
    let (blo, bhi) = fold(b);
    (ahi + bhi).abs().max((alo + blo).abs())
}

/// Empirical convergence rate of the fitted potentials (or of the comonotone
/// map at `ρ = 1`) to their population counterparts.
///
/// Population objects are computed on `reference_atoms`-point grids; the error
/// for a sample of size `n` is the sup over that grid of
/// `|(φₙ ⊕ ψₙ) − (φ ⊕ ψ)|`, which does not depend on the gauge, or of
/// `|Gₙ⁻¹∘Fₙ − G⁻¹∘F|` at `ρ = 1`. Replication `r` at the `k`-th size uses
/// seed `seed + k·reps + r`.
pub fn run_rate_experiment(config: &RateConfig, options: &SolverOptions) -> Result<RateResult> {
    config.validate()?;
    let xs = config.control.grid(config.reference_atoms)?;
    let ys = config.treated.grid(config.reference_atoms)?;
    let stickiness = Stickiness::new(config.rho)?;
    let population = if stickiness.is_comonotone() {
        None
    } else {
        Some(BregmanSinkhornCopula::fit(&xs, &ys, stickiness, options)?)
    };
    let map_truth: Vec<f64> = xs
        .atoms()
        .iter()
        .map(|&x| config.treated.quantile(config.control.cdf(x).max(1e-300)))
        .collect();

    let mut rows = Vec::with_capacity(config.n_grid.len());
    for (k, &n) in config.n_grid.iter().enumerate() {
        let mut errors = Vec::with_capacity(config.reps);
        for r in 0..config.reps {
            let mut rng = panel_rng(config.seed.wrapping_add((k * config.reps + r) as u64));
            let mu_n = EmpiricalMeasure::from_samples(&config.control.sample(n, &mut rng))?;
            let nu_n = EmpiricalMeasure::from_samples(&config.treated.sample(n, &mut rng))?;
            let err = match &population {
                Some(pop) => {
                    let fit = BregmanSinkhornCopula::fit(&mu_n, &nu_n, stickiness, options)?;
                    let a: Vec<f64> = xs.atoms().iter().zip(&pop.potentials().phi).map(|(&x, p)| fit.phi_at(x) - p).collect();
                    let b: Vec<f64> = ys.atoms().iter().zip(&pop.potentials().psi).map(|(&y, p)| fit.psi_at(y) - p).collect();
                    sup_of_sum(&a, &b)
                }
                None => xs
                    .atoms()
                    .iter()
                    .zip(&map_truth)
                    .map(|(&x, t)| (crate::copula::comonotone_map(&mu_n, &nu_n, x) - t).abs())
                    .fold(0.0, f64::max),
            };
            errors.push(err);
        }
        let m = errors.len() as f64;
        let mean_error = errors.iter().sum::<f64>() / m;
        let sd_error = (errors.iter().map(|e| (e - mean_error).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        rows.push(RateRow { n, mean_error, sd_error });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.mean_error.ln()).collect();
    Ok(RateResult {
        rho: config.rho,
        rows,
        slope: ols_slope(&lx, &ly),
    })
}
