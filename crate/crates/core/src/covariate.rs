//! Covariate-adjusted estimation for discrete covariates.
//!
//! Each stratum `X = x` gets its own copula at stickiness `ρₓ`; the
//! population treatment-effect distribution is the frequency-weighted
//! mixture of the stratum distributions. The second half of the module is
//! the gradient flow for the conditional transport map, driven by a score
//! estimated with a binary classifier.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::copula::JointModel;
use crate::empirical::{wasserstein1, EmpiricalMeasure, ObservedDataset};
use crate::error::{Error, Result};
use crate::sinkhorn::SolverOptions;
use crate::ted::{impute_ted, TedDistribution, TedSummary};
use crate::SCHEMA_VERSION;

/// Per-stratum fit.
#[derive(Debug, Clone)]
pub struct StratumFit {
    pub label: String,
    /// Estimated `P(X = x)`.
    pub weight: f64,
    pub n_control: usize,
    pub n_treated: usize,
    pub model: JointModel,
}

impl StratumFit {
    pub fn rho(&self) -> f64 {
        self.model.rho()
    }

    pub fn ted(&self) -> Result<TedDistribution> {
        impute_ted(&self.model.coupling()?)
    }
}

/// Copulas fitted stratum by stratum, ordered by label.
#[derive(Debug, Clone)]
pub struct StratifiedFit {
    strata: Vec<StratumFit>,
}

impl StratifiedFit {
    pub fn strata(&self) -> &[StratumFit] {
        &self.strata
    }

    pub fn stratum(&self, label: &str) -> Option<&StratumFit> {
        self.strata.iter().find(|s| s.label == label)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.strata.iter().map(|s| s.weight).collect()
    }

    /// Replaces the stratum weights, e.g. to target a different covariate law.
    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.strata.len() {
            return Err(Error::Domain(format!(
                "{} weights for {} strata",
                weights.len(),
                self.strata.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(total > 0.0) {
            return Err(Error::Domain("stratum weights must be nonnegative with positive sum".into()));
        }
        for (s, w) in self.strata.iter_mut().zip(weights) {
            s.weight = w / total;
        }
        Ok(self)
    }

    /// Support points `(y0, y1, w)` of the marginal joint law, pooled over strata.
    pub fn joint_support(&self) -> Result<Vec<(f64, f64, f64)>> {
        let mut out = Vec::new();
        for s in &self.strata {
            if s.weight == 0.0 {
                continue;
            }
            let c = s.model.coupling()?;
            out.extend(c.support().map(|(y0, y1, w)| (y0, y1, w * s.weight)));
        }
        Ok(out)
    }

    pub fn report(&self) -> Result<StratifiedReport> {
        let strata = self
            .strata
            .iter()
            .map(|s| {
                Ok(StratumReport {
                    label: s.label.clone(),
                    rho_x: s.rho(),
                    weight: s.weight,
                    n_control: s.n_control,
                    n_treated: s.n_treated,
                    ted: s.ted()?.summary()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StratifiedReport {
            schema_version: SCHEMA_VERSION,
            strata,
            mixture: mixture_ted(self)?.summary()?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StratumReport {
    pub label: String,
    pub rho_x: f64,
    pub weight: f64,
    pub n_control: usize,
    pub n_treated: usize,
    pub ted: TedSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct StratifiedReport {
    pub schema_version: u32,
    pub strata: Vec<StratumReport>,
    pub mixture: TedSummary,
}

/// Fits one joint model per covariate label at the stickiness `rho_map[label]`.
pub fn fit_stratified(
    d: &ObservedDataset,
    rho_map: &BTreeMap<String, f64>,
    options: &SolverOptions,
) -> Result<StratifiedFit> {
    let groups = d.strata()?;
    let n = d.len() as f64;
    let mut strata = Vec::with_capacity(groups.len());
    for (label, sub) in groups {
        let rho = *rho_map
            .get(&label)
            .ok_or_else(|| Error::Domain(format!("no rho given for stratum '{label}'")))?;
        let (mu, nu) = sub
            .split_by_treatment()
            .map_err(|e| Error::Estimation(format!("stratum '{label}': {e}")))?;
        let model = JointModel::fit(&mu, &nu, rho, options)?;
        strata.push(StratumFit {
            weight: sub.len() as f64 / n,
            n_control: sub.n_control(),
            n_treated: sub.n_treated(),
            label,
            model,
        });
    }
    Ok(StratifiedFit { strata })
}

/// Frequency-weighted mixture of the stratum treatment-effect distributions.
pub fn mixture_ted(f: &StratifiedFit) -> Result<TedDistribution> {
    let teds = f
        .strata
        .iter()
        .map(|s| s.ted())
        .collect::<Result<Vec<_>>>()?;
    let components: Vec<(f64, &TedDistribution)> =
        f.strata.iter().zip(&teds).map(|(s, t)| (s.weight, t)).collect();
    TedDistribution::mixture(&components)
}

/// A pair of support points ordered one way in `y0` and the other way in `y1`,
/// or `None` if the support is rank-preserving.
pub fn find_discordant_pair(support: &[(f64, f64, f64)]) -> Option<((f64, f64), (f64, f64))> {
    let mut pts: Vec<(f64, f64)> = support
        .iter()
        .filter(|p| p.2 > 0.0)
        .map(|p| (p.0, p.1))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // highest y1 among points with strictly smaller y0
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            j += 1;
        }
        if let Some(b) = best {
            if let Some(p) = pts[i..j].iter().find(|p| p.1 < b.1) {
                return Some((b, *p));
            }
        }
        let top = pts[j - 1];
        if best.is_none_or(|b| top.1 > b.1) {
            best = Some(top);
        }
        i = j;
    }
    None
}

/// Writes the mixture distribution as CSV (`delta,probability`).
pub fn write_mixture_csv<W: Write>(f: &StratifiedFit, writer: W) -> Result<()> {
    mixture_ted(f)?.write_csv(writer)
}

/// A score `h(y)`: the derivative of a log-density ratio.
pub trait Score {
    fn score(&self, y: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Score for F {
    fn score(&self, y: f64) -> f64 {
        self(y)
    }
}

/// Something that turns two samples into a score `∂ log(p₀/p₁)`.
pub trait ScoreEstimator {
    fn estimate(&self, samples0: &[f64], samples1: &[f64]) -> Result<Box<dyn Score>>;
}

/// Logistic regression on standardized polynomial features.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogisticEstimator {
    pub degree: usize,
    /// Ridge penalty per observation on the non-intercept coefficients.
    pub ridge: f64,
    pub max_iter: usize,
}

impl Default for LogisticEstimator {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge: 1e-8,
            max_iter: 100,
        }
    }
}

/// Fitted classifier; label 1 is `samples0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticScore {
    pub coefficients: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    /// Hull of the training samples; the score is evaluated clamped to it.
    pub lo: f64,
    pub hi: f64,
}

impl LogisticScore {
    fn z(&self, y: f64) -> f64 {
        (y.clamp(self.lo, self.hi) - self.center) / self.scale
    }

    /// Fitted `log P(label 1 | y) / P(label 0 | y)`.
    pub fn log_odds(&self, y: f64) -> f64 {
        let z = self.z(y);
        self.coefficients.iter().rev().fold(0.0, |acc, b| acc * z + b)
    }

    /// Derivative of the fitted log-odds in `y`.
    pub fn derivative(&self, y: f64) -> f64 {
        let z = self.z(y);
        let mut acc = 0.0;
        for (k, b) in self.coefficients.iter().enumerate().skip(1).rev() {
            acc = acc * z + k as f64 * b;
        }
        acc / self.scale
    }
}

impl Score for LogisticScore {
    fn score(&self, y: f64) -> f64 {
        self.derivative(y)
    }
}

impl ScoreEstimator for LogisticEstimator {
    fn estimate(&self, samples0: &[f64], samples1: &[f64]) -> Result<Box<dyn Score>> {
        Ok(Box::new(self.fit(samples0, samples1)?))
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major, `n × n`).
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i * n + k] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k * n + i] * b[k];
        }
        b[i] /= a[i * n + i];
    }
    Some(b)
}

impl LogisticEstimator {
    pub fn fit(&self, samples0: &[f64], samples1: &[f64]) -> Result<LogisticScore> {
        if samples0.is_empty() || samples1.is_empty() {
            return Err(Error::Estimation("score estimation needs two non-empty samples".into()));
        }
        if self.degree == 0 {
            return Err(Error::Domain("polynomial degree must be positive".into()));
        }
        let pooled: Vec<f64> = samples0.iter().chain(samples1).copied().collect();
        if pooled.iter().any(|y| !y.is_finite()) {
            return Err(Error::Domain("samples must be finite".into()));
        }
        let n = pooled.len() as f64;
        let center = pooled.iter().sum::<f64>() / n;
        let scale = (pooled.iter().map(|y| (y - center).powi(2)).sum::<f64>() / n).sqrt();
        if !(scale > 0.0) {
            return Err(Error::Estimation("samples are degenerate (constant)".into()));
        }
        let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let p = self.degree + 1;
        let features: Vec<Vec<f64>> = pooled
            .iter()
            .map(|y| {
                let z = (y - center) / scale;
                let mut row = Vec::with_capacity(p);
                let mut zk = 1.0;
                for _ in 0..p {
                    row.push(zk);
                    zk *= z;
                }
                row
            })
            .collect();
        let labels: Vec<f64> = (0..pooled.len())
            .map(|i| if i < samples0.len() { 1.0 } else { 0.0 })
            .collect();
        let lambda = self.ridge * n;
        let objective = |beta: &[f64]| -> f64 {
            let mut ll = 0.0;
            for (x, y) in features.iter().zip(&labels) {
                let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                ll += y * eta - log1p_exp(eta);
            }
            ll - 0.5 * lambda * beta[1..].iter().map(|b| b * b).sum::<f64>()
        };

        let mut beta = vec![0.0; p];
        let mut current = objective(&beta);
        for _ in 0..self.max_iter {
            let mut grad = vec![0.0; p];
            let mut hess = vec![0.0; p * p];
            for (x, y) in features.iter().zip(&labels) {
                let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let pr = sigmoid(eta);
                let w = pr * (1.0 - pr);
                for a in 0..p {
                    grad[a] += (y - pr) * x[a];
                    for b in 0..=a {
                        hess[a * p + b] += w * x[a] * x[b];
                    }
                }
            }
            for a in 0..p {
                for b in 0..a {
                    hess[b * p + a] = hess[a * p + b];
                }
            }
            for a in 1..p {
                grad[a] -= lambda * beta[a];
                hess[a * p + a] += lambda;
            }
            if grad.iter().all(|g| g.abs() <= 1e-10 * n) {
                break;
            }
            let Some(step) = cholesky_solve(hess, grad) else {
                return Err(Error::Numerical("singular classifier Hessian".into()));
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
                let value = objective(&trial);
                if value >= current {
                    beta = trial;
                    current = value;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.iter().all(|s| (t * s).abs() < 1e-12) {
                break;
            }
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numerical("classifier coefficients are not finite".into()));
        }
        Ok(LogisticScore {
            coefficients: beta,
            center,
            scale,
            lo,
            hi,
        })
    }
}

/// Score `∂ log(p₀/p₁)` from a degree-3 logistic classifier separating the samples.
pub fn estimate_score(samples0: &[f64], samples1: &[f64]) -> Result<LogisticScore> {
    LogisticEstimator::default().fit(samples0, samples1)
}

/// Current transport map `φ̇ₜ` tabulated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub grid: Vec<f64>,
    pub map_values: Vec<f64>,
    pub time: f64,
}

impl FlowState {
    pub fn new(grid: Vec<f64>, map_values: Vec<f64>, time: f64) -> Result<Self> {
        if grid.len() < 3 || grid.len() != map_values.len() {
            return Err(Error::Domain("flow grid needs at least 3 points and one map value per point".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|g| !g.is_finite()) {
            return Err(Error::Domain("flow grid must be finite and strictly increasing".into()));
        }
        if let Some(k) = (1..map_values.len()).find(|&k| !(map_values[k] >= map_values[k - 1])) {
            return Err(Error::Domain(format!("map values decrease at grid index {k}")));
        }
        Ok(Self { grid, map_values, time })
    }

    /// The identity map on `points` uniform points over `[lo, hi]`.
    pub fn identity(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(hi > lo) || points < 3 {
            return Err(Error::Domain("identity map needs lo < hi and at least 3 points".into()));
        }
        let h = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|k| lo + k as f64 * h).collect();
        Self::new(grid.clone(), grid, 0.0)
    }

    /// Central finite difference of the map; one-sided at the ends.
    pub fn derivative(&self) -> Vec<f64> {
        let (g, v) = (&self.grid, &self.map_values);
        let m = g.len();
        (0..m)
            .map(|k| {
                let (a, b) = (k.saturating_sub(1), (k + 1).min(m - 1));
                (v[b] - v[a]) / (g[b] - g[a])
            })
            .collect()
    }

    /// Linear interpolation of the map, extended linearly past the grid.
    pub fn map_at(&self, y: f64) -> f64 {
        let (g, v) = (&self.grid, &self.map_values);
        let m = g.len();
        let k = g.partition_point(|&x| x <= y).clamp(1, m - 1);
        let t = (y - g[k - 1]) / (g[k] - g[k - 1]);
        v[k - 1] + t * (v[k] - v[k - 1])
    }

    /// Largest `|φ̇ₜ(y) − f(y)|` over the grid.
    pub fn sup_error(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.grid
            .iter()
            .zip(&self.map_values)
            .map(|(y, v)| (v - f(*y)).abs())
            .fold(0.0, f64::max)
    }
}

/// One explicit Euler step `φ̇ ← φ̇ − dt · φ̈ · h(φ̇)`.
pub fn gradient_flow_step<S: Score + ?Sized>(state: &FlowState, score: &S, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("step size must be positive, got {dt}")));
    }
    let slope = state.derivative();
    let mut next = Vec::with_capacity(state.map_values.len());
    for (v, s) in state.map_values.iter().zip(&slope) {
        let h = score.score(*v);
        if !h.is_finite() {
            return Err(Error::Numerical(format!("score is not finite at {v}")));
        }
        next.push(v - dt * s * h);
    }
    if let Some(k) = (1..next.len()).find(|&k| !(next[k] >= next[k - 1])) {
        return Err(Error::StepTooLarge { dt, index: k });
    }
    Ok(FlowState {
        grid: state.grid.clone(),
        map_values: next,
        time: state.time + dt,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub dt: f64,
    pub refit_every: usize,
    pub grid_points: usize,
    /// Fraction of the pooled range added on each side of the grid.
    pub padding: f64,
    pub max_halvings: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            dt: 0.05,
            refit_every: 5,
            grid_points: 256,
            padding: 0.05,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowResult {
    pub state: FlowState,
    pub steps: usize,
    /// Step size in force at the end (after any halvings).
    pub dt: f64,
    pub w1_initial: f64,
    /// 1-Wasserstein distance between the pushed-forward controls and the treated sample.
    pub w1: f64,
}

/// Runs the flow from the identity with the default logistic score.
pub fn run_flow(mu_x: &[f64], nu_x: &[f64], config: &FlowConfig) -> Result<FlowResult> {
    run_flow_with(mu_x, nu_x, config, &LogisticEstimator::default())
}

pub fn run_flow_with(
    mu_x: &[f64],
    nu_x: &[f64],
    config: &FlowConfig,
    estimator: &dyn ScoreEstimator,
) -> Result<FlowResult> {
    if mu_x.is_empty() || nu_x.is_empty() {
        return Err(Error::Estimation("flow needs control and treated draws".into()));
    }
    if config.steps == 0 || config.refit_every == 0 || !(config.dt > 0.0) {
        return Err(Error::Domain("flow needs positive steps, dt and refit interval".into()));
    }
    let lo = mu_x.iter().chain(nu_x).copied().fold(f64::INFINITY, f64::min);
    let hi = mu_x.iter().chain(nu_x).copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Estimation("pooled draws are degenerate (constant)".into()));
    }
    let pad = config.padding * (hi - lo);
    let mut state = FlowState::identity(lo - pad, hi + pad, config.grid_points)?;
    let target = EmpiricalMeasure::from_samples(nu_x)?;
    let pushforward = |s: &FlowState| mu_x.iter().map(|y| s.map_at(*y)).collect::<Vec<f64>>();
    let w1_initial = wasserstein1(&EmpiricalMeasure::from_samples(mu_x)?, &target);

    let mut dt = config.dt;
    let mut halvings = 0;
    let mut score: Option<Box<dyn Score>> = None;
    for step in 0..config.steps {
        if step % config.refit_every == 0 || score.is_none() {
            score = Some(estimator.estimate(&pushforward(&state), nu_x)?);
        }
        let h = score.as_deref().expect("score fitted above");
        loop {
            match gradient_flow_step(&state, h, dt) {
                Ok(next) => {
                    state = next;
                    break;
                }
                Err(Error::StepTooLarge { .. }) if halvings < config.max_halvings => {
                    dt *= 0.5;
                    halvings += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let w1 = wasserstein1(&EmpiricalMeasure::from_samples(&pushforward(&state))?, &target);
    Ok(FlowResult {
        state,
        steps: config.steps,
        dt,
        w1_initial,
        w1,
    })
}
