//! Entropic optimal transport between two discrete measures on the line.
//!
//! The dual potentials `(φ, ψ)` solve
//!
//! ```text
//! φ(x) = ε log Σⱼ νⱼ exp((x yⱼ − ψⱼ) / ε)
//! ψ(y) = ε log Σᵢ μᵢ exp((xᵢ y − φᵢ) / ε)
//! ```
//!
//! and the coupling has density `exp((x y − φ(x) − ψ(y)) / ε)` against `μ ⊗ ν`.
//! The inner-product kernel is used as is; the squared-distance form differs
//! only by terms absorbed into the potentials.
//!
//! Iterates are kept in the log domain. Between absorptions the updates run as
//! scaling-vector products against a kernel stabilized by the current
//! potentials. After a short run of sweeps the solver switches to Newton steps
//! on the semi-dual in `ψ` (with `φ` eliminated exactly), which removes the
//! slow linear tail Sinkhorn exhibits at small `ε`. Small `ε` is reached by
//! halving the regularization from the scale of the cost, warm-starting each
//! stage.

use serde::Serialize;

use crate::empirical::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Rank stickiness `ρ ∈ (0, 1]` together with its regularization `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stickiness {
    rho: f64,
    epsilon: f64,
}

/// `ε(ρ) = (1 − ρ) / ρ`.
pub fn epsilon_of_rho(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Domain(format!("rho = {rho} outside (0, 1]")));
    }
    Ok((1.0 - rho) / rho)
}

impl Stickiness {
    pub fn new(rho: f64) -> Result<Self> {
        Ok(Self {
            rho,
            epsilon: epsilon_of_rho(rho)?,
        })
    }

    /// Stickiness with a regularization decoupled from `ρ`.
    pub fn with_epsilon(rho: f64, epsilon: f64) -> Result<Self> {
        epsilon_of_rho(rho)?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon = {epsilon} must be positive")));
        }
        Ok(Self { rho, epsilon })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `ρ = 1`: no entropic penalty, the comonotone coupling.
    pub fn is_comonotone(&self) -> bool {
        self.epsilon == 0.0
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct SolverOptions {
    /// Sup-norm bound on the marginal residuals of the induced coupling.
    pub tol: f64,
    /// Budget of sweep-equivalents (full sweeps and Newton operator
    /// applications), summed over annealing stages.
    pub max_iter: usize,
    /// Reach small `ε` through a halving schedule.
    pub anneal: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
            anneal: true,
        }
    }
}

/// Converged dual potentials, gauge-centered so that `Σ μᵢ φᵢ = 0`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SinkhornPotentials {
    pub rho: f64,
    pub epsilon: f64,
    pub mu_atoms: Vec<f64>,
    pub nu_atoms: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Sup-norm marginal residual of the induced coupling.
    pub residual: f64,
    pub iterations: usize,
    /// `Σ μᵢ φᵢ` after centering.
    #[serde(skip)]
    pub gauge_residual: f64,
}

impl SinkhornPotentials {
    pub fn stickiness(&self) -> Stickiness {
        Stickiness {
            rho: self.rho,
            epsilon: self.epsilon,
        }
    }

    /// JSON document `{schema_version, rho, epsilon, mu_atoms, nu_atoms, phi, psi, residual, iterations}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("potentials serialize");
        v["schema_version"] = serde_json::json!(crate::SCHEMA_VERSION);
        v
    }
}

/// Solves the Sinkhorn system starting from `ψ ≡ 0`.
pub fn solve_potentials(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    stickiness: Stickiness,
    options: &SolverOptions,
) -> Result<SinkhornPotentials> {
    solve_potentials_from(mu, nu, stickiness, options, &vec![0.0; nu.len()])
}

/// Solves the Sinkhorn system from a caller-supplied initial `ψ`.
pub fn solve_potentials_from(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    stickiness: Stickiness,
    options: &SolverOptions,
    initial_psi: &[f64],
) -> Result<SinkhornPotentials> {
    if stickiness.is_comonotone() {
        return Err(Error::Unsupported(
            "rho = 1 has no entropic potentials; use the comonotone map".into(),
        ));
    }
    if !(options.tol > 0.0) {
        return Err(Error::Domain(format!("tolerance {} must be positive", options.tol)));
    }
    if initial_psi.len() != nu.len() {
        return Err(Error::Domain(format!(
            "initial psi has {} values for {} atoms",
            initial_psi.len(),
            nu.len()
        )));
    }
    let problem = Problem::new(mu, nu);
    let eps = stickiness.epsilon();
    let mut state = State {
        phi: vec![0.0; mu.len()],
        psi: initial_psi.to_vec(),
        iterations: 0,
    };

    let mut stages = Vec::new();
    if options.anneal {
        let scale = (mu.max() - mu.min()) * (nu.max() - nu.min());
        let mut e = scale;
        while e > 2.0 * eps {
            stages.push(e);
            e *= 0.5;
        }
    }
    for &stage_eps in &stages {
        let budget = options.max_iter.saturating_sub(state.iterations).min(STAGE_BUDGET);
        problem.solve_stage(&mut state, stage_eps, StageGoal::Relative(STAGE_TOL), budget);
    }
    let budget = options.max_iter.saturating_sub(state.iterations);
    let converged = problem.solve_stage(&mut state, eps, StageGoal::Absolute(options.tol), budget);
    if converged.0 {
        // A couple of extra Newton steps drive the fixed-point residual to rounding level.
        problem.newton(&mut state, eps, StageGoal::Absolute(options.tol * 1e-4), POLISH_BUDGET);
    }
    if !converged.0 {
        return Err(Error::Convergence {
            iterations: state.iterations,
            residual: converged.1,
        });
    }

    let shift: f64 = state.phi.iter().zip(mu.weights()).map(|(p, w)| p * w).sum();
    for p in state.phi.iter_mut() {
        *p -= shift;
    }
    for q in state.psi.iter_mut() {
        *q += shift;
    }
    let gauge_residual: f64 = state.phi.iter().zip(mu.weights()).map(|(p, w)| p * w).sum();

    let mut potentials = SinkhornPotentials {
        rho: stickiness.rho(),
        epsilon: eps,
        mu_atoms: mu.atoms().to_vec(),
        nu_atoms: nu.atoms().to_vec(),
        phi: state.phi,
        psi: state.psi,
        residual: 0.0,
        iterations: state.iterations,
        gauge_residual,
    };
    potentials.residual = coupling_from_potentials(&potentials, mu, nu)?.marginal_residual();
    Ok(potentials)
}

const STAGE_TOL: f64 = 1e-3;
const STAGE_BUDGET: usize = 2_000;
/// Re-stabilize the kernel once a scaling leaves `[e^-ABSORB, e^ABSORB]`.
const ABSORB: f64 = 30.0;
/// Plain sweeps before switching to Newton steps.
const WARM_SWEEPS: usize = 30;
/// Extra sweeps after a stalled Newton line search.
const FALLBACK_SWEEPS: usize = 100;
const POLISH_BUDGET: usize = 400;
const CG_FORCING: f64 = 1e-3;

impl StageGoal {
    fn target(self) -> f64 {
        match self {
            StageGoal::Relative(r) | StageGoal::Absolute(r) => r,
        }
    }
}

struct State {
    phi: Vec<f64>,
    psi: Vec<f64>,
    iterations: usize,
}

#[derive(Clone, Copy)]
enum StageGoal {
    /// `max |rowᵢ / μᵢ − 1|`
    Relative(f64),
    /// `max |rowᵢ − μᵢ|`
    Absolute(f64),
}

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [f64],
    mu: &'a [f64],
    nu: &'a [f64],
    log_mu: Vec<f64>,
    log_nu: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(mu: &'a EmpiricalMeasure, nu: &'a EmpiricalMeasure) -> Self {
        Self {
            x: mu.atoms(),
            y: nu.atoms(),
            mu: mu.weights(),
            nu: nu.weights(),
            log_mu: mu.weights().iter().map(|w| w.ln()).collect(),
            log_nu: nu.weights().iter().map(|w| w.ln()).collect(),
        }
    }

    /// φ ← ε log Σⱼ νⱼ exp((x yⱼ − ψⱼ)/ε), evaluated with log-sum-exp.
    fn exact_phi(&self, psi: &[f64], eps: f64, phi: &mut [f64]) {
        let mut buf = vec![0.0; self.y.len()];
        for (i, &xi) in self.x.iter().enumerate() {
            for j in 0..self.y.len() {
                buf[j] = self.log_nu[j] + (xi * self.y[j] - psi[j]) / eps;
            }
            phi[i] = eps * log_sum_exp(&buf);
        }
    }

    fn exact_psi(&self, phi: &[f64], eps: f64, psi: &mut [f64]) {
        let mut buf = vec![0.0; self.x.len()];
        for (j, &yj) in self.y.iter().enumerate() {
            for i in 0..self.x.len() {
                buf[i] = self.log_mu[i] + (self.x[i] * yj - phi[i]) / eps;
            }
            psi[j] = eps * log_sum_exp(&buf);
        }
    }

    fn kernel(&self, phi: &[f64], psi: &[f64], eps: f64) -> Vec<f64> {
        let m = self.y.len();
        let mut k = vec![0.0; self.x.len() * m];
        for (i, &xi) in self.x.iter().enumerate() {
            let row = &mut k[i * m..(i + 1) * m];
            for j in 0..m {
                row[j] = ((xi * self.y[j] - phi[i] - psi[j]) / eps).exp();
            }
        }
        k
    }

    /// Sinkhorn warm start, then Newton steps, falling back to sweeps when a
    /// Newton line search stalls.
    fn solve_stage(&self, state: &mut State, eps: f64, goal: StageGoal, budget: usize) -> (bool, f64) {
        let start = state.iterations;
        let spent = |s: &State| s.iterations - start;
        let mut last = self.run_stage(state, eps, goal, budget.min(WARM_SWEEPS));
        while !last.0 && spent(state) < budget {
            let (ok, res, stalled) = self.newton(state, eps, goal, budget - spent(state));
            last = (ok, res);
            if ok || spent(state) >= budget {
                break;
            }
            if stalled {
                let extra = (budget - spent(state)).min(FALLBACK_SWEEPS);
                last = self.run_stage(state, eps, goal, extra);
            }
        }
        last
    }

    /// Row-normalized coupling for fixed ψ: exact φ, then `π` and its column sums.
    fn semi_dual(&self, psi: &[f64], eps: f64, phi: &mut [f64], pi: &mut [f64], cols: &mut [f64]) {
        let m = self.y.len();
        cols.fill(0.0);
        for (i, &xi) in self.x.iter().enumerate() {
            let row = &mut pi[i * m..(i + 1) * m];
            let mut top = f64::NEG_INFINITY;
            for j in 0..m {
                row[j] = self.log_nu[j] + (xi * self.y[j] - psi[j]) / eps;
                top = top.max(row[j]);
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - top).exp();
                sum += *v;
            }
            phi[i] = eps * (top + sum.ln());
            let scale = self.mu[i] / sum;
            for (c, v) in cols.iter_mut().zip(row.iter_mut()) {
                *v *= scale;
                *c += *v;
            }
        }
    }

    fn column_residual(&self, cols: &[f64], goal: StageGoal) -> f64 {
        cols.iter()
            .zip(self.nu)
            .map(|(c, v)| match goal {
                StageGoal::Relative(_) => (c / v - 1.0).abs(),
                StageGoal::Absolute(_) => (c - v).abs(),
            })
            .fold(0.0, f64::max)
    }

    /// Newton ascent on the semi-dual in ψ. Each Newton system
    /// `(diag(c) − πᵀ diag(μ)⁻¹ π) d = ε (c − ν)` is solved by Jacobi-preconditioned
    /// conjugate gradients; every operator application is charged as one iteration.
    ///
    /// Returns (goal met, residual, line search stalled).
    fn newton(&self, state: &mut State, eps: f64, goal: StageGoal, budget: usize) -> (bool, f64, bool) {
        let (n, m) = (self.x.len(), self.y.len());
        let start = state.iterations;
        let mut pi = vec![0.0; n * m];
        let mut cols = vec![0.0; m];
        let mut phi = vec![0.0; n];
        self.semi_dual(&state.psi, eps, &mut phi, &mut pi, &mut cols);
        state.phi.copy_from_slice(&phi);
        let mut res = self.column_residual(&cols, goal);

        let mut trial_pi = vec![0.0; n * m];
        let mut trial_cols = vec![0.0; m];
        let mut trial_phi = vec![0.0; n];
        let mut trial_psi = vec![0.0; m];
        let mut scratch = vec![0.0; n];
        let mut d = vec![0.0; m];

        while res > goal.target() {
            if state.iterations - start >= budget {
                return (false, res, false);
            }
            let mut rhs: Vec<f64> = cols.iter().zip(self.nu).map(|(c, v)| eps * (c - v)).collect();
            let mean = rhs.iter().sum::<f64>() / m as f64;
            rhs.iter_mut().for_each(|v| *v -= mean);

            let mut diag = cols.clone();
            for i in 0..n {
                let row = &pi[i * m..(i + 1) * m];
                let inv = 1.0 / self.mu[i];
                for (dj, p) in diag.iter_mut().zip(row) {
                    *dj -= p * p * inv;
                }
            }
            let apply = |v: &[f64], out: &mut [f64], scratch: &mut [f64]| {
                for i in 0..n {
                    let row = &pi[i * m..(i + 1) * m];
                    scratch[i] = row.iter().zip(v).map(|(p, x)| p * x).sum::<f64>() / self.mu[i];
                }
                for j in 0..m {
                    out[j] = cols[j] * v[j];
                }
                for i in 0..n {
                    let row = &pi[i * m..(i + 1) * m];
                    let s = scratch[i];
                    for (o, p) in out.iter_mut().zip(row) {
                        *o -= p * s;
                    }
                }
            };
            let cg_budget = budget.saturating_sub(state.iterations - start).max(1);
            let used = pcg(&apply, &diag, &rhs, &mut d, &mut scratch, CG_FORCING, cg_budget.min(m.max(50)));
            state.iterations += used.max(1);

            let base: f64 = cols.iter().zip(self.nu).map(|(c, v)| (c - v).abs()).sum();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                for j in 0..m {
                    trial_psi[j] = state.psi[j] + t * d[j];
                }
                self.semi_dual(&trial_psi, eps, &mut trial_phi, &mut trial_pi, &mut trial_cols);
                let l1: f64 = trial_cols.iter().zip(self.nu).map(|(c, v)| (c - v).abs()).sum();
                if l1 < (1.0 - 1e-4 * t) * base {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return (false, res, true);
            }
            state.psi.copy_from_slice(&trial_psi);
            state.phi.copy_from_slice(&trial_phi);
            std::mem::swap(&mut pi, &mut trial_pi);
            std::mem::swap(&mut cols, &mut trial_cols);
            res = self.column_residual(&cols, goal);
        }
        (true, res, false)
    }

    /// Runs sweeps at fixed `eps` until the goal or the budget is reached.
    /// Returns whether the goal was met and the last row residual.
    fn run_stage(&self, state: &mut State, eps: f64, goal: StageGoal, budget: usize) -> (bool, f64) {
        let (n, m) = (self.x.len(), self.y.len());
        let mut used = 0usize;

        // One exact sweep puts the kernel in a bounded range.
        self.exact_phi(&state.psi, eps, &mut state.phi);
        self.exact_psi(&state.phi, eps, &mut state.psi);
        state.iterations += 1;
        used += 1;

        let mut f = state.phi.clone();
        let mut g = state.psi.clone();
        let mut kernel = self.kernel(&f, &g, eps);
        let mut a = vec![1.0; n];
        let mut b = vec![1.0; m];
        let mut s = vec![0.0; n];
        let mut t = vec![0.0; m];
        let mut weighted = vec![0.0; m.max(n)];
        let mut residual;

        loop {
            for j in 0..m {
                weighted[j] = self.nu[j] * b[j];
            }
            for i in 0..n {
                let row = &kernel[i * m..(i + 1) * m];
                s[i] = row.iter().zip(&weighted[..m]).map(|(k, w)| k * w).sum();
            }
            residual = match goal {
                StageGoal::Relative(_) => (0..n).map(|i| (a[i] * s[i] - 1.0).abs()).fold(0.0, f64::max),
                StageGoal::Absolute(_) => (0..n)
                    .map(|i| self.mu[i] * (a[i] * s[i] - 1.0).abs())
                    .fold(0.0, f64::max),
            };
            let target = match goal {
                StageGoal::Relative(r) | StageGoal::Absolute(r) => r,
            };
            if residual <= target {
                break;
            }
            if used >= budget {
                self.unpack(state, &f, &g, &a, &b, eps);
                return (false, residual);
            }

            let degenerate = s.iter().any(|&v| !(v > 1e-290 && v.is_finite()));
            if degenerate {
                // Stale kernel underflowed on some row: fall back to an exact sweep.
                self.unpack(state, &f, &g, &a, &b, eps);
                self.exact_phi(&state.psi, eps, &mut state.phi);
                self.exact_psi(&state.phi, eps, &mut state.psi);
                f.copy_from_slice(&state.phi);
                g.copy_from_slice(&state.psi);
                kernel = self.kernel(&f, &g, eps);
                a.fill(1.0);
                b.fill(1.0);
                state.iterations += 1;
                used += 1;
                continue;
            }

            for i in 0..n {
                a[i] = 1.0 / s[i];
                weighted[i] = self.mu[i] * a[i];
            }
            t.fill(0.0);
            for i in 0..n {
                let row = &kernel[i * m..(i + 1) * m];
                let w = weighted[i];
                for (tj, k) in t.iter_mut().zip(row) {
                    *tj += w * k;
                }
            }
            let mut bad = false;
            for j in 0..m {
                if !(t[j] > 1e-290 && t[j].is_finite()) {
                    bad = true;
                }
                b[j] = 1.0 / t[j];
            }
            state.iterations += 1;
            used += 1;

            let spread = a
                .iter()
                .chain(b.iter())
                .map(|v| v.ln().abs())
                .fold(0.0, f64::max);
            if bad || !(spread < ABSORB) {
                if bad {
                    // Column underflow: recompute ψ exactly from the current φ.
                    for i in 0..n {
                        state.phi[i] = f[i] - eps * a[i].ln();
                    }
                    self.exact_psi(&state.phi, eps, &mut state.psi);
                } else {
                    self.unpack(state, &f, &g, &a, &b, eps);
                }
                f.copy_from_slice(&state.phi);
                g.copy_from_slice(&state.psi);
                kernel = self.kernel(&f, &g, eps);
                a.fill(1.0);
                b.fill(1.0);
            }
        }
        self.unpack(state, &f, &g, &a, &b, eps);
        (true, residual)
    }

    fn unpack(&self, state: &mut State, f: &[f64], g: &[f64], a: &[f64], b: &[f64], eps: f64) {
        for i in 0..f.len() {
            state.phi[i] = f[i] - eps * a[i].ln();
        }
        for j in 0..g.len() {
            state.psi[j] = g[j] - eps * b[j].ln();
        }
    }
}

/// Preconditioned conjugate gradients for a symmetric positive semidefinite
/// operator with a consistent right-hand side. Returns the number of operator
/// applications.
fn pcg(
    apply: &dyn Fn(&[f64], &mut [f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    scratch: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> usize {
    let m = b.len();
    let precond: Vec<f64> = diag.iter().map(|&d| if d > 1e-300 { 1.0 / d } else { 0.0 }).collect();
    x.fill(0.0);
    let mut r = b.to_vec();
    let bnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return 0;
    }
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, p)| a * p).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut q = vec![0.0; m];
    let mut used = 0;
    while used < max_iter {
        apply(&p, &mut q, scratch);
        used += 1;
        let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        if !(pq > 0.0) {
            break;
        }
        let alpha = rz / pq;
        for j in 0..m {
            x[j] += alpha * p[j];
            r[j] -= alpha * q[j];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= rel_tol * bnorm {
            break;
        }
        for j in 0..m {
            z[j] = r[j] * precond[j];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for j in 0..m {
            p[j] = z[j] + beta * p[j];
        }
    }
    used
}

/// Joint probability matrix on the product of two supports, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    weights: Vec<f64>,
}

impl Coupling {
    /// Wraps a row-major weight matrix. Entries must be finite and nonnegative.
    pub fn from_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != mu.len() * nu.len() {
            return Err(Error::Domain(format!(
                "{} weights for a {}x{} coupling",
                weights.len(),
                mu.len(),
                nu.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Numerical(format!("invalid coupling weight {w}")));
        }
        Ok(Self { mu, nu, weights })
    }

    /// Product measure `μ ⊗ ν`.
    pub fn independent(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Self {
        let mut weights = Vec::with_capacity(mu.len() * nu.len());
        for a in mu.weights() {
            for b in nu.weights() {
                weights.push(a * b);
            }
        }
        Self {
            mu: mu.clone(),
            nu: nu.clone(),
            weights,
        }
    }

    /// Quantile coupling `(F⁻¹(U), G⁻¹(U))` by the north-west corner rule.
    pub fn comonotone(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Self {
        Self::quantile_coupling(mu, nu, false)
    }

    /// Counter-monotone coupling `(F⁻¹(U), G⁻¹(1 − U))`.
    pub fn anticomonotone(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Self {
        Self::quantile_coupling(mu, nu, true)
    }

    fn quantile_coupling(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, reverse: bool) -> Self {
        let (n, m) = (mu.len(), nu.len());
        let mut weights = vec![0.0; n * m];
        let col = |k: usize| if reverse { m - 1 - k } else { k };
        let (mut i, mut k) = (0usize, 0usize);
        let mut ra = mu.weights()[0];
        let mut rb = nu.weights()[col(0)];
        while i < n && k < m {
            let w = ra.min(rb);
            weights[i * m + col(k)] += w;
            ra -= w;
            rb -= w;
            if ra <= rb {
                i += 1;
                if i < n {
                    ra = mu.weights()[i];
                }
            } else {
                k += 1;
                if k < m {
                    rb = nu.weights()[col(k)];
                }
            }
        }
        Self {
            mu: mu.clone(),
            nu: nu.clone(),
            weights,
        }
    }

    pub fn mu(&self) -> &EmpiricalMeasure {
        &self.mu
    }

    pub fn nu(&self) -> &EmpiricalMeasure {
        &self.nu
    }

    pub fn rows(&self) -> usize {
        self.mu.len()
    }

    pub fn cols(&self) -> usize {
        self.nu.len()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols() + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.chunks(self.cols()).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.cols();
        let mut out = vec![0.0; m];
        for row in self.weights.chunks(m) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
        out
    }

    /// Sup-norm distance between the coupling's marginals and `(μ, ν)`.
    pub fn marginal_residual(&self) -> f64 {
        let r = self
            .row_sums()
            .iter()
            .zip(self.mu.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let c = self
            .col_sums()
            .iter()
            .zip(self.nu.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }

    /// Nearby coupling whose marginals equal `(μ, ν)` up to rounding.
    ///
    /// Rows and columns carrying excess mass are scaled down, then the deficit
    /// is restored by a rank-one correction. Entries move by at most twice the
    /// marginal residual.
    pub fn round_to_marginals(&self) -> Self {
        let m = self.cols();
        let mut w = self.weights.clone();
        let rows = self.row_sums();
        for (i, row) in w.chunks_mut(m).enumerate() {
            let target = self.mu.weights()[i];
            if rows[i] > target {
                let f = target / rows[i];
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let tmp = Self {
            mu: self.mu.clone(),
            nu: self.nu.clone(),
            weights: w,
        };
        let cols = tmp.col_sums();
        let mut w = tmp.weights;
        for row in w.chunks_mut(m) {
            for (j, v) in row.iter_mut().enumerate() {
                let target = self.nu.weights()[j];
                if cols[j] > target {
                    *v *= target / cols[j];
                }
            }
        }
        let mut out = Self {
            mu: self.mu.clone(),
            nu: self.nu.clone(),
            weights: w,
        };
        let er: Vec<f64> = out
            .row_sums()
            .iter()
            .zip(self.mu.weights())
            .map(|(r, t)| (t - r).max(0.0))
            .collect();
        let ec: Vec<f64> = out
            .col_sums()
            .iter()
            .zip(self.nu.weights())
            .map(|(c, t)| (t - c).max(0.0))
            .collect();
        let total: f64 = er.iter().sum();
        if total > 0.0 {
            for (i, row) in out.weights.chunks_mut(m).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += er[i] * ec[j] / total;
                }
            }
        }
        out
    }

    /// Nonzero entries as `(y₀, y₁, weight)`.
    pub fn support(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let m = self.cols();
        self.weights.iter().enumerate().filter(|(_, w)| **w > 0.0).map(move |(k, &w)| {
            (self.mu.atoms()[k / m], self.nu.atoms()[k % m], w)
        })
    }

    /// `R(π) = Σ πᵢⱼ xᵢ yⱼ − (Σ μᵢ xᵢ)(Σ νⱼ yⱼ)`.
    pub fn rank_correlation(&self) -> f64 {
        let m = self.cols();
        let mut cross = 0.0;
        for (i, row) in self.weights.chunks(m).enumerate() {
            let x = self.mu.atoms()[i];
            let inner: f64 = row.iter().zip(self.nu.atoms()).map(|(w, y)| w * y).sum();
            cross += x * inner;
        }
        cross - self.mu.mean() * self.nu.mean()
    }

    /// `KL(π | μ ⊗ ν)` with `0 log 0 = 0`.
    pub fn kl_to_independence(&self) -> Result<f64> {
        let m = self.cols();
        let mut kl = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let base = self.mu.weights()[k / m] * self.nu.weights()[k % m];
            if base <= 0.0 {
                return Err(Error::Numerical("coupling charges a null product cell".into()));
            }
            kl += w * (w / base).ln();
        }
        Ok(kl.max(0.0))
    }
}

/// Materializes `πᵢⱼ = μᵢ νⱼ exp((xᵢ yⱼ − φᵢ − ψⱼ)/ε)`.
pub fn coupling_from_potentials(
    potentials: &SinkhornPotentials,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<Coupling> {
    if potentials.mu_atoms != mu.atoms() || potentials.nu_atoms != nu.atoms() {
        return Err(Error::Domain("potentials were fitted on different supports".into()));
    }
    let eps = potentials.epsilon;
    let mut weights = Vec::with_capacity(mu.len() * nu.len());
    for (i, &x) in mu.atoms().iter().enumerate() {
        let lm = mu.weights()[i].ln() - potentials.phi[i] / eps;
        for (j, &y) in nu.atoms().iter().enumerate() {
            let e = lm + nu.weights()[j].ln() + (x * y - potentials.psi[j]) / eps;
            let w = e.exp();
            if !w.is_finite() {
                return Err(Error::Numerical(format!("coupling exponent {e} overflows")));
            }
            weights.push(w);
        }
    }
    Coupling::from_matrix(mu.clone(), nu.clone(), weights)
}

pub fn rank_correlation(c: &Coupling) -> f64 {
    c.rank_correlation()
}

pub fn kl_to_independence(c: &Coupling) -> Result<f64> {
    c.kl_to_independence()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_samples(v).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_of_rho(1.0).unwrap(), 0.0);
        assert_eq!(epsilon_of_rho(0.5).unwrap(), 1.0);
        assert!((epsilon_of_rho(0.99).unwrap() - 0.010_101_010_101_010_1).abs() < 1e-15);
        assert!(epsilon_of_rho(0.0).is_err());
        assert!(epsilon_of_rho(1.5).is_err());
        assert!(Stickiness::new(1.0).unwrap().is_comonotone());
    }

    #[test]
    fn rho_one_is_rejected() {
        let m = uniform(&[0.0, 1.0]);
        let err = solve_potentials(&m, &m, Stickiness::new(1.0).unwrap(), &SolverOptions::default());
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn marginals_are_reproduced() {
        let mu = EmpiricalMeasure::from_weighted(&[0.0, 0.3, 0.9, 1.4], &[0.1, 0.4, 0.2, 0.3]).unwrap();
        let nu = EmpiricalMeasure::from_weighted(&[-0.5, 0.2, 2.0], &[0.5, 0.25, 0.25]).unwrap();
        for rho in [0.3, 0.7, 0.95] {
            let opts = SolverOptions::default();
            let p = solve_potentials(&mu, &nu, Stickiness::new(rho).unwrap(), &opts).unwrap();
            let c = coupling_from_potentials(&p, &mu, &nu).unwrap();
            assert!(c.marginal_residual() <= opts.tol, "rho={rho} residual {}", c.marginal_residual());
            assert!(p.gauge_residual.abs() < 1e-10);
            assert!((c.total_mass() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn fixed_point_residual() {
        let mu = uniform(&[0.1, 0.5, 0.7, 1.3, 2.0]);
        let nu = uniform(&[-1.0, 0.0, 0.4, 0.8]);
        let p = solve_potentials(&mu, &nu, Stickiness::new(0.8).unwrap(), &SolverOptions::default()).unwrap();
        let prob = Problem::new(&mu, &nu);
        let mut phi = vec![0.0; mu.len()];
        prob.exact_phi(&p.psi, p.epsilon, &mut phi);
        let mut psi = vec![0.0; nu.len()];
        prob.exact_psi(&p.phi, p.epsilon, &mut psi);
        let dphi = phi.iter().zip(&p.phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dpsi = psi.iter().zip(&p.psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dphi < 1e-8 && dpsi < 1e-8, "{dphi} {dpsi}");
    }

    #[test]
    fn independence_limit() {
        let mu = uniform(&[0.0, 0.25, 0.5, 1.0]);
        let nu = uniform(&[0.0, 0.6, 1.0]);
        let p = solve_potentials(&mu, &nu, Stickiness::new(1e-3).unwrap(), &SolverOptions::default()).unwrap();
        let c = coupling_from_potentials(&p, &mu, &nu).unwrap();
        let ind = Coupling::independent(&mu, &nu);
        let gap = c.weights().iter().zip(ind.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn degenerate_target_is_a_product() {
        let mu = uniform(&[0.0, 1.0, 3.0]);
        let nu = EmpiricalMeasure::point_mass(2.0).unwrap();
        let p = solve_potentials(&mu, &nu, Stickiness::new(0.9).unwrap(), &SolverOptions::default()).unwrap();
        let c = coupling_from_potentials(&p, &mu, &nu).unwrap();
        for (w, m) in c.weights().iter().zip(mu.weights()) {
            assert!((w - m).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_correlation_examples() {
        let m = uniform(&[1.0, 2.0]);
        assert!(Coupling::independent(&m, &m).rank_correlation().abs() < 1e-15);
        assert!((Coupling::comonotone(&m, &m).rank_correlation() - 0.25).abs() < 1e-15);
        assert!((Coupling::anticomonotone(&m, &m).rank_correlation() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let m = uniform(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(Coupling::independent(&m, &m).kl_to_independence().unwrap().abs() < 1e-15);
        let kl = Coupling::comonotone(&m, &m).kl_to_independence().unwrap();
        assert!((kl - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn comonotone_splits_unaligned_atoms() {
        let mu = uniform(&[0.0, 1.0]);
        let nu = uniform(&[0.0, 1.0, 2.0]);
        let c = Coupling::comonotone(&mu, &nu);
        assert!(c.marginal_residual() < 1e-15);
        assert!((c.weight(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.weight(0, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert!((c.weight(1, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.weight(1, 0), 0.0);
        assert_eq!(c.weight(0, 2), 0.0);
    }

    #[test]
    fn rounding_restores_marginals() {
        let mu = uniform(&[0.0, 1.0, 2.0]);
        let nu = uniform(&[0.0, 1.0]);
        let mut w = Coupling::independent(&mu, &nu).weights().to_vec();
        w[0] += 1e-6;
        w[3] -= 2e-6;
        let c = Coupling::from_matrix(mu, nu, w).unwrap();
        let r = c.round_to_marginals();
        assert!(r.marginal_residual() < 1e-16);
        let moved = r.weights().iter().zip(c.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 5e-6);
    }

    #[test]
    fn potentials_json_fields() {
        let m = uniform(&[0.0, 1.0]);
        let p = solve_potentials(&m, &m, Stickiness::new(0.5).unwrap(), &SolverOptions::default()).unwrap();
        let v = p.to_json();
        for key in ["rho", "epsilon", "mu_atoms", "nu_atoms", "phi", "psi", "residual", "iterations", "schema_version"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
