//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use bscopula::special::{normal_pdf, normal_quantile};
use bscopula::EmpiricalMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `N(mean, sd²)` discretized on `n` midpoints of `mean ± 4 sd`.
pub fn smooth(n: usize, mean: f64, sd: f64) -> EmpiricalMeasure {
    EmpiricalMeasure::from_density(mean - 4.0 * sd, mean + 4.0 * sd, n, |x| normal_pdf((x - mean) / sd)).unwrap()
}

/// `N(mean, sd²)` as `n` equal-weight atoms at the quantiles `(k − ½)/n`.
pub fn quantile_grid(n: usize, mean: f64, sd: f64) -> EmpiricalMeasure {
    let atoms: Vec<f64> = (0..n).map(|k| mean + sd * normal_quantile((k as f64 + 0.5) / n as f64)).collect();
    EmpiricalMeasure::from_samples(&atoms).unwrap()
}

/// Two random 5-atom measures with atoms in `[-1.5, 1.5]`.
pub fn random_pair(seed: u64) -> (EmpiricalMeasure, EmpiricalMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let atoms: Vec<f64> = (0..5).map(|_| rng.random_range(-1.5..1.5)).collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..1.0)).collect();
        EmpiricalMeasure::from_weighted(&atoms, &weights).unwrap()
    };
    let mu = draw(&mut rng);
    let nu = draw(&mut rng);
    (mu, nu)
}

/// Diagonal mass `a` of the optimal symmetric coupling of `{-1, 1}` with itself,
/// found by bisection on the derivative of
/// `½ Σ πᵢⱼ (yᵢ − yⱼ)² + ε KL(π | μ⊗ν)` over `π = [[a, ½−a], [½−a, a]]`.
pub fn two_point_oracle(eps: f64) -> f64 {
    let derivative = |a: f64| -4.0 + eps * 2.0 * (a.ln() - (0.5 - a).ln());
    let (mut lo, mut hi) = (1e-300_f64, 0.5 - 1e-17);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if derivative(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Minimizer of `−Σ πᵢⱼ xᵢ yⱼ + ε KL(π | μ⊗ν)` over `Π(μ, ν)`, by damped
/// Newton on the primal restricted to the null space of the marginal constraints.
/// Row-major weights.
pub fn primal_oracle(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, eps: f64) -> Vec<f64> {
    let (x, y) = (mu.atoms(), nu.atoms());
    let (n, m) = (x.len(), y.len());
    let prod: Vec<f64> = (0..n * m).map(|c| mu.weights()[c / m] * nu.weights()[c % m]).collect();
    // basis of {d : row and column sums of d vanish}
    let mut basis = Vec::new();
    for i in 0..n - 1 {
        for j in 0..m - 1 {
            let mut d = vec![0.0; n * m];
            d[i * m + j] = 1.0;
            d[i * m + m - 1] = -1.0;
            d[(n - 1) * m + j] = -1.0;
            d[(n - 1) * m + m - 1] = 1.0;
            basis.push(d);
        }
    }
    let objective = |p: &[f64]| -> f64 {
        (0..n * m)
            .map(|c| -p[c] * x[c / m] * y[c % m] + eps * p[c] * (p[c] / prod[c]).ln())
            .sum()
    };
    let mut p = prod.clone();
    for _ in 0..500 {
        let g: Vec<f64> = (0..n * m)
            .map(|c| -x[c / m] * y[c % m] + eps * ((p[c] / prod[c]).ln() + 1.0))
            .collect();
        let k = basis.len();
        let gr: Vec<f64> = basis.iter().map(|b| b.iter().zip(&g).map(|(u, v)| u * v).sum()).collect();
        if gr.iter().all(|v| v.abs() < 1e-15) {
            break;
        }
        let h: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| (0..n * m).map(|c| basis[a][c] * basis[b][c] * eps / p[c]).sum())
                    .collect()
            })
            .collect();
        let s = solve_dense(h, gr.iter().map(|v| -v).collect());
        let d: Vec<f64> = (0..n * m).map(|c| (0..k).map(|a| s[a] * basis[a][c]).sum()).collect();
        let mut t: f64 = 1.0;
        for c in 0..n * m {
            if d[c] < 0.0 {
                t = t.min(-0.99 * p[c] / d[c]);
            }
        }
        let f0 = objective(&p);
        let slope: f64 = g.iter().zip(&d).map(|(u, v)| u * v).sum();
        let mut trial: Vec<f64>;
        loop {
            trial = p.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if objective(&trial) <= f0 + 1e-4 * t * slope || t < 1e-12 || slope.abs() < 1e-20 {
                break;
            }
            t *= 0.5;
        }
        let done = d.iter().all(|v| (t * v).abs() < 1e-17);
        p = trial;
        if done {
            break;
        }
    }
    p
}
