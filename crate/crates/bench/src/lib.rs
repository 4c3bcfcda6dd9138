//! Fixtures shared by the solver benchmarks.

use bscopula::special::normal_quantile;
use bscopula::EmpiricalMeasure;

/// Equal-weight atoms at the normal quantiles `(k + ½) / n`.
pub fn normal_grid(n: usize, mean: f64, sd: f64) -> EmpiricalMeasure {
    let atoms: Vec<f64> = (0..n)
        .map(|k| mean + sd * normal_quantile((k as f64 + 0.5) / n as f64))
        .collect();
    EmpiricalMeasure::from_samples(&atoms).expect("finite atoms")
}

/// Control and treated marginals with a location and scale shift.
pub fn shifted_pair(n: usize) -> (EmpiricalMeasure, EmpiricalMeasure) {
    (normal_grid(n, 0.0, 1.0), normal_grid(n, 0.5, 1.2))
}
