mod common;

use bscopula::{
    sample_joint, true_variance, var_fh, var_neyman, var_sb, BregmanSinkhornCopula, FhConvention,
    ObservedDataset, SolverOptions, Stickiness,
};
use common::smooth;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn balanced(y0: &[f64], y1: &[f64], seed: u64) -> ObservedDataset {
    let n = y0.len();
    let mut t: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    t.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let y = (0..n).map(|i| if t[i] { y1[i] } else { y0[i] }).collect();
    ObservedDataset::new(y, t, None).unwrap()
}

fn observed(n: usize, seed: u64) -> ObservedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0: Vec<f64> = (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
    let y1: Vec<f64> = (0..n).map(|_| Normal::new(0.3, 1.1).unwrap().sample(&mut rng)).collect();
    balanced(&y0, &y1, seed + 1)
}

#[test]
fn plug_in_is_consistent_for_the_population_coupling() {
    let (mu, nu) = (smooth(200, 0.0, 1.0), smooth(200, 0.5, 1.2));
    let c = BregmanSinkhornCopula::fit(&mu, &nu, Stickiness::new(0.9).unwrap(), &SolverOptions::default()).unwrap();
    let pi = c.coupling().unwrap();
    let second_moment: f64 = pi.support().map(|(a, b, w)| w * (a + b) * (a + b)).sum();

    let n = 4000;
    let draws = sample_joint(&c, n, 11).unwrap();
    let (y0, y1): (Vec<f64>, Vec<f64>) = draws.into_iter().unzip();
    let d = balanced(&y0, &y1, 12);
    let plug_in = var_sb(&d, &c, FhConvention::ImputeMissing).unwrap();
    let direct = true_variance(&y0, &y1).unwrap();
    let target = second_moment / n as f64;

    let g: Vec<f64> = (0..n).map(|i| (y0[i] + y1[i]).powi(2)).collect();
    let mean = g.iter().sum::<f64>() / n as f64;
    let sd = (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).powf(1.5);
    assert!((plug_in - target).abs() < 3.0 * sd, "{plug_in} vs {target} (sd {sd})");
    assert!((direct - target).abs() < 3.0 * sd, "{direct} vs {target} (sd {sd})");
}

#[test]
fn sinkhorn_plug_in_tends_to_frechet_hoeffding() {
    for seed in [1, 2, 3] {
        let d = observed(200, seed);
        let (mu, nu) = d.split_by_treatment().unwrap();
        let fh = var_fh(&d, &mu, &nu, FhConvention::ImputeMissing).unwrap();
        let c = BregmanSinkhornCopula::fit(&mu, &nu, Stickiness::new(0.9999).unwrap(), &SolverOptions::default())
            .unwrap();
        let sb = var_sb(&d, &c, FhConvention::ImputeMissing).unwrap();
        assert!((sb - fh).abs() < 0.02 * fh, "seed {seed}: {sb} vs {fh}");
    }
}

#[test]
fn variances_scale_quadratically() {
    let d = observed(120, 9);
    let k: f64 = 3.0;
    let scaled = ObservedDataset::new(
        d.outcomes().iter().map(|y| k * y).collect(),
        d.treatments().to_vec(),
        None,
    )
    .unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();

    let (mu, nu) = d.split_by_treatment().unwrap();
    let (smu, snu) = scaled.split_by_treatment().unwrap();
    let fh = var_fh(&d, &mu, &nu, FhConvention::ImputeMissing).unwrap();
    assert!(rel(var_fh(&scaled, &smu, &snu, FhConvention::ImputeMissing).unwrap(), k * k * fh) < 1e-12);
    assert!(rel(var_neyman(&scaled).unwrap(), k * k * var_neyman(&d).unwrap()) < 1e-12);
    let y: Vec<f64> = d.outcomes().to_vec();
    let y1: Vec<f64> = y.iter().map(|v| 0.5 - v).collect();
    let sy: Vec<f64> = y.iter().map(|v| k * v).collect();
    let sy1: Vec<f64> = y1.iter().map(|v| k * v).collect();
    assert!(rel(true_variance(&sy, &sy1).unwrap(), k * k * true_variance(&y, &y1).unwrap()) < 1e-12);

    // the kernel exp(y₀y₁/ε) is invariant under (y₀, y₁, ε) ↦ (k y₀, k y₁, k² ε)
    let s = Stickiness::new(0.8).unwrap();
    let opts = SolverOptions {
        tol: 1e-12,
        ..SolverOptions::default()
    };
    let c = BregmanSinkhornCopula::fit(&mu, &nu, s, &opts).unwrap();
    let sc = BregmanSinkhornCopula::fit(&smu, &snu, Stickiness::with_epsilon(0.8, k * k * s.epsilon()).unwrap(), &opts)
        .unwrap();
    let sb = var_sb(&d, &c, FhConvention::ImputeMissing).unwrap();
    let ssb = var_sb(&scaled, &sc, FhConvention::ImputeMissing).unwrap();
    assert!(rel(ssb, k * k * sb) < 1e-8, "{ssb} vs {}", k * k * sb);
}
