//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bscopula::numeric::weighted_slope;
use bscopula::{
    coupling_from_potentials, find_discordant_pair, fit_stratified, mixture_ted, rank_stickiness_profile,
    run_flow, run_rate_experiment, run_ted_sweep, run_variance_comparison, solve_potentials,
    solve_potentials_from, AssignmentScheme, BregmanSinkhornCopula, DgpSpec, Family, FhConvention, FlowConfig,
    ObservedDataset, RateConfig, SolverOptions, Stickiness,
};
use common::{primal_oracle, quantile_grid, random_pair, smooth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = (bool, String);

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn smooth_fit(rho: f64) -> BregmanSinkhornCopula {
    let (mu, nu) = (smooth(200, 0.0, 1.0), smooth(200, 0.5, 1.2));
    BregmanSinkhornCopula::fit(&mu, &nu, Stickiness::new(rho).unwrap(), &SolverOptions::default()).unwrap()
}

fn sinkhorn_vs_oracle() -> Outcome {
    let (mut sup, mut resid, mut slowest) = (0.0_f64, 0.0_f64, 0.0_f64);
    for seed in 0..10 {
        let (mu, nu) = random_pair(seed);
        for rho in [0.5, 0.9] {
            let s = Stickiness::new(rho).unwrap();
            let start = Instant::now();
            let p = solve_potentials(&mu, &nu, s, &SolverOptions::default()).unwrap();
            let c = coupling_from_potentials(&p, &mu, &nu).unwrap();
            slowest = slowest.max(start.elapsed().as_secs_f64());
            resid = resid.max(c.marginal_residual());
            sup = sup.max(sup_diff(c.weights(), &primal_oracle(&mu, &nu, s.epsilon())));
        }
    }
    (
        sup < 1e-6 && resid < 1e-9 && slowest < 1.0,
        format!("sup error {sup:.1e}, marginal residual {resid:.1e}, slowest {slowest:.3}s"),
    )
}

fn uniqueness() -> Outcome {
    let (mu, nu) = (smooth(200, 0.0, 1.0), smooth(200, 0.5, 1.2));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init: Vec<f64> = (0..nu.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let opts = SolverOptions {
        tol: 1e-12,
        ..SolverOptions::default()
    };
    let mut worst = 0.0_f64;
    for rho in [0.5, 0.9, 0.99] {
        let s = Stickiness::new(rho).unwrap();
        let a = solve_potentials(&mu, &nu, s, &opts).unwrap();
        let b = solve_potentials_from(&mu, &nu, s, &SolverOptions { anneal: false, ..opts }, &init).unwrap();
        worst = worst.max(sup_diff(&a.phi, &b.phi).max(sup_diff(&a.psi, &b.psi)));
    }
    (worst < 1e-8, format!("sup gap {worst:.1e} over rho 0.5/0.9/0.99"))
}

fn conditional_identities() -> Outcome {
    let (mut tilt, mut mean_rel, mut var_rel) = (0.0_f64, 0.0_f64, 0.0_f64);
    for rho in [0.7, 0.9] {
        let c = smooth_fit(rho);
        for &y0 in c.mu().atoms() {
            let a = c.conditional_distribution(y0);
            let b = c.conditional_from_bregman(y0);
            tilt = tilt.max(sup_diff(a.probabilities(), b.probabilities()));
        }
        let h = 1e-4;
        for &y0 in c.mu().atoms().iter().step_by(7) {
            let (fm, f0, fp) = (c.phi_at(y0 - h), c.phi_at(y0), c.phi_at(y0 + h));
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp - 2.0 * f0 + fm) / (h * h);
            let mean = c.conditional_mean(y0);
            let var = c.conditional_variance(y0);
            mean_rel = mean_rel.max((mean - d1).abs() / mean.abs().max(1.0));
            var_rel = var_rel.max((var - c.epsilon() * d2).abs() / var);
        }
    }
    (
        tilt < 1e-12 && mean_rel < 1e-4 && var_rel < 1e-4,
        format!("tilt gap {tilt:.1e}, mean rel {mean_rel:.1e}, variance rel {var_rel:.1e}"),
    )
}

fn gaussian_nesting() -> Outcome {
    let m = smooth(500, 0.0, 1.0);
    let rho: f64 = 0.9;
    let s = Stickiness::with_epsilon(rho, (1.0 - rho * rho) / rho).unwrap();
    let c = BregmanSinkhornCopula::fit(&m, &m, s, &SolverOptions::default()).unwrap();
    let means: Vec<f64> = m.atoms().iter().map(|&x| c.conditional_mean(x)).collect();
    let slope = weighted_slope(m.atoms(), &means, m.weights());
    ((slope - rho).abs() < 0.02, format!("slope {slope:.4}"))
}

fn rank_stickiness() -> Outcome {
    let (mu, nu) = (quantile_grid(500, 0.0, 1.0), quantile_grid(500, 0.5, 1.2));
    let mut ok = true;
    let mut detail = Vec::new();
    for u0 in [0.25, 0.5, 0.75] {
        let prof =
            rank_stickiness_profile(&mu, &nu, 1.0, &[0.1, 0.01, 0.001], u0, &SolverOptions::default()).unwrap();
        for w in prof.windows(2) {
            ok &= (w[1].mean_rank - u0).abs() < (w[0].mean_rank - u0).abs();
            ok &= w[1].var_rank < w[0].var_rank;
        }
        let last = prof.last().unwrap();
        let bias = (last.mean_rank - u0).abs();
        ok &= bias < 0.05 && last.var_rank < 0.01;
        detail.push(format!("u0 {u0}: bias {bias:.1e} var {:.1e}", last.var_rank));
    }
    (ok, detail.join("; "))
}

fn rank_violations() -> Outcome {
    let c = smooth_fit(0.9);
    let probs: Vec<f64> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&u| c.rank_violation_probability(u, 0.1).unwrap())
        .collect();
    (probs.iter().all(|&p| p > 1e-4), format!("violation probabilities {probs:.4?}"))
}

fn rate_slopes() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for rho in [1.0, 0.9] {
        let r = run_rate_experiment(&RateConfig::new(rho), &SolverOptions::default()).unwrap();
        ok &= (-0.65..=-0.35).contains(&r.slope);
        detail.push(format!("rho {rho}: slope {:.3}", r.slope));
    }
    let secs = start.elapsed().as_secs_f64();
    (ok && secs < 300.0, format!("{}; {secs:.1}s", detail.join(", ")))
}

fn ted_replication() -> Outcome {
    let spec = DgpSpec::bimodal(Family::SinkhornCopula);
    let s = run_ted_sweep(&spec, &[0.9, 0.95, 0.99, 0.999, 1.0], &SolverOptions::default()).unwrap();
    let best = s.best();
    let at_one = s.rows.iter().find(|r| r.rho == 1.0).unwrap();
    let ok = (best.negative_effect_mass - 0.6).abs() < 0.05
        && (best.rho == 0.99 || best.rho == 0.999)
        && best.w1 < at_one.w1;
    (
        ok,
        format!(
            "best rho {}, W1 {:.4} (rho 1: {:.4}), negative mass {:.3}",
            best.rho, best.w1, at_one.w1, best.negative_effect_mass
        ),
    )
}

fn variance_replication() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for family in [Family::SinkhornCopula, Family::GaussianCopula] {
        let spec = DgpSpec::variance_design(family);
        let cmp = run_variance_comparison(
            &spec,
            200,
            0.95,
            AssignmentScheme::Balanced,
            FhConvention::ImputeMissing,
            &SolverOptions::default(),
        )
        .unwrap();
        let a = &cmp.aggregate;
        ok &= a.frac_fh_above_true >= 0.9 && a.frac_neyman_above_true >= 0.9 && a.relative_error_sb < 0.25;
        detail.push(format!(
            "{family:?}: fh {:.3}, neyman {:.3}, sb rel {:.4}",
            a.frac_fh_above_true, a.frac_neyman_above_true, a.relative_error_sb
        ));
    }
    (ok, detail.join("; "))
}

fn stratified_example() -> Outcome {
    let y = vec![0.5, 0.75, 0.25, 1.0, 0.25, 1.0, 0.5, 0.75];
    let t = vec![false, false, true, true, false, false, true, true];
    let x = ["a", "a", "a", "a", "b", "b", "b", "b"].map(String::from).to_vec();
    let d = ObservedDataset::new(y, t, Some(x)).unwrap();
    let map: BTreeMap<String, f64> = [("a".to_string(), 1.0), ("b".to_string(), 1.0)].into();
    let f = fit_stratified(&d, &map, &SolverOptions::default()).unwrap();
    let ted = mixture_ted(&f).unwrap();
    let uniform = ted.atoms() == [-0.25, 0.25] && ted.weights() == [0.5, 0.5];
    let pair = find_discordant_pair(&f.joint_support().unwrap());
    (
        uniform && pair.is_some(),
        format!("mixture atoms {:?} weights {:?}, discordant pair {pair:?}", ted.atoms(), ted.weights()),
    )
}

fn gradient_flow() -> Outcome {
    let draws = |mean: f64, seed: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, 1.0).unwrap();
        (0..4000).map(|_| d.sample(&mut rng)).collect()
    };
    let (s0, s1) = (draws(0.0, 21), draws(1.0, 22));
    let shift = run_flow(&s0, &s1, &FlowConfig::default()).unwrap();
    let fixed = run_flow(&s0, &s0, &FlowConfig::default()).unwrap();
    let drift = fixed.state.sup_error(|y| y);
    (
        shift.w1 < 0.05 && drift < 1e-6,
        format!("shift W1 {:.4} (from {:.3}), identity drift {drift:.1e}", shift.w1, shift.w1_initial),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_bscopula")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn same_artifacts(a: &Path, b: &Path) -> Result<usize, String> {
    let mut count = 0;
    for entry in fs::read_dir(a).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        if fs::read(a.join(&name)).unwrap() != fs::read(b.join(&name)).map_err(|e| format!("{name:?}: {e}"))? {
            return Err(format!("{name:?} differs"));
        }
        count += 1;
    }
    Ok(count)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut observed = String::from("y,t,x\n");
    for i in 0..60 {
        let t = i % 2;
        let x = if i < 30 { "a" } else { "b" };
        observed += &format!("{},{t},{x}\n", rng.random_range(0.0..1.0) + 0.5 * t as f64);
    }
    let input = root.join("observed.csv");
    fs::write(&input, observed).unwrap();
    let input = input.to_str().unwrap();

    let runs: [(&str, Vec<&str>); 6] = [
        ("fit", vec!["--input", input, "--rho", "0.9"]),
        ("simulate", vec!["--n", "300"]),
        ("sweep", vec!["--n", "300"]),
        ("variance", vec!["--n", "200", "--reps", "10"]),
        ("rate", vec!["--rho", "1", "--reps", "20"]),
        ("stratified", vec!["--input", input, "--rho-map", "a=0.9,b=1"]),
    ];
    let mut detail = Vec::new();
    for (cmd, extra) in runs {
        let first = root.join(format!("{cmd}-1"));
        let second = root.join(format!("{cmd}-2"));
        let mut args = vec![cmd, "--out", first.to_str().unwrap()];
        args.extend(extra);
        run_cli(&args);
        let manifest = first.join("manifest.json");
        run_cli(&[cmd, "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
        match same_artifacts(&first, &second) {
            Ok(n) => detail.push(format!("{cmd} {n} files")),
            Err(e) => return (false, format!("{cmd}: {e}")),
        }
    }
    (true, detail.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("sinkhorn matches the primal oracle", sinkhorn_vs_oracle),
        ("centered potentials are unique", uniqueness),
        ("conditional identities", conditional_identities),
        ("gaussian copula nesting", gaussian_nesting),
        ("rank stickiness", rank_stickiness),
        ("rank violations below one", rank_violations),
        ("convergence rate slopes", rate_slopes),
        ("bimodal effect distribution", ted_replication),
        ("variance estimator comparison", variance_replication),
        ("stratified example", stratified_example),
        ("gradient flow", gradient_flow),
        ("cli determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failed += usize::from(!ok);
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {:>2} {name}: {detail} [{:.1}s]", k + 1, start.elapsed().as_secs_f64());
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
