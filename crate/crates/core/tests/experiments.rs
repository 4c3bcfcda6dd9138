use bscopula::{run_rate_experiment, run_ted_sweep, DgpSpec, Family, RateConfig, SolverOptions};

#[test]
fn matched_comonotone_model_has_small_ted_error() {
    let spec = DgpSpec::bimodal(Family::Comonotone);
    let sweep = run_ted_sweep(&spec, &[0.9, 1.0], &SolverOptions::default()).unwrap();
    let exact = sweep.rows.iter().find(|r| r.rho == 1.0).unwrap();
    assert!(exact.w1 < 0.05, "w1 {}", exact.w1);
    assert!(sweep.rows.iter().all(|r| exact.w1 <= r.w1));
}

#[test]
fn rate_slopes_are_stable_in_the_replication_count() {
    for rho in [1.0, 0.9] {
        let base = run_rate_experiment(&RateConfig::new(rho), &SolverOptions::default()).unwrap();
        let doubled = RateConfig {
            reps: 100,
            ..RateConfig::new(rho)
        };
        let more = run_rate_experiment(&doubled, &SolverOptions::default()).unwrap();
        assert!((-0.65..=-0.35).contains(&base.slope), "rho {rho}: slope {}", base.slope);
        assert!((base.slope - more.slope).abs() < 0.1, "rho {rho}: {} vs {}", base.slope, more.slope);
    }
}
