//! One function per subcommand; each returns the `results` block of its manifest.

use std::collections::BTreeMap;

use anyhow::Context;
use bscopula::covariate::{find_discordant_pair, write_mixture_csv};
use bscopula::dgp::{spearman, variance_comparison_on};
use bscopula::{
    fit_stratified, impute_ted, mixture_ted, run_rate_experiment, run_ted_sweep, simulate, AssignmentScheme,
    Coupling, JointModel, ObservedDataset, SimulatedPanel, VarianceReport, SCHEMA_VERSION,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{versioned, Artifacts};

#[derive(Serialize)]
struct CouplingSummary {
    schema_version: u32,
    rho: f64,
    epsilon: f64,
    rows: usize,
    cols: usize,
    solver_residual: Option<f64>,
    solver_iterations: Option<usize>,
    marginal_residual: f64,
    total_mass: f64,
    rank_correlation: f64,
    comonotone_rank_correlation: f64,
    kl_to_independence: f64,
}

fn read_observed(cfg: &RunConfig) -> anyhow::Result<ObservedDataset> {
    let path = cfg.input()?;
    ObservedDataset::from_csv_path(path).with_context(|| format!("reading {}", path.display()))
}

pub fn fit(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<Value> {
    let d = read_observed(cfg)?;
    let (mu, nu) = d.split_by_treatment()?;
    let rho = cfg.rho()?;
    let model = JointModel::fit(&mu, &nu, rho, &cfg.solver())?;
    let (residual, iterations, epsilon) = match &model {
        JointModel::Sinkhorn(c) => {
            art.json("potentials.json", &c.potentials().to_json())?;
            (Some(c.potentials().residual), Some(c.potentials().iterations), c.epsilon())
        }
        JointModel::Comonotone { .. } => (None, None, 0.0),
    };
    let coupling = model.coupling()?;
    let summary = CouplingSummary {
        schema_version: SCHEMA_VERSION,
        rho,
        epsilon,
        rows: coupling.rows(),
        cols: coupling.cols(),
        solver_residual: residual,
        solver_iterations: iterations,
        marginal_residual: coupling.marginal_residual(),
        total_mass: coupling.total_mass(),
        rank_correlation: coupling.rank_correlation(),
        comonotone_rank_correlation: Coupling::comonotone(&mu, &nu).rank_correlation(),
        kl_to_independence: coupling.kl_to_independence()?,
    };
    art.json("coupling_summary.json", &summary)?;

    let ted = impute_ted(&coupling)?;
    let ted_summary = ted.summary()?;
    art.with_writer("ted.csv", |w| ted.write_csv(w))?;
    art.json("ted_summary.json", &ted_summary)?;
    let report = VarianceReport::compute(&d, &model, cfg.fh_convention, None)?;
    art.json("variance_report.json", &report)?;
    Ok(json!({
        "rho": rho,
        "n": d.len(),
        "tau_hat": report.tau_hat,
        "var_sb": report.var_sb,
        "var_fh": report.var_fh,
        "var_neyman": report.var_neyman,
        "negative_effect_mass": ted_summary.negative_effect_mass,
        "rank_correlation": summary.rank_correlation,
    }))
}

pub fn simulate_panel(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<Value> {
    let spec = cfg.dgp()?;
    let panel = simulate(spec)?;
    let truth = panel.true_ted()?;
    let summary = truth.summary()?;
    art.with_writer("panel.csv", |w| panel.write_csv(w))?;
    art.with_writer("true_ted.csv", |w| truth.write_csv(w))?;
    art.json("true_ted_summary.json", &summary)?;
    Ok(json!({
        "n": panel.len(),
        "spearman": spearman(&panel.y0, &panel.y1),
        "ate": summary.mean,
        "negative_effect_mass": summary.negative_effect_mass,
    }))
}

pub fn sweep(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<Value> {
    let spec = cfg.dgp()?;
    let grid = cfg.rho_grid.as_deref().context("missing --rho-grid")?;
    let s = run_ted_sweep(spec, grid, &cfg.solver())?;
    art.with_writer("sweep.csv", |w| s.write_csv(w))?;
    art.json("true_ted_summary.json", &s.true_summary)?;
    let best = s.best().clone();
    let k = s.rows.iter().position(|r| r.rho == best.rho).expect("best row is in the table");
    art.with_writer("best_ted.csv", |w| s.imputed[k].write_csv(w))?;
    Ok(json!({
        "best_rho": best.rho,
        "best_w1": best.w1,
        "best_negative_effect_mass": best.negative_effect_mass,
        "true_negative_effect_mass": s.true_summary.negative_effect_mass,
        "rows": s.rows,
    }))
}

pub fn variance(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<Value> {
    let panel = match &cfg.input {
        Some(path) => SimulatedPanel::from_csv_path(path).with_context(|| format!("reading {}", path.display()))?,
        None => simulate(cfg.dgp()?)?,
    };
    let reps = cfg.reps.context("missing --reps")?;
    let cmp = variance_comparison_on(
        panel,
        cfg.seed,
        reps,
        cfg.rho()?,
        AssignmentScheme::Balanced,
        cfg.fh_convention,
        &cfg.solver(),
    )?;
    art.with_writer("variance.csv", |w| cmp.write_csv(w))?;
    art.json("variance_summary.json", &versioned(&cmp.aggregate)?)?;
    Ok(serde_json::to_value(&cmp.aggregate)?)
}

pub fn rate(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<Value> {
    let rc = cfg.rate.as_ref().context("missing rate configuration")?;
    let r = run_rate_experiment(rc, &cfg.solver())?;
    art.with_writer("rate.csv", |w| r.write_csv(w))?;
    art.json("rate_summary.json", &versioned(&r)?)?;
    Ok(json!({ "rho": r.rho, "slope": r.slope, "rows": r.rows }))
}

pub fn stratified(cfg: &RunConfig, art: &mut Artifacts) -> anyhow::Result<Value> {
    let d = read_observed(cfg)?;
    let rho_map: BTreeMap<String, f64> = match &cfg.rho_map {
        Some(m) => m.clone(),
        None => {
            let rho = cfg.rho()?;
            d.strata()?.into_keys().map(|k| (k, rho)).collect()
        }
    };
    let fit = fit_stratified(&d, &rho_map, &cfg.solver())?;
    let report = fit.report()?;
    art.json("stratified_report.json", &report)?;
    art.with_writer("mixture_ted.csv", |w| write_mixture_csv(&fit, w))?;
    let mixture = mixture_ted(&fit)?;
    let discordant = find_discordant_pair(&fit.joint_support()?);
    Ok(json!({
        "strata": report.strata.len(),
        "mixture_mean": mixture.mean(),
        "mixture_negative_effect_mass": mixture.negative_effect_mass(),
        "marginal_discordant_pair": discordant.map(|(a, b)| [[a.0, a.1], [b.0, b.1]]),
    }))
}
