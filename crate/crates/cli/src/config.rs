//! Run configuration: command-line flags, optionally overridden by a JSON
//! config file or a previous run's manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bscopula::{DgpSpec, Family, FhConvention, RateConfig, SolverOptions};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    Gaussian,
    Sinkhorn,
    Comonotone,
    Independent,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gaussian => Family::GaussianCopula,
            FamilyArg::Sinkhorn => Family::SinkhornCopula,
            FamilyArg::Comonotone => Family::Comonotone,
            FamilyArg::Independent => Family::Independent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Two-mode outcomes with 60% negative quantile-matched effects.
    Bimodal,
    /// Truncated normal outcomes for the variance comparison.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    ImputeMissing,
    AsDisplayed,
}

impl From<ConventionArg> for FhConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::ImputeMissing => FhConvention::ImputeMissing,
            ConventionArg::AsDisplayed => FhConvention::AsDisplayed,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    /// Input CSV (`y,t[,x]` observed data, or `y0,y1` panel for `variance`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Rank stickiness in (0, 1].
    #[arg(long)]
    pub rho: Option<f64>,
    /// Comma-separated stickiness grid for `sweep`.
    #[arg(long, value_delimiter = ',')]
    pub rho_grid: Option<Vec<f64>>,
    /// Per-stratum stickiness for `stratified`, e.g. `a=0.9,b=1`.
    #[arg(long)]
    pub rho_map: Option<String>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config (or manifest) whose values override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long, value_enum)]
    pub design: Option<Design>,
    /// Panel size for simulated designs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub fh_convention: Option<ConventionArg>,
}

/// Fully resolved configuration, echoed into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub rho_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub rho_map: Option<BTreeMap<String, f64>>,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    #[serde(default)]
    pub reps: Option<usize>,
    pub out: PathBuf,
    #[serde(default)]
    pub fh_convention: FhConvention,
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    #[serde(default)]
    pub rate: Option<RateConfig>,
}

impl RunConfig {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ..SolverOptions::default()
        }
    }

    pub fn rho(&self) -> anyhow::Result<f64> {
        self.rho.context("missing --rho")
    }

    pub fn input(&self) -> anyhow::Result<&Path> {
        self.input.as_deref().context("missing --input")
    }

    pub fn dgp(&self) -> anyhow::Result<&DgpSpec> {
        self.dgp.as_ref().context("missing simulation design")
    }

    fn validate(&self) -> anyhow::Result<()> {
        let rhos = self
            .rho
            .iter()
            .chain(self.rho_grid.iter().flatten())
            .chain(self.rho_map.iter().flat_map(|m| m.values()));
        for &r in rhos {
            if !(r > 0.0 && r <= 1.0) {
                bail!("rho = {r} must lie in (0, 1]");
            }
        }
        if self.out.as_os_str().is_empty() {
            bail!("output directory must be non-empty");
        }
        if self.input.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
            bail!("input path must be non-empty");
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            bail!("tol and max_iter must be positive");
        }
        if let Some(dgp) = &self.dgp {
            dgp.validate()?;
        }
        if let Some(rate) = &self.rate {
            rate.validate()?;
        }
        Ok(())
    }
}

/// Parses `label=rho` pairs separated by commas.
fn parse_rho_map(s: &str) -> anyhow::Result<BTreeMap<String, f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (label, rho) = pair
                .split_once('=')
                .with_context(|| format!("`{pair}` is not of the form label=rho"))?;
            let rho: f64 = rho.trim().parse().with_context(|| format!("bad rho in `{pair}`"))?;
            Ok((label.trim().to_string(), rho))
        })
        .collect()
}

fn read_override(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    if !value.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(value)
}

/// Builds the effective configuration for `command`.
///
/// Precedence: config file, then flags, then per-command defaults. An explicit
/// `--out` always wins so that a manifest can be replayed into a fresh directory.
pub fn resolve(command: &str, flags: &Flags) -> anyhow::Result<RunConfig> {
    let defaults = SolverOptions::default();
    let design = flags.design.unwrap_or(match command {
        "variance" => Design::Variance,
        _ => Design::Bimodal,
    });
    let family: Family = flags.family.unwrap_or(FamilyArg::Sinkhorn).into();
    let mut spec = match design {
        Design::Bimodal => DgpSpec::bimodal(family),
        Design::Variance => DgpSpec::variance_design(family),
    };
    if let Some(n) = flags.n {
        spec.n = n;
    }
    let rate_default = RateConfig::new(flags.rho.unwrap_or(0.9));
    let seed = flags.seed.unwrap_or(match command {
        "rate" => rate_default.seed,
        "fit" | "stratified" => 0,
        _ => spec.seed,
    });

    let mut cfg = RunConfig {
        command: command.to_string(),
        input: flags.input.clone(),
        rho: flags.rho,
        rho_grid: flags.rho_grid.clone(),
        rho_map: flags.rho_map.as_deref().map(parse_rho_map).transpose()?,
        tol: flags.tol.unwrap_or(defaults.tol),
        max_iter: flags.max_iter.unwrap_or(defaults.max_iter),
        seed,
        reps: flags.reps,
        out: flags.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        fh_convention: flags.fh_convention.map(Into::into).unwrap_or_default(),
        dgp: None,
        rate: None,
    };
    match command {
        "fit" => {
            cfg.rho.get_or_insert(0.95);
        }
        "simulate" => cfg.dgp = Some(spec),
        "sweep" => {
            cfg.rho_grid.get_or_insert_with(|| vec![0.9, 0.95, 0.99, 0.999, 1.0]);
            cfg.dgp = Some(spec);
        }
        "variance" => {
            cfg.rho.get_or_insert(0.95);
            cfg.reps.get_or_insert(200);
            if cfg.input.is_none() {
                cfg.dgp = Some(spec);
            }
        }
        "rate" => {
            cfg.rho.get_or_insert(0.9);
            cfg.reps.get_or_insert(rate_default.reps);
        }
        "stratified" => {
            if cfg.rho_map.is_none() {
                cfg.rho.get_or_insert(1.0);
            }
        }
        other => bail!("unknown command `{other}`"),
    }

    if let Some(path) = &flags.config {
        let over = read_override(path)?;
        if let Some(c) = over.get("command").and_then(|c| c.as_str()) {
            if c != command {
                bail!("config {} is for `{c}`, not `{command}`", path.display());
            }
        }
        let mut merged = serde_json::to_value(&cfg)?;
        let map = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in over.as_object().expect("checked above") {
            map.insert(k.clone(), v.clone());
        }
        cfg = serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(out) = &flags.out {
            cfg.out = out.clone();
        }
    }

    // one seed drives everything
    if let Some(dgp) = cfg.dgp.as_mut() {
        dgp.seed = cfg.seed;
    }
    if command == "rate" {
        let mut rate = cfg.rate.clone().unwrap_or_else(|| RateConfig::new(cfg.rho.unwrap_or(0.9)));
        rate.rho = cfg.rho()?;
        rate.seed = cfg.seed;
        if let Some(r) = cfg.reps {
            rate.reps = r;
        }
        cfg.rate = Some(rate);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_map_parsing() {
        let m = parse_rho_map("a=0.9, b = 1").unwrap();
        assert_eq!(m["a"], 0.9);
        assert_eq!(m["b"], 1.0);
        assert!(parse_rho_map("a:0.9").is_err());
    }

    #[test]
    fn defaults_per_command() {
        let f = Flags::default();
        assert_eq!(resolve("fit", &f).unwrap().rho, Some(0.95));
        let r = resolve("rate", &f).unwrap();
        assert_eq!(r.rate.unwrap().reps, 50);
        let v = resolve("variance", &f).unwrap();
        assert_eq!(v.dgp.unwrap().seed, v.seed);
        assert!(resolve("fit", &Flags { rho: Some(1.5), ..Flags::default() }).is_err());
    }

    #[test]
    fn config_overrides_flags_but_not_out() {
        let dir = std::env::temp_dir().join(format!("bscopula-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        std::fs::write(&path, r#"{"config": {"rho": 0.5, "out": "elsewhere"}}"#).unwrap();
        let f = Flags {
            rho: Some(0.9),
            out: Some(PathBuf::from("here")),
            config: Some(path),
            ..Flags::default()
        };
        let c = resolve("fit", &f).unwrap();
        assert_eq!(c.rho, Some(0.5));
        assert_eq!(c.out, PathBuf::from("here"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
