//! Bregman–Sinkhorn copulas for pairing two samples that are never observed
//! jointly, with treatment-effect imputation and variance estimators built on
//! top.

pub mod ate_variance;
pub mod copula;
pub mod covariate;
pub mod dgp;
pub mod empirical;
pub mod error;
pub mod numeric;
pub mod sinkhorn;
pub mod special;
pub mod ted;

pub use ate_variance::{
    horvitz_thompson_ate, true_variance, var_fh, var_joint, var_neyman, var_sb, FhConvention, VarianceReport,
};
pub use copula::{
    comonotone_map, gaussian_copula_density, rank_stickiness_profile, BregmanSinkhornCopula, DiscreteConditional,
    JointModel,
};
pub use covariate::{
    estimate_score, find_discordant_pair, fit_stratified, gradient_flow_step, mixture_ted, run_flow, run_flow_with,
    FlowConfig, FlowResult, FlowState, LogisticEstimator, LogisticScore, Score, ScoreEstimator, StratifiedFit,
    StratifiedReport,
};
pub use dgp::{
    run_rate_experiment, run_ted_sweep, run_variance_comparison, simulate, AssignmentScheme, DgpSpec, Family,
    MixtureMarginal, RateConfig, SimulatedPanel,
};
pub use empirical::{wasserstein1, EmpiricalMeasure, ObservedDataset};
pub use error::{Error, Result};
pub use sinkhorn::{
    coupling_from_potentials, epsilon_of_rho, kl_to_independence, rank_correlation, solve_potentials, solve_potentials_from, Coupling,
    SinkhornPotentials, SolverOptions, Stickiness,
};
pub use ted::{impute_ted, negative_effect_mass, sample_joint, ted_cdf, ted_quantile, TedDistribution, TedSummary};

/// Version tag written into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
