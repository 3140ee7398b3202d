//! Excited random walks in Markovian cookie environments.
//!
//! * [`env`]: stacks, kernels, stationary law, drift `δ`, reversal, builtins.
//! * [`walk`]: the coin-tossing walk and its path functionals.
//! * [`branching`]: forward/backward branching processes, hatted chains, renewal cycles.
//! * [`oracle`]: exact step laws, truncated chains, survival curves, `θ(x)`.
//! * [`analysis`]: phase map, tail fits, stable characteristic functions,
//!   Lyapunov test, squared Bessel diffusion.

pub mod analysis;
pub mod batch;
pub mod branching;
pub mod env;
pub mod oracle;
pub mod rng;
pub mod walk;

pub use analysis::{
    cf_distance, classify_phase, lyapunov_classify, simulate_squared_bessel, stable_cf, tail_exponent_fit,
    AnalysisError, GammaCentering, LimitRegime, LyapunovVerdict, PhaseReport, SpeedSign, StableLawParams,
    TailFitReport, Transience,
};
pub use branching::{
    backward_step_sample, forward_step_sample, moments_at_return, renewal_decompose, run_chain, run_hatted,
    survival_statistics, BranchingError, BranchingPath, ChainKind, RenewalRecord, RenewalSummary,
};
pub use env::{
    builtin_environment, compute_delta, list_builtins, realize_environment, reverse_environment,
    stationary_distribution, validate_spec, CookieStack, EnvError, EnvironmentRealization, RawSpec, SpecError,
    StackChainSpec, TwoSidedMode,
};
pub use oracle::{
    backward_step_pmf, build_vr_matrix, exact_hatted_transition, exact_survival_tail, exact_theta, forward_step_pmf,
    OracleError, Side, StepPmf, TruncatedChainMatrix,
};
pub use walk::{
    backtrack_tail, down_crossings, limit_law_samples, run_walk, up_crossings_before_return, velocity_estimate,
    CoinField, Coins, StopRule, WalkError, WalkPath,
};
