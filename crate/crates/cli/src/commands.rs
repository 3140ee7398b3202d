use clap::{Args, ValueEnum};
use erw_core::analysis::{
    bessel_exit_formula, bessel_exit_probability, bessel_hitting_times, cf_distance, classify_phase, default_t_grid,
    empirical_ccdf, ks_distance_normal, tail_exponent_fit, BesselParams, LimitRegime, SpeedSign, StableLawParams,
};
use erw_core::batch::{mean_and_se, run_batch};
use erw_core::branching::{
    backward_step_sample, coupled_triple, forward_step_sample, hatted_one_step_samples, moments_at_return,
    renewal_decompose, survival_statistics,
};
use erw_core::env::{reverse_environment, StackChainSpec};
use erw_core::oracle::{backward_step_pmf, exact_hatted_transition, forward_step_pmf, Side};
use erw_core::rng::{episode_rng, Stream};
use erw_core::walk::{down_crossings, endpoints, run_walk, velocity_estimate, CoinField, StopRule, WalkOptions};
use serde::Serialize;

use crate::config::{CommonArgs, ConfigError};
use crate::report::{write_ccdf, write_csv, Assertion, Report};

fn report_for<A: Serialize>(command: &str, args: &A, common: &CommonArgs, spec: Option<&StackChainSpec>) -> Report {
    let options = serde_json::to_value(args).unwrap_or_default();
    Report::new(command, options, spec, common.timestamp)
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ClassifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
}

pub fn classify(args: &ClassifyArgs) -> Result<Report, ConfigError> {
    let spec = args.common.load_spec()?;
    let mut report = report_for("classify", args, &args.common, Some(&spec));
    let delta = spec.delta();
    let reversed = reverse_environment(&spec);
    let mirrored = classify_phase(reversed.delta());
    let phase = classify_phase(delta);
    report.estimate("delta", delta);
    report.estimate("regime", phase.regime_tag());
    report.estimate("anchor_mean_return", spec.anchor_mean_return());
    report.estimate("reversed_delta", reversed.delta());
    report.assertions.push(Assertion::at_most(
        "reversal_negates_delta",
        "reversing the environment maps delta to -delta",
        (reversed.delta() + delta).abs(),
        1e-12,
    ));
    let same_regime = mirrored.regime == phase.regime && mirrored.boundary == phase.boundary;
    report.assertions.push(Assertion::exact(
        "reversal_mirrors_phase",
        "the phase of the reversed environment is the mirror image",
        usize::from(!same_regime),
    ));
    Ok(report)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct WalkArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Skip the hitting-time run and the crossing identity.
    #[arg(long)]
    pub no_hitting: bool,
}

struct WalkRow {
    seed: u64,
    end: i64,
    tau: Option<u64>,
    truncated: bool,
    identity: Option<bool>,
}

fn walk_episode(spec: &StackChainSpec, args: &WalkArgs, seed: u64) -> Result<WalkRow, ConfigError> {
    let c = &args.common;
    let mut coins = CoinField::from_seed(spec, seed, c.mode());
    let fixed = run_walk(
        &mut coins,
        0,
        StopRule::Steps(c.n),
        WalkOptions {
            step_cap: c.step_cap,
            record_positions: false,
        },
    )?;
    let mut row = WalkRow {
        seed,
        end: fixed.end,
        tau: None,
        truncated: fixed.truncated,
        identity: None,
    };
    if args.no_hitting {
        return Ok(row);
    }
    let mut coins = CoinField::from_seed(spec, seed, c.mode());
    let level = c.n as i64;
    let path = run_walk(
        &mut coins,
        0,
        StopRule::Level(level),
        WalkOptions {
            step_cap: c.step_cap,
            record_positions: true,
        },
    )?;
    if path.truncated {
        row.truncated = true;
    } else {
        row.tau = Some(path.steps);
        row.identity = Some(down_crossings(&path, level)?.identity_holds());
    }
    Ok(row)
}

pub fn walk(args: &WalkArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.load_spec()?;
    let mut report = report_for("walk", args, c, Some(&spec));
    let rows: Vec<WalkRow> = run_batch(c.reps, c.seed, c.threads(), |_, s| walk_episode(&spec, args, s))
        .into_iter()
        .collect::<Result<_, _>>()?;
    write_csv(
        &c.out,
        "walk.csv",
        &["rep", "seed", "n", "X_n", "tau_n", "truncated"],
        rows.iter().enumerate().map(|(i, r)| {
            [
                i.to_string(),
                r.seed.to_string(),
                c.n.to_string(),
                r.end.to_string(),
                r.tau.map(|t| t.to_string()).unwrap_or_default(),
                r.truncated.to_string(),
            ]
        }),
    )?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.end as f64 / c.n as f64).collect();
    let (v, se) = mean_and_se(&ratios);
    report.estimate("velocity", v);
    report.estimate("velocity_std_error", se);
    report.truncated_fraction = fraction(rows.iter().filter(|r| r.truncated).count(), rows.len());
    if !args.no_hitting {
        let checked = rows.iter().filter(|r| r.identity.is_some()).count();
        let broken = rows.iter().filter(|r| r.identity == Some(false)).count();
        report.estimate("identity_checked", checked);
        report.assertions.push(Assertion::exact(
            "crossing_identity",
            "tau_n = n + 2 * sum of down-crossings below n, pathwise",
            broken,
        ));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
pub enum SideArg {
    Forward,
    Backward,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Forward => Side::Forward,
            SideArg::Backward => Side::Backward,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct BranchingArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value = "forward")]
    pub side: SideArg,
    /// Starting level of the coupled chains and of the anchor-return moments.
    #[arg(long, default_value_t = 100)]
    pub start: u64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Moment checks pass within this many standard errors.
    #[arg(long, default_value_t = 4.0)]
    pub se_multiple: f64,
}

pub fn branching(args: &BranchingArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.load_spec()?;
    let mut report = report_for("branching", args, c, Some(&spec));
    let side = Side::from(args.side);
    let violations: Vec<usize> = run_batch(c.reps, c.seed, c.threads(), |_, s| {
        let mut coins = CoinField::from_seed(&spec, s, c.mode());
        coupled_triple(&mut coins, side, args.start, args.steps).map(|t| t.violations())
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    report.assertions.push(Assertion::exact(
        "domination",
        "minus chain <= chain <= plus chain under shared coins",
        violations.iter().sum(),
    ));

    let moments = moments_at_return(side, args.start, &spec, c.reps, c.seed, c.threads());
    report.assertions.push(Assertion::at_most(
        "return_mean",
        match side {
            Side::Forward => "mean level at the anchor return is x + delta * mu_s",
            Side::Backward => "mean level at the anchor return is x + (1 - delta) * mu_s",
        },
        (moments.mean - moments.target_mean).abs(),
        args.se_multiple * moments.mean_se,
    ));
    report.assertions.push(Assertion::at_most(
        "return_variance",
        "variance of the level at the anchor return is 2 x mu_s",
        (moments.variance - moments.target_variance).abs(),
        args.se_multiple * moments.variance_se,
    ));
    report.estimate("return_moments", &moments);

    if spec.delta() > 1.0 {
        let survival = survival_statistics(&spec, c.reps, c.seed, c.step_cap, c.threads())?;
        write_csv(
            &c.out,
            "survival.csv",
            &["rep", "kind", "tau0", "area", "sigma0", "truncated"],
            survival.episodes.iter().enumerate().map(|(i, e)| {
                [
                    i.to_string(),
                    "V".to_string(),
                    e.tau_hat.to_string(),
                    e.area.to_string(),
                    e.sigma0.to_string(),
                    e.truncated.to_string(),
                ]
            }),
        )?;
        report.truncated_fraction = fraction(survival.truncated, survival.episodes.len());
    }
    Ok(report)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct RenewalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Also estimate the speed from `--reps` walks of `--n` steps and compare.
    #[arg(long)]
    pub compare_walk: bool,
    /// Renewal cycles (defaults to `--reps`).
    #[arg(long)]
    pub cycles: Option<u64>,
    /// Relative tolerance of the speed comparison.
    #[arg(long, default_value_t = 0.05)]
    pub velocity_tolerance: f64,
}

pub fn renewal(args: &RenewalArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.load_spec()?;
    let mut report = report_for("renewal", args, c, Some(&spec));
    let cycles = args.cycles.unwrap_or(c.reps);
    let summary = renewal_decompose(&spec, cycles, c.seed, c.step_cap)?;
    write_csv(
        &c.out,
        "renewal.csv",
        &["i", "delta_sigma", "Q"],
        summary
            .records
            .iter()
            .map(|r| [r.i.to_string(), r.delta_sigma.to_string(), r.q.to_string()]),
    )?;
    let last = summary.records.last().map_or(0, |r| r.sigma);
    let total: u64 = summary.records.iter().map(|r| r.delta_sigma).sum();
    report.assertions.push(Assertion::exact(
        "cycle_lengths_add_up",
        "renewal times are the partial sums of the cycle lengths",
        usize::from(total != last),
    ));
    report.estimate("mu_sigma", summary.mu_sigma);
    report.estimate("mu_q", summary.mu_q);
    report.estimate("renewal_velocity", summary.velocity());
    report.truncated_fraction = if summary.truncated {
        1.0 / (cycles as f64 + 1.0)
    } else {
        0.0
    };

    if args.compare_walk {
        let walk = velocity_estimate(&spec, c.n, c.reps, c.seed, &c.batch())?;
        report.estimate("walk_velocity", &walk);
        let phase = classify_phase(spec.delta());
        let (gap, threshold) = match (phase.speed, summary.velocity()) {
            (SpeedSign::Positive, Some(v)) => ((walk.mean - v).abs() / v, args.velocity_tolerance),
            (_, None) => (walk.mean.abs(), args.velocity_tolerance),
            (_, Some(v)) => ((walk.mean - v).abs(), args.velocity_tolerance),
        };
        report.assertions.push(Assertion::at_most(
            "velocity_formula",
            "speed equals 1 / (1 + 2 mu_Q / mu_sigma)",
            gap,
            threshold,
        ));
        report.truncated_fraction = report.truncated_fraction.max(walk.truncated_fraction);
    }
    Ok(report)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct TailsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Lower quantile of the fit window.
    #[arg(long, default_value_t = 0.9)]
    pub window_lo: f64,
    /// Upper quantile of the fit window.
    #[arg(long, default_value_t = 0.999)]
    pub window_hi: f64,
    /// Largest tolerated gap between fitted and predicted exponents.
    #[arg(long, default_value_t = 0.4)]
    pub tolerance: f64,
}

pub fn tails(args: &TailsArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.load_spec()?;
    let mut report = report_for("tails", args, c, Some(&spec));
    let delta = spec.delta();
    let survival = survival_statistics(&spec, c.reps, c.seed, c.step_cap, c.threads())?;
    let window = (args.window_lo, args.window_hi);
    let sigma0 = survival.sigma0();
    let area = survival.area();
    let sigma_fit = tail_exponent_fit(&sigma0, window, survival.truncated)?;
    let area_fit = tail_exponent_fit(&area, window, survival.truncated)?;
    write_ccdf(&c.out, "ccdf_sigma0.csv", &empirical_ccdf(&sigma0))?;
    write_ccdf(&c.out, "ccdf_area.csv", &empirical_ccdf(&area))?;
    report.assertions.push(Assertion::at_most(
        "sigma0_tail",
        "P(sigma_0 > x) decays like x^-delta",
        (sigma_fit.slope - delta).abs(),
        args.tolerance,
    ));
    report.assertions.push(Assertion::at_most(
        "area_tail",
        "P(area > x) decays like x^-(delta/2)",
        (area_fit.slope - delta / 2.0).abs(),
        args.tolerance,
    ));
    report.estimate("sigma0_fit", &sigma_fit);
    report.estimate("area_fit", &area_fit);
    if let Ok(fit) = tail_exponent_fit(&survival.tau_hat(), window, survival.truncated) {
        report.estimate("tau_hat_fit", fit);
    }
    if let Ok(fit) = tail_exponent_fit(&survival.hat_area(), window, survival.truncated) {
        report.estimate("hat_area_fit", fit);
    }
    report.truncated_fraction = fraction(survival.truncated, survival.episodes.len());
    Ok(report)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct LimitLawArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Largest tolerated sup-distance between characteristic functions.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

pub fn limit_law(args: &LimitLawArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.load_spec()?;
    let mut report = report_for("limit-law", args, c, Some(&spec));
    let delta = spec.delta();
    let phase = classify_phase(delta);
    let n = c.n as f64;
    let sign = if delta < 0.0 { -1.0 } else { 1.0 };
    let ends = endpoints(&spec, c.n, c.reps, c.seed, &c.batch())?;
    let oriented: Vec<f64> = ends.iter().map(|&(x, _)| sign * x as f64).collect();
    let (mean, _) = mean_and_se(&oriented);
    let v = if phase.speed == SpeedSign::Zero { 0.0 } else { mean / n };
    let d = delta.abs();
    let statistic: Vec<f64> = oriented
        .iter()
        .map(|&x| match phase.regime {
            None | Some(LimitRegime::Gaussian) => (x - v * n) / n.sqrt(),
            Some(LimitRegime::LogGaussian) => (x - v * n) / (n * n.ln()).sqrt(),
            Some(LimitRegime::StableFluctuation) => (x - v * n) / n.powf(2.0 / d),
            Some(LimitRegime::SubBallistic) => x / n.powf(d / 2.0),
            Some(LimitRegime::Critical) => x * n.ln() / n,
        })
        .collect();
    write_csv(
        &c.out,
        "limit_law.csv",
        &["rep", "X_n", "statistic"],
        ends.iter()
            .zip(&statistic)
            .enumerate()
            .map(|(i, ((x, _), s))| [i.to_string(), x.to_string(), format!("{s:.17e}")]),
    )?;
    report.estimate("velocity", v);
    report.estimate(
        "positive_fraction",
        fraction(oriented.iter().filter(|&&x| x > 0.0).count(), oriented.len()),
    );
    let normal = match phase.regime {
        Some(LimitRegime::Gaussian) | Some(LimitRegime::LogGaussian) => true,
        None => delta == 0.0,
        _ => false,
    };
    if normal {
        let (m, _) = mean_and_se(&statistic);
        let sd = (statistic.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (statistic.len() as f64 - 1.0)).sqrt();
        let standardized: Vec<f64> = statistic.iter().map(|s| (s - m) / sd).collect();
        let cf = cf_distance(&standardized, &StableLawParams::normal(0.5), &default_t_grid());
        report.estimate("scale", sd);
        report.estimate("ks_distance", ks_distance_normal(&standardized, 0.0, 1.0));
        report.assertions.push(Assertion::at_most(
            "gaussian_limit",
            "centered and scaled endpoints converge to a normal law",
            cf.sup,
            args.tolerance,
        ));
    }
    report.truncated_fraction = fraction(ends.iter().filter(|e| e.1).count(), ends.len());
    Ok(report)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct DiffusionArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Starting point.
    #[arg(long, default_value_t = 1.0)]
    pub y: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lower: f64,
    #[arg(long, default_value_t = 2.0)]
    pub upper: f64,
    /// Time horizon of the hitting-time runs.
    #[arg(long, default_value_t = 1000.0)]
    pub horizon: f64,
    /// Exit probabilities pass within this, or four standard errors if larger.
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0.3)]
    pub slope_tolerance: f64,
    #[arg(long, default_value_t = 0.9)]
    pub window_lo: f64,
    #[arg(long, default_value_t = 0.999)]
    pub window_hi: f64,
}

pub fn diffusion(args: &DiffusionArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.maybe_spec()?;
    let mut report = report_for("diffusion", args, c, spec.as_ref());
    if !(args.alpha > 0.0 && args.dt > 0.0 && 0.0 <= args.lower && args.lower < args.y && args.y < args.upper) {
        return Err(ConfigError::Invalid(
            "need alpha, dt > 0 and 0 <= lower < y < upper".into(),
        ));
    }
    if args.beta == 1.0 {
        return Err(ConfigError::Invalid("--beta must differ from 1".into()));
    }
    let params = BesselParams {
        alpha: args.alpha,
        beta: args.beta,
        dt: args.dt,
    };
    let exit = bessel_exit_probability(args.y, &params, (args.lower, args.upper), c.reps, c.seed, c.threads());
    let formula = bessel_exit_formula(args.y, args.beta, args.lower, args.upper);
    report.estimate("exit", exit);
    report.estimate("exit_formula", formula);
    report.assertions.push(Assertion::at_most(
        "exit_probability",
        "P_y(hit lower before upper) = (b^(1-beta) - y^(1-beta)) / (b^(1-beta) - a^(1-beta))",
        (exit.lower - formula).abs(),
        args.tolerance.max(4.0 * exit.std_error),
    ));
    report.truncated_fraction = exit.undecided_fraction;

    if args.beta < 1.0 {
        let times = bessel_hitting_times(args.y, &params, 0.0, args.horizon, c.reps, c.seed, c.threads());
        let hit: Vec<f64> = times.iter().flatten().copied().collect();
        let censored = times.len() - hit.len();
        write_csv(
            &c.out,
            "hitting_times.csv",
            &["rep", "tau", "censored"],
            times.iter().enumerate().map(|(i, t)| {
                [
                    i.to_string(),
                    t.map(|t| format!("{t:.17e}")).unwrap_or_default(),
                    t.is_none().to_string(),
                ]
            }),
        )?;
        let fit = tail_exponent_fit(&hit, (args.window_lo, args.window_hi), censored)?;
        report.assertions.push(Assertion::at_most(
            "hitting_tail",
            "P(tau_0 > t) decays like t^-(1-beta)",
            (fit.slope - (1.0 - args.beta)).abs(),
            args.slope_tolerance,
        ));
        report.estimate("hitting_fit", fit);
    }
    Ok(report)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct OracleCheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Levels at which step laws and anchor-return laws are compared.
    #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
    pub levels: Vec<u64>,
}

/// Total variation between empirical counts and `law`, plus half the mass
/// `law` leaves unlisted.
fn tv_distance(samples: &[u64], law: &[f64], unlisted: f64) -> f64 {
    let total = samples.len() as f64;
    let mut counts = vec![0u64; law.len()];
    let mut beyond = 0u64;
    for &s in samples {
        match counts.get_mut(s as usize) {
            Some(c) => *c += 1,
            None => beyond += 1,
        }
    }
    let listed: f64 = counts
        .iter()
        .zip(law)
        .map(|(&c, &p)| (c as f64 / total - p).abs())
        .sum();
    (listed + beyond as f64 / total + unlisted) / 2.0
}

/// `E[TV] ≤ ½ Σ √(p_j / N)` plus the McDiarmid margin `3 / √N`, exceeded by
/// chance with probability below `e^{-18}`.
fn tv_threshold(law: &[f64], samples: u64) -> f64 {
    let n = samples as f64;
    0.5 * law.iter().map(|p| (p / n).sqrt()).sum::<f64>() + 3.0 / n.sqrt()
}

struct OracleRow {
    check: &'static str,
    side: Side,
    level: u64,
    state: usize,
    tv: f64,
    threshold: f64,
}

pub fn oracle_check(args: &OracleCheckArgs) -> Result<Report, ConfigError> {
    let c = &args.common;
    let spec = c.load_spec()?;
    let mut report = report_for("oracle-check", args, c, Some(&spec));
    let height = spec.height() as u64;
    let mut rows = Vec::new();
    for side in [Side::Forward, Side::Backward] {
        for &level in &args.levels {
            let cap = (8 * (level + height) + 200) as usize;
            for state in 0..spec.num_states() {
                let stack = spec.stack(state);
                let pmf = match side {
                    Side::Forward => forward_step_pmf(level, stack, cap),
                    Side::Backward => backward_step_pmf(level, stack, cap),
                };
                let samples = run_batch(c.reps, c.seed, c.threads(), |_, s| {
                    let mut rng = episode_rng(s, Stream::Sampling);
                    match side {
                        Side::Forward => forward_step_sample(level, stack, &mut rng),
                        Side::Backward => backward_step_sample(level, stack, &mut rng),
                    }
                });
                rows.push(OracleRow {
                    check: "step",
                    side,
                    level,
                    state,
                    tv: tv_distance(&samples, &pmf.probs, pmf.tail),
                    threshold: tv_threshold(&pmf.probs, samples.len() as u64) + pmf.tail / 2.0,
                });
            }
            let law = exact_hatted_transition(level, side, &spec, (16 * (level + height) + 400) as usize)?;
            let samples: Vec<u64> = hatted_one_step_samples(side, &spec, level, c.reps, c.seed, c.threads())
                .into_iter()
                .flatten()
                .collect();
            rows.push(OracleRow {
                check: "anchor_return",
                side,
                level,
                state: spec.anchor(),
                tv: tv_distance(&samples, &law.probs, law.overflow),
                threshold: tv_threshold(&law.probs, samples.len() as u64) + law.overflow / 2.0,
            });
        }
    }
    write_csv(
        &c.out,
        "oracle.csv",
        &["check", "side", "level", "state", "tv", "threshold"],
        rows.iter().map(|r| {
            [
                r.check.to_string(),
                format!("{:?}", r.side).to_lowercase(),
                r.level.to_string(),
                r.state.to_string(),
                format!("{:.17e}", r.tv),
                format!("{:.17e}", r.threshold),
            ]
        }),
    )?;
    for r in &rows {
        report.assertions.push(Assertion::at_most(
            &format!("{}_{:?}_{}_{}", r.check, r.side, r.level, r.state).to_lowercase(),
            "exact laws agree with sampled laws",
            r.tv,
            r.threshold,
        ));
    }
    Ok(report)
}
