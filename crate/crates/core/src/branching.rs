//! Forward and backward branching processes.
//!
//! `U_{k+1}` counts successes at site `k+1` before the `U_k`-th failure (0 is
//! absorbing); `V_{k+1}` counts failures at site `−(k+1)` before the
//! `(V_k+1)`-th success. Stacks follow `K` along `U` and `K̃` along `V`.
//! The dominating chains read only the fair coins past the stack:
//! `U⁺_{k+1} = M + (tail successes before U⁺_k + 1 tail failures)` and
//! `U⁻_{k+1} = tail successes before (U⁻_k − M)⁺ tail failures`, with the
//! roles of success and failure swapped for `V±`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::Serialize;
use thiserror::Error;

use crate::batch::{mean_and_se, run_batch};
use crate::env::{CookieStack, EnvError, StackChainSpec};
use crate::oracle::Side;
use crate::rng::{episode_rng, EpisodeRng, Stream};
use crate::walk::{CoinField, Coins};

/// Default per-episode cap on chain steps.
pub const DEFAULT_CHAIN_CAP: u64 = 10_000_000;
/// Above this many fair trials the negative binomial is drawn as a Gamma–Poisson mixture.
const GEOMETRIC_SUM_LIMIT: u64 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BranchingError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("chain hit the step cap of {cap}")]
    StepCapExceeded { cap: u64 },
    #[error("operation requires delta > 1, got {delta}")]
    PhaseGuard { delta: f64 },
}

/// Fair-coin count of successes before the `r`-th failure, `NB(r, 1/2)`.
#[inline]
pub fn fair_negative_binomial<R: Rng + ?Sized>(r: u64, rng: &mut R) -> u64 {
    if r == 0 {
        return 0;
    }
    if r <= GEOMETRIC_SUM_LIMIT {
        let mut total = 0u64;
        for _ in 0..r {
            loop {
                let ones = rng.next_u64().trailing_ones();
                total += ones as u64;
                if ones < 64 {
                    break;
                }
            }
        }
        total
    } else {
        let lambda: f64 = Gamma::new(r as f64, 1.0).expect("shape > 0").sample(rng);
        let draw: f64 = Poisson::new(lambda).expect("rate > 0").sample(rng);
        draw as u64
    }
}

/// Exact draw of `U_1` given `U_0 = u` under `stack`.
#[inline]
pub fn forward_step_sample<R: Rng + ?Sized>(u: u64, stack: &CookieStack, rng: &mut R) -> u64 {
    if u == 0 {
        return 0;
    }
    let (mut succ, mut fail) = (0u64, 0u64);
    for &p in stack.probs() {
        if rng.random::<f64>() < p {
            succ += 1;
        } else {
            fail += 1;
            if fail == u {
                return succ;
            }
        }
    }
    succ + fair_negative_binomial(u - fail, rng)
}

/// Exact draw of `V_1` given `V_0 = v` under `stack`.
#[inline]
pub fn backward_step_sample<R: Rng + ?Sized>(v: u64, stack: &CookieStack, rng: &mut R) -> u64 {
    let (mut succ, mut fail) = (0u64, 0u64);
    for &p in stack.probs() {
        if rng.random::<f64>() < p {
            succ += 1;
            if succ == v + 1 {
                return fail;
            }
        } else {
            fail += 1;
        }
    }
    fail + fair_negative_binomial(v + 1 - succ, rng)
}

#[inline]
pub fn step_sample<R: Rng + ?Sized>(side: Side, level: u64, stack: &CookieStack, rng: &mut R) -> u64 {
    match side {
        Side::Forward => forward_step_sample(level, stack, rng),
        Side::Backward => backward_step_sample(level, stack, rng),
    }
}

/// `U⁺`/`V⁺` step: `M + NB(level + 1)`.
#[inline]
pub fn plus_step_sample<R: Rng + ?Sized>(level: u64, height: u64, rng: &mut R) -> u64 {
    height + fair_negative_binomial(level + 1, rng)
}

/// `U⁻`/`V⁻` step: `NB((level − M)⁺)`.
#[inline]
pub fn minus_step_sample<R: Rng + ?Sized>(level: u64, height: u64, rng: &mut R) -> u64 {
    fair_negative_binomial(level.saturating_sub(height), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ChainKind {
    Forward,
    Backward,
    ForwardPlus,
    ForwardMinus,
    BackwardPlus,
    BackwardMinus,
}

impl ChainKind {
    pub fn side(&self) -> Side {
        match self {
            Self::Forward | Self::ForwardPlus | Self::ForwardMinus => Side::Forward,
            _ => Side::Backward,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Forward => "U",
            Self::Backward => "V",
            Self::ForwardPlus => "U+",
            Self::ForwardMinus => "U-",
            Self::BackwardPlus => "V+",
            Self::BackwardMinus => "V-",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BranchingPath {
    pub kind: ChainKind,
    /// `Z_0..Z_k`.
    pub levels: Vec<u64>,
    /// Stack state index at each time (`S_k` forward, `R_k` backward).
    pub states: Vec<usize>,
}

/// Stack sequence driver: `K` forward, `K̃` backward.
#[derive(Clone, Copy)]
struct StackDriver<'a> {
    spec: &'a StackChainSpec,
    side: Side,
}

impl<'a> StackDriver<'a> {
    #[inline]
    fn next(&self, state: usize, rng: &mut EpisodeRng) -> usize {
        let u = rng.random::<f64>();
        match self.side {
            Side::Forward => self.spec.step_forward(state, u),
            Side::Backward => self.spec.step_reversed(state, u),
        }
    }

    /// Initial stack: `φ` forward, `π` backward, unless given.
    fn initial(&self, given: Option<usize>, rng: &mut EpisodeRng) -> usize {
        given.unwrap_or_else(|| {
            let u = rng.random::<f64>();
            match self.side {
                Side::Forward => self.spec.draw_initial(u),
                Side::Backward => self.spec.draw_stationary(u),
            }
        })
    }
}

/// `k_max` steps of one chain from `start`, stacks from `start_state` or
/// the default initial law.
pub fn run_chain(
    kind: ChainKind,
    spec: &StackChainSpec,
    start: u64,
    start_state: Option<usize>,
    k_max: usize,
    seed: u64,
) -> BranchingPath {
    let mut rng = episode_rng(seed, Stream::Branching);
    let driver = StackDriver {
        spec,
        side: kind.side(),
    };
    let height = spec.height() as u64;
    let mut state = driver.initial(start_state, &mut rng);
    let mut level = start;
    let mut levels = Vec::with_capacity(k_max + 1);
    let mut states = Vec::with_capacity(k_max + 1);
    levels.push(level);
    states.push(state);
    for _ in 0..k_max {
        state = driver.next(state, &mut rng);
        level = match kind {
            ChainKind::Forward | ChainKind::Backward => step_sample(kind.side(), level, spec.stack(state), &mut rng),
            ChainKind::ForwardPlus | ChainKind::BackwardPlus => plus_step_sample(level, height, &mut rng),
            ChainKind::ForwardMinus | ChainKind::BackwardMinus => minus_step_sample(level, height, &mut rng),
        };
        levels.push(level);
        states.push(state);
    }
    BranchingPath { kind, levels, states }
}

/// One step built from the coins of `site`.
fn coin_step<C: Coins>(coins: &mut C, kind: ChainKind, site: i64, level: u64) -> Result<u64, EnvError> {
    let m = coins.height();
    // (first visit read, stopping outcomes needed, offset added to the count)
    let (first_visit, target, offset) = match kind {
        ChainKind::Forward => (1, level, 0),
        ChainKind::Backward => (1, level + 1, 0),
        ChainKind::ForwardPlus | ChainKind::BackwardPlus => (m + 1, level + 1, m),
        ChainKind::ForwardMinus | ChainKind::BackwardMinus => (m + 1, level.saturating_sub(m), 0),
    };
    if target == 0 {
        return Ok(offset);
    }
    // forward chains stop on failures and count successes; backward the reverse
    let stop_on = kind.side() == Side::Backward;
    let (mut stops, mut count) = (0u64, 0u64);
    let mut visit = first_visit;
    loop {
        if coins.coin(site, visit)? == stop_on {
            stops += 1;
            if stops == target {
                return Ok(offset + count);
            }
        } else {
            count += 1;
        }
        visit += 1;
    }
}

/// `Z_0..Z_{k_max}` of one chain read from a coin field: forward chains use
/// sites `1, 2, …`, backward chains sites `−1, −2, …`.
pub fn coin_chain<C: Coins>(coins: &mut C, kind: ChainKind, start: u64, k_max: usize) -> Result<Vec<u64>, EnvError> {
    let mut levels = Vec::with_capacity(k_max + 1);
    levels.push(start);
    let mut level = start;
    for k in 1..=k_max as i64 {
        let site = match kind.side() {
            Side::Forward => k,
            Side::Backward => -k,
        };
        level = coin_step(coins, kind, site, level)?;
        levels.push(level);
    }
    Ok(levels)
}

/// `(Z⁻, Z, Z⁺)` on shared coins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoupledTriple {
    pub side: Side,
    pub minus: Vec<u64>,
    pub main: Vec<u64>,
    pub plus: Vec<u64>,
}

impl CoupledTriple {
    /// Steps where `Z⁻ ≤ Z ≤ Z⁺` fails.
    pub fn violations(&self) -> usize {
        (0..self.main.len())
            .filter(|&k| !(self.minus[k] <= self.main[k] && self.main[k] <= self.plus[k]))
            .count()
    }
}

pub fn coupled_triple(
    coins: &mut CoinField<'_>,
    side: Side,
    start: u64,
    k_max: usize,
) -> Result<CoupledTriple, EnvError> {
    let (minus, main, plus) = match side {
        Side::Forward => (ChainKind::ForwardMinus, ChainKind::Forward, ChainKind::ForwardPlus),
        Side::Backward => (ChainKind::BackwardMinus, ChainKind::Backward, ChainKind::BackwardPlus),
    };
    Ok(CoupledTriple {
        side,
        minus: coin_chain(coins, minus, start, k_max)?,
        main: coin_chain(coins, main, start, k_max)?,
        plus: coin_chain(coins, plus, start, k_max)?,
    })
}

/// The chain observed at the stack's visits to the anchor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HattedPath {
    pub side: Side,
    pub anchor: usize,
    /// `Ẑ_0 = start, Ẑ_1, …`.
    pub values: Vec<u64>,
    /// Raw chain time of each anchor visit (0 for the start).
    pub return_times: Vec<u64>,
    pub truncated: bool,
}

/// `steps` hatted steps from `(start, s*)`, at most `cap` raw steps.
pub fn run_hatted(side: Side, spec: &StackChainSpec, start: u64, steps: usize, seed: u64, cap: u64) -> HattedPath {
    let mut rng = episode_rng(seed, Stream::Branching);
    let driver = StackDriver { spec, side };
    let anchor = spec.anchor();
    let mut state = anchor;
    let mut level = start;
    let mut values = vec![start];
    let mut return_times = vec![0];
    let mut t = 0u64;
    while values.len() <= steps {
        if t >= cap {
            return HattedPath {
                side,
                anchor,
                values,
                return_times,
                truncated: true,
            };
        }
        state = driver.next(state, &mut rng);
        level = step_sample(side, level, spec.stack(state), &mut rng);
        t += 1;
        if state == anchor {
            values.push(level);
            return_times.push(t);
        }
    }
    HattedPath {
        side,
        anchor,
        values,
        return_times,
        truncated: false,
    }
}

/// `Ẑ_1` from `Ẑ_0 = z` over independent episodes; `None` marks a capped episode.
pub fn hatted_one_step_samples(
    side: Side,
    spec: &StackChainSpec,
    z: u64,
    reps: u64,
    seed: u64,
    threads: Option<usize>,
) -> Vec<Option<u64>> {
    run_batch(reps, seed, threads, |_, s| {
        let path = run_hatted(side, spec, z, 1, s, DEFAULT_CHAIN_CAP);
        (!path.truncated).then(|| path.values[1])
    })
}

/// Level at the first anchor return, from `(x, s*)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReturnMoments {
    pub side: Side,
    pub x: u64,
    pub reps: u64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    /// `1 / π(s*)`.
    pub mu_s: f64,
    /// `x + δ μ_s` forward, `x + (1 − δ) μ_s` backward.
    pub target_mean: f64,
    /// `2 x μ_s`.
    pub target_variance: f64,
}

pub fn moments_at_return(
    side: Side,
    x: u64,
    spec: &StackChainSpec,
    reps: u64,
    seed: u64,
    threads: Option<usize>,
) -> ReturnMoments {
    let samples: Vec<f64> = hatted_one_step_samples(side, spec, x, reps, seed, threads)
        .into_iter()
        .flatten()
        .map(|v| v as f64)
        .collect();
    let n = samples.len() as f64;
    let (mean, mean_se) = mean_and_se(&samples);
    let m2 = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    let mu_s = spec.anchor_mean_return();
    let delta = spec.delta();
    let xf = x as f64;
    ReturnMoments {
        side,
        x,
        reps,
        mean,
        mean_se,
        variance,
        variance_se: ((m4 - m2 * m2) / n).sqrt(),
        mu_s,
        target_mean: match side {
            Side::Forward => xf + delta * mu_s,
            Side::Backward => xf + (1.0 - delta) * mu_s,
        },
        target_variance: 2.0 * xf * mu_s,
    }
}

/// One renewal cycle of the `(V, R)` chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RenewalRecord {
    pub i: u64,
    /// `σ_i`.
    pub sigma: u64,
    /// `σ_i − σ_{i−1}` (`σ_0` for `i = 0`).
    pub delta_sigma: u64,
    /// `Q_i = Σ_{σ_{i−1} < k ≤ σ_i} V_k` (`Q_0` sums `k ≤ σ_0`).
    pub q: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// `μ_Q` with the divergence diagnostics needed for `δ ∈ (1, 2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AreaMean {
    pub mean: f64,
    pub std_error: f64,
    /// Mean after dropping the top 1% of areas.
    pub trimmed_mean: f64,
    /// Running mean failed the Cauchy check (only tested for `δ ≤ 2`).
    pub divergent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenewalSummary {
    /// Record 0 is `(σ_0, Q_0)`; records `i ≥ 1` are full cycles.
    pub records: Vec<RenewalRecord>,
    pub mu_sigma: MeanEstimate,
    pub mu_q: AreaMean,
    pub truncated: bool,
}

/// Relative change of the running mean between half and full sample that
/// flags a divergent mean.
const CAUCHY_TOLERANCE: f64 = 0.01;

impl RenewalSummary {
    /// `1 / (1 + 2 μ_Q / μ_σ)`; `None` when `μ_Q` is flagged divergent.
    pub fn velocity(&self) -> Option<f64> {
        (!self.mu_q.divergent).then(|| 1.0 / (1.0 + 2.0 * self.mu_q.mean / self.mu_sigma.mean))
    }

    /// Complete cycles `i ≥ 1`.
    pub fn cycles(&self) -> &[RenewalRecord] {
        &self.records[1.min(self.records.len())..]
    }
}

/// Runs the `(V, R)` chain from `V_0 = 0`, `R_0 ∼ π` until `cycles` complete
/// renewal cycles after `σ_0`, each cycle limited to `cap` steps.
pub fn renewal_decompose(
    spec: &StackChainSpec,
    cycles: u64,
    seed: u64,
    cap: u64,
) -> Result<RenewalSummary, BranchingError> {
    let delta = spec.delta();
    if delta <= 1.0 {
        return Err(BranchingError::PhaseGuard { delta });
    }
    let mut rng = episode_rng(seed, Stream::Branching);
    let driver = StackDriver {
        spec,
        side: Side::Backward,
    };
    let anchor = spec.anchor();
    let mut state = driver.initial(None, &mut rng);
    let mut level = 0u64;
    let mut t = 0u64;
    let mut last_sigma = 0u64;
    let mut area = 0u64;
    let mut since = 0u64;
    let mut records = Vec::with_capacity(cycles as usize + 1);
    let mut truncated = false;
    if state == anchor {
        records.push(RenewalRecord {
            i: 0,
            sigma: 0,
            delta_sigma: 0,
            q: 0,
        });
    }
    while (records.len() as u64) < cycles + 1 {
        if since >= cap {
            truncated = true;
            break;
        }
        state = driver.next(state, &mut rng);
        level = backward_step_sample(level, spec.stack(state), &mut rng);
        t += 1;
        since += 1;
        area += level;
        if level == 0 && state == anchor {
            let i = records.len() as u64;
            records.push(RenewalRecord {
                i,
                sigma: t,
                delta_sigma: if i == 0 { t } else { t - last_sigma },
                q: area,
            });
            last_sigma = t;
            area = 0;
            since = 0;
        }
    }
    if records.len() < 2 {
        return Err(BranchingError::StepCapExceeded { cap });
    }
    let full = &records[1..];
    let gaps: Vec<f64> = full.iter().map(|r| r.delta_sigma as f64).collect();
    let areas: Vec<f64> = full.iter().map(|r| r.q as f64).collect();
    let (ms, ses) = mean_and_se(&gaps);
    let (mq, seq) = mean_and_se(&areas);
    let half = &areas[..areas.len() / 2];
    let mq_half = half.iter().sum::<f64>() / half.len().max(1) as f64;
    let in_heavy_range = delta <= 2.0 + crate::analysis::BOUNDARY_TOLERANCE;
    let divergent = in_heavy_range && (mq - mq_half).abs() > CAUCHY_TOLERANCE * mq_half.max(f64::MIN_POSITIVE);
    let mut sorted = areas.clone();
    sorted.sort_by(f64::total_cmp);
    let keep = ((sorted.len() as f64) * 0.99).ceil() as usize;
    let trimmed = sorted[..keep.max(1)].iter().sum::<f64>() / keep.max(1) as f64;
    Ok(RenewalSummary {
        records,
        mu_sigma: MeanEstimate {
            mean: ms,
            std_error: ses,
        },
        mu_q: AreaMean {
            mean: mq,
            std_error: seq,
            trimmed_mean: trimmed,
            divergent,
        },
        truncated,
    })
}

/// Return statistics of the `(V, R)` chain from `(0, s*)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SurvivalEpisode {
    /// `τ_0^{V̂}`: anchor visits up to and including the return.
    pub tau_hat: u64,
    /// `Σ_{j ≤ τ_0^{V̂}} V̂_j`.
    pub hat_area: u64,
    /// `σ_0`: first `k ≥ 1` with `V_k = 0`, `R_k = s*`.
    pub sigma0: u64,
    /// `Σ_{k ≤ σ_0} V_k`.
    pub area: u64,
    pub truncated: bool,
}

pub fn survival_episode(spec: &StackChainSpec, seed: u64, cap: u64) -> SurvivalEpisode {
    let mut rng = episode_rng(seed, Stream::Branching);
    let driver = StackDriver {
        spec,
        side: Side::Backward,
    };
    let anchor = spec.anchor();
    let mut state = anchor;
    let mut level = 0u64;
    let mut ep = SurvivalEpisode {
        tau_hat: 0,
        hat_area: 0,
        sigma0: 0,
        area: 0,
        truncated: false,
    };
    loop {
        if ep.sigma0 >= cap {
            ep.truncated = true;
            return ep;
        }
        state = driver.next(state, &mut rng);
        level = backward_step_sample(level, spec.stack(state), &mut rng);
        ep.sigma0 += 1;
        ep.area += level;
        if state == anchor {
            ep.tau_hat += 1;
            ep.hat_area += level;
            if level == 0 {
                return ep;
            }
        }
    }
}

/// Survival samples over independent episodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurvivalSamples {
    pub episodes: Vec<SurvivalEpisode>,
    pub truncated: usize,
}

impl SurvivalSamples {
    fn column(&self, f: impl Fn(&SurvivalEpisode) -> u64) -> Vec<f64> {
        self.episodes
            .iter()
            .filter(|e| !e.truncated)
            .map(|e| f(e) as f64)
            .collect()
    }

    pub fn tau_hat(&self) -> Vec<f64> {
        self.column(|e| e.tau_hat)
    }

    pub fn hat_area(&self) -> Vec<f64> {
        self.column(|e| e.hat_area)
    }

    pub fn sigma0(&self) -> Vec<f64> {
        self.column(|e| e.sigma0)
    }

    pub fn area(&self) -> Vec<f64> {
        self.column(|e| e.area)
    }
}

pub fn survival_statistics(
    spec: &StackChainSpec,
    episodes: u64,
    seed: u64,
    cap: u64,
    threads: Option<usize>,
) -> Result<SurvivalSamples, BranchingError> {
    let delta = spec.delta();
    if delta <= 1.0 {
        return Err(BranchingError::PhaseGuard { delta });
    }
    let episodes = run_batch(episodes, seed, threads, |_, s| survival_episode(spec, s, cap));
    let truncated = episodes.iter().filter(|e| e.truncated).count();
    Ok(SurvivalSamples { episodes, truncated })
}
