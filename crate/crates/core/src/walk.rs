//! Excited random walk via the coin-tossing construction.
//!
//! Every site `k` carries an infinite coin sequence `ξ^k_1, ξ^k_2, …` with
//! `P(ξ^k_i = 1) = ω(k, i)`. The walk at `X_n = k` on its `I_n`-th visit steps
//! right iff `ξ^k_{I_n} = 1`. Coins are a pure function of `(seed, k, i)`, so
//! the branching processes can be rebuilt from exactly the same coins.

use thiserror::Error;

use crate::analysis::{classify_phase, LimitRegime};
use crate::batch::{mean_and_se, run_batch};
use crate::env::{EnvError, EnvironmentRealization, StackChainSpec, TwoSidedMode};
use crate::rng::{counter_hash, counter_uniform, derive_key, Stream};

/// Default per-episode step cap.
pub const DEFAULT_STEP_CAP: u64 = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalkError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("episode hit the step cap after {steps} steps")]
    StepCapExceeded { steps: u64 },
    #[error("path is truncated or does not reach level {level}")]
    Truncated { level: i64 },
    #[error("path positions were not recorded")]
    NotRecorded,
    #[error("operation requires delta > 1, got {delta}")]
    PhaseGuard { delta: f64 },
    #[error("regime {requested:?} does not match delta = {delta}")]
    RegimeMismatch { requested: LimitRegime, delta: f64 },
}

/// Source of the coin outcomes `ξ^site_visit` (visits are 1-based).
pub trait Coins {
    fn coin(&mut self, site: i64, visit: u64) -> Result<bool, EnvError>;

    /// Stack height `M`; visits beyond it are fair.
    fn height(&self) -> u64;
}

/// Deterministic coin outcomes over a lazily realized environment.
#[derive(Clone, Debug)]
pub struct CoinField<'a> {
    env: EnvironmentRealization<'a>,
    key: u64,
    height: u64,
}

impl<'a> CoinField<'a> {
    pub fn new(spec: &'a StackChainSpec, env_seed: u64, coin_seed: u64, mode: TwoSidedMode) -> Self {
        Self::with_realization(EnvironmentRealization::new(spec, env_seed, mode), coin_seed)
    }

    /// Environment and coins from one seed (independent streams).
    pub fn from_seed(spec: &'a StackChainSpec, seed: u64, mode: TwoSidedMode) -> Self {
        Self::new(spec, seed, seed, mode)
    }

    pub fn with_realization(env: EnvironmentRealization<'a>, coin_seed: u64) -> Self {
        let height = env.spec().height() as u64;
        Self {
            env,
            key: derive_key(coin_seed, Stream::Coins),
            height,
        }
    }

    pub fn environment(&mut self) -> &mut EnvironmentRealization<'a> {
        &mut self.env
    }

    /// `ω(site, visit)`.
    pub fn success_probability(&mut self, site: i64, visit: u64) -> Result<f64, EnvError> {
        if visit > self.height {
            return Ok(0.5);
        }
        Ok(self.env.stack_at(site)?.prob(visit as usize))
    }
}

impl Coins for CoinField<'_> {
    #[inline]
    fn coin(&mut self, site: i64, visit: u64) -> Result<bool, EnvError> {
        if visit > self.height {
            Ok(counter_hash(self.key, site as u64, visit) >> 63 == 1)
        } else {
            let p = self.env.stack_at(site)?.prob(visit as usize);
            Ok(counter_uniform(self.key, site as u64, visit) < p)
        }
    }

    fn height(&self) -> u64 {
        self.height
    }
}

/// Every coin shows the same face.
#[derive(Clone, Copy, Debug)]
pub struct ConstantCoins {
    pub outcome: bool,
    pub height: u64,
}

impl Coins for ConstantCoins {
    fn coin(&mut self, _site: i64, _visit: u64) -> Result<bool, EnvError> {
        Ok(self.outcome)
    }

    fn height(&self) -> u64 {
        self.height
    }
}

/// When an episode ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    Steps(u64),
    /// First hitting time of a level.
    Level(i64),
    /// First `n ≥ 1` with `X_n = 0`.
    ReturnToZero,
}

#[derive(Clone, Copy, Debug)]
pub struct WalkOptions {
    pub step_cap: u64,
    pub record_positions: bool,
}

impl Default for WalkOptions {
    fn default() -> Self {
        Self {
            step_cap: DEFAULT_STEP_CAP,
            record_positions: true,
        }
    }
}

impl WalkOptions {
    pub fn summary_only() -> Self {
        Self {
            record_positions: false,
            ..Self::default()
        }
    }
}

/// One episode.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkPath {
    pub start: i64,
    /// `X_0..X_T`; empty unless positions were recorded.
    pub positions: Vec<i64>,
    pub end: i64,
    pub steps: u64,
    pub truncated: bool,
    /// `level_hits[j]` is the first time the walk stood at `start + j`.
    pub level_hits: Vec<u64>,
    pub min_position: i64,
    pub max_position: i64,
}

impl WalkPath {
    /// `τ_level`, for levels at or above the start.
    pub fn hitting_time(&self, level: i64) -> Option<u64> {
        let j = level.checked_sub(self.start)?;
        if j < 0 {
            return None;
        }
        self.level_hits.get(j as usize).copied()
    }

    /// Errors if the episode was cut by the step cap.
    pub fn require_complete(&self) -> Result<&Self, WalkError> {
        if self.truncated {
            Err(WalkError::StepCapExceeded { steps: self.steps })
        } else {
            Ok(self)
        }
    }

    /// Visit numbers `I_0..I_{T-1}` recomputed from the positions.
    pub fn visit_numbers(&self) -> Result<Vec<u64>, WalkError> {
        if self.positions.is_empty() {
            return Err(WalkError::NotRecorded);
        }
        let mut counts = VisitCounts::default();
        Ok(self.positions[..self.positions.len() - 1]
            .iter()
            .map(|&x| counts.bump(x))
            .collect())
    }
}

/// Per-site visit counters on both half-lines.
#[derive(Clone, Debug, Default)]
struct VisitCounts {
    nonneg: Vec<u32>,
    neg: Vec<u32>,
}

impl VisitCounts {
    #[inline]
    fn bump(&mut self, site: i64) -> u64 {
        let (vec, idx) = if site >= 0 {
            (&mut self.nonneg, site as usize)
        } else {
            (&mut self.neg, (-site - 1) as usize)
        };
        if idx >= vec.len() {
            vec.resize((idx + 1).max(2 * vec.len()).max(64), 0);
        }
        let slot = &mut vec[idx];
        *slot += 1;
        *slot as u64
    }
}

/// Runs one walk from `start` obeying `coins` exactly.
pub fn run_walk<C: Coins>(
    coins: &mut C,
    start: i64,
    stop: StopRule,
    options: WalkOptions,
) -> Result<WalkPath, EnvError> {
    let mut counts = VisitCounts::default();
    let mut x = start;
    let mut steps = 0u64;
    let mut positions = Vec::new();
    if options.record_positions {
        positions.push(start);
    }
    let mut level_hits = vec![0u64];
    let (mut lo, mut hi) = (start, start);
    let done = |x: i64, steps: u64| match stop {
        StopRule::Steps(n) => steps >= n,
        StopRule::Level(l) => x == l,
        StopRule::ReturnToZero => steps > 0 && x == 0,
    };
    let mut truncated = false;
    while !done(x, steps) {
        if steps >= options.step_cap {
            truncated = true;
            break;
        }
        let visit = counts.bump(x);
        x += if coins.coin(x, visit)? { 1 } else { -1 };
        steps += 1;
        if x > hi {
            hi = x;
            level_hits.push(steps);
        }
        lo = lo.min(x);
        if options.record_positions {
            positions.push(x);
        }
    }
    Ok(WalkPath {
        start,
        positions,
        end: x,
        steps,
        truncated,
        level_hits,
        min_position: lo,
        max_position: hi,
    })
}

/// Down-crossing counts `D_{n,k}` of the edges `(k, k−1)` before `τ_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownCrossings {
    pub level: i64,
    pub tau: u64,
    /// Lowest `k` with a count slot; `counts[0]` is `D_{n,lowest}`.
    pub lowest: i64,
    pub counts: Vec<u64>,
    start: i64,
}

impl DownCrossings {
    /// `D_{n,k}` (zero outside the visited range).
    pub fn at(&self, k: i64) -> u64 {
        if k < self.lowest || k > self.level {
            return 0;
        }
        self.counts[(k - self.lowest) as usize]
    }

    /// `(D_{n,n}, D_{n,n−1}, …, D_{n,n−j_max})`.
    pub fn from_top(&self, j_max: usize) -> Vec<u64> {
        (0..=j_max as i64).map(|j| self.at(self.level - j)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `τ_n = (n − start) + 2 Σ_k D_{n,k}`.
    pub fn identity_holds(&self) -> bool {
        self.tau as i64 == (self.level - self.start) + 2 * self.total() as i64
    }
}

/// Down-crossings before the first hit of `level`.
pub fn down_crossings(path: &WalkPath, level: i64) -> Result<DownCrossings, WalkError> {
    if path.positions.is_empty() {
        return Err(WalkError::NotRecorded);
    }
    let tau = path.hitting_time(level).ok_or(WalkError::Truncated { level })?;
    let prefix = &path.positions[..=tau as usize];
    let lowest = prefix.iter().copied().min().unwrap_or(level).min(level);
    let mut counts = vec![0u64; (level - lowest + 1) as usize];
    for w in prefix.windows(2) {
        if w[1] == w[0] - 1 {
            counts[(w[0] - lowest) as usize] += 1;
        }
    }
    Ok(DownCrossings {
        level,
        tau,
        lowest,
        counts,
        start: path.start,
    })
}

/// `U′_k = #{0 ≤ n < τ_0 : X_n = k, X_{n+1} = k+1}` for `k = 1..=max`;
/// element `k − 1` holds `U′_k`.
pub fn up_crossings_before_return(path: &WalkPath) -> Result<Vec<u64>, WalkError> {
    if path.positions.is_empty() {
        return Err(WalkError::NotRecorded);
    }
    let top = path.max_position.max(1) as usize;
    let mut ups = vec![0u64; top];
    for w in path.positions.windows(2) {
        if w[0] == 0 {
            break;
        }
        if w[1] == w[0] + 1 && w[0] >= 1 {
            ups[w[0] as usize - 1] += 1;
        }
    }
    Ok(ups)
}

/// Mean of `X_n / n` over replicas.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct VelocityEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub reps: u64,
    pub truncated_fraction: f64,
}

/// Batch settings shared by the Monte Carlo drivers.
#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub threads: Option<usize>,
    pub mode: TwoSidedMode,
    pub step_cap: u64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            threads: None,
            mode: TwoSidedMode::Strict,
            step_cap: DEFAULT_STEP_CAP,
        }
    }
}

/// `(X_n, truncated)` of one walk of `n` steps from 0.
pub fn endpoint(spec: &StackChainSpec, n: u64, seed: u64, options: &BatchOptions) -> Result<(i64, bool), EnvError> {
    let mut coins = CoinField::from_seed(spec, seed, options.mode);
    let path = run_walk(
        &mut coins,
        0,
        StopRule::Steps(n),
        WalkOptions {
            step_cap: options.step_cap,
            record_positions: false,
        },
    )?;
    Ok((path.end, path.truncated))
}

/// Endpoints of `reps` walks of `n` steps; replica `i` uses seed `base ⊕ i`.
pub fn endpoints(
    spec: &StackChainSpec,
    n: u64,
    reps: u64,
    seed: u64,
    options: &BatchOptions,
) -> Result<Vec<(i64, bool)>, EnvError> {
    run_batch(reps, seed, options.threads, |_, s| endpoint(spec, n, s, options))
        .into_iter()
        .collect()
}

/// `v̂ = mean X_n / n` with its standard error.
pub fn velocity_estimate(
    spec: &StackChainSpec,
    n: u64,
    reps: u64,
    seed: u64,
    options: &BatchOptions,
) -> Result<VelocityEstimate, EnvError> {
    let ends = endpoints(spec, n, reps, seed, options)?;
    let ratios: Vec<f64> = ends.iter().map(|&(x, _)| x as f64 / n as f64).collect();
    let (mean, std_error) = mean_and_se(&ratios);
    let truncated = ends.iter().filter(|e| e.1).count();
    Ok(VelocityEstimate {
        mean,
        std_error,
        reps,
        truncated_fraction: truncated as f64 / reps as f64,
    })
}

/// Centering and scaling for one limit regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LimitNormalization {
    /// `X_n / n^{δ/2}`.
    SubBallistic,
    /// `(X_n − Γ(n)) / (a² n / log² n)`.
    Critical { a: f64, gamma: f64 },
    /// `(X_n − v n) / n^{2/δ}`.
    StableFluctuation { velocity: f64 },
    /// `(X_n − v n) / √(n log n)`.
    LogGaussian { velocity: f64 },
    /// `(X_n − v n) / √n`.
    Gaussian { velocity: f64 },
}

impl LimitNormalization {
    pub fn regime(&self) -> LimitRegime {
        match self {
            Self::SubBallistic => LimitRegime::SubBallistic,
            Self::Critical { .. } => LimitRegime::Critical,
            Self::StableFluctuation { .. } => LimitRegime::StableFluctuation,
            Self::LogGaussian { .. } => LimitRegime::LogGaussian,
            Self::Gaussian { .. } => LimitRegime::Gaussian,
        }
    }

    /// Normalized statistic for the endpoint `x` of an `n`-step walk with
    /// drift parameter `|δ| = delta_abs`, orientation `sign`.
    fn apply(&self, x: f64, n: f64, delta_abs: f64, sign: f64) -> f64 {
        let x = sign * x;
        match *self {
            Self::SubBallistic => x / n.powf(delta_abs / 2.0),
            Self::Critical { a, gamma } => (x - gamma) / (a * a * n / n.ln().powi(2)),
            Self::StableFluctuation { velocity } => (x - sign * velocity * n) / n.powf(2.0 / delta_abs),
            Self::LogGaussian { velocity } => (x - sign * velocity * n) / (n * n.ln()).sqrt(),
            Self::Gaussian { velocity } => (x - sign * velocity * n) / n.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitLawSamples {
    pub regime: LimitRegime,
    /// True when `δ < 0` and the statistics are those of `−X_n`.
    pub mirrored: bool,
    pub samples: Vec<f64>,
    /// `Γ(n)` used by the critical regime.
    pub gamma: Option<f64>,
    pub truncated_fraction: f64,
}

/// Normalized endpoints for the regime matching the spec's `δ`. For negative
/// `δ` the walk is mirrored (`X ↦ −X`, `v ↦ −v`). The Gaussian scaling is also
/// accepted in the recurrent phase `|δ| < 1` with `v = 0`.
pub fn limit_law_samples(
    spec: &StackChainSpec,
    n: u64,
    reps: u64,
    seed: u64,
    normalization: LimitNormalization,
    options: &BatchOptions,
) -> Result<LimitLawSamples, WalkError> {
    let delta = spec.delta();
    let requested = normalization.regime();
    let phase = classify_phase(delta);
    let diffusive_recurrent = requested == LimitRegime::Gaussian && delta.abs() < 1.0;
    if phase.regime != Some(requested) && !diffusive_recurrent {
        return Err(WalkError::RegimeMismatch { requested, delta });
    }
    let sign = if delta < 0.0 { -1.0 } else { 1.0 };
    let ends = endpoints(spec, n, reps, seed, options)?;
    let samples = ends
        .iter()
        .map(|&(x, _)| normalization.apply(x as f64, n as f64, delta.abs(), sign))
        .collect();
    let truncated = ends.iter().filter(|e| e.1).count();
    Ok(LimitLawSamples {
        regime: requested,
        mirrored: sign < 0.0,
        samples,
        gamma: match normalization {
            LimitNormalization::Critical { gamma, .. } => Some(gamma),
            _ => None,
        },
        truncated_fraction: truncated as f64 / reps as f64,
    })
}

/// Estimates of `P(inf_{m ≥ τ_{n+k}} X_m ≤ n)` for each `k` in `k_grid`.
///
/// Each walk runs until it first hits `n + 4·max(k)` (or the step cap); the
/// future beyond that horizon is ignored, so the estimates are lower bounds
/// meant for diagnostics.
pub fn backtrack_tail(
    spec: &StackChainSpec,
    n: i64,
    k_grid: &[i64],
    reps: u64,
    seed: u64,
    options: &BatchOptions,
) -> Result<Vec<(i64, f64)>, WalkError> {
    let delta = spec.delta();
    if delta <= 1.0 {
        return Err(WalkError::PhaseGuard { delta });
    }
    let k_max = k_grid.iter().copied().max().unwrap_or(0).max(1);
    let horizon = n + 4 * k_max;
    let peaks: Vec<Result<Option<i64>, EnvError>> = run_batch(reps, seed, options.threads, |_, s| {
        let mut coins = CoinField::from_seed(spec, s, options.mode);
        let path = run_walk(
            &mut coins,
            0,
            StopRule::Level(horizon),
            WalkOptions {
                step_cap: options.step_cap,
                record_positions: true,
            },
        )?;
        // highest level reached before the last visit to (−∞, n]
        let last_low = path.positions.iter().rposition(|&x| x <= n);
        Ok(last_low.map(|t| path.positions[..=t].iter().copied().max().unwrap_or(0)))
    });
    let peaks: Vec<Option<i64>> = peaks.into_iter().collect::<Result<_, _>>()?;
    Ok(k_grid
        .iter()
        .map(|&k| {
            let hits = peaks.iter().filter(|p| matches!(p, Some(m) if *m >= n + k)).count();
            (k, hits as f64 / reps as f64)
        })
        .collect())
}
