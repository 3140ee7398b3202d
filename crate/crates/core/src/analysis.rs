//! Estimation and classification.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::batch::run_batch;
use crate::rng::{episode_rng, Stream};

/// `|δ|` within this of 1, 2 or 4 counts as a phase boundary.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;
/// Fewest uncensored samples accepted by [`tail_exponent_fit`].
pub const MIN_TAIL_SAMPLES: usize = 1000;
pub const DEFAULT_TAIL_WINDOW: (f64, f64) = (0.90, 0.999);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {need} uncensored samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("degenerate fitting window: {0}")]
    DegenerateWindow(String),
    #[error("Lyapunov constant must exceed 1, got {0}")]
    BadA(f64),
    #[error("need theta values at three or more increasing points above 1")]
    TooFewPoints,
    #[error("delta = {0} is not in the critical regime")]
    RegimeMismatch(f64),
    #[error("invalid stable-law parameters alpha = {alpha}, b = {b}")]
    BadStableParams { alpha: f64, b: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Transience {
    LeftTransient,
    Recurrent,
    RightTransient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SpeedSign {
    Negative,
    Zero,
    Positive,
}

/// Scaling regime of the transient walk, indexed by `|δ|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum LimitRegime {
    /// (i) `1 < |δ| < 2`.
    SubBallistic,
    /// (ii) `|δ| = 2`.
    Critical,
    /// (iii) `2 < |δ| < 4`.
    StableFluctuation,
    /// (iv) `|δ| = 4`.
    LogGaussian,
    /// (v) `|δ| > 4`.
    Gaussian,
}

impl LimitRegime {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::SubBallistic => "(i)",
            Self::Critical => "(ii)",
            Self::StableFluctuation => "(iii)",
            Self::LogGaussian => "(iv)",
            Self::Gaussian => "(v)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseReport {
    pub delta: f64,
    pub transience: Transience,
    pub speed: SpeedSign,
    /// `None` in the recurrent phase.
    pub regime: Option<LimitRegime>,
    /// `δ < 0`: the regime applies to `−X`.
    pub mirrored: bool,
    /// `|δ|` sits on 1, 2 or 4.
    pub boundary: bool,
}

impl PhaseReport {
    /// Regime tag such as `"(iii)"`, `"mirror (i)"` or `"none"`, with `" boundary"` appended on a threshold.
    pub fn regime_tag(&self) -> String {
        let base = match (self.regime, self.mirrored) {
            (None, _) => "none".to_string(),
            (Some(r), false) => r.tag().to_string(),
            (Some(r), true) => format!("mirror {}", r.tag()),
        };
        if self.boundary {
            format!("{base} boundary")
        } else {
            base
        }
    }
}

/// Threshold map: recurrent iff `|δ| ≤ 1`, zero speed iff `|δ| ≤ 2`, regimes
/// split at `|δ| ∈ {2, 4}`.
pub fn classify_phase(delta: f64) -> PhaseReport {
    let d = delta.abs();
    let near = |t: f64| (d - t).abs() <= BOUNDARY_TOLERANCE;
    let boundary = near(1.0) || near(2.0) || near(4.0);
    let recurrent = d <= 1.0 || near(1.0);
    let zero_speed = d <= 2.0 || near(2.0);
    let positive = delta > 0.0;
    let transience = if recurrent {
        Transience::Recurrent
    } else if positive {
        Transience::RightTransient
    } else {
        Transience::LeftTransient
    };
    let speed = if zero_speed {
        SpeedSign::Zero
    } else if positive {
        SpeedSign::Positive
    } else {
        SpeedSign::Negative
    };
    let regime = if recurrent {
        None
    } else if near(2.0) {
        Some(LimitRegime::Critical)
    } else if near(4.0) {
        Some(LimitRegime::LogGaussian)
    } else if d < 2.0 {
        Some(LimitRegime::SubBallistic)
    } else if d < 4.0 {
        Some(LimitRegime::StableFluctuation)
    } else {
        Some(LimitRegime::Gaussian)
    };
    PhaseReport {
        delta,
        transience,
        speed,
        regime,
        mirrored: delta < 0.0 && regime.is_some(),
        boundary,
    }
}

/// Least-squares fit of `log P(X ≥ x)` on `log x` over a quantile window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailFitReport {
    /// Positive exponent `κ` in `P(X > x) ≈ C x^{−κ}`.
    pub slope: f64,
    pub intercept: f64,
    pub window: (f64, f64),
    pub std_error: f64,
    pub r_squared: f64,
    pub samples: usize,
    pub censored_fraction: f64,
    /// Distinct values used in the regression.
    pub points: usize,
}

/// Power-law tail fit. `censored` counts samples excluded upstream (e.g.
/// truncated episodes); they only enter the reported fraction.
pub fn tail_exponent_fit(samples: &[f64], window: (f64, f64), censored: usize) -> Result<TailFitReport, AnalysisError> {
    let n = samples.len();
    if n < MIN_TAIL_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            got: n,
            need: MIN_TAIL_SAMPLES,
        });
    }
    let (q_lo, q_hi) = window;
    if !(0.0 < q_lo && q_lo < q_hi && q_hi < 1.0) {
        return Err(AnalysisError::DegenerateWindow(format!("quantiles {q_lo}, {q_hi}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo_idx = ((q_lo * n as f64).floor() as usize).min(n - 1);
    let hi_idx = ((q_hi * n as f64).ceil() as usize).min(n - 1);
    let (x_lo, x_hi) = (sorted[lo_idx], sorted[hi_idx]);
    if !(x_lo > 0.0) {
        return Err(AnalysisError::DegenerateWindow(
            "non-positive values in the window".into(),
        ));
    }
    // distinct values x in [x_lo, x_hi] with P(X ≥ x) = (# ≥ x) / n
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = lo_idx;
    while i > 0 && sorted[i - 1] == sorted[i] {
        i -= 1;
    }
    while i < n && sorted[i] <= x_hi {
        let x = sorted[i];
        xs.push(x.ln());
        ys.push(((n - i) as f64 / n as f64).ln());
        while i < n && sorted[i] == x {
            i += 1;
        }
    }
    let m = xs.len();
    if m < 3 {
        return Err(AnalysisError::DegenerateWindow(format!("only {m} distinct values")));
    }
    let mf = m as f64;
    let mx = xs.iter().sum::<f64>() / mf;
    let my = ys.iter().sum::<f64>() / mf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::DegenerateWindow("no spread in the window".into()));
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - alpha - beta * x).powi(2)).sum();
    let std_error = (rss / (mf - 2.0) / sxx).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(TailFitReport {
        slope: -beta,
        intercept: alpha,
        window,
        std_error,
        r_squared,
        samples: n,
        censored_fraction: censored as f64 / (n + censored) as f64,
        points: m,
    })
}

/// Empirical `P(X ≥ x)` at the distinct sample values.
pub fn empirical_ccdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let x = sorted[i];
        out.push((x, (n - i) as f64 / n as f64));
        while i < n && sorted[i] == x {
            i += 1;
        }
    }
    out
}

/// Totally asymmetric stable law; `shift` is only used when `alpha = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StableLawParams {
    pub alpha: f64,
    pub b: f64,
    pub shift: f64,
}

impl StableLawParams {
    pub fn new(alpha: f64, b: f64, shift: f64) -> Result<Self, AnalysisError> {
        if !(alpha > 0.0 && alpha <= 2.0 && b > 0.0) {
            return Err(AnalysisError::BadStableParams { alpha, b });
        }
        Ok(Self { alpha, b, shift })
    }

    /// Normal law with variance `2b`.
    pub fn normal(b: f64) -> Self {
        Self {
            alpha: 2.0,
            b,
            shift: 0.0,
        }
    }
}

/// Characteristic function of the stable law at `t`.
pub fn stable_cf(params: &StableLawParams, t: f64) -> Complex64 {
    if t == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let StableLawParams { alpha, b, shift } = *params;
    let at = t.abs();
    let sgn = t.signum();
    if alpha == 1.0 {
        let exponent =
            Complex64::new(0.0, t * shift) - b * at * Complex64::new(1.0, 2.0 / std::f64::consts::PI * at.ln() * sgn);
        return exponent.exp();
    }
    let modulus = -b * at.powf(alpha);
    let skew = if alpha == 2.0 {
        0.0
    } else {
        -(std::f64::consts::PI * alpha / 2.0).tan() * sgn
    };
    (Complex64::new(modulus, 0.0) * Complex64::new(1.0, skew)).exp()
}

/// Default `t` grid: 21 points evenly spaced in `[−2, 2]`.
pub fn default_t_grid() -> Vec<f64> {
    (0..21).map(|i| -2.0 + 0.2 * i as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CfDistance {
    pub sup: f64,
    pub mean: f64,
}

/// Empirical characteristic function at `t`.
pub fn empirical_cf(samples: &[f64], t: f64) -> Complex64 {
    let n = samples.len() as f64;
    let (c, s) = samples
        .iter()
        .fold((0.0, 0.0), |(c, s), x| (c + (t * x).cos(), s + (t * x).sin()));
    Complex64::new(c / n, s / n)
}

/// `sup_t |φ̂(t) − φ(t)|` and its mean over the grid.
pub fn cf_distance(samples: &[f64], params: &StableLawParams, t_grid: &[f64]) -> CfDistance {
    let diffs: Vec<f64> = t_grid
        .iter()
        .map(|&t| (empirical_cf(samples, t) - stable_cf(params, t)).norm())
        .collect();
    CfDistance {
        sup: diffs.iter().cloned().fold(0.0, f64::max),
        mean: diffs.iter().sum::<f64>() / diffs.len() as f64,
    }
}

/// Scale `b` of a centred normal fitted by `variance = 2b`.
pub fn fit_normal_scale(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / 2.0
}

/// Kolmogorov–Smirnov distance of the samples from `N(mean, sd²)`.
pub fn ks_distance_normal(samples: &[f64], mean: f64, sd: f64) -> f64 {
    let normal = Normal::new(mean, sd).expect("positive sd");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LyapunovVerdict {
    RecurrenceCriterionMet,
    TransienceCriterionMet,
    Inconclusive,
}

/// Checks `θ(x) ≤ 1 + 1/(a ln x)` (recurrence) or `θ(x) ≥ 1 + 2a/ln x`
/// (transience) at every supplied `(x, θ(x))`.
pub fn lyapunov_classify(theta_values: &[(f64, f64)], a: f64) -> Result<LyapunovVerdict, AnalysisError> {
    if !(a > 1.0) {
        return Err(AnalysisError::BadA(a));
    }
    if theta_values.len() < 3
        || theta_values.iter().any(|&(x, _)| !(x > 1.0))
        || theta_values.windows(2).any(|w| w[1].0 <= w[0].0)
    {
        return Err(AnalysisError::TooFewPoints);
    }
    let recurrent = theta_values.iter().all(|&(x, th)| th <= 1.0 + 1.0 / (a * x.ln()));
    let transient = theta_values.iter().all(|&(x, th)| th >= 1.0 + 2.0 * a / x.ln());
    Ok(match (recurrent, transient) {
        (true, _) => LyapunovVerdict::RecurrenceCriterionMet,
        (false, true) => LyapunovVerdict::TransienceCriterionMet,
        _ => LyapunovVerdict::Inconclusive,
    })
}

/// `dY = αβ dt + √(2αY⁺) dB`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BesselParams {
    pub alpha: f64,
    pub beta: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BesselPath {
    /// `Y` on the grid `0, dt, 2dt, …` up to the horizon or the hit.
    pub values: Vec<f64>,
    /// First grid time with `Y ≤ threshold`.
    pub hit_time: Option<f64>,
}

/// Euler–Maruyama path from `y` up to time `horizon`, stopped at the first
/// grid time with `Y ≤ threshold`.
pub fn simulate_squared_bessel(y: f64, params: &BesselParams, horizon: f64, threshold: f64, seed: u64) -> BesselPath {
    let mut rng = episode_rng(seed, Stream::Diffusion);
    let steps = (horizon / params.dt).ceil() as u64;
    let drift = params.alpha * params.beta * params.dt;
    let vol = (2.0 * params.alpha * params.dt).sqrt();
    let mut values = vec![y];
    let mut cur = y;
    let mut hit_time = None;
    for k in 1..=steps {
        let z: f64 = rng.sample(StandardNormal);
        cur += drift + vol * cur.max(0.0).sqrt() * z;
        values.push(cur);
        if cur <= threshold {
            hit_time = Some(k as f64 * params.dt);
            break;
        }
    }
    BesselPath { values, hit_time }
}

/// How one diffusion episode ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExitOutcome {
    Lower(f64),
    Upper(f64),
    Undecided,
}

/// First exit of `(a, b)` from `y`, without storing the path.
pub fn bessel_exit(y: f64, params: &BesselParams, a: f64, b: f64, max_time: f64, seed: u64) -> ExitOutcome {
    let mut rng = episode_rng(seed, Stream::Diffusion);
    let drift = params.alpha * params.beta * params.dt;
    let vol = (2.0 * params.alpha * params.dt).sqrt();
    let steps = (max_time / params.dt).ceil() as u64;
    let mut cur = y;
    for k in 1..=steps {
        let z: f64 = rng.sample(StandardNormal);
        cur += drift + vol * cur.max(0.0).sqrt() * z;
        if cur <= a {
            return ExitOutcome::Lower(k as f64 * params.dt);
        }
        if cur >= b {
            return ExitOutcome::Upper(k as f64 * params.dt);
        }
    }
    ExitOutcome::Undecided
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExitEstimate {
    /// Fraction of decided paths leaving through the lower barrier.
    pub lower: f64,
    pub std_error: f64,
    pub undecided_fraction: f64,
}

/// Monte Carlo `P_y(hit a before b)`.
pub fn bessel_exit_probability(
    y: f64,
    params: &BesselParams,
    barriers: (f64, f64),
    paths: u64,
    seed: u64,
    threads: Option<usize>,
) -> ExitEstimate {
    let outcomes = run_batch(paths, seed, threads, |_, s| {
        bessel_exit(y, params, barriers.0, barriers.1, 1e4, s)
    });
    let lower = outcomes.iter().filter(|o| matches!(o, ExitOutcome::Lower(_))).count() as f64;
    let undecided = outcomes.iter().filter(|o| matches!(o, ExitOutcome::Undecided)).count() as f64;
    let decided = paths as f64 - undecided;
    let p = lower / decided;
    ExitEstimate {
        lower: p,
        std_error: (p * (1.0 - p) / decided).sqrt(),
        undecided_fraction: undecided / paths as f64,
    }
}

/// Exact exit probability `(b^{1−β} − y^{1−β}) / (b^{1−β} − a^{1−β})` (`β ≠ 1`).
pub fn bessel_exit_formula(y: f64, beta: f64, a: f64, b: f64) -> f64 {
    let e = 1.0 - beta;
    (b.powf(e) - y.powf(e)) / (b.powf(e) - a.powf(e))
}

/// Hitting times of `threshold` from `y`; `None` when the horizon is reached first.
pub fn bessel_hitting_times(
    y: f64,
    params: &BesselParams,
    threshold: f64,
    horizon: f64,
    paths: u64,
    seed: u64,
    threads: Option<usize>,
) -> Vec<Option<f64>> {
    run_batch(paths, seed, threads, |_, s| {
        match bessel_exit(y, params, threshold, f64::INFINITY, horizon, s) {
            ExitOutcome::Lower(t) => Some(t),
            _ => None,
        }
    })
}

/// Centering for the critical regime: `D(t) = c + 1 + 2 μ_Q(t/μ_σ) / μ_σ`
/// with the truncated mean `μ_Q(t) = E[Q; Q ≤ t]` taken from renewal areas.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaCentering {
    pub mu_sigma: f64,
    pub c: f64,
    /// Sorted areas and their prefix sums.
    areas: Vec<f64>,
    prefix: Vec<f64>,
}

impl GammaCentering {
    pub fn new(delta: f64, mu_sigma: f64, c: f64, areas: &[f64]) -> Result<Self, AnalysisError> {
        if (delta.abs() - 2.0).abs() > BOUNDARY_TOLERANCE {
            return Err(AnalysisError::RegimeMismatch(delta));
        }
        let mut sorted = areas.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        prefix.push(0.0);
        for q in &sorted {
            prefix.push(prefix.last().unwrap() + q);
        }
        Ok(Self {
            mu_sigma,
            c,
            areas: sorted,
            prefix,
        })
    }

    /// Empirical `E[Q; Q ≤ t]`.
    pub fn truncated_mean(&self, t: f64) -> f64 {
        let k = self.areas.partition_point(|&q| q <= t);
        self.prefix[k] / self.areas.len() as f64
    }

    pub fn d(&self, t: f64) -> f64 {
        self.c + 1.0 + 2.0 * self.truncated_mean(t / self.mu_sigma) / self.mu_sigma
    }

    /// `Γ(n)` and `D(Γ(n))`.
    pub fn gamma(&self, n: f64) -> (f64, f64) {
        let g = invert_increasing_product(n, |s| self.d(s));
        (g, self.d(g))
    }
}

/// `Γ(t) = inf{s > 0 : s·D(s) ≥ t}` for a nondecreasing positive `D`, by
/// bisection to relative precision `1e-12`.
pub fn invert_increasing_product(t: f64, d: impl Fn(f64) -> f64) -> f64 {
    let g = |s: f64| s * d(s);
    let mut lo = 0.0f64;
    let mut hi = 1.0f64.max(t);
    while g(hi) < t {
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= t {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
