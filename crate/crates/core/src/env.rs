//! Markovian cookie environments.
//!
//! A [`StackChainSpec`] is a finite alphabet of elliptic cookie stacks of a
//! common height `M`, a row-stochastic kernel `K` moving between them from
//! site to site, and the law `φ` of the stack at site 0. Validation derives
//! the stationary law `π`, the reversed kernel
//! `K̃(r, r') = K(r', r) π(r') / π(r)`, per-stack drifts and the drift
//! parameter `δ = Σ_s π(s) δ(s)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{counter_uniform, derive_key, pick_from_cdf, Stream};

/// Row sums of a kernel must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
/// Residual allowed in `π = πK` and in the rows of `K̃`.
pub const STATIONARY_TOLERANCE: f64 = 1e-10;
/// Largest alphabet handled by the dense stationary solve.
pub const DENSE_STATIONARY_LIMIT: usize = 64;
const POWER_ITERATION_TOLERANCE: f64 = 1e-12;
const POWER_ITERATION_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("stack height M must be at least 1")]
    ZeroHeight,
    #[error("the state alphabet is empty")]
    NoStates,
    #[error("state {state} has {len} cookies, expected M = {height}")]
    HeightMismatch { state: usize, len: usize, height: usize },
    #[error("cookie {index} of state {state} is {value}, not inside (0, 1)")]
    NotElliptic { state: usize, index: usize, value: f64 },
    #[error("kernel has {rows} rows of lengths {cols:?}, expected a {n}x{n} matrix")]
    KernelShape { rows: usize, cols: Vec<usize>, n: usize },
    #[error("kernel row {row} sums to {sum} (entries must be non-negative and sum to 1)")]
    NonStochasticRow { row: usize, sum: f64 },
    #[error("kernel is reducible: state {unreachable} is not mutually reachable with state 0")]
    Reducible { unreachable: usize },
    #[error("kernel is periodic with period {period}")]
    Periodic { period: usize },
    #[error("initial law is not a probability vector over the {n} states")]
    BadInitial { n: usize },
    #[error("stationary solve did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("negative site {site} requested but the initial law is not stationary (strict mode)")]
    TwoSidedNonStationary { site: i64 },
    #[error("unknown builtin environment `{0}`")]
    UnknownName(String),
    #[error("bad parameters for builtin `{name}`: {reason}")]
    BadParams { name: String, reason: String },
}

/// Visit-indexed right-jump probabilities of one site; visits past the
/// height use a fair coin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CookieStack {
    probs: Vec<f64>,
}

impl CookieStack {
    pub fn new(probs: Vec<f64>) -> Result<Self, SpecError> {
        if probs.is_empty() {
            return Err(SpecError::ZeroHeight);
        }
        if let Some((index, &value)) = probs.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p < 1.0)) {
            return Err(SpecError::NotElliptic { state: 0, index, value });
        }
        Ok(Self { probs })
    }

    /// `M` placebo cookies.
    pub fn placebo(height: usize) -> Self {
        Self {
            probs: vec![0.5; height.max(1)],
        }
    }

    pub fn height(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Right-jump probability on the `visit`-th visit (1-based).
    #[inline]
    pub fn prob(&self, visit: usize) -> f64 {
        if visit >= 1 && visit <= self.probs.len() {
            self.probs[visit - 1]
        } else {
            0.5
        }
    }

    /// Net drift `δ(s) = Σ_i (2 s(i) - 1)`.
    pub fn drift(&self) -> f64 {
        self.probs.iter().map(|p| 2.0 * p - 1.0).sum()
    }

    /// Stack seen by the spatially reversed walk: `1 - s(i)`.
    pub fn flipped(&self) -> Self {
        Self {
            probs: self.probs.iter().map(|p| 1.0 - p).collect(),
        }
    }
}

/// Kernel as written in spec files: nested rows or one flat row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelField {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialField {
    Law(Vec<f64>),
    Keyword(String),
}

/// On-disk spec format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(rename = "M")]
    pub height: usize,
    pub states: Vec<Vec<f64>>,
    pub kernel: KernelField,
    pub initial: InitialField,
}

impl RawSpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialisation cannot fail")
    }
}

/// Validated environment law with all derived quantities.
#[derive(Clone, Debug)]
pub struct StackChainSpec {
    name: Option<String>,
    height: usize,
    states: Vec<CookieStack>,
    kernel: Vec<Vec<f64>>,
    initial: Vec<f64>,
    initial_is_stationary: bool,
    stationary: Vec<f64>,
    reversed: Vec<Vec<f64>>,
    state_drifts: Vec<f64>,
    delta: f64,
    anchor: usize,
    kernel_cdf: Vec<Vec<f64>>,
    reversed_cdf: Vec<Vec<f64>>,
    initial_cdf: Vec<f64>,
}

fn cumulative(row: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = row
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

/// Validates a raw spec and populates `π`, `K̃`, `δ(s)`, `δ` and the anchor.
pub fn validate_spec(raw: &RawSpec) -> Result<StackChainSpec, SpecError> {
    let height = raw.height;
    if height == 0 {
        return Err(SpecError::ZeroHeight);
    }
    if raw.states.is_empty() {
        return Err(SpecError::NoStates);
    }
    let n = raw.states.len();
    let mut states = Vec::with_capacity(n);
    for (state, probs) in raw.states.iter().enumerate() {
        if probs.len() != height {
            return Err(SpecError::HeightMismatch {
                state,
                len: probs.len(),
                height,
            });
        }
        let stack = CookieStack::new(probs.clone()).map_err(|e| match e {
            SpecError::NotElliptic { index, value, .. } => SpecError::NotElliptic { state, index, value },
            other => other,
        })?;
        states.push(stack);
    }

    let kernel: Vec<Vec<f64>> = match &raw.kernel {
        KernelField::Rows(rows) => rows.clone(),
        KernelField::Flat(flat) => {
            if flat.len() != n * n {
                return Err(SpecError::KernelShape {
                    rows: 1,
                    cols: vec![flat.len()],
                    n,
                });
            }
            flat.chunks(n).map(|c| c.to_vec()).collect()
        }
    };
    if kernel.len() != n || kernel.iter().any(|r| r.len() != n) {
        return Err(SpecError::KernelShape {
            rows: kernel.len(),
            cols: kernel.iter().map(Vec::len).collect(),
            n,
        });
    }
    for (row, entries) in kernel.iter().enumerate() {
        let sum: f64 = entries.iter().sum();
        let bad_entry = entries.iter().any(|&p| !(p >= 0.0) || !p.is_finite());
        if bad_entry || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(SpecError::NonStochasticRow { row, sum });
        }
    }

    let initial_keyword = match &raw.initial {
        InitialField::Law(law) => {
            let sum: f64 = law.iter().sum();
            if law.len() != n || law.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(SpecError::BadInitial { n });
            }
            None
        }
        InitialField::Keyword(word) if word == "stationary" => Some(()),
        InitialField::Keyword(_) => return Err(SpecError::BadInitial { n }),
    };

    check_irreducible(&kernel)?;
    let period = period_through_zero(&kernel);
    if period != 1 {
        return Err(SpecError::Periodic { period });
    }

    let stationary = stationary_distribution(&kernel)?;
    let reversed = reversed_kernel(&kernel, &stationary);
    let (initial, initial_is_stationary) = match (&raw.initial, initial_keyword) {
        (_, Some(())) => (stationary.clone(), true),
        (InitialField::Law(law), None) => {
            let close = law
                .iter()
                .zip(&stationary)
                .all(|(a, b)| (a - b).abs() <= STATIONARY_TOLERANCE);
            (law.clone(), close)
        }
        _ => unreachable!(),
    };

    let state_drifts: Vec<f64> = states.iter().map(CookieStack::drift).collect();
    let delta = stationary.iter().zip(&state_drifts).map(|(p, d)| p * d).sum();
    let anchor = default_anchor(&stationary);

    Ok(StackChainSpec {
        name: raw.name.clone(),
        height,
        kernel_cdf: kernel.iter().map(|r| cumulative(r)).collect(),
        reversed_cdf: reversed.iter().map(|r| cumulative(r)).collect(),
        initial_cdf: cumulative(&initial),
        states,
        kernel,
        initial,
        initial_is_stationary,
        stationary,
        reversed,
        state_drifts,
        delta,
        anchor,
    })
}

/// Most probable stationary state; near-ties (within 1e-12) go to the lowest index.
fn default_anchor(pi: &[f64]) -> usize {
    let max = pi.iter().cloned().fold(f64::MIN, f64::max);
    pi.iter().position(|&p| p >= max - 1e-12).unwrap_or(0)
}

fn reachable(adj: &[Vec<usize>], from: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

fn check_irreducible(kernel: &[Vec<f64>]) -> Result<(), SpecError> {
    let n = kernel.len();
    let forward: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| kernel[i][j] > 0.0).collect())
        .collect();
    let mut backward = vec![Vec::new(); n];
    for (i, row) in forward.iter().enumerate() {
        for &j in row {
            backward[j].push(i);
        }
    }
    let fwd = reachable(&forward, 0);
    let bwd = reachable(&backward, 0);
    match (0..n).find(|&i| !(fwd[i] && bwd[i])) {
        Some(unreachable) => Err(SpecError::Reducible { unreachable }),
        None => Ok(()),
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period of state 0: gcd over support edges `u → v` of `level(u) + 1 - level(v)`
/// with BFS levels from 0. Assumes irreducibility.
fn period_through_zero(kernel: &[Vec<f64>]) -> usize {
    let n = kernel.len();
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    let mut g = 0usize;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if kernel[u][v] <= 0.0 {
                continue;
            }
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            } else {
                let diff = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, diff);
            }
        }
    }
    g
}

fn stationarity_residual(kernel: &[Vec<f64>], pi: &[f64]) -> f64 {
    let n = kernel.len();
    (0..n)
        .map(|j| {
            let pk: f64 = (0..n).map(|i| pi[i] * kernel[i][j]).sum();
            (pk - pi[j]).abs()
        })
        .fold(0.0, f64::max)
}

/// Stationary law of an irreducible aperiodic kernel.
///
/// Dense linear solve for alphabets up to [`DENSE_STATIONARY_LIMIT`] states,
/// power iteration otherwise.
pub fn stationary_distribution(kernel: &[Vec<f64>]) -> Result<Vec<f64>, SpecError> {
    let n = kernel.len();
    let mut pi = if n <= DENSE_STATIONARY_LIMIT {
        stationary_dense(kernel).unwrap_or_else(|| stationary_power(kernel).0)
    } else {
        stationary_power(kernel).0
    };
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    let residual = stationarity_residual(kernel, &pi);
    if residual > STATIONARY_TOLERANCE || pi.iter().any(|&p| !(p > 0.0)) {
        return Err(SpecError::NoConvergence { residual });
    }
    Ok(pi)
}

fn stationary_dense(kernel: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = kernel.len();
    // (K^T - I) π = 0 with the last equation replaced by Σ π = 1
    let mut a = DMatrix::<f64>::from_fn(n, n, |i, j| kernel[j][i] - if i == j { 1.0 } else { 0.0 });
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let x = a.lu().solve(&b)?;
    Some(x.iter().copied().collect())
}

fn stationary_power(kernel: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let n = kernel.len();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..POWER_ITERATION_CAP {
        next.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let p = pi[i];
            if p == 0.0 {
                continue;
            }
            for (j, k) in kernel[i].iter().enumerate() {
                next[j] += p * k;
            }
        }
        let change = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut pi, &mut next);
        if change < POWER_ITERATION_TOLERANCE {
            return (pi, true);
        }
    }
    (pi, false)
}

/// `K̃(r, r') = K(r', r) π(r') / π(r)`.
pub fn reversed_kernel(kernel: &[Vec<f64>], pi: &[f64]) -> Vec<Vec<f64>> {
    let n = kernel.len();
    (0..n)
        .map(|r| (0..n).map(|rp| kernel[rp][r] * pi[rp] / pi[r]).collect())
        .collect()
}

impl StackChainSpec {
    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    /// Stack height `M`.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[CookieStack] {
        &self.states
    }

    pub fn stack(&self, state: usize) -> &CookieStack {
        &self.states[state]
    }

    pub fn kernel(&self) -> &[Vec<f64>] {
        &self.kernel
    }

    pub fn reversed(&self) -> &[Vec<f64>] {
        &self.reversed
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Whether `φ = π` (declared or within [`STATIONARY_TOLERANCE`]).
    pub fn initial_is_stationary(&self) -> bool {
        self.initial_is_stationary
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn state_drifts(&self) -> &[f64] {
        &self.state_drifts
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Anchor stack `s*` of the hatted chains and renewal structure.
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Replaces the anchor (defaults to the most probable stationary state).
    pub fn with_anchor(mut self, anchor: usize) -> Self {
        assert!(anchor < self.states.len(), "anchor out of range");
        self.anchor = anchor;
        self
    }

    /// Mean return time of the anchor, `μ_s = 1 / π(s*)`.
    pub fn anchor_mean_return(&self) -> f64 {
        1.0 / self.stationary[self.anchor]
    }

    /// Mean return time to `target` by a linear solve on expected hitting
    /// times (independent of the Kac formula `1 / π`).
    pub fn mean_return_time(&self, target: usize) -> f64 {
        let n = self.states.len();
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        let m = others.len();
        let hitting = if m == 0 {
            Vec::new()
        } else {
            let a = DMatrix::<f64>::from_fn(m, m, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - self.kernel[others[i]][others[j]]
            });
            let b = DVector::<f64>::from_element(m, 1.0);
            a.lu()
                .solve(&b)
                .expect("irreducible kernel gives a non-singular hitting system")
                .iter()
                .copied()
                .collect()
        };
        1.0 + others
            .iter()
            .zip(&hitting)
            .map(|(&j, h)| self.kernel[target][j] * h)
            .sum::<f64>()
    }

    /// Draws the next state with `K` from `state` using a uniform `u`.
    #[inline]
    pub fn step_forward(&self, state: usize, u: f64) -> usize {
        pick_from_cdf(&self.kernel_cdf[state], u)
    }

    /// Draws the next state with `K̃`.
    #[inline]
    pub fn step_reversed(&self, state: usize, u: f64) -> usize {
        pick_from_cdf(&self.reversed_cdf[state], u)
    }

    #[inline]
    pub fn draw_initial(&self, u: f64) -> usize {
        pick_from_cdf(&self.initial_cdf, u)
    }

    /// Draws from `π`.
    pub fn draw_stationary(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in self.stationary.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.stationary.len() - 1
    }

    /// Sup-TV distance `d(n) = max_s ‖Kⁿ(s, ·) − π‖_TV` for `n = 1..=n_max`.
    pub fn uniform_ergodicity_diagnostic(&self, n_max: usize) -> Vec<f64> {
        let n = self.states.len();
        let mut power: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut out = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            power = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| (0..n).map(|l| power[i][l] * self.kernel[l][j]).sum())
                        .collect()
                })
                .collect();
            let d = power
                .iter()
                .map(|row| {
                    0.5 * row
                        .iter()
                        .zip(&self.stationary)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            out.push(d);
        }
        out
    }

    /// Back to the file format (derived fields are dropped).
    pub fn to_raw(&self) -> RawSpec {
        RawSpec {
            name: self.name.clone(),
            height: self.height,
            states: self.states.iter().map(|s| s.probs.clone()).collect(),
            kernel: KernelField::Rows(self.kernel.clone()),
            initial: if self.initial_is_stationary {
                InitialField::Keyword("stationary".into())
            } else {
                InitialField::Law(self.initial.clone())
            },
        }
    }

    /// Parses and validates a JSON spec.
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let raw = RawSpec::from_json(text).map_err(|e| EnvError::BadParams {
            name: "spec file".into(),
            reason: e.to_string(),
        })?;
        Ok(validate_spec(&raw)?)
    }
}

/// `(δ, δ(s))` of a validated spec.
pub fn compute_delta(spec: &StackChainSpec) -> (f64, Vec<f64>) {
    (spec.delta, spec.state_drifts.clone())
}

/// Spatial reversal: stacks `1 − s(i)`, kernel `K̃`, stationary start.
pub fn reverse_environment(spec: &StackChainSpec) -> StackChainSpec {
    let raw = RawSpec {
        name: spec.name.as_ref().map(|n| format!("{n}~reversed")),
        height: spec.height,
        states: spec.states.iter().map(|s| s.flipped().probs).collect(),
        kernel: KernelField::Rows(spec.reversed.clone()),
        initial: InitialField::Keyword("stationary".into()),
    };
    let mut reversed = validate_spec(&raw).expect("the reversal of a valid spec is valid");
    reversed.anchor = spec.anchor;
    reversed
}

/// Treatment of negative sites when `φ ≠ π`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TwoSidedMode {
    /// Refuse negative sites unless `φ = π`.
    #[default]
    Strict,
    /// Extend backwards with `K̃` regardless; results are approximate.
    Permissive,
}

/// One draw of the stack sequence `(S_k)`, extended lazily from site 0.
///
/// Site `k + 1` is drawn with `K` from site `k`, site `-(k + 1)` with `K̃`
/// from site `-k`, each from a counter-based uniform keyed by the site, so the
/// realization does not depend on the order in which sites are requested.
#[derive(Clone, Debug)]
pub struct EnvironmentRealization<'a> {
    spec: &'a StackChainSpec,
    key: u64,
    mode: TwoSidedMode,
    forward: Vec<u32>,
    backward: Vec<u32>,
}

impl<'a> EnvironmentRealization<'a> {
    pub fn new(spec: &'a StackChainSpec, seed: u64, mode: TwoSidedMode) -> Self {
        let key = derive_key(seed, Stream::Environment);
        let origin = spec.draw_initial(counter_uniform(key, 0, 0)) as u32;
        Self {
            spec,
            key,
            mode,
            forward: vec![origin],
            backward: Vec::new(),
        }
    }

    /// Environment with the same stack at every site.
    pub fn constant(spec: &'a StackChainSpec, state: usize) -> Self {
        Self {
            spec,
            key: 0,
            mode: TwoSidedMode::Permissive,
            forward: vec![state as u32],
            backward: Vec::new(),
        }
        .pinned()
    }

    fn pinned(mut self) -> Self {
        self.key = u64::MAX;
        self
    }

    pub fn spec(&self) -> &'a StackChainSpec {
        self.spec
    }

    /// True when negative sites were produced from a non-stationary start.
    pub fn is_approximate(&self) -> bool {
        !self.backward.is_empty() && !self.spec.initial_is_stationary()
    }

    /// State index at `site`.
    #[inline]
    pub fn state_at(&mut self, site: i64) -> Result<usize, EnvError> {
        if site >= 0 {
            let idx = site as usize;
            if idx < self.forward.len() {
                return Ok(self.forward[idx] as usize);
            }
            self.extend_forward(idx);
            Ok(self.forward[idx] as usize)
        } else {
            let idx = (-site - 1) as usize;
            if idx < self.backward.len() {
                return Ok(self.backward[idx] as usize);
            }
            if self.mode == TwoSidedMode::Strict && !self.spec.initial_is_stationary() {
                return Err(EnvError::TwoSidedNonStationary { site });
            }
            self.extend_backward(idx);
            Ok(self.backward[idx] as usize)
        }
    }

    #[inline]
    pub fn stack_at(&mut self, site: i64) -> Result<&'a CookieStack, EnvError> {
        let state = self.state_at(site)?;
        Ok(self.spec.stack(state))
    }

    fn extend_forward(&mut self, idx: usize) {
        let constant = self.key == u64::MAX;
        while self.forward.len() <= idx {
            let k = self.forward.len();
            let prev = self.forward[k - 1] as usize;
            let next = if constant {
                prev
            } else {
                self.spec.step_forward(prev, counter_uniform(self.key, 1, k as u64))
            };
            self.forward.push(next as u32);
        }
    }

    fn extend_backward(&mut self, idx: usize) {
        let constant = self.key == u64::MAX;
        while self.backward.len() <= idx {
            let j = self.backward.len();
            let prev = if j == 0 { self.forward[0] } else { self.backward[j - 1] } as usize;
            let next = if constant {
                prev
            } else {
                self.spec
                    .step_reversed(prev, counter_uniform(self.key, 2, j as u64 + 1))
            };
            self.backward.push(next as u32);
        }
    }

    /// Materialises sites `lo..=hi`.
    pub fn prefill(&mut self, lo: i64, hi: i64) -> Result<(), EnvError> {
        if hi >= 0 {
            self.state_at(hi)?;
        }
        if lo < 0 {
            self.state_at(lo)?;
        }
        Ok(())
    }
}

/// Lazy realization of `(S_k)` from a seed.
pub fn realize_environment(spec: &StackChainSpec, seed: u64, mode: TwoSidedMode) -> EnvironmentRealization<'_> {
    EnvironmentRealization::new(spec, seed, mode)
}

/// Names and one-line descriptions of the builtin environments, in a fixed order.
pub fn list_builtins() -> Vec<(&'static str, &'static str)> {
    vec![
        ("placebo", "single stack of M fair cookies; delta = 0 (params: M)"),
        (
            "iid_product",
            "i.i.d. stacks: every kernel row equals the weights (params: states, weights)",
        ),
        (
            "two_state",
            "two stacks a, b with a 2x2 kernel (params: a, b, kernel); default has delta = 0.2",
        ),
        (
            "example3_truncated",
            "age-since-strong-stack chain s~_0..s~_J with s~_j(1) = 1/2 - 1/(3j) (params: J, p, M, gap_law)",
        ),
    ]
}

fn bad(name: &str, reason: impl Into<String>) -> EnvError {
    EnvError::BadParams {
        name: name.into(),
        reason: reason.into(),
    }
}

fn param_f64(params: &serde_json::Value, key: &str, default: f64, name: &str) -> Result<f64, EnvError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.as_f64().ok_or_else(|| bad(name, format!("`{key}` must be a number"))),
    }
}

fn param_usize(params: &serde_json::Value, key: &str, default: usize, name: &str) -> Result<usize, EnvError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| bad(name, format!("`{key}` must be a non-negative integer"))),
    }
}

fn param_vec(params: &serde_json::Value, key: &str, name: &str) -> Result<Option<Vec<f64>>, EnvError> {
    match params.get(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|_| bad(name, format!("`{key}` must be an array of numbers"))),
    }
}

fn param_matrix(params: &serde_json::Value, key: &str, name: &str) -> Result<Option<Vec<Vec<f64>>>, EnvError> {
    match params.get(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|_| bad(name, format!("`{key}` must be an array of arrays of numbers"))),
    }
}

/// Law of the gap between consecutive strong stacks in `example3_truncated`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GapLaw {
    /// `P(G = g) ∝ g^{-s}`, `g ≥ 1`, `s > 2` (finite mean).
    Zeta(f64),
    /// `P(G = g) = (1 - q) q^{g-1}`.
    Geometric(f64),
}

impl GapLaw {
    fn parse(value: Option<&serde_json::Value>, name: &str) -> Result<Self, EnvError> {
        let Some(v) = value else {
            return Ok(GapLaw::Zeta(2.5));
        };
        if let Some(s) = v.get("zeta").and_then(|x| x.as_f64()) {
            if s > 2.0 {
                return Ok(GapLaw::Zeta(s));
            }
            return Err(bad(name, "zeta exponent must exceed 2"));
        }
        if let Some(q) = v.get("geometric").and_then(|x| x.as_f64()) {
            if q > 0.0 && q < 1.0 {
                return Ok(GapLaw::Geometric(q));
            }
            return Err(bad(name, "geometric parameter must lie in (0, 1)"));
        }
        Err(bad(name, "gap_law must be {\"zeta\": s} or {\"geometric\": q}"))
    }

    /// `P(G > j)` for `j ≥ 0`.
    pub fn survival(&self, j: usize) -> f64 {
        match *self {
            GapLaw::Geometric(q) => q.powi(j as i32),
            GapLaw::Zeta(s) => hurwitz_tail(s, j + 1) / hurwitz_tail(s, 1),
        }
    }
}

/// `Σ_{g ≥ from} g^{-s}`: explicit terms plus an Euler–Maclaurin remainder.
fn hurwitz_tail(s: f64, from: usize) -> f64 {
    const TERMS: usize = 20_000;
    let end = from + TERMS;
    let head: f64 = (from..end).map(|g| (g as f64).powf(-s)).sum();
    let e = end as f64;
    let tail = e.powf(1.0 - s) / (s - 1.0) + 0.5 * e.powf(-s) + s * e.powf(-s - 1.0) / 12.0;
    head + tail
}

/// Builtin environment by name. `params` is a JSON object (or `null` for defaults).
pub fn builtin_environment(name: &str, params: &serde_json::Value) -> Result<StackChainSpec, EnvError> {
    let raw = match name {
        "placebo" => {
            let m = param_usize(params, "M", 1, name)?;
            if m == 0 {
                return Err(bad(name, "M must be at least 1"));
            }
            RawSpec {
                name: Some("placebo".into()),
                height: m,
                states: vec![vec![0.5; m]],
                kernel: KernelField::Rows(vec![vec![1.0]]),
                initial: InitialField::Keyword("stationary".into()),
            }
        }
        "iid_product" => {
            let states = param_matrix(params, "states", name)?.unwrap_or_else(|| vec![vec![0.75], vec![0.25]]);
            let n = states.len();
            let weights = param_vec(params, "weights", name)?.unwrap_or_else(|| vec![1.0 / n as f64; n]);
            if weights.len() != n {
                return Err(bad(name, "weights and states differ in length"));
            }
            RawSpec {
                name: Some("iid_product".into()),
                height: states.first().map_or(0, Vec::len),
                kernel: KernelField::Rows(vec![weights.clone(); n]),
                initial: InitialField::Law(weights),
                states,
            }
        }
        "two_state" => {
            let a = param_vec(params, "a", name)?.unwrap_or_else(|| vec![0.9, 0.9]);
            let b = param_vec(params, "b", name)?.unwrap_or_else(|| vec![0.2, 0.2]);
            let kernel = param_matrix(params, "kernel", name)?.unwrap_or_else(|| vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
            if a.len() != b.len() {
                return Err(bad(name, "stacks a and b must have equal height"));
            }
            RawSpec {
                name: Some("two_state".into()),
                height: a.len(),
                states: vec![a, b],
                kernel: KernelField::Rows(kernel),
                initial: InitialField::Keyword("stationary".into()),
            }
        }
        "example3_truncated" => {
            let j_max = param_usize(params, "J", 50, name)?;
            let p = param_f64(params, "p", 0.9, name)?;
            let m = param_usize(params, "M", 10, name)?;
            let gap = GapLaw::parse(params.get("gap_law"), name)?;
            if j_max == 0 || m == 0 {
                return Err(bad(name, "J and M must be at least 1"));
            }
            if !(p > 0.5 && p < 1.0) {
                return Err(bad(name, "p must lie in (1/2, 1)"));
            }
            example3_truncated(j_max, p, m, gap)
        }
        other => return Err(EnvError::UnknownName(other.to_string())),
    };
    Ok(validate_spec(&raw)?)
}

/// States `s̃_0 .. s̃_J`: `s̃_0` has `M` cookies of strength `p`, `s̃_j` has a
/// single cookie `1/2 − 1/(3j)`. From `s̃_j` the chain returns to `s̃_0` with
/// the gap hazard `P(G = j+1 | G > j)`, else moves to `s̃_{j+1}`; all of the
/// gap mass beyond `J` returns to `s̃_0` from `s̃_J`.
fn example3_truncated(j_max: usize, p: f64, m: usize, gap: GapLaw) -> RawSpec {
    let n = j_max + 1;
    let mut states = Vec::with_capacity(n);
    states.push(vec![p; m]);
    for j in 1..=j_max {
        let mut s = vec![0.5; m];
        s[0] = 0.5 - 1.0 / (3.0 * j as f64);
        states.push(s);
    }
    let mut kernel = vec![vec![0.0; n]; n];
    for j in 0..n {
        if j == j_max {
            kernel[j][0] = 1.0;
            continue;
        }
        let stay = gap.survival(j + 1) / gap.survival(j);
        kernel[j][0] = 1.0 - stay;
        kernel[j][j + 1] = stay;
    }
    RawSpec {
        name: Some(format!("example3_truncated(J={j_max})")),
        height: m,
        states,
        kernel: KernelField::Rows(kernel),
        initial: InitialField::Keyword("stationary".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(states: Vec<Vec<f64>>, kernel: Vec<Vec<f64>>) -> RawSpec {
        RawSpec {
            name: None,
            height: states[0].len(),
            states,
            kernel: KernelField::Rows(kernel),
            initial: InitialField::Keyword("stationary".into()),
        }
    }

    #[test]
    fn single_placebo_state() {
        let spec = validate_spec(&raw(vec![vec![0.5]], vec![vec![1.0]])).unwrap();
        assert_eq!(spec.delta(), 0.0);
        assert_eq!(spec.stationary(), &[1.0]);
    }

    #[test]
    fn identity_kernel_is_reducible() {
        let err = validate_spec(&raw(vec![vec![0.5], vec![0.6]], vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap_err();
        assert!(matches!(err, SpecError::Reducible { .. }));
    }

    #[test]
    fn swap_kernel_is_periodic() {
        let err = validate_spec(&raw(vec![vec![0.5], vec![0.6]], vec![vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap_err();
        assert_eq!(err, SpecError::Periodic { period: 2 });
    }

    #[test]
    fn period_three_cycle_detected() {
        let k = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(period_through_zero(&k), 3);
        let mut k2 = k.clone();
        k2[0] = vec![0.5, 0.5, 0.0];
        assert_eq!(period_through_zero(&k2), 1);
    }

    #[test]
    fn doubly_stochastic_two_state_example() {
        let spec = validate_spec(&raw(
            vec![vec![0.9, 0.9], vec![0.2, 0.2]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        ))
        .unwrap();
        assert!((spec.stationary()[0] - 0.5).abs() < 1e-14);
        assert!((spec.state_drifts()[0] - 1.6).abs() < 1e-14);
        assert!((spec.state_drifts()[1] + 1.2).abs() < 1e-14);
        assert!((spec.delta() - 0.2).abs() < 1e-14);
        assert_eq!(spec.anchor(), 0);
    }

    #[test]
    fn stationary_of_asymmetric_kernel() {
        // π K = π as a 2x2 system: 0.1 π0 = 0.4 π1, π0 + π1 = 1
        let pi = stationary_distribution(&[vec![0.9, 0.1], vec![0.4, 0.6]]).unwrap();
        assert!((pi[0] - 0.8).abs() < 1e-12 && (pi[1] - 0.2).abs() < 1e-12);
        assert!((0.8 * 0.9 + 0.2 * 0.4 - 0.8f64).abs() < 1e-15);
    }

    #[test]
    fn power_iteration_agrees_with_dense_solve() {
        let k = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]];
        let dense = stationary_dense(&k).unwrap();
        let (power, converged) = stationary_power(&k);
        assert!(converged);
        for (a, b) in dense.iter().zip(&power) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn errors_name_the_offending_entry() {
        let e = validate_spec(&raw(vec![vec![0.5], vec![0.6]], vec![vec![0.5, 0.5], vec![0.3, 0.6]])).unwrap_err();
        assert!(matches!(e, SpecError::NonStochasticRow { row: 1, .. }));
        let e = validate_spec(&raw(vec![vec![0.5], vec![1.0]], vec![vec![0.5, 0.5], vec![0.5, 0.5]])).unwrap_err();
        assert!(matches!(e, SpecError::NotElliptic { state: 1, index: 0, .. }));
        let mut r = raw(vec![vec![0.5], vec![0.6]], vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        r.initial = InitialField::Law(vec![0.7, 0.7]);
        assert!(matches!(validate_spec(&r).unwrap_err(), SpecError::BadInitial { .. }));
    }

    #[test]
    fn mean_return_time_matches_kac() {
        let spec = validate_spec(&raw(
            vec![vec![0.5], vec![0.6], vec![0.7]],
            vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]],
        ))
        .unwrap();
        for s in 0..3 {
            let kac = 1.0 / spec.stationary()[s];
            assert!((spec.mean_return_time(s) - kac).abs() < 1e-10);
        }
    }

    #[test]
    fn ergodicity_diagnostic_two_state() {
        let spec = validate_spec(&raw(vec![vec![0.5], vec![0.6]], vec![vec![0.9, 0.1], vec![0.4, 0.6]])).unwrap();
        // K^n = 1π + 0.5^n (I − 1π); the worst row is the second: TV = 0.8 · 0.5^n
        let d = spec.uniform_ergodicity_diagnostic(12);
        for (i, &dn) in d.iter().enumerate() {
            let expected = 0.8 * 0.5f64.powi(i as i32 + 1);
            assert!((dn - expected).abs() < 1e-12, "n = {}: {dn} vs {expected}", i + 1);
        }
        let uniform = validate_spec(&raw(vec![vec![0.5], vec![0.6]], vec![vec![0.5, 0.5], vec![0.5, 0.5]])).unwrap();
        assert!(uniform.uniform_ergodicity_diagnostic(1)[0] < 1e-15);
    }

    #[test]
    fn realization_is_order_independent() {
        let spec = builtin_environment("two_state", &serde_json::Value::Null).unwrap();
        let mut a = realize_environment(&spec, 9, TwoSidedMode::Strict);
        let mut b = realize_environment(&spec, 9, TwoSidedMode::Strict);
        let fwd: Vec<usize> = (-40..=40).map(|k| a.state_at(k).unwrap()).collect();
        let bwd: Vec<usize> = (-40..=40).rev().map(|k| b.state_at(k).unwrap()).collect();
        let bwd: Vec<usize> = bwd.into_iter().rev().collect();
        assert_eq!(fwd, bwd);
        for k in -40..=40 {
            assert_eq!(a.state_at(k).unwrap(), fwd[(k + 40) as usize]);
        }
    }

    #[test]
    fn strict_mode_refuses_negative_sites_off_stationarity() {
        let mut r = raw(vec![vec![0.6], vec![0.3]], vec![vec![0.9, 0.1], vec![0.4, 0.6]]);
        r.initial = InitialField::Law(vec![0.5, 0.5]);
        let spec = validate_spec(&r).unwrap();
        let mut strict = realize_environment(&spec, 1, TwoSidedMode::Strict);
        assert!(strict.state_at(5).is_ok());
        assert_eq!(
            strict.state_at(-1).unwrap_err(),
            EnvError::TwoSidedNonStationary { site: -1 }
        );
        let mut loose = realize_environment(&spec, 1, TwoSidedMode::Permissive);
        assert!(loose.state_at(-3).is_ok());
        assert!(loose.is_approximate());
    }

    #[test]
    fn example3_has_large_delta() {
        let spec = builtin_environment("example3_truncated", &serde_json::Value::Null).unwrap();
        assert!(spec.delta() > 2.0, "delta = {}", spec.delta());
        assert!((spec.state_drifts()[1] + 2.0 / 3.0).abs() < 1e-14);
        // drifts of s~_j increase in j
        assert!(spec.state_drifts()[1..].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn example3_weak_identity_with_untruncated_gap() {
        // with a strong-stack-only drift, δ = M(2p−1) π(s~_0) and π(s~_0) = 1 / E[min(G, J+1)]
        let gap = GapLaw::Geometric(0.5);
        let j_max = 60;
        let raw = example3_truncated(j_max, 0.75, 4, gap);
        let spec = validate_spec(&raw).unwrap();
        let mean_gap: f64 = (0..=j_max).map(|j| gap.survival(j)).sum();
        assert!((spec.stationary()[0] - 1.0 / mean_gap).abs() < 1e-12);
    }

    #[test]
    fn zeta_gap_survival_is_a_tail() {
        let g = GapLaw::Zeta(2.5);
        assert!((g.survival(0) - 1.0).abs() < 1e-12);
        // P(G = 1) = 1 / ζ(2.5), ζ(2.5) = 1.341487257250917...
        assert!((1.0 - g.survival(1) - 1.0 / 1.341_487_257_250_917).abs() < 1e-9);
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(
            builtin_environment("nope", &serde_json::Value::Null),
            Err(EnvError::UnknownName(_))
        ));
    }
}
