//! Exact finite computations used as ground truth.
//!
//! Step laws are assembled from a dynamic program over the `M` biased coins
//! followed by a fair negative-binomial tail. The negative binomial is
//! evaluated on a window around its mode by the ratio recurrence and
//! normalised; the mass outside the window is below `1e-30`.
//!
//! Chains on `(level, stack)` are truncated at a level cap `L`; mass that
//! would leave `0..=L` goes to an absorbing overflow state and is reported as
//! an error bound rather than renormalised away.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::env::{CookieStack, StackChainSpec};

/// Relative cut-off of the negative-binomial window.
const NB_WINDOW_CUTOFF: f64 = 1e-30;
/// Remaining mass at which absorbing iterations stop.
const ABSORPTION_TOLERANCE: f64 = 1e-15;
const MAX_ABSORPTION_STEPS: usize = 1_000_000;
/// Target overflow for hatted laws.
pub const HATTED_OVERFLOW_TOLERANCE: f64 = 1e-8;
/// Overflow above which survival curves are refused.
pub const SURVIVAL_OVERFLOW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("level cap {cap} is too small (overflow {overflow:e}, need at least {needed})")]
    CapTooSmall { cap: usize, overflow: f64, needed: usize },
    #[error("absorbing iteration left mass {remaining:e} after {steps} steps")]
    SolveFailure { remaining: f64, steps: usize },
    #[error("level must be at least 1")]
    BadLevel,
}

/// Which branching process a step law belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Side {
    /// Successes before the `u`-th failure; 0 absorbing; stacks follow `K`.
    Forward,
    /// Failures before the `(v+1)`-th success; stacks follow `K̃`.
    Backward,
}

/// A law on `offset..offset+probs.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePmf {
    pub offset: usize,
    pub probs: Vec<f64>,
}

impl SparsePmf {
    fn point(at: usize) -> Self {
        Self {
            offset: at,
            probs: vec![1.0],
        }
    }

    pub fn get(&self, j: usize) -> f64 {
        j.checked_sub(self.offset)
            .and_then(|i| self.probs.get(i))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(j, p)| j as f64 * p).sum()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().enumerate().map(move |(i, &p)| (self.offset + i, p))
    }

    /// Dense `0..=cap` with the mass above `cap` returned separately.
    pub fn to_capped(&self, cap: usize) -> StepPmf {
        let mut probs = vec![0.0; cap + 1];
        let mut tail = 0.0;
        for (j, p) in self.iter() {
            if j <= cap {
                probs[j] = p;
            } else {
                tail += p;
            }
        }
        StepPmf { probs, tail }
    }
}

/// Law on `0..=cap` plus the mass beyond `cap`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct StepPmf {
    pub probs: Vec<f64>,
    pub tail: f64,
}

impl StepPmf {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.tail
    }

    pub fn mean_lower_bound(&self) -> f64 {
        self.probs.iter().enumerate().map(|(j, p)| j as f64 * p).sum()
    }

    /// One `j,p` line per entry, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::from("j,p\n");
        for (j, p) in self.probs.iter().enumerate() {
            let _ = writeln!(out, "{j},{p:.16e}");
        }
        let _ = writeln!(out, "tail,{:.16e}", self.tail);
        out
    }
}

/// `NB(r, 1/2)`: fair-coin count of one outcome before the `r`-th of the other.
fn nb_half(r: u64) -> SparsePmf {
    if r == 0 {
        return SparsePmf::point(0);
    }
    let rf = r as f64;
    let mode = r - 1;
    // p(j+1)/p(j) = (j + r) / (2 (j + 1))
    let mut up = vec![1.0f64];
    let mut j = mode;
    loop {
        let next = up.last().unwrap() * (j as f64 + rf) / (2.0 * (j as f64 + 1.0));
        if next < NB_WINDOW_CUTOFF {
            break;
        }
        up.push(next);
        j += 1;
    }
    let mut down = Vec::new();
    let mut cur = 1.0f64;
    let mut j = mode;
    while j > 0 {
        cur *= 2.0 * j as f64 / (j as f64 - 1.0 + rf);
        if cur < NB_WINDOW_CUTOFF {
            break;
        }
        down.push(cur);
        j -= 1;
    }
    let offset = mode as usize - down.len();
    let mut probs: Vec<f64> = down.into_iter().rev().collect();
    probs.extend(up);
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    SparsePmf { offset, probs }
}

#[derive(Default, Debug, Clone)]
struct NbCache {
    windows: HashMap<u64, SparsePmf>,
}

impl NbCache {
    fn get(&mut self, r: u64) -> &SparsePmf {
        self.windows.entry(r).or_insert_with(|| nb_half(r))
    }
}

/// One-step law: count of "other" outcomes before `target` stopping outcomes,
/// where coin `i ≤ M` stops with probability `stop[i-1]` and later coins are fair.
fn step_law(target: u64, stop: &[f64], nb: &mut NbCache) -> SparsePmf {
    if target == 0 {
        return SparsePmf::point(0);
    }
    let m = stop.len();
    // alive[t] = P(t stopping outcomes among the coins so far, t < target)
    let width = (target as usize).min(m + 1);
    let mut alive = vec![0.0; width];
    alive[0] = 1.0;
    let mut absorbed = vec![0.0; m + 1];
    for (i, &q) in stop.iter().enumerate() {
        let mut next = vec![0.0; width];
        for t in 0..width.min(i + 1) {
            let mass = alive[t];
            if mass == 0.0 {
                continue;
            }
            next[t] += mass * (1.0 - q);
            if t + 1 == target as usize {
                absorbed[i - t] += mass * q;
            } else {
                next[t + 1] += mass * q;
            }
        }
        alive = next;
    }
    let mut lo = usize::MAX;
    let mut hi = 0usize;
    for (o, &p) in absorbed.iter().enumerate() {
        if p > 0.0 {
            lo = lo.min(o);
            hi = hi.max(o);
        }
    }
    for (t, &mass) in alive.iter().enumerate() {
        if mass > 0.0 && t <= m {
            let others = m - t;
            let w = nb.get(target - t as u64);
            lo = lo.min(others + w.offset);
            hi = hi.max(others + w.offset + w.probs.len() - 1);
        }
    }
    let mut probs = vec![0.0; hi + 1 - lo];
    for (o, &p) in absorbed.iter().enumerate() {
        if p > 0.0 {
            probs[o - lo] += p;
        }
    }
    for (t, &mass) in alive.iter().enumerate() {
        if mass > 0.0 && t <= m {
            let others = m - t;
            let w = nb.get(target - t as u64);
            let base = others + w.offset - lo;
            for (i, &p) in w.probs.iter().enumerate() {
                probs[base + i] += mass * p;
            }
        }
    }
    SparsePmf { offset: lo, probs }
}

fn stop_probabilities(side: Side, stack: &CookieStack) -> Vec<f64> {
    match side {
        Side::Forward => stack.probs().iter().map(|p| 1.0 - p).collect(),
        Side::Backward => stack.probs().to_vec(),
    }
}

/// Full one-step law of `U_1` (forward) or `V_1` (backward) from `level` under `stack`.
pub fn step_law_sparse(side: Side, level: u64, stack: &CookieStack) -> SparsePmf {
    let target = match side {
        Side::Forward => level,
        Side::Backward => level + 1,
    };
    step_law(target, &stop_probabilities(side, stack), &mut NbCache::default())
}

/// Law of `U_1` given `U_0 = u` under `stack`, on `0..=cap` plus tail mass.
pub fn forward_step_pmf(u: u64, stack: &CookieStack, cap: usize) -> StepPmf {
    step_law_sparse(Side::Forward, u, stack).to_capped(cap)
}

/// Law of `V_1` given `V_0 = v` under `stack`, on `0..=cap` plus tail mass.
pub fn backward_step_pmf(v: u64, stack: &CookieStack, cap: usize) -> StepPmf {
    step_law_sparse(Side::Backward, v, stack).to_capped(cap)
}

/// Memoised step laws for one spec and side.
struct LawTable<'a> {
    spec: &'a StackChainSpec,
    side: Side,
    stops: Vec<Vec<f64>>,
    nb: NbCache,
    laws: HashMap<(u64, usize), SparsePmf>,
}

impl<'a> LawTable<'a> {
    fn new(spec: &'a StackChainSpec, side: Side) -> Self {
        Self {
            spec,
            side,
            stops: spec.states().iter().map(|s| stop_probabilities(side, s)).collect(),
            nb: NbCache::default(),
            laws: HashMap::new(),
        }
    }

    fn kernel(&self) -> &'a [Vec<f64>] {
        match self.side {
            Side::Forward => self.spec.kernel(),
            Side::Backward => self.spec.reversed(),
        }
    }

    fn law(&mut self, level: u64, state: usize) -> &SparsePmf {
        let target = match self.side {
            Side::Forward => level,
            Side::Backward => level + 1,
        };
        let (stops, nb) = (&self.stops, &mut self.nb);
        self.laws
            .entry((level, state))
            .or_insert_with(|| step_law(target, &stops[state], nb))
    }
}

/// Mass on `(level ≤ L) × states` plus overflow.
#[derive(Clone, Debug)]
struct Mass {
    /// `by_state[r][v]`.
    by_state: Vec<Vec<f64>>,
    overflow: f64,
}

impl Mass {
    fn new(states: usize, cap: usize) -> Self {
        Self {
            by_state: vec![vec![0.0; cap + 1]; states],
            overflow: 0.0,
        }
    }

    fn live(&self) -> f64 {
        self.by_state.iter().flatten().sum()
    }
}

/// One step of the truncated chain.
fn propagate(table: &mut LawTable<'_>, from: &Mass, cap: usize) -> Mass {
    let n = from.by_state.len();
    let kernel = table.kernel();
    let mut to = Mass::new(n, cap);
    to.overflow = from.overflow;
    for r in 0..n {
        for (v, &mass) in from.by_state[r].iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (rp, &k) in kernel[r].iter().enumerate() {
                if k == 0.0 {
                    continue;
                }
                let w = mass * k;
                let law = table.law(v as u64, rp);
                let row = &mut to.by_state[rp];
                for (j, p) in law.iter() {
                    if j <= cap {
                        row[j] += w * p;
                    } else {
                        to.overflow += w * p;
                    }
                }
            }
        }
    }
    to
}

/// Row-stochastic truncation of the `(V, R)` chain to levels `0..=L`.
///
/// State `(v, r)` has index `v · |S| + r`; the last index is the overflow state.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedChainMatrix {
    pub level_cap: usize,
    pub num_states: usize,
    /// Sparse rows `(column, probability)`, overflow column included.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Per-row mass sent to the overflow state.
    pub overflow: Vec<f64>,
}

impl TruncatedChainMatrix {
    pub fn index(&self, level: usize, state: usize) -> usize {
        level * self.num_states + state
    }

    pub fn overflow_index(&self) -> usize {
        (self.level_cap + 1) * self.num_states
    }

    pub fn dim(&self) -> usize {
        self.overflow_index() + 1
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|e| e.1).sum()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().filter(|e| e.0 == j).map(|e| e.1).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.rows
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; d];
                for &(j, p) in row {
                    dense[j] += p;
                }
                dense
            })
            .collect()
    }

    /// Largest overflow over the rows with level at most `level`.
    pub fn max_overflow_up_to(&self, level: usize) -> f64 {
        let end = ((level.min(self.level_cap) + 1) * self.num_states).min(self.overflow.len());
        self.overflow[..end].iter().cloned().fold(0.0, f64::max)
    }

    /// `i,j,p` triples, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::from("i,j,p\n");
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                let _ = writeln!(out, "{i},{j},{p:.16e}");
            }
        }
        out
    }
}

/// Entries `K̃(r, r′) · P(V_1 = v′ | V_0 = v, stack r′)`.
pub fn build_vr_matrix(spec: &StackChainSpec, level_cap: usize) -> Result<TruncatedChainMatrix, OracleError> {
    build_chain_matrix(spec, Side::Backward, level_cap)
}

/// Truncated `(level, stack)` chain for either side.
pub fn build_chain_matrix(
    spec: &StackChainSpec,
    side: Side,
    level_cap: usize,
) -> Result<TruncatedChainMatrix, OracleError> {
    if level_cap < spec.height() {
        return Err(OracleError::CapTooSmall {
            cap: level_cap,
            overflow: f64::NAN,
            needed: spec.height(),
        });
    }
    let n = spec.num_states();
    let mut table = LawTable::new(spec, side);
    let kernel = table.kernel();
    let over = (level_cap + 1) * n;
    let mut rows = Vec::with_capacity(over + 1);
    let mut overflow = Vec::with_capacity(over + 1);
    for v in 0..=level_cap {
        for r in 0..n {
            let mut entries: Vec<(usize, f64)> = Vec::new();
            let mut spill = 0.0;
            for (rp, &k) in kernel[r].iter().enumerate() {
                if k == 0.0 {
                    continue;
                }
                let law = table.law(v as u64, rp);
                for (j, p) in law.iter() {
                    if j <= level_cap {
                        entries.push((j * n + rp, k * p));
                    } else {
                        spill += k * p;
                    }
                }
            }
            entries.sort_by_key(|e| e.0);
            if spill > 0.0 {
                entries.push((over, spill));
            }
            rows.push(entries);
            overflow.push(spill);
        }
    }
    rows.push(vec![(over, 1.0)]);
    overflow.push(0.0);
    Ok(TruncatedChainMatrix {
        level_cap,
        num_states: n,
        rows,
        overflow,
    })
}

/// Exact survival curve with its truncation error bound.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SurvivalCurve {
    /// `P(τ > t)` for `t = 0..=t_max`, overflow mass counted as surviving.
    pub survival: Vec<f64>,
    /// Overflow mass at each `t`; the true value lies in `[survival − bound, survival]`.
    pub error_bound: Vec<f64>,
}

/// `P(τ_{(0,s*)} > t)` for the chain started at `(0, s*)`, with `τ ≥ 1`.
pub fn exact_survival_tail(
    matrix: &TruncatedChainMatrix,
    anchor: usize,
    t_max: usize,
) -> Result<SurvivalCurve, OracleError> {
    let target = matrix.index(0, anchor);
    let over = matrix.overflow_index();
    let mut dist = vec![0.0; matrix.dim()];
    dist[target] = 1.0;
    let mut survival = vec![1.0];
    let mut error_bound = vec![0.0];
    for _ in 0..t_max {
        let mut next = vec![0.0; matrix.dim()];
        for (i, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for &(j, p) in &matrix.rows[i] {
                next[j] += mass * p;
            }
        }
        next[target] = 0.0;
        survival.push(next.iter().sum());
        error_bound.push(next[over]);
        dist = next;
    }
    let bound = *error_bound.last().unwrap();
    if bound > SURVIVAL_OVERFLOW_TOLERANCE {
        return Err(OracleError::CapTooSmall {
            cap: matrix.level_cap,
            overflow: bound,
            needed: 2 * matrix.level_cap,
        });
    }
    Ok(SurvivalCurve { survival, error_bound })
}

/// Law of the chain's level at the first return of the stacks to the anchor.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct HattedLaw {
    pub start: u64,
    pub side: Side,
    /// `probs[y] = P(Ẑ_1 = y)` for `y ≤ L`.
    pub probs: Vec<f64>,
    /// Mass that left `0..=L` before the return.
    pub overflow: f64,
    pub level_cap: usize,
}

impl HattedLaw {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.overflow
    }
}

/// One-step law of `Û` or `V̂` from level `z`, by iterating the truncated
/// chain with absorption at anchor visits until the remaining mass is below
/// `1e-15`.
pub fn exact_hatted_transition(
    z: u64,
    side: Side,
    spec: &StackChainSpec,
    level_cap: usize,
) -> Result<HattedLaw, OracleError> {
    if (z as usize) > level_cap {
        return Err(OracleError::CapTooSmall {
            cap: level_cap,
            overflow: 1.0,
            needed: z as usize,
        });
    }
    let anchor = spec.anchor();
    let mut table = LawTable::new(spec, side);
    let mut mass = Mass::new(spec.num_states(), level_cap);
    mass.by_state[anchor][z as usize] = 1.0;
    let mut probs = vec![0.0; level_cap + 1];
    let mut steps = 0;
    loop {
        let mut next = propagate(&mut table, &mass, level_cap);
        for (acc, p) in probs.iter_mut().zip(&next.by_state[anchor]) {
            *acc += p;
        }
        next.by_state[anchor].iter_mut().for_each(|p| *p = 0.0);
        mass = next;
        steps += 1;
        let remaining = mass.live();
        if remaining < ABSORPTION_TOLERANCE {
            break;
        }
        if steps >= MAX_ABSORPTION_STEPS {
            return Err(OracleError::SolveFailure { remaining, steps });
        }
    }
    Ok(HattedLaw {
        start: z,
        side,
        probs,
        overflow: mass.overflow,
        level_cap,
    })
}

/// Drift and diffusivity of the forward hatted chain at one level.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ThetaValue {
    pub x: u64,
    /// `ρ(x) = E_x(Û_1 − x)`.
    pub rho: f64,
    /// `ν(x) = E_x[(Û_1 − x)²] / x`.
    pub nu: f64,
    /// `θ(x) = 2ρ(x) / ν(x)`.
    pub theta: f64,
    pub level_cap: usize,
    pub overflow: f64,
}

/// Default level cap for `θ(x)`: `max(4x, 50M)`.
pub fn theta_level_cap(x: u64, height: usize) -> usize {
    (4 * x as usize).max(50 * height)
}

/// `ρ`, `ν` and `θ` at `x` from the exact hatted law. Without an explicit cap
/// the cap starts at `max(4x, 50M)` and doubles until the overflow is below
/// `1e-8` (at most six doublings).
pub fn exact_theta(x: u64, spec: &StackChainSpec, level_cap: Option<usize>) -> Result<ThetaValue, OracleError> {
    if x == 0 {
        return Err(OracleError::BadLevel);
    }
    let (mut cap, fixed) = match level_cap {
        Some(c) => (c, true),
        None => (theta_level_cap(x, spec.height()), false),
    };
    let mut doublings = 0;
    let law = loop {
        let law = exact_hatted_transition(x, Side::Forward, spec, cap)?;
        if law.overflow < HATTED_OVERFLOW_TOLERANCE {
            break law;
        }
        if fixed || doublings == 6 {
            return Err(OracleError::CapTooSmall {
                cap,
                overflow: law.overflow,
                needed: 2 * cap,
            });
        }
        cap *= 2;
        doublings += 1;
    };
    let xf = x as f64;
    let (mut rho, mut second) = (0.0, 0.0);
    for (y, &p) in law.probs.iter().enumerate() {
        let d = y as f64 - xf;
        rho += d * p;
        second += d * d * p;
    }
    let nu = second / xf;
    Ok(ThetaValue {
        x,
        rho,
        nu,
        theta: 2.0 * rho / nu,
        level_cap: cap,
        overflow: law.overflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{builtin_environment, validate_spec, InitialField, KernelField, RawSpec};
    use nalgebra::{DMatrix, DVector};
    use serde_json::json;

    fn stack(p: &[f64]) -> CookieStack {
        CookieStack::new(p.to_vec()).unwrap()
    }

    /// Enumerates all coin sequences of length ≤ `depth` by brute force.
    fn brute_force(side: Side, level: u64, probs: &[f64], depth: usize, cap: usize) -> Vec<f64> {
        let mut out = vec![0.0; cap + 1];
        // (successes, failures, probability)
        let mut frontier = vec![(0u64, 0u64, 1.0f64)];
        let target = match side {
            Side::Forward => level,
            Side::Backward => level + 1,
        };
        if target == 0 {
            out[0] = 1.0;
            return out;
        }
        for i in 1..=depth {
            let p = probs.get(i - 1).copied().unwrap_or(0.5);
            let mut next = Vec::new();
            for (s, f, w) in frontier {
                for (succ, q) in [(true, p), (false, 1.0 - p)] {
                    let (s2, f2) = if succ { (s + 1, f) } else { (s, f + 1) };
                    let (stops, other) = match side {
                        Side::Forward => (f2, s2),
                        Side::Backward => (s2, f2),
                    };
                    if stops == target {
                        if (other as usize) <= cap {
                            out[other as usize] += w * q;
                        }
                    } else {
                        next.push((s2, f2, w * q));
                    }
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn forward_single_cookie_values() {
        let pmf = forward_step_pmf(1, &stack(&[0.75]), 30);
        assert!((pmf.probs[0] - 0.25).abs() < 1e-15);
        assert!((pmf.probs[1] - 0.375).abs() < 1e-15);
        assert!((pmf.probs[2] - 0.1875).abs() < 1e-15);
        for j in 1..30 {
            assert!((pmf.probs[j] - 0.75 * 0.5f64.powi(j as i32)).abs() < 1e-15);
        }
        let bf = brute_force(Side::Forward, 1, &[0.75], 20, 10);
        for j in 0..=10 {
            assert!((bf[j] - pmf.probs[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_single_cookie_values() {
        let pmf = backward_step_pmf(0, &stack(&[0.75]), 30);
        assert!((pmf.probs[0] - 0.75).abs() < 1e-15);
        assert!((pmf.probs[1] - 0.125).abs() < 1e-15);
        assert!((pmf.probs[2] - 0.0625).abs() < 1e-15);
        let placebo = backward_step_pmf(0, &CookieStack::placebo(3), 40);
        for j in 0..40 {
            assert!((placebo.probs[j] - 0.5f64.powi(j as i32 + 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_is_absorbing_forward() {
        let pmf = forward_step_pmf(0, &stack(&[0.9, 0.1]), 5);
        assert_eq!(pmf.probs[0], 1.0);
        assert_eq!(pmf.total(), 1.0);
    }

    #[test]
    fn matches_brute_force_on_mixed_stacks() {
        let probs = [0.8, 0.3, 0.65];
        for side in [Side::Forward, Side::Backward] {
            for level in 0..5u64 {
                let exact = step_law_sparse(side, level, &stack(&probs)).to_capped(8);
                let bf = brute_force(side, level, &probs, 26, 8);
                for j in 0..=8 {
                    assert!((exact.probs[j] - bf[j]).abs() < 1e-6, "{side:?} {level} {j}");
                }
            }
        }
    }

    #[test]
    fn pmfs_sum_to_one() {
        for level in [0u64, 1, 3, 10, 57, 400, 3000] {
            for side in [Side::Forward, Side::Backward] {
                let pmf = step_law_sparse(side, level, &stack(&[0.9, 0.2, 0.6]));
                assert!((pmf.total() - 1.0).abs() < 1e-12, "{side:?} {level}");
                let capped = pmf.to_capped(level as usize + 10);
                assert!((capped.total() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_binomial_window_matches_closed_form() {
        use statrs::function::beta::beta_reg;
        use statrs::function::gamma::ln_gamma;
        for r in [1u64, 2, 7, 40, 300] {
            let w = nb_half(r);
            for j in [0usize, 1, r as usize, 2 * r as usize] {
                let exact = (ln_gamma((j as u64 + r) as f64)
                    - ln_gamma(r as f64)
                    - ln_gamma(j as f64 + 1.0)
                    - (j as f64 + r as f64) * std::f64::consts::LN_2)
                    .exp();
                let mode = w.probs.iter().cloned().fold(0.0, f64::max);
                if exact < 1e-28 * mode {
                    assert!(w.get(j) < 1e-27 * mode, "r={r} j={j}");
                    continue;
                }
                assert!((w.get(j) - exact).abs() < 1e-10 * exact, "r={r} j={j}");
            }
            // P(NB > k) = I_{1/2}(k + 1, r)
            let k = r as usize;
            let tail: f64 = w.iter().filter(|&(j, _)| j > k).map(|e| e.1).sum();
            assert!((tail - beta_reg(k as f64 + 1.0, r as f64, 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_identities_above_the_stack() {
        let s = stack(&[0.9, 0.3, 0.7]);
        let d = s.drift();
        for level in 3..=8u64 {
            let f = step_law_sparse(Side::Forward, level, &s);
            assert!((f.mean() - level as f64 - d).abs() < 1e-9);
            let b = step_law_sparse(Side::Backward, level, &s);
            assert!((b.mean() - level as f64 - (1.0 - d)).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_tail_mass_is_small() {
        use statrs::function::beta::beta_reg;
        let placebo = backward_step_pmf(10, &stack(&[0.5]), 50);
        let exact = beta_reg(51.0, 11.0, 0.5);
        assert!((placebo.tail - exact).abs() < 1e-12 * exact.max(1e-300) + 1e-20);
        for p in [0.05, 0.5, 0.95] {
            assert!(backward_step_pmf(10, &stack(&[p, p, p]), 50).tail < 1e-6);
            assert!(backward_step_pmf(10, &stack(&[p, p, p]), 80).tail < 1e-9);
        }
    }

    fn placebo_spec() -> StackChainSpec {
        builtin_environment("placebo", &json!(null)).unwrap()
    }

    #[test]
    fn placebo_matrix_by_hand() {
        let m = build_vr_matrix(&placebo_spec(), 2).unwrap();
        assert_eq!(m.dim(), 4);
        let dense = m.to_dense();
        // V_1 | V_0 = v ~ NB(v+1, 1/2): P(j) = C(j+v, j) 2^{-(j+v+1)}
        let expected = [
            [0.5, 0.25, 0.125, 0.125],
            [0.25, 0.25, 3.0 / 16.0, 5.0 / 16.0],
            [0.125, 3.0 / 16.0, 3.0 / 16.0, 0.5],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((dense[i][j] - expected[i][j]).abs() < 1e-14, "({i},{j})");
            }
        }
    }

    #[test]
    fn matrix_rows_are_stochastic() {
        let spec = builtin_environment("two_state", &json!({"kernel": [[0.7, 0.3], [0.2, 0.8]]})).unwrap();
        let m = build_vr_matrix(&spec, 40).unwrap();
        for i in 0..m.dim() {
            assert!((m.row_sum(i) - 1.0).abs() < 1e-12);
        }
        // entries are K̃(r, r') · pmf
        let law = backward_step_pmf(3, spec.stack(1), 40);
        let e = m.entry(m.index(3, 0), m.index(5, 1));
        assert!((e - spec.reversed()[0][1] * law.probs[5]).abs() < 1e-15);
    }

    #[test]
    fn cap_below_height_is_refused() {
        let spec = builtin_environment("placebo", &json!({"M": 3})).unwrap();
        assert!(matches!(
            build_vr_matrix(&spec, 2),
            Err(OracleError::CapTooSmall { .. })
        ));
    }

    #[test]
    fn placebo_survival_first_steps() {
        let m = build_vr_matrix(&placebo_spec(), 200).unwrap();
        let curve = exact_survival_tail(&m, 0, 3).unwrap();
        assert_eq!(curve.survival[0], 1.0);
        assert!((curve.survival[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn hatted_law_single_state_is_step_law() {
        let spec = builtin_environment("placebo", &json!({"M": 2})).unwrap();
        let law = exact_hatted_transition(5, Side::Backward, &spec, 80).unwrap();
        let step = backward_step_pmf(5, spec.stack(0), 80);
        for (a, b) in law.probs.iter().zip(&step.probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hatted_law_sums_to_one() {
        let spec = builtin_environment("two_state", &json!(null)).unwrap();
        for side in [Side::Forward, Side::Backward] {
            let law = exact_hatted_transition(5, side, &spec, 200).unwrap();
            assert!((law.total() - 1.0).abs() < 1e-8);
        }
    }

    /// Independent route: dense absorbing-chain solve `(I − Q)⁻¹ R`.
    #[test]
    fn hatted_law_matches_dense_absorbing_solve() {
        let raw = RawSpec {
            name: None,
            height: 1,
            states: vec![vec![0.8], vec![0.35], vec![0.6]],
            kernel: KernelField::Rows(vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]]),
            initial: InitialField::Keyword("stationary".into()),
        };
        let spec = validate_spec(&raw).unwrap();
        let cap = 25usize;
        let z = 4u64;
        for side in [Side::Forward, Side::Backward] {
            let iterative = exact_hatted_transition(z, side, &spec, cap).unwrap();
            let m = build_chain_matrix(&spec, side, cap).unwrap();
            let dense = m.to_dense();
            let s = spec.anchor();
            let n = spec.num_states();
            // transient states: (v, r) with r ≠ s*, plus overflow kept absorbing separately
            let transient: Vec<usize> = (0..=cap)
                .flat_map(|v| (0..n).filter(move |&r| r != s).map(move |r| v * n + r))
                .collect();
            let t = transient.len();
            let q = DMatrix::from_fn(t, t, |i, j| dense[transient[i]][transient[j]]);
            let a = DMatrix::identity(t, t) - q;
            let lu = a.lu();
            // first step from (z, s*), then absorption at anchor columns
            let start = dense[m.index(z as usize, s)].clone();
            for y in 0..=cap {
                let col = m.index(y, s);
                let r_vec = DVector::from_fn(t, |i, _| dense[transient[i]][col]);
                let h = lu.solve(&r_vec).unwrap();
                let via_transient: f64 = transient.iter().enumerate().map(|(i, &k)| start[k] * h[i]).sum();
                let expected = start[col] + via_transient;
                assert!((iterative.probs[y] - expected).abs() < 1e-12, "{side:?} y={y}");
            }
        }
    }

    #[test]
    fn theta_of_placebo_vanishes() {
        let spec = placebo_spec();
        let t = exact_theta(400, &spec, None).unwrap();
        assert!(t.rho.abs() < 1e-9);
        assert!((t.nu - 2.0).abs() < 1e-9);
        assert!(t.theta.abs() < 1e-9);
    }

    #[test]
    fn rho_and_nu_approach_lemma_values() {
        let spec = builtin_environment("two_state", &json!(null)).unwrap();
        let mu = spec.anchor_mean_return();
        let t = exact_theta(200, &spec, None).unwrap();
        assert!((t.rho - spec.delta() * mu).abs() < 1e-6, "rho = {}", t.rho);
        assert!((t.nu - 2.0 * mu).abs() < 0.05, "nu = {}", t.nu);
    }

    #[test]
    fn text_export_has_17_digits() {
        let pmf = backward_step_pmf(0, &stack(&[0.75]), 2);
        let text = pmf.to_text();
        assert!(text.contains("0,7.5000000000000000e-1"));
    }
}
