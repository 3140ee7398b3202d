#![allow(dead_code)]

use erw_core::env::{validate_spec, RawSpec, StackChainSpec};
use serde_json::json;

pub fn spec_from(name: &str, states: Vec<Vec<f64>>, kernel: Vec<Vec<f64>>) -> StackChainSpec {
    let height = states[0].len();
    let text = json!({
        "name": name,
        "M": height,
        "states": states,
        "kernel": kernel,
        "initial": "stationary",
    })
    .to_string();
    validate_spec(&RawSpec::from_json(&text).expect("fixture parses")).expect("fixture validates")
}

/// `δ = 2.5`: two stacks of height 3, `π = (2/3, 1/3)`.
pub fn stable_regime_spec() -> StackChainSpec {
    spec_from(
        "stable_regime",
        vec![vec![0.95; 3], vec![0.85; 3]],
        vec![vec![0.7, 0.3], vec![0.6, 0.4]],
    )
}

/// `δ = 0`: opposite single cookies, sticky symmetric kernel.
pub fn recurrent_symmetric_spec() -> StackChainSpec {
    spec_from(
        "recurrent_symmetric",
        vec![vec![0.8], vec![0.2]],
        vec![vec![0.9, 0.1], vec![0.1, 0.9]],
    )
}

/// `δ = 1.5`: five left-right cookie pairs followed by thirty weak pushes.
pub fn sub_ballistic_spec() -> StackChainSpec {
    let mut stack = Vec::new();
    for _ in 0..5 {
        stack.extend([0.001, 0.999]);
    }
    stack.extend([0.525; 30]);
    spec_from("sub_ballistic", vec![stack], vec![vec![1.0]])
}

/// `δ = 3`: strong and weak stacks drawn i.i.d. with weights `25/44, 19/44`.
pub fn heavy_tail_spec() -> StackChainSpec {
    let row = vec![25.0 / 44.0, 19.0 / 44.0];
    spec_from("heavy_tail", vec![vec![0.99; 5], vec![0.55; 5]], vec![row.clone(), row])
}

/// `δ = 4`.
pub fn log_gaussian_spec() -> StackChainSpec {
    spec_from("log_gaussian", vec![vec![0.9; 5]], vec![vec![1.0]])
}

/// `δ = 6`.
pub fn gaussian_regime_spec() -> StackChainSpec {
    spec_from("gaussian_regime", vec![vec![0.8; 10]], vec![vec![1.0]])
}

/// Total variation distance between an empirical histogram and a law.
pub fn tv_distance(counts: &[u64], total: u64, law: &[f64]) -> f64 {
    let len = counts.len().max(law.len());
    (0..len)
        .map(|j| {
            let e = counts.get(j).copied().unwrap_or(0) as f64 / total as f64;
            (e - law.get(j).copied().unwrap_or(0.0)).abs()
        })
        .sum::<f64>()
        / 2.0
}

pub fn histogram(values: impl IntoIterator<Item = u64>) -> Vec<u64> {
    let mut h = Vec::new();
    for v in values {
        let v = v as usize;
        if v >= h.len() {
            h.resize(v + 1, 0);
        }
        h[v] += 1;
    }
    h
}
