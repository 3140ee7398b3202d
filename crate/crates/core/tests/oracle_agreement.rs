mod common;

use common::{histogram, log_gaussian_spec, recurrent_symmetric_spec, stable_regime_spec, tv_distance};
use erw_core::batch::run_batch;
use erw_core::branching::{coin_chain, hatted_one_step_samples, renewal_decompose, survival_episode, ChainKind};
use erw_core::env::{builtin_environment, TwoSidedMode};
use erw_core::oracle::{build_vr_matrix, exact_hatted_transition, exact_survival_tail, exact_theta, Side};
use erw_core::walk::{
    run_walk, up_crossings_before_return, velocity_estimate, BatchOptions, CoinField, StopRule, WalkOptions,
};

#[test]
fn anchor_return_law_matches_samples() {
    let spec = builtin_environment("two_state", &serde_json::Value::Null).unwrap();
    for side in [Side::Forward, Side::Backward] {
        let z = 10;
        let law = exact_hatted_transition(z, side, &spec, 400).unwrap();
        assert!((law.total() - 1.0).abs() < 1e-12);
        let draws = 200_000;
        let samples: Vec<u64> = hatted_one_step_samples(side, &spec, z, draws, 17, None)
            .into_iter()
            .flatten()
            .collect();
        assert_eq!(samples.len() as u64, draws);
        let tv = tv_distance(&histogram(samples.iter().copied()), draws, &law.probs) + law.overflow / 2.0;
        assert!(tv < 0.01, "{side:?}: tv = {tv}");
    }
}

#[test]
fn return_time_survival_matches_samples() {
    let spec = stable_regime_spec();
    let matrix = build_vr_matrix(&spec, 200).unwrap();
    let curve = exact_survival_tail(&matrix, spec.anchor(), 30).unwrap();
    let episodes = 100_000u64;
    let sigma: Vec<u64> = run_batch(episodes, 5, None, |_, s| survival_episode(&spec, s, 1_000_000).sigma0);
    for t in [1usize, 2, 5, 10, 20, 30] {
        let p = curve.survival[t];
        let freq = sigma.iter().filter(|&&x| x as usize > t).count() as f64 / episodes as f64;
        let se = (p * (1.0 - p) / episodes as f64).sqrt();
        assert!((freq - p).abs() <= 4.0 * se + 1e-12, "t = {t}: {freq} vs {p}");
    }
}

#[test]
fn theta_approaches_delta() {
    let spec = builtin_environment("two_state", &serde_json::Value::Null).unwrap();
    let near = exact_theta(50, &spec, None).unwrap();
    let far = exact_theta(400, &spec, None).unwrap();
    let delta = spec.delta();
    assert!((far.theta - delta).abs() < (near.theta - delta).abs() + 1e-3);
    assert!((far.theta - delta).abs() < 0.05, "theta(400) = {}", far.theta);
}

#[test]
fn walk_upcrossings_follow_the_forward_chain() {
    let spec = recurrent_symmetric_spec();
    let mut compared = 0;
    for seed in 0..500u64 {
        let mut coins = CoinField::from_seed(&spec, seed, TwoSidedMode::Strict);
        let opts = WalkOptions {
            step_cap: 200_000,
            record_positions: true,
        };
        let path = run_walk(&mut coins, 1, StopRule::ReturnToZero, opts).unwrap();
        let ups = up_crossings_before_return(&path).unwrap();
        let mut coins = CoinField::from_seed(&spec, seed, TwoSidedMode::Strict);
        let chain = coin_chain(&mut coins, ChainKind::Forward, 1, ups.len()).unwrap();
        for (k, &u) in ups.iter().enumerate() {
            if path.truncated {
                assert!(u <= chain[k + 1], "seed {seed} level {}", k + 1);
            } else {
                assert_eq!(u, chain[k + 1], "seed {seed} level {}", k + 1);
            }
        }
        compared += usize::from(!path.truncated);
    }
    assert!(compared > 450);
}

#[test]
fn renewal_speed_matches_walk_speed() {
    let spec = log_gaussian_spec();
    let renewal = renewal_decompose(&spec, 200_000, 3, 10_000_000).unwrap();
    let v = renewal.velocity().expect("finite area mean");
    let walk = velocity_estimate(&spec, 100_000, 40, 3, &BatchOptions::default()).unwrap();
    assert!((walk.mean - v).abs() / v < 0.02, "walk {} renewal {v}", walk.mean);
}
