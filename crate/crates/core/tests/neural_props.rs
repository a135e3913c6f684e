mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use tailhedge::bootstrap::{heuristic_block_length, BootstrapConfig, BootstrapMethod};
use tailhedge::marketdata::{simulate_paths, PriceSeries, SyntheticSpec};
use tailhedge::neuralopt::{
    cvar_loss, scenario_losses, train, AnchorPanel, HedgePolicy, TrainConfig, TrainingBatch, TrainingData,
};
use tailhedge::portfolio::CostSpec;

fn panels(seed: u64, n_anchor: usize, m: usize, w: usize) -> Vec<AnchorPanel> {
    let mut r = common::rng(seed);
    (0..n_anchor)
        .map(|a| AnchorPanel {
            origin_index: 10 * a,
            features: common::normals(&mut r, w),
            ds_primary: common::normals(&mut r, m),
            ds_hedge: vec![common::normals(&mut r, m)],
            hedge_prices: vec![100.0],
        })
        .collect()
}

fn cost() -> CostSpec {
    CostSpec::new(0.001, 0.0).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_ignores_scenario_and_anchor_order(seed in any::<u64>(), arch in 0usize..3) {
        let hidden: &[usize] = [&[][..], &[8], &[8, 8]][arch];
        let policy = HedgePolicy::new(hidden, 6, 1, seed).unwrap();
        let base = panels(seed, 4, 40, 6);
        let batch = TrainingBatch::new(base.clone(), 1.0, 0.9, cost()).unwrap();
        let reference = cvar_loss(&policy, &batch).unwrap();

        let mut r = common::rng(seed ^ 1);
        let mut shuffled = base;
        for p in &mut shuffled {
            let mut perm: Vec<usize> = (0..p.m()).collect();
            perm.shuffle(&mut r);
            p.ds_primary = perm.iter().map(|&j| p.ds_primary[j]).collect();
            p.ds_hedge[0] = perm.iter().map(|&j| p.ds_hedge[0][j]).collect();
        }
        shuffled.shuffle(&mut r);
        let batch = TrainingBatch::new(shuffled, 1.0, 0.9, cost()).unwrap();
        let other = cvar_loss(&policy, &batch).unwrap();
        prop_assert_eq!(reference.loss, other.loss);
        prop_assert_eq!(&reference.panel_cvar, &other.panel_cvar);
        prop_assert!(max_abs_diff(&reference.grads.to_flat(), &other.grads.to_flat()) <= 1e-12);
    }

    #[test]
    fn extreme_tail_sizes_give_max_and_mean(seed in any::<u64>(), m in 2usize..200) {
        let policy = HedgePolicy::new(&[4], 5, 1, seed).unwrap();
        let p = panels(seed, 1, m, 5);
        let h = policy.act(&p[0].features).unwrap();
        let losses = scenario_losses(&p[0], 1.0, &h, 0.0);
        let zero = CostSpec::default();

        // k = 1
        let a = (m as f64 - 0.5) / m as f64;
        let top = TrainingBatch::new(p.clone(), 1.0, a, zero).unwrap();
        prop_assert_eq!(top.k(), 1);
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(cvar_loss(&policy, &top).unwrap().loss, max);

        // k = m
        let all = TrainingBatch::new(p, 1.0, 0.5 / m as f64, zero).unwrap();
        prop_assert_eq!(all.k(), m);
        let mean = common::mean(&losses);
        prop_assert!((cvar_loss(&policy, &all).unwrap().loss - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }
}

fn gbm_prices(seed: u64, steps: usize, sigma: f64) -> PriceSeries {
    simulate_paths(&SyntheticSpec::gbm(0.05, sigma, steps, 1.0 / 252.0, seed), 1).unwrap().remove(0)
}

fn self_hedge(px: PriceSeries, hidden: &[usize], iterations: usize, seed: u64) -> Vec<f64> {
    let data = TrainingData::self_hedge(px);
    let anchors = data.default_anchors(32);
    let boot = BootstrapConfig::new(BootstrapMethod::MovingBlock, heuristic_block_length(data.n_prices() - 1), 1, seed);
    let cfg = TrainConfig { seed, iterations, scenarios: 1000, ..TrainConfig::default() };
    let policy = HedgePolicy::new(hidden, 32, 1, seed).unwrap();
    train(&policy, &data, &anchors, &cfg, &boot).unwrap().losses
}

#[test]
fn flat_history_trains_to_a_flat_zero_loss() {
    let px = gbm_prices(1, 200, 0.0);
    // Zero volatility still leaves the drift; rebuild a constant series.
    let flat = PriceSeries::new("flat", px.dates().to_vec(), vec![100.0; px.len()]).unwrap();
    let losses = self_hedge(flat, &[8], 10, 1);
    assert!(losses.iter().all(|l| *l == 0.0), "{losses:?}");
}

#[test]
fn identical_seeds_give_identical_histories() {
    let a = self_hedge(gbm_prices(2, 300, 0.2), &[8, 8], 10, 4);
    let b = self_hedge(gbm_prices(2, 300, 0.2), &[8, 8], 10, 4);
    assert_eq!(a, b);
    let c = self_hedge(gbm_prices(2, 300, 0.2), &[8, 8], 10, 5);
    assert_ne!(a, c);
}

#[test]
fn moving_average_of_loss_does_not_increase() {
    let px = gbm_prices(1, 600, 0.2);
    for hidden in [&[][..], &[32], &[32, 32], &[32, 32, 32]] {
        let losses = self_hedge(px.clone(), hidden, 50, 1);
        let ma: Vec<f64> = losses.windows(10).map(common::mean).collect();
        for (i, w) in ma.windows(2).enumerate() {
            assert!(w[1] <= w[0], "{hidden:?}: moving average rises at {i}: {} -> {}\n{losses:?}", w[0], w[1]);
        }
    }
}

#[test]
fn policy_json_survives_a_file_round_trip() {
    let mut p = HedgePolicy::new(&[16, 8], 32, 1, 3).unwrap();
    let mut r = common::rng(3);
    for v in p.params.values_mut() {
        *v += r.random_range(-1.0..1.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    std::fs::write(&path, p.to_json().unwrap()).unwrap();
    let back = HedgePolicy::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, p);
    assert!(HedgePolicy::from_json("{\"spec\": 1}").is_err());
}

#[test]
fn rollback_keeps_the_history_non_increasing() {
    let px = gbm_prices(6, 400, 0.3);
    let data = TrainingData::self_hedge(px);
    let anchors = data.default_anchors(32);
    let boot = BootstrapConfig::new(BootstrapMethod::MovingBlock, 7, 1, 6);
    let policy = HedgePolicy::new(&[16, 16], 32, 1, 6).unwrap();
    let cfg = TrainConfig { seed: 6, iterations: 40, scenarios: 300, ..TrainConfig::default() };
    let out = train(&policy, &data, &anchors, &cfg, &boot).unwrap();
    assert!(out.losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.losses);
    assert!(out.final_loss <= *out.losses.last().unwrap());

    // Without rollback the same run is plain Adam and does overshoot.
    let plain = TrainConfig { backoff: 1.0, ..cfg.clone() };
    let raw = train(&policy, &data, &anchors, &plain, &boot).unwrap();
    assert_eq!(raw.losses[..2], out.losses[..2]);
    assert!(raw.losses.windows(2).any(|w| w[1] > w[0]));
    assert!(TrainConfig { backoff: 0.0, ..cfg }.validate().is_err());
}
