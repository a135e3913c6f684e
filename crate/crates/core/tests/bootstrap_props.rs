mod common;

use proptest::prelude::*;

use tailhedge::bootstrap::{
    build_scenarios, compound_returns, resample, resample_blocks, resample_indices, BootstrapConfig, BootstrapMethod,
};

fn method() -> impl Strategy<Value = BootstrapMethod> {
    prop_oneof![
        Just(BootstrapMethod::Naive),
        Just(BootstrapMethod::SimpleBlock),
        Just(BootstrapMethod::MovingBlock),
        Just(BootstrapMethod::Stationary),
    ]
}

proptest! {
    #[test]
    fn resample_has_requested_length_and_only_source_values(
        source in prop::collection::vec(-1.0f64..1.0, 10..200),
        m in method(),
        l in 1usize..10,
        out_len in 1usize..500,
        seed in any::<u64>(),
    ) {
        let cfg = BootstrapConfig::new(m, l, out_len, seed);
        let out = resample(&source, &cfg).unwrap();
        prop_assert_eq!(out.len(), out_len);
        for v in &out {
            prop_assert!(source.iter().any(|s| s.to_bits() == v.to_bits()));
        }
        prop_assert_eq!(out, resample(&source, &cfg).unwrap());
    }

    #[test]
    fn blocks_cover_output_and_stay_in_range(
        n in 10usize..300,
        m in method(),
        l in 1usize..10,
        out_len in 1usize..600,
        seed in any::<u64>(),
    ) {
        let cfg = BootstrapConfig::new(m, l, out_len, seed);
        let blocks = resample_blocks(n, &cfg, &mut common::rng(seed)).unwrap();
        prop_assert_eq!(blocks.iter().map(|b| b.len).sum::<usize>(), out_len);
        for b in &blocks {
            prop_assert!(b.start < n && b.len >= 1);
        }
        let idx = resample_indices(n, &cfg, &mut common::rng(seed)).unwrap();
        prop_assert!(idx.iter().all(|i| *i < n));
    }

    #[test]
    fn scenarios_resample_assets_jointly(
        seed in any::<u64>(),
        m in method(),
        tau in 1usize..15,
    ) {
        // The second asset is an exact function of the first, so joint rows
        // must preserve the relation.
        let a: Vec<f64> = (0..120).map(|i| (i as f64 * 0.37).sin() * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|x| -2.0 * x).collect();
        let cfg = BootstrapConfig::new(m, 5, tau, seed);
        let sets = build_scenarios(&[&a, &b], &[40, 80], 50, tau, &cfg).unwrap();
        prop_assert_eq!(sets.len(), 2);
        for s in &sets {
            prop_assert_eq!(s.m, 50);
            for j in 0..s.m {
                for (x, y) in s.path(0, j).iter().zip(s.path(1, j)) {
                    prop_assert_eq!(*y, -2.0 * x);
                }
            }
        }
    }
}

#[test]
fn single_step_compounding_is_exact() {
    for r in [-0.5, -1e-3, 0.0, 0.013, 0.25] {
        assert_eq!(compound_returns(&[r]), r);
    }
    let two = compound_returns(&[0.1, -0.1]);
    assert!((two - (1.1 * 0.9 - 1.0)).abs() < 1e-15);
}

#[test]
fn rows_do_not_depend_on_other_anchors() {
    let a: Vec<f64> = (0..200).map(|i| (i as f64).cos() * 0.02).collect();
    let cfg = BootstrapConfig::new(BootstrapMethod::Stationary, 7, 10, 9);
    let both = build_scenarios(&[&a], &[50, 150], 30, 10, &cfg).unwrap();
    let one = build_scenarios(&[&a], &[150], 30, 10, &cfg).unwrap();
    assert_eq!(both[1], one[0]);
}

#[test]
fn invalid_configs_are_rejected() {
    let src = vec![0.0; 20];
    assert!(resample(&src, &BootstrapConfig::new(BootstrapMethod::MovingBlock, 0, 10, 1)).is_err());
    assert!(resample(&src, &BootstrapConfig::new(BootstrapMethod::MovingBlock, 21, 10, 1)).is_err());
    assert!(resample(&[], &BootstrapConfig::new(BootstrapMethod::Naive, 1, 10, 1)).is_err());
}
