use proptest::prelude::*;

use tailhedge::portfolio::{
    decompose_return, explicit_costs, hedged_return, hedged_return_same_asset, loss_variable, CostSpec, Holdings,
};

fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.1f64..10.0, n),
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(1.0f64..200.0, n),
        prop::collection::vec(-0.5f64..0.5, n),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn three_way_split_sums_to_value_change((n, dn, s, ds_rel) in (1usize..6).prop_flat_map(vecs)) {
        let ds: Vec<f64> = s.iter().zip(&ds_rel).map(|(p, r)| p * r).collect();
        let d = decompose_return(&n, &dn, &s, &ds).unwrap();
        let sum = (d.unrealized + d.realized_cashflow + d.implicit_costs) / d.initial_value;
        prop_assert!(close(sum, d.total_return));
    }

    #[test]
    fn six_way_split_and_same_asset_form_agree(
        (n_c, dn_c, s, ds_rel) in (1usize..5).prop_flat_map(vecs),
        h in prop::collection::vec(-3.0f64..3.0, 5),
        dh in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let k = n_c.len();
        let (n_h, dn_h) = (h[..k].to_vec(), dh[..k].to_vec());
        let ds: Vec<f64> = s.iter().zip(&ds_rel).map(|(p, r)| p * r).collect();
        let v0: f64 = n_c.iter().zip(&n_h).zip(&s).map(|((a, b), p)| (a + b) * p).sum();
        prop_assume!(v0.abs() > 1e-3);
        let holdings = Holdings::new(n_c.clone(), n_h.clone()).unwrap();
        let d = hedged_return(&holdings, &dn_c, &dn_h, &s, &s, &ds, &ds).unwrap();
        prop_assert!((d.component_sum() - d.total_return).abs() <= 1e-12 * d.total_return.abs().max(1.0) * 1e3);
        let combined: Vec<f64> = n_c.iter().zip(&n_h).map(|(a, b)| a + b).collect();
        let dcombined: Vec<f64> = dn_c.iter().zip(&dn_h).map(|(a, b)| a + b).collect();
        let same = hedged_return_same_asset(&combined, &dcombined, &s, &ds).unwrap();
        prop_assert!((same - d.total_return).abs() <= 1e-9 * same.abs().max(1.0));
    }

    #[test]
    fn costs_are_homogeneous((_, dn, s, _) in (1usize..6).prop_flat_map(vecs), c in 0.01f64..10.0, rate in 0.0f64..0.01) {
        let spec = CostSpec::new(rate, 0.0).unwrap();
        let base = explicit_costs(&spec, &dn, &s).unwrap();
        let scaled: Vec<f64> = dn.iter().map(|d| d * c).collect();
        let got = explicit_costs(&spec, &scaled, &s).unwrap();
        prop_assert!((got - c * base).abs() <= 1e-12 * (c * base).max(1.0));
    }

    #[test]
    fn loss_is_antitone_and_additive(v0 in -10.0f64..10.0, v1 in -10.0f64..10.0, bump in 0.0f64..5.0, c1 in 0.0f64..1.0, c2 in 0.0f64..1.0) {
        prop_assert!(loss_variable(v0, v1 + bump, c1) <= loss_variable(v0, v1, c1));
        let joint = loss_variable(v0, v1, c1 + c2);
        prop_assert!((joint - (loss_variable(v0, v1, c1) + c2)).abs() <= 1e-12);
    }
}

#[test]
fn zero_value_and_shape_errors() {
    assert!(decompose_return(&[0.0], &[1.0], &[10.0], &[1.0]).is_err());
    assert!(decompose_return(&[1.0, 2.0], &[1.0], &[10.0], &[1.0]).is_err());
    assert!(CostSpec::new(-0.1, 0.0).is_err());
    let spec = CostSpec::new(0.001, 0.5).unwrap();
    assert_eq!(explicit_costs(&spec, &[0.0], &[100.0]).unwrap(), 0.0);
    assert_eq!(explicit_costs(&spec, &[-1.0], &[100.0]).unwrap(), 0.001 * 100.0 + 0.5);
}
