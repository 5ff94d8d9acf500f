mod common;

use common::{linear_case, sobol_case};
use frc_core::distributions::{InputModel, ScalarDistribution};
use frc_core::sobol::{pick_freeze, sobol_aggregated, sobol_inverse, sobol_pointwise, SobolSettings};
use frc_core::testbed::{
    crossing_abscissa, oracle_sobol_aggregated, oracle_sobol_inverse, oracle_sobol_pointwise, AnalyticModel,
};
use frc_core::Error;

fn settings(n_pf: usize, seed: u64) -> SobolSettings {
    SobolSettings { n_pf, bootstrap: 200, seed, ..Default::default() }
}

#[test]
fn aggregated_matches_quadrature() {
    let c = sobol_case();
    let r = sobol_aggregated(&c.model, &c.inputs, c.s, &c.a_grid, &settings(10_000, 1)).unwrap();
    let o = oracle_sobol_aggregated(&c.model, &c.inputs, c.s, &c.a_grid).unwrap();
    for (ix, i) in r.indices.iter().zip(0..) {
        assert!((ix.first - o.first_order[i]).abs() < 0.05, "{ix:?} vs {o:?}");
        assert!((ix.total - o.total[i]).abs() < 0.05, "{ix:?} vs {o:?}");
    }
    assert!((r.variance - o.variance).abs() < 0.05 * o.variance);
}

#[test]
fn pointwise_matches_quadrature_and_bound() {
    let c = sobol_case();
    let r = sobol_pointwise(&c.model, &c.inputs, c.s, 2.0, &settings(10_000, 2)).unwrap();
    let o = oracle_sobol_pointwise(&c.model, &c.inputs, c.s, 2.0).unwrap();
    for (ix, i) in r.indices.iter().zip(0..) {
        assert!((ix.first - o.first_order[i]).abs() < 0.05, "{ix:?} vs {o:?}");
        assert!((ix.total - o.total[i]).abs() < 0.05, "{ix:?} vs {o:?}");
    }
    let sum: f64 = r.indices.iter().map(|ix| ix.first).sum();
    assert!(sum <= 1.03, "{sum}");
}

#[test]
fn saturated_abscissa_is_degenerate() {
    let c = sobol_case();
    let e = sobol_pointwise(&c.model, &c.inputs, c.s, 10.0, &settings(1000, 0)).unwrap_err();
    match e {
        Error::DegenerateVariance(msg) => assert!(msg.contains("a = 10"), "{msg}"),
        other => panic!("{other}"),
    }
    let flat = AnalyticModel::linear(-50.0, 0.0, vec![1.0, 1.0]);
    assert!(matches!(
        sobol_aggregated(&flat, &c.inputs, c.s, &c.a_grid, &settings(1000, 0)),
        Err(Error::DegenerateVariance(_))
    ));
}

#[test]
fn inverse_agrees_with_two_oracles() {
    let c = sobol_case();
    let r = sobol_inverse(&c.model, &c.inputs, c.s, 0.9, &settings(10_000, 3)).unwrap();
    assert_eq!(r.non_crossing_fraction, Some(0.0));
    let exact = oracle_sobol_inverse(&c.model, &c.inputs).unwrap();
    // brute-force pick-freeze on the analytic crossing abscissa
    let brute = pick_freeze(
        &c.inputs,
        &[1.0],
        &SobolSettings { n_pf: 1_000_000, bootstrap: 100, seed: 17, ..Default::default() },
        0.0,
        "",
        |rows| Ok(vec![rows.iter().map(|x| crossing_abscissa(&c.model, x, c.s)).collect()]),
    )
    .unwrap();
    for i in 0..2 {
        let (ix, bx) = (&r.indices[i], &brute.indices[i]);
        assert!((ix.first - bx.first).abs() < 0.05 && (ix.total - bx.total).abs() < 0.05);
        assert!((bx.first - exact.first_order[i]).abs() < 0.01);
        assert!((ix.first - exact.first_order[i]).abs() < 0.05);
        assert!((ix.total - exact.total[i]).abs() < 0.05);
    }
}

#[test]
fn additive_output_has_equal_first_and_total() {
    // the crossing abscissa of a linear model is additive in x
    let c = linear_case();
    let inputs = InputModel::new(c.inputs.marginals.clone(), (-8.0, 12.0)).unwrap();
    let r = sobol_inverse(&c.model, &inputs, c.s, 0.9, &settings(10_000, 4)).unwrap();
    for ix in &r.indices {
        let gap = (ix.first - ix.total).abs();
        assert!(gap <= 0.03, "{ix:?}");
        assert!(gap <= 3.0 * ix.first_se.max(ix.total_se), "{ix:?}");
    }
}

#[test]
fn inert_input_has_null_indices() {
    let model = AnalyticModel::linear(0.0, 1.0, vec![1.0, 0.7, 0.0]);
    let inputs = InputModel::new(vec![ScalarDistribution::gaussian(0.0, 1.0).unwrap(); 3], (-6.0, 10.0)).unwrap();
    let grid = frc_core::numerics::linspace(-6.0, 10.0, 17);
    let results = [
        sobol_aggregated(&model, &inputs, 2.0, &grid, &settings(5000, 5)).unwrap(),
        sobol_pointwise(&model, &inputs, 2.0, 1.5, &settings(5000, 5)).unwrap(),
        sobol_inverse(&model, &inputs, 2.0, 0.9, &settings(5000, 5)).unwrap(),
    ];
    for r in &results {
        let ix = &r.indices[2];
        assert!(ix.first.abs() <= 0.02 && ix.total.abs() <= 0.02, "{ix:?}");
        assert!(ix.first_ci.0 <= 0.0 && 0.0 <= ix.first_ci.1);
        assert!(ix.total_ci.0 <= 0.0 && 0.0 <= ix.total_ci.1);
    }
}

#[test]
fn too_many_non_crossing_samples() {
    let c = sobol_case();
    let narrow = InputModel::new(c.inputs.marginals.clone(), (0.0, 4.0)).unwrap();
    match sobol_inverse(&c.model, &narrow, c.s, 0.9, &settings(1000, 6)) {
        Err(Error::NoCrossing { fraction, .. }) => assert!(fraction > 0.05),
        other => panic!("{other:?}"),
    }
    // a small miss rate is clamped with a warning
    let wide = InputModel::new(c.inputs.marginals.clone(), (-6.0, 5.5)).unwrap();
    let r = sobol_inverse(&c.model, &wide, c.s, 0.9, &settings(1000, 6)).unwrap();
    let f = r.non_crossing_fraction.unwrap();
    assert!(f > 0.0 && f <= 0.05, "{f}");
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn gp_based_indices_are_reproducible() {
    let c = linear_case();
    let gp = c.fit_gp(60, 1);
    let s = settings(500, 8);
    let a = sobol_aggregated(&gp, &c.inputs, c.s, &c.a_grid, &s).unwrap();
    let b = sobol_aggregated(&gp, &c.inputs, c.s, &c.a_grid, &s).unwrap();
    assert_eq!(a, b);
    let p = sobol_pointwise(&gp, &c.inputs, c.s, 2.0, &s).unwrap();
    // x0 dominates, x2 is weakest
    assert!(p.indices[0].first > p.indices[1].first && p.indices[1].first > p.indices[2].first);
    for ix in a.indices.iter().chain(&p.indices) {
        assert!(ix.first_ci.0 <= ix.first && ix.first <= ix.first_ci.1);
        assert!(ix.total_ci.0 <= ix.total && ix.total <= ix.total_ci.1);
    }
}
