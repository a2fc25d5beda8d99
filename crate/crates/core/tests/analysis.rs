mod common;

use chaosrough::analysis::{
    greedy, greedy_sample, greedy_with, identity_path, rate_function, scaling_check, tail_scan, GreedyNorm, LiftTarget,
    RateMethod, RateOptions, RateStatus,
};
use chaosrough::kernels::{brownian_kernel, brownian_product, dyadic_grid, linear_kernel};
use chaosrough::rde::{moment_scan, AffineFields, MomentQuantity, SchemeOptions};
use chaosrough::roughlift::lift_piecewise_linear;
use chaosrough::SymTensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn greedy_bounds_on_random_paths(
        steps in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..10),
        alpha in 0.05f64..2.0,
        p in 2.1f64..3.5,
    ) {
        let mut v = vec![vec![0.0, 0.0]];
        for s in &steps {
            let last = v.last().unwrap().clone();
            v.push(vec![last[0] + s[0], last[1] + s[1]]);
        }
        let t: Vec<f64> = (0..v.len()).map(|i| i as f64 / steps.len() as f64).collect();
        let x = lift_piecewise_linear(&t, &v).unwrap();
        let s = greedy(&x, alpha, p).unwrap();
        prop_assert!(s.count_bound_holds(), "{s:?}");
        prop_assert!(s.accumulation_bound_holds(), "{s:?}");
        prop_assert!(s.taus.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*s.taus.last().unwrap(), 1.0);
    }
}

#[test]
fn greedy_on_brownian_samples() {
    let g = dyadic_grid(4);
    let k = brownian_kernel(16, &g).unwrap();
    for i in 0..200 {
        for target in [LiftTarget::Process, LiftTarget::Enhanced] {
            let s = greedy_sample(&k, 2, target, 0.3, 2.5, 4, i).unwrap();
            assert!(s.count_bound_holds() && s.accumulation_bound_holds(), "{s:?}");
        }
    }
}

#[test]
fn level_one_line_greedy_on_fine_grid() {
    let s = greedy_with(&identity_path(16).unwrap(), 0.25, 1.0, GreedyNorm::Level1).unwrap();
    assert_eq!(s.n, 3);
    assert!((0.25 * 3.0) <= s.homogeneous_norm_p + 1e-12);
}

#[test]
fn rate_of_identity_target_for_brownian_kernel() {
    let g = dyadic_grid(4);
    let k = brownian_kernel(16, &g).unwrap();
    let exact = rate_function(&k, &g, &RateOptions::default()).unwrap();
    assert!((exact.value - 0.5).abs() < 1e-12);
    let opts = RateOptions { method: RateMethod::AugmentedLagrangian, starts: 8, ..Default::default() };
    let al = rate_function(&k, &g, &opts).unwrap();
    assert_eq!(al.status, RateStatus::Feasible);
    for v in &al.start_values {
        assert!((v - exact.value).abs() < 1e-6, "{:?}", al.start_values);
    }
    let re = 0.5 * al.h_star.iter().map(|x| x * x).sum::<f64>();
    assert!((re - al.value).abs() < 1e-8);
}

#[test]
fn zero_target_has_zero_rate() {
    let g = dyadic_grid(3);
    let k = brownian_product(2, &g).unwrap();
    let r = rate_function(&k, &vec![0.0; g.len()], &RateOptions::default()).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.h_star.iter().all(|x| *x == 0.0));
}

#[test]
fn square_kernel_feasibility() {
    let g = dyadic_grid(3);
    let k = linear_kernel(&SymTensor::basis(&[0, 0], 4).unwrap(), &g).unwrap();
    for c in [0.5, 1.0, 2.0] {
        let x: Vec<f64> = g.iter().map(|t| c * t).collect();
        let r = rate_function(&k, &x, &RateOptions::default()).unwrap();
        assert_eq!(r.status, RateStatus::Feasible);
        assert!((r.value - c / 2.0).abs() < 1e-6);
        assert!((r.h_star[0].abs() - c.sqrt()).abs() < 1e-5);
    }
    let x: Vec<f64> = g.iter().map(|t| -0.5 * t).collect();
    let r = rate_function(&k, &x, &RateOptions::default()).unwrap();
    assert_eq!(r.status, RateStatus::Infeasible);
    assert!(r.residual > 0.4);
}

#[test]
fn product_kernel_rate_is_an_upper_bound_certificate() {
    let g = dyadic_grid(2);
    let k = brownian_product(2, &g).unwrap();
    let x: Vec<f64> = g.iter().map(|t| 0.5 * t * t).collect();
    let r = rate_function(&k, &x, &RateOptions { starts: 8, ..Default::default() }).unwrap();
    assert_eq!(r.status, RateStatus::Feasible);
    let re = 0.5 * r.h_star.iter().map(|v| v * v).sum::<f64>();
    assert!((re - r.value).abs() < 1e-8 && r.residual <= 1e-6);
}

#[test]
fn dilation_identities_are_exact() {
    let g = dyadic_grid(4);
    for k in [brownian_kernel(16, &g).unwrap(), brownian_product(2, &g).unwrap()] {
        let rep = scaling_check(&k, 2, &[1.0, 0.9, 0.5, 0.25], 2.5, 0.2, 20, 1).unwrap();
        assert!(rep.max_rel_err < 1e-12, "{rep:?}");
        assert!(rep.monotone_n);
        assert!((rep.rows[0].exact_composition_ratio.mean - 1.0).abs() < 1e-12);
    }
}

#[test]
fn half_dilation_scales_second_level_by_sixteenth_for_order_two() {
    let g = dyadic_grid(3);
    let k = brownian_product(2, &g).unwrap();
    let x = chaosrough::roughlift::lift_process(&k, &chaosrough::roughlift::sample_components(&k, 2, 0, 0)).unwrap();
    let y = x.dilate(0.5f64.powi(2));
    let (_, a) = x.increment(0, 8);
    let (_, b) = y.increment(0, 8);
    for (u, v) in a.iter().zip(&b) {
        assert!((u / 16.0 - v).abs() <= 1e-15 * u.abs());
    }
}

#[test]
fn survival_is_monotone() {
    let k = brownian_kernel(8, &dyadic_grid(3)).unwrap();
    let rep = tail_scan(&k, 1, LiftTarget::Enhanced, 0.3, 2.5, &[0, 1, 2, 3, 4, 5, 6, 8], 300, 2).unwrap();
    assert!(rep.monotone && rep.bounds_hold);
}

#[test]
fn moment_scan_profiles() {
    let k = brownian_kernel(8, &dyadic_grid(3)).unwrap();
    let contractive = AffineFields::new(1, vec![vec![-0.5]], vec![vec![0.3]]).unwrap();
    let ps: Vec<f64> = (1..=8).map(f64::from).collect();
    for q in [MomentQuantity::Jacobian, MomentQuantity::Malliavin] {
        let rep = moment_scan(&k, &contractive, &[1.0], q, &ps, 1000, 3, SchemeOptions::default()).unwrap();
        assert_eq!(rep.largest_stable_p, Some(8.0), "{rep:?}");
    }
    let zero = AffineFields::zero(1, 1);
    let rep =
        moment_scan(&k, &zero, &[1.0], MomentQuantity::Malliavin, &ps, 1000, 3, SchemeOptions::default()).unwrap();
    assert!(rep.moments.iter().all(|m| m.mean == 0.0));
    assert!(moment_scan(&k, &zero, &[1.0], MomentQuantity::Malliavin, &ps, 999, 3, SchemeOptions::default()).is_err());
}

#[test]
fn square_kernel_law_reaches_targets_its_skeleton_cannot() {
    // X_t = t(ξ² − 1) is bounded below by −t and puts mass near −t/2, while
    // every skeleton path t·h² is nonnegative.
    let g = dyadic_grid(3);
    let k = linear_kernel(&SymTensor::basis(&[0, 0], 1).unwrap(), &g).unwrap();
    let last = g.len() - 1;
    let mut near = 0;
    for i in 0..20_000u64 {
        let xi = chaosrough::mc::normals(40, i, 1);
        let x1 = k.eval(last, &xi);
        assert!(x1 >= -1.0 - 1e-12);
        near += ((x1 + 0.5).abs() < 0.05) as usize;
    }
    assert!(near > 100, "{near}");
    let x: Vec<f64> = g.iter().map(|t| -0.5 * t).collect();
    assert_eq!(rate_function(&k, &x, &RateOptions::default()).unwrap().status, RateStatus::Infeasible);
}
