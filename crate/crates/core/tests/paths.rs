mod common;

use chaosrough::chaos::orthonormal_basis;
use chaosrough::kernels::{
    brownian_kernel, brownian_product, check_assumptions, dyadic_grid, fbm_kernel, ControlChoice, KernelPath, Verdict,
};
use chaosrough::mc::MeanSe;
use chaosrough::roughlift::{
    dyadic_convergence, embedding_norm, kl_partial_sum, lift_piecewise_linear, lift_process, p_variation,
    sample_components, second_moments,
};
use chaosrough::SymTensor;
use common::*;
use proptest::prelude::*;

#[test]
fn dp_matches_exhaustive_search() {
    let mut r = rng(20);
    for trial in 0..60 {
        let nodes = 3 + trial % 8;
        let d = 1 + trial % 3;
        let (t, v) = random_walk(&mut r, nodes, d);
        let x = lift_piecewise_linear(&t, &v).unwrap();
        for p in [1.0, 2.2, 2.5, 3.7] {
            let (s1, s2) = exhaustive_pvar_sums(&x, p);
            let (v1, v2) = x.norm_table().pvar_sums_from(0, p);
            assert_eq!(v1[nodes - 1], s1, "trial {trial} p {p}");
            assert_eq!(v2[nodes - 1], s2, "trial {trial} p {p}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dp_equals_exhaustive(steps in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 2..9), p in 1.0f64..4.0) {
        let mut v = vec![vec![0.0, 0.0]];
        for s in &steps {
            let last = v.last().unwrap().clone();
            v.push(vec![last[0] + s[0], last[1] + s[1]]);
        }
        let t: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let x = lift_piecewise_linear(&t, &v).unwrap();
        let (s1, s2) = exhaustive_pvar_sums(&x, p);
        let pv = p_variation(&x, p).unwrap();
        prop_assert!((pv.homogeneous_pow() - (s1 + s2)).abs() <= 1e-12 * (s1 + s2));
    }

    #[test]
    fn p_variation_dominates_every_increment(steps in prop::collection::vec(-1.0f64..1.0, 2..12), p in 1.0f64..3.0) {
        let mut v = vec![vec![0.0]];
        for s in &steps {
            let last = v.last().unwrap()[0];
            v.push(vec![last + s]);
        }
        let t: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let x = lift_piecewise_linear(&t, &v).unwrap();
        let pv = p_variation(&x, p).unwrap();
        let (a, _) = x.increment(0, v.len() - 1);
        prop_assert!(pv.level1 + 1e-12 >= a[0].abs());
    }

    #[test]
    fn p_variation_is_nonincreasing_in_p(steps in prop::collection::vec(-1.0f64..1.0, 2..10)) {
        let mut v = vec![vec![0.0]];
        for s in &steps {
            let last = v.last().unwrap()[0];
            v.push(vec![last + s]);
        }
        let t: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let x = lift_piecewise_linear(&t, &v).unwrap();
        prop_assert!(p_variation(&x, 2.0).unwrap().level1 + 1e-12 >= p_variation(&x, 3.0).unwrap().level1);
    }
}

fn check_kl(k: &KernelPath) {
    let basis = orthonormal_basis(k.order(), k.dim());
    let full = second_moments(k);
    let mut prev = None::<chaosrough::roughlift::SecondMoments>;
    for big_k in 0..=basis.len() {
        let m = second_moments(&kl_partial_sum(k, &basis, big_k).unwrap());
        for s in 0..k.len() {
            for t in (s + 1)..k.len() {
                let tol = 1e-12 * (1.0 + full.level1[s][t] + full.level2_cross[s][t]);
                assert!(m.level1[s][t] <= full.level1[s][t] + tol);
                assert!(m.level2_cross[s][t] <= full.level2_cross[s][t] + tol);
                if let Some(p) = &prev {
                    assert!(p.level1[s][t] <= m.level1[s][t] + tol, "K={big_k} ({s},{t})");
                    assert!(p.level2_cross[s][t] <= m.level2_cross[s][t] + tol, "K={big_k} ({s},{t})");
                }
            }
        }
        prev = Some(m);
    }
    let last = prev.unwrap();
    assert!((last.level1[0][k.len() - 1] - full.level1[0][k.len() - 1]).abs() < 1e-12);
}

#[test]
fn kl_moments_increase_to_full_moments() {
    check_kl(&brownian_kernel(8, &dyadic_grid(3)).unwrap());
    check_kl(&brownian_product(2, &dyadic_grid(2)).unwrap());
}

#[test]
fn exact_second_moments_match_monte_carlo() {
    let k = brownian_product(2, &dyadic_grid(2)).unwrap();
    let exact = second_moments(&k);
    let draws: Vec<(f64, f64)> = (0..20_000u64)
        .map(|i| {
            let x = lift_process(&k, &sample_components(&k, 2, 30, i)).unwrap();
            let (a, aa) = x.increment(1, 4);
            (a[0] * a[0], aa[1] * aa[1])
        })
        .collect();
    let l1 = MeanSe::of(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
    let l2 = MeanSe::of(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
    assert!(l1.agrees_with(exact.level1[1][4], 4.0), "{l1:?} vs {}", exact.level1[1][4]);
    assert!(l2.agrees_with(exact.level2_cross[1][4], 4.0), "{l2:?} vs {}", exact.level2_cross[1][4]);
}

#[test]
fn assumption_report_for_product_kernel() {
    let k = brownian_product(2, &dyadic_grid(2)).unwrap();
    let rep = check_assumptions(&k, 1.0, &ControlChoice::ProductFactors).unwrap();
    assert!(rep.contraction.iter().all(|c| c.clause.verdict == Verdict::Pass));
    assert!(rep.identity_error < 1e-12);
    // The covariance (s∧t)² has 1-variation t² − s² on [s,t]², at most 2|t − s|.
    assert!(rep.covariance_holder.worst_ratio_upper <= 2.0 + 1e-12);
    // Brownian factors have unbounded path variation in H for ρ < 2, so the
    // diagonal clause of this control cannot hold on refining grids.
    assert_ne!(rep.control_holder.verdict, Verdict::Pass);
}

#[test]
fn rough_fractional_kernel_fails_and_smooth_one_passes() {
    let g = dyadic_grid(3);
    let rough = check_assumptions(&fbm_kernel(0.2, &g).unwrap(), 1.2, &ControlChoice::Covariance).unwrap();
    assert_eq!(rough.covariance_holder.verdict, Verdict::Fail);
    let smooth = check_assumptions(&fbm_kernel(0.7, &g).unwrap(), 1.0, &ControlChoice::Covariance).unwrap();
    assert_eq!(smooth.covariance_holder.verdict, Verdict::Pass);
}

#[test]
fn assumptions_reject_rho_out_of_range() {
    let k = brownian_kernel(4, &dyadic_grid(2)).unwrap();
    assert!(check_assumptions(&k, 1.5, &ControlChoice::Covariance).is_err());
    assert!(check_assumptions(&k, 0.9, &ControlChoice::Covariance).is_err());
}

#[test]
fn embedding_bound_holds_for_random_directions() {
    let k = brownian_kernel(8, &dyadic_grid(3)).unwrap();
    let mut r = rng(21);
    for _ in 0..20 {
        let phi: SymTensor = random_tensor(&mut r, 1, 8, 0.8);
        let e = embedding_norm(&k, &phi, 1.0).unwrap();
        assert!(e.variation <= e.bound * (1.0 + 1e-12), "{e:?}");
    }
}

#[test]
fn coarse_lifts_approach_the_fine_lift() {
    let k = brownian_kernel(64, &dyadic_grid(6)).unwrap();
    let rep = dyadic_convergence(&k, &[1, 2, 3, 4], 2.5, 2, 40, 3).unwrap();
    assert!(rep.strictly_decreasing(2.0), "{rep:?}");
}
