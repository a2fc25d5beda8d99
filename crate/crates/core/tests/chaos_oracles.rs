mod common;

use chaosrough::chaos::{eval_chaos, inner_dk, malliavin, mc_cross_moment, moment_ratio, ChaosVariable};
use chaosrough::mc::{normals, MeanSe};
use chaosrough::symtensor::{factorial, inner};
use common::*;

#[test]
fn isometry_and_orthogonality() {
    let mut r = rng(10);
    let dim = 3;
    for n in 1..=3 {
        let f = random_tensor(&mut r, n, dim, 0.8);
        let g = random_tensor(&mut r, n, dim, 0.8);
        let est = mc_cross_moment(&f, &g, 200_000, n as u64).unwrap();
        let exact = factorial(n) * inner(&f, &g).unwrap();
        assert!(est.agrees_with(exact, 4.0), "n={n}: {est:?} vs {exact}");
        let h = random_tensor(&mut r, n + 1, dim, 0.8);
        let cross = mc_cross_moment(&f, &h, 200_000, 10 + n as u64).unwrap();
        assert!(cross.agrees_with(0.0, 4.0), "orders {n},{}: {cross:?}", n + 1);
    }
}

/// `⟨D^k I_n(f), D^k I_n(g)⟩` from the derivative fields directly.
fn direct_inner(f: &chaosrough::SymTensor, g: &chaosrough::SymTensor, k: usize, xi: &[f64]) -> f64 {
    let df = malliavin(f, k).unwrap().eval(xi).unwrap();
    let dg = malliavin(g, k).unwrap().eval(xi).unwrap();
    inner(&df, &dg).unwrap()
}

#[test]
fn derivative_inner_products_pointwise_and_in_mean() {
    let mut r = rng(11);
    for n in 2..=3 {
        for k in 1..=2 {
            let f = random_tensor(&mut r, n, 3, 0.8);
            let g = random_tensor(&mut r, n, 3, 0.8);
            let v = inner_dk(&f, &g, k).unwrap();
            for s in 0..25 {
                let xi = normals(3, s, 3);
                let want = direct_inner(&f, &g, k, &xi);
                assert!((v.eval(&xi).unwrap() - want).abs() < 1e-8 * (1.0 + want.abs()));
            }
            let mean = factorial(n).powi(2) / factorial(n - k) * inner(&f, &g).unwrap();
            assert!((v.expectation() - mean).abs() < 1e-10 * (1.0 + mean.abs()));
            let draws: Vec<f64> = (0..20_000).map(|s| direct_inner(&f, &g, k, &normals(4, s, 3))).collect();
            let est = MeanSe::of(&draws);
            assert!(est.agrees_with(mean, 4.0) || (est.mean - mean).abs() < 1e-10, "n={n} k={k}: {est:?} vs {mean}");
        }
    }
}

#[test]
fn first_derivative_is_directional_difference() {
    let mut r = rng(12);
    for n in 1..=3 {
        let f = random_tensor(&mut r, n, 4, 0.7);
        let d1 = malliavin(&f, 1).unwrap();
        for s in 0..10 {
            let xi = normals(5, s, 4);
            let h = normals(6, s, 4);
            let eps = 1e-5;
            let shift = |e: f64| xi.iter().zip(&h).map(|(a, b)| a + e * b).collect::<Vec<_>>();
            let fd = (eval_chaos(&f, &shift(eps)).unwrap() - eval_chaos(&f, &shift(-eps)).unwrap()) / (2.0 * eps);
            let grad = d1.eval(&xi).unwrap();
            let an: f64 = (0..4).map(|i| grad.coeff(&[i]) * h[i]).sum();
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "n={n}");
        }
    }
}

#[test]
fn derivative_beyond_order_is_rejected() {
    let f = chaosrough::SymTensor::basis(&[0, 1], 2).unwrap();
    assert!(malliavin(&f, 3).is_err());
}

#[test]
fn hypercontractive_ratio_respects_bound() {
    let f = chaosrough::SymTensor::basis(&[0, 1], 2).unwrap();
    let rep = moment_ratio(&ChaosVariable::single(f), 2.0, 4.0, 20_000, 1).unwrap();
    assert!(rep.ratio <= rep.bound, "{rep:?}");
}
