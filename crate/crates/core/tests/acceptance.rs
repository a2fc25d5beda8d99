//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::time::Instant;

use chaosrough::analysis::{rate_function, tail_scan, LiftTarget, RateOptions, RateStatus, TailReport};
use chaosrough::chaos::{eval_chaos, inner_dk, malliavin, mc_cross_moment, orthonormal_basis, product_expand};
use chaosrough::enhanced::{enhance, translated_values, translation_growth, unit_direction, GradientDriver};
use chaosrough::kernels::{brownian_kernel, brownian_product, dyadic_grid, linear_kernel, KernelPath};
use chaosrough::mc::{normals, MeanSe};
use chaosrough::rde::{self, AffineFields, SchemeOptions, TanhFields, VectorFieldSet};
use chaosrough::roughlift::{
    dyadic_convergence, kl_partial_sum, lift_piecewise_linear, lift_process, sample_components, second_moments,
};
use chaosrough::symtensor::{factorial, inner};
use chaosrough::SymTensor;
use common::*;

const SE: f64 = 3.0;

type Outcome = (bool, String);

fn brownian(level: u32) -> KernelPath {
    let g = dyadic_grid(level);
    brownian_kernel(g.len() - 1, &g).unwrap()
}

fn canonical(n: usize) -> chaosrough::roughlift::Level2Path {
    let t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let v: Vec<Vec<f64>> = t.iter().map(|x| vec![*x]).collect();
    lift_piecewise_linear(&t, &v).unwrap()
}

fn algebra() -> Outcome {
    let mut r = rng(101);
    let (mut product, mut chen, mut geometric, mut group) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..120usize {
        let dim = 1 + trial % 8;
        let (n, m) = (trial % 4, (trial / 4) % 4);
        let f = random_tensor(&mut r, n, dim, 0.6);
        let g = random_tensor(&mut r, m, dim, 0.6);
        let xi = normals(102, trial as u64, dim);
        let lhs = eval_chaos(&f, &xi).unwrap() * eval_chaos(&g, &xi).unwrap();
        product = product.max((lhs - product_expand(&f, &g).unwrap().eval(&xi).unwrap()).abs() / (1.0 + lhs.abs()));

        let d = 1 + trial % 3;
        let (t, v) = random_walk(&mut r, 10, d);
        let x = lift_piecewise_linear(&t, &v).unwrap();
        let (a, aa) = x.increment(0, 4);
        let (b, bb) = x.increment(4, 9);
        let (c, cc) = x.increment(0, 9);
        for p in 0..d {
            for q in 0..d {
                chen = chen.max((aa[p * d + q] + bb[p * d + q] + a[p] * b[q] - cc[p * d + q]).abs());
                geometric = geometric.max((0.5 * (cc[p * d + q] + cc[q * d + p]) - 0.5 * c[p] * c[q]).abs());
            }
        }
    }
    for order in 1..=3usize {
        let level = if order == 3 { 1 } else { 2 };
        let k = brownian_product(order, &dyadic_grid(level)).unwrap();
        for trial in 0..40u64 {
            let s = enhance(&k, &sample_components(&k, 1, 103, trial)).unwrap();
            let h1 = unit_direction(1, k.dim(), 2 * trial);
            let h2 = unit_direction(1, k.dim(), 2 * trial + 1);
            let (r1, r2) = (0.3 + trial as f64 * 0.02, -0.7);
            let two = s.translate(&h1, r1).unwrap().translate(&h2, r2).unwrap();
            let sum = vec![h1[0].iter().zip(&h2[0]).map(|(a, b)| r1 * a + r2 * b).collect()];
            let one = s.translate(&sum, 1.0).unwrap();
            for ord in 0..=order {
                for i in 0..k.len() {
                    group = group.max(two.value(0, ord, i).sub(one.value(0, ord, i)).unwrap().norm());
                }
            }
        }
    }
    let worst = product.max(chen).max(geometric).max(group);
    (
        worst <= 1e-8,
        format!("max errors: product {product:.1e}, Chen {chen:.1e}, geometric {geometric:.1e}, translation {group:.1e} (limit 1e-8)"),
    )
}

fn isometry() -> Outcome {
    let mut r = rng(201);
    let mut ok = true;
    let mut worst = 0.0f64;
    for n in 1..=3 {
        let f = random_tensor(&mut r, n, 3, 0.8);
        let g = random_tensor(&mut r, n, 3, 0.8);
        let h = random_tensor(&mut r, n + 1, 3, 0.8);
        let exact = factorial(n) * inner(&f, &g).unwrap();
        let est = mc_cross_moment(&f, &g, 1_000_000, 200 + n as u64).unwrap();
        let cross = mc_cross_moment(&f, &h, 1_000_000, 210 + n as u64).unwrap();
        ok &= est.agrees_with(exact, SE) && cross.agrees_with(0.0, SE);
        worst = worst.max((est.mean - exact).abs() / est.se).max(cross.mean.abs() / cross.se);
    }
    (ok, format!("worst deviation {worst:.2} SE over n = 1..3 at 10^6 samples (limit {SE} SE)"))
}

fn derivative_inner() -> Outcome {
    let mut r = rng(301);
    let (mut pointwise, mut worst_se) = (0.0f64, 0.0f64);
    let mut ok = true;
    for n in 2..=3 {
        for k in 1..=2 {
            let f = random_tensor(&mut r, n, 3, 0.8);
            let g = random_tensor(&mut r, n, 3, 0.8);
            let v = inner_dk(&f, &g, k).unwrap();
            let direct = |xi: &[f64]| {
                let a = malliavin(&f, k).unwrap().eval(xi).unwrap();
                let b = malliavin(&g, k).unwrap().eval(xi).unwrap();
                inner(&a, &b).unwrap()
            };
            let mut draws = Vec::new();
            for s in 0..20_000u64 {
                let xi = normals(302 + n as u64 * 10 + k as u64, s, 3);
                let d = direct(&xi);
                pointwise = pointwise.max((v.eval(&xi).unwrap() - d).abs() / (1.0 + d.abs()));
                draws.push(d);
            }
            let mean = factorial(n).powi(2) / factorial(n - k) * inner(&f, &g).unwrap();
            let est = MeanSe::of(&draws);
            // k = n makes the pairing deterministic, so the SE vanishes.
            let exact_case = (est.mean - mean).abs() <= 1e-10 * (1.0 + mean.abs());
            ok &= est.agrees_with(mean, SE) || exact_case;
            if !exact_case {
                worst_se = worst_se.max((est.mean - mean).abs() / est.se);
            }
        }
    }
    ok &= pointwise <= 1e-8;
    (ok, format!("pointwise {pointwise:.1e} (limit 1e-8), mean deviation {worst_se:.2} SE (limit {SE})"))
}

fn dp_exhaustive() -> Outcome {
    let mut r = rng(401);
    let mut mismatches = 0;
    let total = 60;
    for trial in 0..total {
        let nodes = 3 + trial % 8;
        let (t, v) = random_walk(&mut r, nodes, 1 + trial % 3);
        let x = lift_piecewise_linear(&t, &v).unwrap();
        for p in [2.1, 2.5, 3.0] {
            let (s1, s2) = exhaustive_pvar_sums(&x, p);
            let (v1, v2) = x.norm_table().pvar_sums_from(0, p);
            if v1[nodes - 1] != s1 || v2[nodes - 1] != s2 {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("{mismatches} mismatches over {total} paths with 3..10 nodes, 3 values of p"))
}

fn convergence() -> Outcome {
    let levels: Vec<u32> = (3..=8).collect();
    let fine = dyadic_grid(9);
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [brownian_kernel(fine.len() - 1, &fine).unwrap(), brownian_product(2, &fine).unwrap()] {
        let rep = dyadic_convergence(&k, &levels, 2.5, 2, 200, 501).unwrap();
        let pass = rep.strictly_decreasing(2.0);
        ok &= pass;
        let means: Vec<String> = rep.mean_sq_distance.iter().map(|m| format!("{:.3e}", m.mean)).collect();
        parts.push(format!("n={} [{}]", k.order(), means.join(", ")));
    }
    (ok, format!("E d^2 by level 3..8: {}", parts.join("; ")))
}

fn kl_monotone() -> Outcome {
    let mut violations = 0;
    let mut checked = 0;
    for k in [brownian(3), brownian_product(2, &dyadic_grid(3)).unwrap()] {
        let basis = orthonormal_basis(k.order(), k.dim());
        let full = second_moments(&k);
        let mut prev: Option<chaosrough::roughlift::SecondMoments> = None;
        for big_k in 0..=basis.len() {
            let m = second_moments(&kl_partial_sum(&k, &basis, big_k).unwrap());
            for s in 0..k.len() {
                for t in (s + 1)..k.len() {
                    let tol = 1e-12 * (1.0 + full.level1[s][t] + full.level2_cross[s][t]);
                    checked += 1;
                    let mut bad = m.level1[s][t] > full.level1[s][t] + tol
                        || m.level2_cross[s][t] > full.level2_cross[s][t] + tol;
                    if let Some(p) = &prev {
                        bad |=
                            p.level1[s][t] > m.level1[s][t] + tol || p.level2_cross[s][t] > m.level2_cross[s][t] + tol;
                    }
                    violations += bad as usize;
                }
            }
            prev = Some(m);
        }
    }
    (violations == 0, format!("{violations} violations over {checked} (K, s, t) checks, M = 8 (n=1) and M = 36 (n=2)"))
}

fn rde_closed_forms() -> Outcome {
    let v = AffineFields::scalar_linear();
    let det = (rde::solve(&canonical(1024), &v, &[1.0], SchemeOptions::default()).unwrap().final_state()[0]
        - 1f64.exp())
    .abs();
    let k = brownian(8);
    let mut pathwise = 0.0f64;
    for s in 0..10 {
        let x = lift_process(&k, &sample_components(&k, 1, 701, s)).unwrap();
        let sol = rde::solve(&x, &v, &[1.0], SchemeOptions::with_substeps(64)).unwrap();
        for i in 0..x.len() {
            pathwise = pathwise.max((sol.y[i][0] - (x.value(i)[0] - x.value(0)[0]).exp()).abs());
        }
    }
    let tanh = TanhFields::random(3, 2, 4, 1.0, 5);
    let y0 = [0.2, -0.4, 0.7];
    let kj = brownian(7);
    let mut jac = 0.0f64;
    let eps = 1e-5;
    for s in 0..5 {
        let x = lift_process(&kj, &sample_components(&kj, 2, 702, s)).unwrap();
        let sol = rde::jacobian(&x, &tanh, &y0, SchemeOptions::default()).unwrap();
        let jend = sol.jacobian.as_ref().unwrap().last().unwrap().clone();
        for b in 0..3 {
            let (mut yp, mut ym) = (y0.to_vec(), y0.to_vec());
            yp[b] += eps;
            ym[b] -= eps;
            let fp = rde::solve(&x, &tanh, &yp, SchemeOptions::default()).unwrap();
            let fm = rde::solve(&x, &tanh, &ym, SchemeOptions::default()).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for a in 0..3 {
                let fd = (fp.final_state()[a] - fm.final_state()[a]) / (2.0 * eps);
                num += (fd - jend[a * 3 + b]).powi(2);
                den += jend[a * 3 + b].powi(2);
            }
            jac = jac.max((num / den).sqrt());
        }
    }
    (
        det <= 1e-6 && pathwise <= 1e-5 && jac <= 1e-3,
        format!("|Y_1 - e| = {det:.1e} (1e-6), pathwise {pathwise:.1e} (1e-5), Jacobian FD rel {jac:.1e} (1e-3)"),
    )
}

fn malliavin_fd_error(k: &KernelPath, v: &dyn VectorFieldSet, y0: &[f64], seed: u64) -> f64 {
    let eps = 1e-4;
    let d = v.driver_dim();
    let omegas = sample_components(k, d, seed, 0);
    let h = unit_direction(d, k.dim(), seed + 1000);
    let hg: Vec<f64> = h.iter().flatten().copied().collect();
    let drv = GradientDriver::new(k, &omegas, false).unwrap();
    let sol = rde::malliavin_rde(&drv, v, y0, 1, SchemeOptions::default()).unwrap();
    let an = sol.pair_dy(sol.y.len() - 1, &hg).unwrap();
    let run = |r: f64| {
        let x = lift_piecewise_linear(k.grid(), &translated_values(k, &omegas, &h, r).unwrap()).unwrap();
        rde::solve(&x, v, y0, SchemeOptions::default()).unwrap().final_state().to_vec()
    };
    let (p, m) = (run(eps), run(-eps));
    let num: f64 = p.iter().zip(&m).zip(&an).map(|((a, b), c)| ((a - b) / (2.0 * eps) - c).powi(2)).sum::<f64>().sqrt();
    num / an.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn malliavin_translation() -> Outcome {
    let v = TanhFields::random(2, 2, 3, 1.0, 3);
    let mut parts = Vec::new();
    let mut ok = true;
    for k in [brownian(9), brownian_product(2, &dyadic_grid(9)).unwrap()] {
        let worst = (0..20u64).map(|s| malliavin_fd_error(&k, &v, &[0.5, -0.2], 800 + s)).fold(0.0, f64::max);
        ok &= worst <= 1e-2;
        parts.push(format!("n={} max rel err {worst:.1e}", k.order()));
    }
    (ok, format!("{} over 20 samples, N = 2^9, eps = 1e-4 (limit 1e-2)", parts.join(", ")))
}

fn greedy_runs() -> (TailReport, TailReport) {
    let m: Vec<usize> = (0..=60).collect();
    let one =
        tail_scan(&brownian_kernel(16, &dyadic_grid(4)).unwrap(), 1, LiftTarget::Enhanced, 0.25, 2.5, &m, 10_000, 901)
            .unwrap();
    let two =
        tail_scan(&brownian_product(2, &dyadic_grid(2)).unwrap(), 1, LiftTarget::Enhanced, 0.1, 2.5, &m, 10_000, 902)
            .unwrap();
    (one, two)
}

fn greedy_invariants(runs: &(TailReport, TailReport)) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for r in [&runs.0, &runs.1] {
        ok &= r.bounds_hold && r.samples >= 10_000;
        parts.push(format!(
            "n={}: {} count and {} accumulation failures in {} samples",
            r.order, r.count_bound_failures, r.accumulation_bound_failures, r.samples
        ));
    }
    (ok, parts.join("; "))
}

fn growth() -> Outcome {
    let r_list = [2.0, 4.0, 8.0, 16.0];
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, label) in [(brownian(4), 1), (brownian_product(2, &dyadic_grid(3)).unwrap(), 2)] {
        let h = unit_direction(1, k.dim(), 3);
        let rep = translation_growth(&k, &h, &r_list, 2.5, 200, 1001).unwrap();
        let limit = rep.slope_limit + 0.3;
        ok &= rep.fit.slope <= limit;
        parts.push(format!("n={label} slope {:.2} (limit {limit:.2})", rep.fit.slope));
    }
    (ok, parts.join(", "))
}

fn tail_shape(runs: &(TailReport, TailReport)) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for r in [&runs.0, &runs.1] {
        match &r.fit {
            Some(f) => {
                ok &= f.slope < 0.0 && f.r2 >= 0.8 && r.fit_bins >= 3;
                parts.push(format!("n={} slope {:.2}, R^2 {:.3} on {} bins", r.order, f.slope, f.r2, r.fit_bins));
            }
            None => {
                ok = false;
                parts.push(format!("n={} no fit ({} usable bins)", r.order, r.fit_bins));
            }
        }
    }
    (ok, format!("{}; shape only, constants not reproduced", parts.join("; ")))
}

fn rate() -> Outcome {
    let g = dyadic_grid(4);
    let opts = RateOptions::default();
    let b = rate_function(&brownian_kernel(16, &g).unwrap(), &g, &opts).unwrap();
    let mut ok = (b.value - 0.5).abs() <= 1e-4 && b.status == RateStatus::Feasible;
    let mut parts = vec![format!("Brownian I = {:.6}", b.value)];
    let square = linear_kernel(&SymTensor::basis(&[0, 0], 8).unwrap(), &g).unwrap();
    for c in [0.5, 1.0, 2.0] {
        let x: Vec<f64> = g.iter().map(|t| c * t).collect();
        let r = rate_function(&square, &x, &opts).unwrap();
        ok &= (r.value - c / 2.0).abs() <= 1e-4 && r.status == RateStatus::Feasible;
        parts.push(format!("c={c}: I = {:.6}", r.value));
    }
    let x: Vec<f64> = g.iter().map(|t| -0.5 * t).collect();
    let neg = rate_function(&square, &x, &opts).unwrap();
    ok &= neg.status == RateStatus::Infeasible;
    parts.push(format!("c=-0.5: {:?} (residual {:.2})", neg.status, neg.residual));
    (ok, parts.join(", "))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let (ok, detail) = f();
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {n:>2} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "algebra exactness", &mut algebra);
    report(2, "isometry and orthogonality", &mut isometry);
    report(3, "derivative inner products", &mut derivative_inner);
    report(4, "p-variation DP", &mut dp_exhaustive);
    report(5, "dyadic lift convergence", &mut convergence);
    report(6, "projection monotonicity", &mut kl_monotone);
    report(7, "RDE closed forms", &mut rde_closed_forms);
    report(8, "Malliavin RDE vs translation", &mut malliavin_translation);
    let start = Instant::now();
    let runs = greedy_runs();
    println!("      greedy Monte Carlo shared by criteria 9 and 11 [{:.1}s]", start.elapsed().as_secs_f64());
    report(9, "greedy invariants", &mut || greedy_invariants(&runs));
    report(10, "translation growth", &mut growth);
    report(11, "tail shape", &mut || tail_shape(&runs));
    report(12, "rate function", &mut rate);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
