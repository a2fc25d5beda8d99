//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use chaosrough::mc::stream_rng;
use chaosrough::roughlift::Level2Path;
use chaosrough::symtensor::multi_indices;
use chaosrough::SymTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0)
}

/// Random sparse symmetric tensor; each basis element present with probability `density`.
pub fn random_tensor(rng: &mut ChaCha8Rng, order: usize, dim: usize, density: f64) -> SymTensor {
    let mut t = SymTensor::zero(order, dim);
    for idx in multi_indices(order, dim) {
        if rng.random::<f64>() < density {
            t.add_term(&idx, rng.random_range(-1.0..1.0));
        }
    }
    t
}

fn unflatten(mut flat: usize, order: usize, dim: usize) -> Vec<usize> {
    let mut idx = vec![0; order];
    for p in (0..order).rev() {
        idx[p] = flat % dim;
        flat /= dim;
    }
    idx
}

fn flatten(idx: &[usize], dim: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * dim + i)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Dense `r`-fold contraction of full tensors followed by averaging over all
/// permutations of the remaining slots.
pub fn dense_contract(a: &[f64], n: usize, b: &[f64], m: usize, r: usize, dim: usize) -> Vec<f64> {
    let out_order = n + m - 2 * r;
    let len = dim.pow(out_order as u32);
    let mut raw = vec![0.0; len];
    for (flat, slot) in raw.iter_mut().enumerate() {
        let idx = unflatten(flat, out_order, dim);
        let (ia, ib) = idx.split_at(n - r);
        let mut acc = 0.0;
        for kf in 0..dim.pow(r as u32) {
            let k = unflatten(kf, r, dim);
            let fa: Vec<usize> = ia.iter().chain(&k).copied().collect();
            let fb: Vec<usize> = ib.iter().chain(&k).copied().collect();
            acc += a[flatten(&fa, dim)] * b[flatten(&fb, dim)];
        }
        *slot = acc;
    }
    let perms = permutations(out_order);
    (0..len)
        .map(|flat| {
            let idx = unflatten(flat, out_order, dim);
            perms
                .iter()
                .map(|p| {
                    let q: Vec<usize> = p.iter().map(|&i| idx[i]).collect();
                    raw[flatten(&q, dim)]
                })
                .sum::<f64>()
                / perms.len() as f64
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(sup Σ ‖X‖^p, sup Σ ‖𝕏‖^{p/2})` by enumerating every partition of the nodes.
pub fn exhaustive_pvar_sums(x: &Level2Path, p: f64) -> (f64, f64) {
    let n = x.len();
    let interior = n - 2;
    let (mut b1, mut b2) = (0.0f64, 0.0f64);
    for mask in 0u64..(1u64 << interior) {
        let mut pts = vec![0];
        pts.extend((0..interior).filter(|i| mask >> i & 1 == 1).map(|i| i + 1));
        pts.push(n - 1);
        let (mut s1, mut s2) = (0.0, 0.0);
        for w in pts.windows(2) {
            let (a, aa) = x.increment(w[0], w[1]);
            s1 += norm(&a).powf(p);
            s2 += norm(&aa).powf(p / 2.0);
        }
        b1 = b1.max(s1);
        b2 = b2.max(s2);
    }
    (b1, b2)
}

/// `∫_{t_i}^{t_j} X_{t_i,r} ⊗ dX_r` for a piecewise-linear path by the
/// segment midpoint rule (exact for linear segments).
pub fn midpoint_area(values: &[Vec<f64>], i: usize, j: usize) -> Vec<f64> {
    let d = values[0].len();
    let mut out = vec![0.0; d * d];
    for k in i..j {
        for a in 0..d {
            let mid = 0.5 * (values[k][a] + values[k + 1][a]) - values[i][a];
            for b in 0..d {
                out[a * d + b] += mid * (values[k + 1][b] - values[k][b]);
            }
        }
    }
    out
}

/// Random-walk node values on `nodes` points in `R^d`.
pub fn random_walk(rng: &mut ChaCha8Rng, nodes: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let times: Vec<f64> = (0..nodes).map(|i| i as f64 / (nodes - 1) as f64).collect();
    let mut v = vec![vec![0.0; d]];
    for _ in 1..nodes {
        let last = v.last().unwrap().clone();
        v.push(last.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect());
    }
    (times, v)
}
