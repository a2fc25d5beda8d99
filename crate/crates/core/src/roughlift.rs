//! Level-2 rough paths in `R^d`: piecewise-linear lifts, Chen composition,
//! homogeneous `p`-variation, and convergence diagnostics for lifted chaos
//! processes.

use std::io::Write;

use serde::Serialize;

use crate::chaos::GaussianSample;
use crate::error::{invalid, Error, Result};
use crate::kernels::{self, KernelPath};
use crate::mc::{self, MeanSe};
use crate::symtensor::{self, SymTensor};

const JOIN_TOL: f64 = 1e-12;

/// A path `X` sampled at nodes together with its second-level increments
/// `𝕏^{ij}_{t_k,t_{k+1}} = ∫ X^i_{t_k,r} dX^j_r` on each segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Level2Path {
    times: Vec<f64>,
    dim: usize,
    values: Vec<Vec<f64>>,
    segments: Vec<Vec<f64>>,
    linear_segments: bool,
}

fn outer_add(out: &mut [f64], a: &[f64], b: &[f64], s: f64) {
    let d = b.len();
    for (i, ai) in a.iter().enumerate() {
        if *ai == 0.0 {
            continue;
        }
        let row = &mut out[i * d..(i + 1) * d];
        for (o, bj) in row.iter_mut().zip(b) {
            *o += s * ai * bj;
        }
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter().zip(a).map(|(x, y)| x - y).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Canonical lift of the piecewise-linear interpolation of `values`: each
/// segment carries `½ ΔX ⊗ ΔX`.
pub fn lift_piecewise_linear(times: &[f64], values: &[Vec<f64>]) -> Result<Level2Path> {
    if times.len() != values.len() {
        return Err(Error::DimensionMismatch { left: times.len(), right: values.len() });
    }
    if times.len() < 2 {
        return invalid("a path needs at least two nodes");
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("times must be strictly increasing");
    }
    let dim = values[0].len();
    if let Some(v) = values.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch { left: dim, right: v.len() });
    }
    let segments = values
        .windows(2)
        .map(|w| {
            let dx = diff(&w[0], &w[1]);
            let mut m = vec![0.0; dim * dim];
            outer_add(&mut m, &dx, &dx, 0.5);
            m
        })
        .collect();
    Ok(Level2Path { times: times.to_vec(), dim, values: values.to_vec(), segments, linear_segments: true })
}

impl Level2Path {
    /// Assembles a path from node values and per-segment level-2 increments.
    pub fn from_parts(times: Vec<f64>, values: Vec<Vec<f64>>, segments: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != values.len() || segments.len() + 1 != times.len() {
            return invalid("inconsistent node and segment counts");
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) || segments.iter().any(|s| s.len() != dim * dim) {
            return invalid("inconsistent dimensions");
        }
        Ok(Self { times, dim, values, segments, linear_segments: false })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Level-2 increment of segment `k` (row-major `dim × dim`).
    pub fn segment(&self, k: usize) -> &[f64] {
        &self.segments[k]
    }

    /// Segments are straight lines carrying their canonical lift.
    pub fn has_linear_segments(&self) -> bool {
        self.linear_segments
    }

    /// `(X_{t_i,t_j}, 𝕏_{t_i,t_j})` by Chen's relation.
    pub fn increment(&self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; self.dim];
        let mut xx = vec![0.0; self.dim * self.dim];
        for k in i..j {
            let dx = diff(&self.values[k], &self.values[k + 1]);
            outer_add(&mut xx, &x, &dx, 1.0);
            for (a, b) in xx.iter_mut().zip(&self.segments[k]) {
                *a += b;
            }
            for (a, b) in x.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        (x, xx)
    }

    /// Path with nodes `idx` (increasing, starting at 0 and ending at the last node).
    pub fn coarsen(&self, idx: &[usize]) -> Result<Self> {
        if idx.first() != Some(&0) || idx.last() != Some(&(self.len() - 1)) || idx.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("coarsening nodes must increase from the first to the last node");
        }
        let times = idx.iter().map(|&i| self.times[i]).collect();
        let values = idx.iter().map(|&i| self.values[i].clone()).collect();
        let segments = idx.windows(2).map(|w| self.increment(w[0], w[1]).1).collect();
        let mut out = Self::from_parts(times, values, segments)?;
        out.linear_segments = self.linear_segments && idx.len() == self.len();
        Ok(out)
    }

    /// Sub-path on nodes `i..=j`.
    pub fn restrict(&self, i: usize, j: usize) -> Result<Self> {
        if i >= j || j >= self.len() {
            return invalid(format!("invalid node range {i}..={j}"));
        }
        Ok(Self {
            times: self.times[i..=j].to_vec(),
            dim: self.dim,
            values: self.values[i..=j].to_vec(),
            segments: self.segments[i..j].to_vec(),
            linear_segments: self.linear_segments,
        })
    }

    /// Dilation `(δX, δ²𝕏)`.
    pub fn dilate(&self, delta: f64) -> Self {
        Self {
            times: self.times.clone(),
            dim: self.dim,
            values: self.values.iter().map(|v| v.iter().map(|x| delta * x).collect()).collect(),
            segments: self.segments.iter().map(|m| m.iter().map(|x| delta * delta * x).collect()).collect(),
            linear_segments: self.linear_segments,
        }
    }

    /// Appends `t` as an extra coordinate (for drift terms).
    pub fn with_time(&self) -> Result<Self> {
        if !self.linear_segments {
            return invalid("time augmentation needs linear segments");
        }
        let values: Vec<Vec<f64>> =
            self.values.iter().zip(&self.times).map(|(v, &t)| v.iter().copied().chain([t]).collect()).collect();
        lift_piecewise_linear(&self.times, &values)
    }

    /// Splits the segment containing `t` at `t`; returns the new path and the
    /// index of the node at `t`. No-op if `t` is already a node.
    pub fn insert_node(&self, t: f64) -> Result<(Self, usize)> {
        if !self.linear_segments {
            return invalid("node insertion needs linear segments");
        }
        let (t0, t1) = (self.times[0], self.times[self.len() - 1]);
        if !(t0..=t1).contains(&t) {
            return invalid(format!("time {t} outside [{t0}, {t1}]"));
        }
        let k = self.times.partition_point(|&s| s < t);
        if k < self.len() && self.times[k] == t {
            return Ok((self.clone(), k));
        }
        let lam = (t - self.times[k - 1]) / (self.times[k] - self.times[k - 1]);
        let v: Vec<f64> = self.values[k - 1].iter().zip(&self.values[k]).map(|(a, b)| a + lam * (b - a)).collect();
        let mut times = self.times.clone();
        let mut values = self.values.clone();
        times.insert(k, t);
        values.insert(k, v);
        Ok((lift_piecewise_linear(&times, &values)?, k))
    }

    /// Norms of all increments between node pairs.
    pub fn norm_table(&self) -> NormTable {
        let n = self.len();
        let mut t = NormTable::new(n);
        let d = self.dim;
        for s in 0..n {
            let mut x = vec![0.0; d];
            let mut xx = vec![0.0; d * d];
            for k in s..(n - 1) {
                let dx = diff(&self.values[k], &self.values[k + 1]);
                outer_add(&mut xx, &x, &dx, 1.0);
                for (a, b) in xx.iter_mut().zip(&self.segments[k]) {
                    *a += b;
                }
                for (a, b) in x.iter_mut().zip(&dx) {
                    *a += b;
                }
                t.set(s, k + 1, norm2(&x), norm2(&xx));
            }
        }
        t
    }

    /// Norms of `(X_{s,t} − Y_{s,t}, 𝕏_{s,t} − 𝕐_{s,t})` for paths on the same nodes.
    pub fn difference_table(&self, other: &Self) -> Result<NormTable> {
        if self.times != other.times {
            return invalid("difference needs identical nodes");
        }
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: other.dim });
        }
        let n = self.len();
        let d = self.dim;
        let mut t = NormTable::new(n);
        for s in 0..n {
            let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
            let (mut xx, mut yy) = (vec![0.0; d * d], vec![0.0; d * d]);
            for k in s..(n - 1) {
                for (p, acc, accm) in [(self, &mut x, &mut xx), (other, &mut y, &mut yy)] {
                    let dx = diff(&p.values[k], &p.values[k + 1]);
                    outer_add(accm, acc, &dx, 1.0);
                    for (a, b) in accm.iter_mut().zip(&p.segments[k]) {
                        *a += b;
                    }
                    for (a, b) in acc.iter_mut().zip(&dx) {
                        *a += b;
                    }
                }
                let l1 = norm2(&diff(&y, &x));
                let l2 = norm2(&diff(&yy, &xx));
                t.set(s, k + 1, l1, l2);
            }
        }
        Ok(t)
    }

    /// CSV with columns `t, x1..xd, xx11..xxdd` where the level-2 columns hold
    /// `𝕏_{t_0,t}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.dim;
        let mut head = vec!["t".to_string()];
        head.extend((1..=d).map(|i| format!("x{i}")));
        for i in 1..=d {
            for j in 1..=d {
                head.push(format!("xx{i}_{j}"));
            }
        }
        writeln!(w, "{}", head.join(","))?;
        let mut xx = vec![0.0; d * d];
        let mut x = vec![0.0; d];
        for k in 0..self.len() {
            if k > 0 {
                let dx = diff(&self.values[k - 1], &self.values[k]);
                outer_add(&mut xx, &x, &dx, 1.0);
                for (a, b) in xx.iter_mut().zip(&self.segments[k - 1]) {
                    *a += b;
                }
                for (a, b) in x.iter_mut().zip(&dx) {
                    *a += b;
                }
            }
            let row: Vec<String> = std::iter::once(self.times[k])
                .chain(self.values[k].iter().copied())
                .chain(xx.iter().copied())
                .map(|v| format!("{v:.17e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Concatenates two paths whose end and start nodes coincide.
pub fn chen_compose(a: &Level2Path, b: &Level2Path) -> Result<Level2Path> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { left: a.dim, right: b.dim });
    }
    let ta = a.times[a.len() - 1];
    let gap_t = (ta - b.times[0]).abs();
    let gap_x = norm2(&diff(&a.values[a.len() - 1], &b.values[0]));
    let gap = gap_t.max(gap_x);
    if gap > JOIN_TOL {
        return Err(Error::EndpointMismatch { gap });
    }
    let times = a.times.iter().chain(&b.times[1..]).copied().collect();
    let values = a.values.iter().chain(&b.values[1..]).cloned().collect();
    let segments = a.segments.iter().chain(&b.segments).cloned().collect();
    Ok(Level2Path { times, dim: a.dim, values, segments, linear_segments: a.linear_segments && b.linear_segments })
}

/// Norms `‖X_{t_i,t_j}‖` and `‖𝕏_{t_i,t_j}‖` for all `i < j`.
#[derive(Clone, Debug)]
pub struct NormTable {
    n: usize,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl NormTable {
    pub fn new(n: usize) -> Self {
        Self { n, l1: vec![0.0; n * n], l2: vec![0.0; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn set(&mut self, i: usize, j: usize, l1: f64, l2: f64) {
        self.l1[i * self.n + j] = l1;
        self.l2[i * self.n + j] = l2;
    }

    pub fn level1(&self, i: usize, j: usize) -> f64 {
        self.l1[i * self.n + j]
    }

    pub fn level2(&self, i: usize, j: usize) -> f64 {
        self.l2[i * self.n + j]
    }

    /// Best partition sums from node `start` to every later node:
    /// `(sup Σ ‖X‖^p, sup Σ ‖𝕏‖^{p/2})` over partitions of `[t_start, t_j]`.
    pub fn pvar_sums_from(&self, start: usize, p: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut v1 = vec![0.0f64; n];
        let mut v2 = vec![0.0f64; n];
        for j in (start + 1)..n {
            let (mut b1, mut b2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for i in start..j {
                b1 = b1.max(v1[i] + self.level1(i, j).powf(p));
                b2 = b2.max(v2[i] + self.level2(i, j).powf(p / 2.0));
            }
            v1[j] = b1;
            v2[j] = b2;
        }
        (v1, v2)
    }

    /// Homogeneous `p`-variation over the full node range.
    pub fn p_variation(&self, p: f64) -> PVariation {
        let (v1, v2) = self.pvar_sums_from(0, p);
        PVariation::from_sums(v1[self.n - 1], v2[self.n - 1], p)
    }
}

/// Homogeneous `p`-variation `‖X‖^p = ‖X‖^p_{p-var} + ‖𝕏‖^{p/2}_{p/2-var}`.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct PVariation {
    pub p: f64,
    /// `‖X‖_{p-var}`.
    pub level1: f64,
    /// `‖𝕏‖_{p/2-var}`.
    pub level2: f64,
    /// `‖X‖`.
    pub homogeneous: f64,
}

impl PVariation {
    pub fn from_sums(s1: f64, s2: f64, p: f64) -> Self {
        Self { p, level1: s1.powf(1.0 / p), level2: s2.powf(2.0 / p), homogeneous: (s1 + s2).powf(1.0 / p) }
    }

    /// `‖X‖^p`.
    pub fn homogeneous_pow(&self) -> f64 {
        self.homogeneous.powf(self.p)
    }
}

/// Grid homogeneous `p`-variation of a level-2 path, by dynamic programming
/// over the last partition point.
pub fn p_variation(x: &Level2Path, p: f64) -> Result<PVariation> {
    if p.is_nan() || p < 1.0 {
        return invalid(format!("p must be at least 1, got {p}"));
    }
    Ok(x.norm_table().p_variation(p))
}

/// `(sup ‖X_{s,t}‖/|t−s|^α, sup ‖𝕏_{s,t}‖/|t−s|^{2α})` over node pairs.
pub fn holder_norm(x: &Level2Path, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("Hölder exponent must lie in (0, 1], got {alpha}"));
    }
    let t = x.norm_table();
    let (mut h1, mut h2) = (0.0f64, 0.0f64);
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let dt = x.times[j] - x.times[i];
            h1 = h1.max(t.level1(i, j) / dt.powf(alpha));
            h2 = h2.max(t.level2(i, j) / dt.powf(2.0 * alpha));
        }
    }
    Ok((h1, h2))
}

/// `d` independent copies of `I_n(f_t)`: component `j` of sample `i` uses
/// stream `i·d + j`.
pub fn sample_components(k: &KernelPath, d: usize, seed: u64, index: u64) -> Vec<GaussianSample> {
    (0..d as u64).map(|j| GaussianSample::draw(seed, index * d as u64 + j, k.dim())).collect()
}

/// Node values of the `R^d` process for the given outcomes.
pub fn process_values(k: &KernelPath, omegas: &[GaussianSample]) -> Result<Vec<Vec<f64>>> {
    let cols = omegas.iter().map(|w| k.values(&w.xi)).collect::<Result<Vec<_>>>()?;
    Ok((0..k.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

/// Lift of the piecewise-linear interpolation of the process.
pub fn lift_process(k: &KernelPath, omegas: &[GaussianSample]) -> Result<Level2Path> {
    lift_piecewise_linear(k.grid(), &process_values(k, omegas)?)
}

/// Mean squared homogeneous distance to the finest lift, per dyadic level.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub kernel: String,
    pub p: f64,
    pub components: usize,
    pub levels: Vec<u32>,
    pub mean_sq_distance: Vec<MeanSe>,
    /// Paired differences `d²(l) − d²(l+1)` between consecutive levels.
    pub decrease: Vec<MeanSe>,
    pub finest_level: u32,
}

impl ConvergenceReport {
    /// Each consecutive paired decrease exceeds `k` standard errors.
    pub fn strictly_decreasing(&self, k: f64) -> bool {
        self.decrease.iter().all(|m| m.mean > k * m.se)
    }
}

/// Squared homogeneous `p`-variation distance between the lift of the
/// level-`l` dyadic interpolation and the finest lift, for each `l`.
pub fn level_distances(k: &KernelPath, omegas: &[GaussianSample], levels: &[u32], p: f64) -> Result<Vec<f64>> {
    let nodes = k.len();
    let cells = nodes - 1;
    if !cells.is_power_of_two() {
        return invalid("kernel grid must have 2^L cells");
    }
    let finest = cells.trailing_zeros();
    let values = process_values(k, omegas)?;
    let fine = lift_piecewise_linear(k.grid(), &values)?;
    let grid = k.grid();
    levels
        .iter()
        .map(|&l| {
            if l > finest {
                return invalid(format!("level {l} finer than the kernel grid ({finest})"));
            }
            let stride = 1usize << (finest - l);
            let interp: Vec<Vec<f64>> = (0..nodes)
                .map(|i| {
                    let a = (i / stride) * stride;
                    if a == i {
                        return values[i].clone();
                    }
                    let b = a + stride;
                    let lam = (grid[i] - grid[a]) / (grid[b] - grid[a]);
                    values[a].iter().zip(&values[b]).map(|(x, y)| x + lam * (y - x)).collect()
                })
                .collect();
            let coarse = lift_piecewise_linear(grid, &interp)?;
            let h = coarse.difference_table(&fine)?.p_variation(p).homogeneous;
            Ok(h * h)
        })
        .collect()
}

/// Monte Carlo convergence of dyadic piecewise-linear lifts.
pub fn dyadic_convergence(
    k: &KernelPath,
    levels: &[u32],
    p: f64,
    components: usize,
    samples: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if samples < 2 {
        return invalid("need at least two samples");
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) || levels.is_empty() {
        return invalid("levels must be increasing");
    }
    let finest = (k.len() - 1).trailing_zeros();
    let per_sample = mc::par_map(samples, |i| {
        let omegas = sample_components(k, components, seed, i as u64);
        level_distances(k, &omegas, levels, p)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mean_sq_distance =
        (0..levels.len()).map(|l| MeanSe::of(&per_sample.iter().map(|v| v[l]).collect::<Vec<_>>())).collect();
    let decrease = (0..levels.len().saturating_sub(1))
        .map(|l| MeanSe::of(&per_sample.iter().map(|v| v[l] - v[l + 1]).collect::<Vec<_>>()))
        .collect();
    Ok(ConvergenceReport {
        kernel: k.label().to_string(),
        p,
        components,
        levels: levels.to_vec(),
        mean_sq_distance,
        decrease,
        finest_level: finest,
    })
}

/// Checks `⟨φ_i, φ_j⟩ = δ_{ij}` within `1e−10`.
pub fn check_orthonormal(basis: &[SymTensor]) -> Result<()> {
    let mut dev = 0.0f64;
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate().skip(i) {
            let g = symtensor::inner(a, b)?;
            dev = dev.max((g - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    if dev > 1e-10 {
        return Err(Error::NotOrthonormal { deviation: dev });
    }
    Ok(())
}

/// Kernel of the partial sum `Σ_{i<K} ⟨f_t, φ_i⟩ I_n(φ_i)`.
pub fn kl_partial_sum(k: &KernelPath, basis: &[SymTensor], big_k: usize) -> Result<KernelPath> {
    check_orthonormal(basis)?;
    if big_k > basis.len() {
        return invalid(format!("K = {big_k} exceeds basis size {}", basis.len()));
    }
    let mut ks = Vec::with_capacity(k.len());
    for i in 0..k.len() {
        let f = k.kernel(i);
        let mut g = SymTensor::zero(k.order(), k.dim());
        for phi in &basis[..big_k] {
            g.axpy(symtensor::inner(&f, phi)?, phi)?;
        }
        ks.push(g);
    }
    KernelPath::from_tensors(k.grid().to_vec(), ks, format!("{}-kl{big_k}", k.label()))
}

/// Exact second moments of the lifted process over all node pairs.
#[derive(Clone, Debug, Serialize)]
pub struct SecondMoments {
    /// `E[X_{s,t}²]` for one component, indexed `[s][t]`.
    pub level1: Vec<Vec<f64>>,
    /// `E[(𝕏^{12}_{s,t})²]` for two independent components, `[s][t]`.
    pub level2_cross: Vec<Vec<f64>>,
}

/// Second moments of the piecewise-linear lift computed from the covariance.
pub fn second_moments(k: &KernelPath) -> SecondMoments {
    let r = k.covariance_matrix();
    let n = k.len();
    let mut level1 = vec![vec![0.0; n]; n];
    let mut level2_cross = vec![vec![0.0; n]; n];
    for s in 0..n {
        for t in (s + 1)..n {
            level1[s][t] = r[t][t] - 2.0 * r[s][t] + r[s][s];
            // U_q = ½(X_q + X_{q+1}) − X_s, Δ_q = X_{q+1} − X_q.
            let cu = |q: usize, w: usize| {
                0.25 * (r[q][w] + r[q][w + 1] + r[q + 1][w] + r[q + 1][w + 1])
                    - 0.5 * (r[q][s] + r[q + 1][s])
                    - 0.5 * (r[s][w] + r[s][w + 1])
                    + r[s][s]
            };
            let cd = |q: usize, w: usize| r[q + 1][w + 1] - r[q + 1][w] - r[q][w + 1] + r[q][w];
            let mut acc = 0.0;
            for q in s..t {
                for w in s..t {
                    acc += cu(q, w) * cd(q, w);
                }
            }
            level2_cross[s][t] = acc;
        }
    }
    SecondMoments { level1, level2_cross }
}

/// Grid `ρ`-variation of `t ↦ ⟨f_t, φ⟩` against `‖φ‖·√(‖⟨f_·,f_·⟩‖_{ρ-var})`.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct EmbeddingCheck {
    pub variation: f64,
    pub bound: f64,
    /// The bound uses the exact grid 2D variation (else the finest-grid upper bound).
    pub exact_bound: bool,
}

pub fn embedding_norm(k: &KernelPath, phi: &SymTensor, rho: f64) -> Result<EmbeddingCheck> {
    if rho < 1.0 {
        return invalid(format!("ρ must be at least 1, got {rho}"));
    }
    let vals: Vec<f64> = (0..k.len()).map(|i| symtensor::inner(&k.kernel(i), phi)).collect::<Result<_>>()?;
    let n = vals.len();
    let mut v = vec![0.0f64; n];
    for j in 1..n {
        v[j] = (0..j).map(|i| v[i] + (vals[j] - vals[i]).abs().powf(rho)).fold(0.0, f64::max);
    }
    let variation = v[n - 1].powf(1.0 / rho);
    let gram = k.gram();
    let var2 = kernels::variation_2d(&gram, rho, (0, n - 1), (0, n - 1))?;
    let r_var = if var2.exact { var2.lower } else { var2.upper };
    Ok(EmbeddingCheck { variation, bound: phi.norm() * r_var.sqrt(), exact_bound: var2.exact })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{brownian_kernel, dyadic_grid};

    #[test]
    fn parabola_has_sixth_area() {
        let n = 512;
        let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let values: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, t * t]).collect();
        let x = lift_piecewise_linear(&times, &values).unwrap();
        let (_, xx) = x.increment(0, n);
        let area = 0.5 * (xx[1] - xx[2]);
        assert!((area.abs() - 1.0 / 6.0).abs() < 1e-5);
    }

    #[test]
    fn compose_rejects_gaps() {
        let a = lift_piecewise_linear(&[0.0, 1.0], &[vec![0.0], vec![1.0]]).unwrap();
        let b = lift_piecewise_linear(&[1.0, 2.0], &[vec![1.5], vec![2.0]]).unwrap();
        assert!(matches!(chen_compose(&a, &b), Err(Error::EndpointMismatch { .. })));
        let c = lift_piecewise_linear(&[1.0, 2.0], &[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(chen_compose(&a, &c).unwrap().len(), 3);
    }

    #[test]
    fn embedding_of_first_cell() {
        let grid = dyadic_grid(3);
        let k = brownian_kernel(8, &grid).unwrap();
        let phi = SymTensor::basis(&[0], 8).unwrap();
        let e = embedding_norm(&k, &phi, 1.0).unwrap();
        assert!((e.variation - (0.125f64).sqrt()).abs() < 1e-14);
        assert!((e.bound - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_orthonormal_basis() {
        let grid = dyadic_grid(2);
        let k = brownian_kernel(4, &grid).unwrap();
        let bad = vec![SymTensor::basis(&[0], 4).unwrap().scaled(2.0)];
        assert!(matches!(kl_partial_sum(&k, &bad, 1), Err(Error::NotOrthonormal { .. })));
    }

    #[test]
    fn insert_node_preserves_increments() {
        let times = [0.0, 0.5, 1.0];
        let x = lift_piecewise_linear(&times, &[vec![0.0, 0.0], vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let (y, k) = x.insert_node(0.3).unwrap();
        assert_eq!(k, 1);
        let (a, aa) = x.increment(0, 2);
        let (b, bb) = y.increment(0, 3);
        for (u, v) in a.iter().chain(&aa).zip(b.iter().chain(&bb)) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}
