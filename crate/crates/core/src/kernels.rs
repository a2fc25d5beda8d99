//! Kernel paths `t ↦ f_t` on a time grid, their covariances, and grid
//! checks of the covariance regularity conditions used by the lifts.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::chaos::{self, DerivativeField};
use crate::error::{invalid, Error, Result};
use crate::symtensor::{self, factorial, SymTensor};

const GRID_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Repr {
    Explicit(Vec<SymTensor>),
    /// Symmetrized product of order-1 factors with disjoint supports.
    Product(Vec<KernelPath>),
}

/// How much a kernel's regularity checks can be trusted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelStatus {
    /// Exact construction.
    Exact,
    /// Numerically approximated construction (e.g. a Cholesky factor).
    Approximate,
    /// Supplied by the caller; only grid-restricted checks are available.
    GridCertified,
}

/// Deterministic kernels `f_t ∈ Sym^n(R^M)` on grid nodes, so that
/// `X_t = I_n(f_t)`.
#[derive(Debug)]
pub struct KernelPath {
    order: usize,
    dim: usize,
    grid: Vec<f64>,
    repr: Repr,
    label: String,
    status: KernelStatus,
    fields: OnceLock<Vec<Vec<DerivativeField>>>,
}

impl Clone for KernelPath {
    fn clone(&self) -> Self {
        Self {
            order: self.order,
            dim: self.dim,
            grid: self.grid.clone(),
            repr: self.repr.clone(),
            label: self.label.clone(),
            status: self.status,
            fields: OnceLock::new(),
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return invalid("grid needs at least two nodes");
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("grid must be finite and strictly increasing");
    }
    Ok(())
}

/// `2^level + 1` equally spaced nodes on `[0, 1]`.
pub fn dyadic_grid(level: u32) -> Vec<f64> {
    let n = 1usize << level;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

impl KernelPath {
    /// Wraps caller-supplied kernels; regularity is only grid-certified.
    pub fn from_tensors(grid: Vec<f64>, kernels: Vec<SymTensor>, label: impl Into<String>) -> Result<Self> {
        check_grid(&grid)?;
        if kernels.len() != grid.len() {
            return Err(Error::DimensionMismatch { left: grid.len(), right: kernels.len() });
        }
        let (order, dim) = (kernels[0].order(), kernels[0].dim());
        for k in &kernels {
            if k.dim() != dim {
                return Err(Error::DimensionMismatch { left: dim, right: k.dim() });
            }
            if k.order() != order {
                return Err(Error::OrderMismatch { left: order, right: k.order() });
            }
        }
        Ok(Self::build(order, dim, grid, Repr::Explicit(kernels), label.into(), KernelStatus::GridCertified))
    }

    fn build(order: usize, dim: usize, grid: Vec<f64>, repr: Repr, label: String, status: KernelStatus) -> Self {
        Self { order, dim, grid, repr, label, status, fields: OnceLock::new() }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Number of grid nodes.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn status(&self) -> KernelStatus {
        self.status
    }

    pub fn is_product(&self) -> bool {
        matches!(self.repr, Repr::Product(_))
    }

    /// Index of the grid node at time `t`.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let i = self.grid.partition_point(|&g| g < t - GRID_TOL);
        if i < self.grid.len() && (self.grid[i] - t).abs() <= GRID_TOL {
            Ok(i)
        } else {
            Err(Error::OffGrid { t })
        }
    }

    /// `f_{t_i}` as an explicit tensor.
    pub fn kernel(&self, i: usize) -> SymTensor {
        match &self.repr {
            Repr::Explicit(ks) => ks[i].clone(),
            Repr::Product(fs) => fs.iter().fold(SymTensor::scalar(1.0, self.dim), |acc, g| {
                symtensor::symmetrize_outer(&acc, &g.kernel(i)).expect("factors share dim")
            }),
        }
    }

    /// `f_{t_j} − f_{t_i}`.
    pub fn increment(&self, i: usize, j: usize) -> SymTensor {
        self.kernel(j).sub(&self.kernel(i)).expect("same shape")
    }

    /// `X_{t_i} = I_n(f_{t_i})` at `ξ`.
    pub fn eval(&self, i: usize, xi: &[f64]) -> f64 {
        match &self.repr {
            Repr::Explicit(ks) => chaos::eval_unchecked(&ks[i], xi),
            Repr::Product(fs) => fs.iter().map(|g| g.eval(i, xi)).product(),
        }
    }

    /// `X` at every node.
    pub fn values(&self, xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: xi.len() });
        }
        Ok((0..self.len()).map(|i| self.eval(i, xi)).collect())
    }

    /// `⟨f_{t_i}, f_{t_j}⟩`.
    pub fn inner(&self, i: usize, j: usize) -> f64 {
        match &self.repr {
            Repr::Explicit(ks) => symtensor::inner(&ks[i], &ks[j]).expect("same shape"),
            Repr::Product(fs) => fs.iter().map(|g| g.inner(i, j)).product::<f64>() / factorial(fs.len()),
        }
    }

    /// Gram matrix `⟨f_{t_i}, f_{t_j}⟩` over all nodes.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = self.inner(i, j);
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        g
    }

    /// Covariance `E[X_s X_t] = n!⟨f_s, f_t⟩` at grid times.
    pub fn covariance(&self, s: f64, t: f64) -> Result<f64> {
        let (i, j) = (self.node_index(s)?, self.node_index(t)?);
        Ok(factorial(self.order) * self.inner(i, j))
    }

    /// Covariance matrix over all nodes.
    pub fn covariance_matrix(&self) -> Vec<Vec<f64>> {
        let nf = factorial(self.order);
        let mut g = self.gram();
        g.iter_mut().flatten().for_each(|v| *v *= nf);
        g
    }

    /// `f_{s,t} ⊗̂_r f_{u,v}` for grid node indices.
    pub fn rect_increment(&self, st: (usize, usize), uv: (usize, usize), r: usize) -> Result<SymTensor> {
        let a = self.increment(st.0, st.1);
        let b = self.increment(uv.0, uv.1);
        symtensor::contract(&a, &b, r)
    }

    fn fields(&self) -> &Vec<Vec<DerivativeField>> {
        self.fields.get_or_init(|| match &self.repr {
            Repr::Explicit(ks) => {
                ks.iter().map(|f| (0..=self.order).map(|k| chaos::malliavin_or_zero(f, k)).collect()).collect()
            }
            Repr::Product(_) => Vec::new(),
        })
    }

    /// `D^k X_{t_i}` at `ξ` as an order-`k` tensor (zero for `k > n`).
    pub fn derivative(&self, i: usize, k: usize, xi: &[f64]) -> SymTensor {
        if k > self.order {
            return SymTensor::zero(k, self.dim);
        }
        match &self.repr {
            Repr::Explicit(_) => self.fields()[i][k].eval(xi).expect("dimension checked"),
            Repr::Product(fs) => {
                let ys: Vec<f64> = fs.iter().map(|g| g.eval(i, xi)).collect();
                let gs: Vec<SymTensor> = fs.iter().map(|g| g.kernel(i)).collect();
                let mut out = SymTensor::zero(k, self.dim);
                for subset in k_subsets(fs.len(), k) {
                    let rest: f64 = (0..fs.len()).filter(|j| !subset.contains(j)).map(|j| ys[j]).product();
                    let mut t = SymTensor::scalar(factorial(k) * rest, self.dim);
                    for &j in &subset {
                        t = symtensor::symmetrize_outer(&t, &gs[j]).expect("same dim");
                    }
                    out.axpy(1.0, &t).expect("same shape");
                }
                out
            }
        }
    }

    /// `D X_{t_i}` at `ξ` as a dense coordinate vector.
    pub fn gradient(&self, i: usize, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if self.order == 0 {
            return out;
        }
        match &self.repr {
            Repr::Explicit(_) => {
                for (a, c) in self.fields()[i][1].eval(xi).expect("dimension checked").terms() {
                    out[a[0]] += c;
                }
            }
            Repr::Product(fs) => {
                let ys: Vec<f64> = fs.iter().map(|g| g.eval(i, xi)).collect();
                for (j, g) in fs.iter().enumerate() {
                    let rest: f64 = ys.iter().enumerate().filter(|(l, _)| *l != j).map(|(_, y)| y).product();
                    for (a, c) in g.kernel(i).terms() {
                        out[a[0]] += rest * c;
                    }
                }
            }
        }
        out
    }
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Brownian kernel `f_t = 1_{[0,t]}` in the step basis `e_i = 1_{cell i}/√Δ_i`,
/// so `⟨f_s, f_t⟩ = min(s, t)`. Requires `dim == grid.len() − 1`.
pub fn brownian_kernel(dim: usize, grid: &[f64]) -> Result<KernelPath> {
    let cells = grid.len().saturating_sub(1);
    if dim != cells {
        return invalid(format!("brownian kernel needs one coordinate per cell: dim {dim}, cells {cells}"));
    }
    if cells < 2 {
        return invalid("brownian kernel needs at least two cells");
    }
    brownian_block(grid, dim, 0)
}

/// Brownian kernel on coordinates `offset..offset+cells` of `R^dim`.
pub fn brownian_block(grid: &[f64], dim: usize, offset: usize) -> Result<KernelPath> {
    check_grid(grid)?;
    if grid[0] != 0.0 {
        return invalid("brownian kernel grid must start at 0");
    }
    let cells = grid.len() - 1;
    if offset + cells > dim {
        return Err(Error::DimensionMismatch { left: dim, right: offset + cells });
    }
    let mut ks = Vec::with_capacity(grid.len());
    let mut cur = SymTensor::zero(1, dim);
    ks.push(cur.clone());
    for i in 0..cells {
        cur.add_term(&[offset + i], (grid[i + 1] - grid[i]).sqrt());
        ks.push(cur.clone());
    }
    Ok(KernelPath::build(1, dim, grid.to_vec(), Repr::Explicit(ks), "brownian".into(), KernelStatus::Exact))
}

/// Symmetrized product of order-1 kernels with pairwise disjoint supports.
pub fn product_kernel(factors: Vec<KernelPath>) -> Result<KernelPath> {
    let first = factors.first().ok_or_else(|| Error::Invalid("product of no factors".into()))?;
    let (dim, grid) = (first.dim, first.grid.clone());
    let mut used = vec![false; dim];
    for g in &factors {
        if g.order != 1 {
            return Err(Error::OrderMismatch { left: 1, right: g.order });
        }
        if g.dim != dim {
            return Err(Error::DimensionMismatch { left: dim, right: g.dim });
        }
        if g.grid != grid {
            return invalid("product factors must share the grid");
        }
        let mut mine = vec![false; dim];
        for i in 0..g.len() {
            for (a, _) in g.kernel(i).terms() {
                mine[a[0]] = true;
            }
        }
        for (j, m) in mine.into_iter().enumerate() {
            if m && used[j] {
                return invalid(format!("product factors overlap on coordinate {}", j + 1));
            }
            used[j] |= m;
        }
    }
    let status = if factors.iter().all(|g| g.status == KernelStatus::Exact) {
        KernelStatus::Exact
    } else {
        KernelStatus::GridCertified
    };
    let label = format!("product[{}]", factors.iter().map(|g| g.label.as_str()).collect::<Vec<_>>().join(","));
    Ok(KernelPath::build(factors.len(), dim, grid, Repr::Product(factors), label, status))
}

/// Product of `n` independent Brownian kernels on consecutive coordinate blocks.
pub fn brownian_product(n: usize, grid: &[f64]) -> Result<KernelPath> {
    let cells = grid.len() - 1;
    let dim = n * cells;
    let factors = (0..n).map(|j| brownian_block(grid, dim, j * cells)).collect::<Result<Vec<_>>>()?;
    product_kernel(factors)
}

/// `f_t = t·F` for a fixed tensor `F`.
pub fn linear_kernel(f: &SymTensor, grid: &[f64]) -> Result<KernelPath> {
    check_grid(grid)?;
    let ks = grid.iter().map(|&t| f.scaled(t)).collect();
    Ok(KernelPath::build(f.order(), f.dim(), grid.to_vec(), Repr::Explicit(ks), "linear".into(), KernelStatus::Exact))
}

/// Fractional Brownian motion at the nodes via a Cholesky factor of the
/// node covariance `½(s^{2H} + t^{2H} − |t−s|^{2H})`.
pub fn fbm_kernel(hurst: f64, grid: &[f64]) -> Result<KernelPath> {
    check_grid(grid)?;
    if !(hurst > 0.0 && hurst < 1.0) {
        return invalid(format!("Hurst index must lie in (0, 1), got {hurst}"));
    }
    if grid[0] != 0.0 {
        return invalid("fbm grid must start at 0");
    }
    let n = grid.len() - 1;
    let two_h = 2.0 * hurst;
    let cov = DMatrix::from_fn(n, n, |a, b| {
        let (s, t) = (grid[a + 1], grid[b + 1]);
        0.5 * (s.powf(two_h) + t.powf(two_h) - (t - s).abs().powf(two_h))
    });
    let chol = cov.cholesky().ok_or_else(|| Error::Invalid("fbm covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut ks = vec![SymTensor::zero(1, n)];
    for a in 0..n {
        let mut f = SymTensor::zero(1, n);
        for b in 0..=a {
            f.add_term(&[b], l[(a, b)]);
        }
        ks.push(f);
    }
    Ok(KernelPath::build(1, n, grid.to_vec(), Repr::Explicit(ks), format!("fbm(H={hurst})"), KernelStatus::Approximate))
}

/// A function on grid pairs, `F(t_i, t_j)`, with a variation exponent.
#[derive(Clone, Debug, Serialize)]
pub struct Control2D {
    pub values: Vec<Vec<f64>>,
    pub rho: f64,
}

/// Rectangular increment `F([t_a, t_b] × [t_c, t_d])`.
pub fn rect(f: &[Vec<f64>], a: usize, b: usize, c: usize, d: usize) -> f64 {
    f[b][d] - f[a][d] - f[b][c] + f[a][c]
}

/// Grid 2D `ρ`-variation with bracketing bounds.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Variation2D {
    /// Value attained by an explicit pair of partitions.
    pub lower: f64,
    /// `Σ |F(cell)|` over the finest grid, which dominates every partition sum.
    pub upper: f64,
    /// `lower` is the exact grid supremum.
    pub exact: bool,
}

/// Largest side (in cells) searched exhaustively.
pub const EXHAUSTIVE_2D_CELLS: usize = 12;

/// `sup_{P,P'} (Σ_{I∈P, J∈P'} |F(I×J)|^ρ)^{1/ρ}` over grid partitions of
/// `[t_a, t_b] × [t_c, t_d]`.
pub fn variation_2d(f: &[Vec<f64>], rho: f64, x: (usize, usize), y: (usize, usize)) -> Result<Variation2D> {
    if rho < 1.0 {
        return invalid(format!("2D variation needs ρ ≥ 1, got {rho}"));
    }
    let (a, b) = x;
    let (c, d) = y;
    if a >= b || c >= d || b >= f.len() || d >= f[0].len() {
        return invalid("empty or out-of-range region");
    }
    let upper: f64 =
        (a..b).flat_map(|i| (c..d).map(move |j| (i, j))).map(|(i, j)| rect(f, i, i + 1, j, j + 1).abs()).sum();
    let ys: Vec<usize> = (c..=d).collect();
    let xs_all: Vec<usize> = (a..=b).collect();
    if b - a <= EXHAUSTIVE_2D_CELLS {
        let interior = b - a - 1;
        let mut best = 0.0f64;
        let mut pts = Vec::with_capacity(b - a + 1);
        for mask in 0u32..(1u32 << interior) {
            pts.clear();
            pts.push(a);
            for k in 0..interior {
                if mask & (1 << k) != 0 {
                    pts.push(a + 1 + k);
                }
            }
            pts.push(b);
            best = best.max(best_partner(f, rho, &pts, &ys).0);
        }
        return Ok(Variation2D { lower: best.powf(1.0 / rho), upper, exact: true });
    }
    // Alternating optimisation from several starting x-partitions.
    let mut best = 0.0f64;
    let mut starts: Vec<Vec<usize>> = vec![xs_all.clone(), vec![a, b]];
    let mut step = 2;
    while step < b - a {
        let mut p: Vec<usize> = (a..b).step_by(step).collect();
        p.push(b);
        starts.push(p);
        step *= 2;
    }
    for start in starts {
        let mut px = start;
        let mut last = -1.0;
        for _ in 0..50 {
            let (_, py) = best_partner(f, rho, &px, &ys);
            let (v, nx) = best_partner_t(f, rho, &py, &xs_all);
            px = nx;
            if v <= last * (1.0 + 1e-14) {
                last = last.max(v);
                break;
            }
            last = v;
        }
        best = best.max(last);
    }
    Ok(Variation2D { lower: best.powf(1.0 / rho), upper, exact: false })
}

/// For a fixed x-partition, the best y-partition by dynamic programming.
fn best_partner(f: &[Vec<f64>], rho: f64, px: &[usize], ys: &[usize]) -> (f64, Vec<usize>) {
    dp_partition(ys, |c, d| px.windows(2).map(|w| rect(f, w[0], w[1], c, d).abs().powf(rho)).sum())
}

fn best_partner_t(f: &[Vec<f64>], rho: f64, py: &[usize], xs: &[usize]) -> (f64, Vec<usize>) {
    dp_partition(xs, |a, b| py.windows(2).map(|w| rect(f, a, b, w[0], w[1]).abs().powf(rho)).sum())
}

/// Maximizes an additive interval weight over partitions of the node list.
fn dp_partition(nodes: &[usize], weight: impl Fn(usize, usize) -> f64) -> (f64, Vec<usize>) {
    let n = nodes.len();
    let mut v = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    v[0] = 0.0;
    for j in 1..n {
        for i in 0..j {
            let cand = v[i] + weight(nodes[i], nodes[j]);
            if cand > v[j] {
                v[j] = cand;
                arg[j] = i;
            }
        }
    }
    let mut path = vec![nodes[n - 1]];
    let mut j = n - 1;
    while j > 0 {
        j = arg[j];
        path.push(nodes[j]);
    }
    path.reverse();
    (v[n - 1], path)
}

/// Outcome of a grid check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Bounds straddle the threshold.
    Inconclusive,
}

/// Worst case of an inequality `lhs ≤ rhs` over grid intervals or rectangles.
#[derive(Clone, Debug, Serialize)]
pub struct Clause {
    pub verdict: Verdict,
    /// Largest `lhs/rhs` using the lower bound of `lhs`.
    pub worst_ratio_lower: f64,
    /// Largest `lhs/rhs` using the upper bound of `lhs`.
    pub worst_ratio_upper: f64,
    /// Node indices where the worst lower ratio occurs.
    pub worst_at: Vec<usize>,
}

impl Clause {
    fn from_ratios(lower: f64, upper: f64, at: Vec<usize>, tol: f64) -> Self {
        let verdict = if upper <= 1.0 + tol {
            Verdict::Pass
        } else if lower > 1.0 + tol {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        };
        Self { verdict, worst_ratio_lower: lower, worst_ratio_upper: upper, worst_at: at }
    }
}

/// Contraction clause for one depth `r`.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionClause {
    pub r: usize,
    #[serde(flatten)]
    pub clause: Clause,
}

/// Which 2D control `ω` to test the contraction bounds against.
#[derive(Clone, Debug)]
pub enum ControlChoice {
    /// `ω(A) = ‖R‖^ρ_{ρ-var; A}` for the covariance `R`.
    Covariance,
    /// The explicit control for symmetrized products of independent factors,
    /// built from the factors' grid `ρ`-variation in `H`.
    ProductFactors,
    /// `ω(A) = ‖F‖^ρ_{ρ-var; A}` for a supplied grid function.
    Supplied(Control2D),
}

/// Grid report on the regularity conditions of a kernel.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub kernel: String,
    pub status: KernelStatus,
    pub certification: &'static str,
    pub rho: f64,
    pub control: String,
    /// `‖R‖^ρ_{ρ-var;[s,t]²} ≤ |t − s|`.
    pub covariance_holder: Clause,
    /// `‖f_{s,t} ⊗̂_r f_{u,v}‖ ≤ ω([s,t]×[u,v])^{1/ρ}` for each `r`.
    pub contraction: Vec<ContractionClause>,
    /// `ω([s,t]²) ≤ |t − s|`.
    pub control_holder: Clause,
    /// Largest `|n!⟨f_{s,t}, f_{u,v}⟩ − R([s,t]×[u,v])|`; an internal identity.
    pub identity_error: f64,
}

const CHECK_TOL: f64 = 1e-9;

/// Grid `ρ`-variation of an `H`-valued path given its Gram matrix, for every
/// start node: `out[s][t] = ‖g‖^ρ_{ρ-var;[t_s,t_t]}`.
pub fn path_variation_table(gram: &[Vec<f64>], rho: f64) -> Vec<Vec<f64>> {
    let n = gram.len();
    let dist = |a: usize, b: usize| (gram[a][a] - 2.0 * gram[a][b] + gram[b][b]).max(0.0).sqrt();
    let mut out = vec![vec![0.0; n]; n];
    for s in 0..n {
        let mut v = vec![0.0f64; n];
        for t in (s + 1)..n {
            let mut best = 0.0f64;
            for u in s..t {
                best = best.max(v[u] + dist(u, t).powf(rho));
            }
            v[t] = best;
            out[s][t] = best;
        }
    }
    out
}

/// Runs the grid checks of the covariance and contraction conditions.
pub fn check_assumptions(k: &KernelPath, rho: f64, control: &ControlChoice) -> Result<AssumptionReport> {
    if !(1.0..1.5).contains(&rho) {
        return invalid(format!("ρ must lie in [1, 3/2), got {rho}"));
    }
    let n = k.len();
    let cov = k.covariance_matrix();
    let dt = |s: usize, t: usize| k.grid[t] - k.grid[s];

    let mut lo_w = 0.0f64;
    let mut hi_w = 0.0f64;
    let mut at = vec![0, 0];
    let mut var_cache = vec![vec![None; n]; n];
    for s in 0..n {
        for t in (s + 1)..n {
            let v = variation_2d(&cov, rho, (s, t), (s, t))?;
            var_cache[s][t] = Some(v);
            let lo = v.lower.powf(rho) / dt(s, t);
            let hi = v.upper.powf(rho) / dt(s, t);
            if lo > lo_w {
                lo_w = lo;
                at = vec![s, t];
            }
            hi_w = hi_w.max(hi);
        }
    }
    let covariance_holder = Clause::from_ratios(lo_w, hi_w, at, CHECK_TOL);

    // ω on rectangles, as (lower, upper) bounds.
    type Omega = Box<dyn Fn(usize, usize, usize, usize) -> (f64, f64)>;
    let (omega, control_name): (Omega, String) = match control {
        ControlChoice::Covariance => {
            let f = cov.clone();
            (
                Box::new(move |a, b, c, d| {
                    let v = variation_2d(&f, rho, (a, b), (c, d)).expect("valid region");
                    (v.lower.powf(rho), v.upper.powf(rho))
                }),
                "covariance variation".into(),
            )
        }
        ControlChoice::Supplied(c2) => {
            if c2.values.len() != n {
                return Err(Error::DimensionMismatch { left: n, right: c2.values.len() });
            }
            let f = c2.values.clone();
            let r2 = c2.rho;
            (
                Box::new(move |a, b, c, d| {
                    let v = variation_2d(&f, r2, (a, b), (c, d)).expect("valid region");
                    (v.lower.powf(r2), v.upper.powf(r2))
                }),
                "supplied".into(),
            )
        }
        ControlChoice::ProductFactors => {
            let Repr::Product(fs) = &k.repr else {
                return invalid("factor control needs a product kernel");
            };
            let tables: Vec<Vec<Vec<f64>>> = fs.iter().map(|g| path_variation_table(&g.gram(), rho)).collect();
            let total: f64 = fs
                .iter()
                .zip(&tables)
                .map(|(g, tab)| (tab[0][n - 1].powf(1.0 / rho) + g.inner(0, 0).sqrt()).powf(2.0 * rho))
                .sum();
            let scale = 2f64.powf(rho - 1.0) * total;
            (
                Box::new(move |a, b, c, d| {
                    let w: f64 = tables.iter().map(|tab| tab[a][b] * tab[c][d]).sum::<f64>() * scale;
                    (w, w)
                }),
                "symmetrized-product factor control".into(),
            )
        }
    };

    let mut identity_error = 0.0f64;
    let mut contraction = Vec::new();
    let incs: Vec<Vec<SymTensor>> = (0..n)
        .map(|s| (0..n).map(|t| if t > s { k.increment(s, t) } else { SymTensor::zero(k.order, k.dim) }).collect())
        .collect();
    let mut omega_cache = std::collections::HashMap::new();
    let mut om =
        |a: usize, b: usize, c: usize, d: usize| *omega_cache.entry((a, b, c, d)).or_insert_with(|| omega(a, b, c, d));
    for r in 1..=k.order {
        let (mut lo_w, mut hi_w, mut at) = (0.0f64, 0.0f64, vec![0; 4]);
        for a in 0..n {
            for b in (a + 1)..n {
                for c in 0..n {
                    for d in (c + 1)..n {
                        let lhs_t = symtensor::contract(&incs[a][b], &incs[c][d], r)?;
                        let lhs = lhs_t.norm();
                        if r == k.order {
                            let val = factorial(k.order) * lhs_t.coeff(&[]);
                            identity_error = identity_error.max((val - rect(&cov, a, b, c, d)).abs());
                        }
                        let (wl, wu) = om(a, b, c, d);
                        // Lower ratio uses the largest admissible ω; upper the smallest.
                        let lo = ratio(lhs, wu.powf(1.0 / rho));
                        let hi = ratio(lhs, wl.powf(1.0 / rho));
                        if lo > lo_w {
                            lo_w = lo;
                            at = vec![a, b, c, d];
                        }
                        hi_w = hi_w.max(hi);
                    }
                }
            }
        }
        contraction.push(ContractionClause { r, clause: Clause::from_ratios(lo_w, hi_w, at, CHECK_TOL) });
    }

    let (mut lo_w, mut hi_w, mut at) = (0.0f64, 0.0f64, vec![0, 0]);
    for s in 0..n {
        for t in (s + 1)..n {
            let (wl, wu) = om(s, t, s, t);
            let (lo, hi) = (wl / dt(s, t), wu / dt(s, t));
            if lo > lo_w {
                lo_w = lo;
                at = vec![s, t];
            }
            hi_w = hi_w.max(hi);
        }
    }
    let control_holder = Clause::from_ratios(lo_w, hi_w, at, CHECK_TOL);

    Ok(AssumptionReport {
        kernel: k.label.clone(),
        status: k.status,
        certification: "grid-certified",
        rho,
        control: control_name,
        covariance_holder,
        contraction,
        control_holder,
        identity_error,
    })
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs <= 1e-14 {
        0.0
    } else if rhs <= 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}
