//! Multiple Wiener–Itô integrals on a truncated orthonormal basis.
//!
//! With `ξ_j = W(e_j)` i.i.d. standard normal, `I_n(ê_α) = Π_j H_{α_j}(ξ_j)`
//! where `H_k` are the probabilists' Hermite polynomials and `α_j` is the
//! multiplicity of `j` in `α`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::mc::{self, MeanSe};
use crate::symtensor::{self, binomial, factorial, multi_indices, multiplicities, MultiIndex, SymTensor};

/// Probabilists' Hermite polynomial `H_k(x)`.
pub fn hermite(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Gaussian coordinates `ξ` of one outcome, tagged with where they came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianSample {
    pub seed: u64,
    pub index: u64,
    pub xi: Vec<f64>,
}

impl GaussianSample {
    /// Draws `dim` coordinates from stream `(seed, index)`.
    pub fn draw(seed: u64, index: u64, dim: usize) -> Self {
        Self { seed, index, xi: mc::normals(seed, index, dim) }
    }

    pub fn from_xi(xi: Vec<f64>) -> Self {
        Self { seed: 0, index: 0, xi }
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    /// The outcome `ω + r·h`: coordinates shifted by `r⟨h, e_j⟩`.
    pub fn shifted(&self, h: &[f64], r: f64) -> Result<Self> {
        if h.len() != self.xi.len() {
            return Err(Error::DimensionMismatch { left: self.xi.len(), right: h.len() });
        }
        let xi = self.xi.iter().zip(h).map(|(x, hj)| x + r * hj).collect();
        Ok(Self { seed: self.seed, index: self.index, xi })
    }

    /// The outcome with coordinates `ε·ξ`.
    pub fn dilated(&self, eps: f64) -> Self {
        Self { seed: self.seed, index: self.index, xi: self.xi.iter().map(|x| eps * x).collect() }
    }
}

/// `I_n(f)` evaluated at `ξ`.
pub fn eval_chaos(f: &SymTensor, xi: &[f64]) -> Result<f64> {
    if f.dim() != xi.len() {
        return Err(Error::DimensionMismatch { left: f.dim(), right: xi.len() });
    }
    Ok(eval_unchecked(f, xi))
}

pub(crate) fn eval_unchecked(f: &SymTensor, xi: &[f64]) -> f64 {
    f.terms().map(|(alpha, c)| c * multiplicities(alpha).iter().map(|&(j, m)| hermite(m, xi[j])).product::<f64>()).sum()
}

/// Finite sum `Σ_n I_n(f_n)` with at most one kernel per order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChaosVariable {
    dim: usize,
    kernels: BTreeMap<usize, SymTensor>,
}

impl ChaosVariable {
    pub fn zero(dim: usize) -> Self {
        Self { dim, kernels: BTreeMap::new() }
    }

    pub fn single(f: SymTensor) -> Self {
        let mut v = Self::zero(f.dim());
        v.kernels.insert(f.order(), f);
        v
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Kernel of the order-`n` component, if present.
    pub fn component(&self, n: usize) -> Option<&SymTensor> {
        self.kernels.get(&n)
    }

    /// `(order, kernel)` pairs by increasing order.
    pub fn components(&self) -> impl Iterator<Item = (usize, &SymTensor)> + '_ {
        self.kernels.iter().map(|(&n, f)| (n, f))
    }

    /// The unique order if exactly one nonzero component is present.
    pub fn homogeneous_order(&self) -> Option<usize> {
        let mut it = self.kernels.iter().filter(|(_, f)| !f.is_zero());
        let (&n, _) = it.next()?;
        it.next().is_none().then_some(n)
    }

    pub fn add_kernel(&mut self, f: &SymTensor, scale: f64) -> Result<()> {
        if f.dim() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: f.dim() });
        }
        match self.kernels.get_mut(&f.order()) {
            Some(g) => g.axpy(scale, f)?,
            None => {
                self.kernels.insert(f.order(), f.scaled(scale));
            }
        }
        Ok(())
    }

    pub fn eval(&self, xi: &[f64]) -> Result<f64> {
        if xi.len() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: xi.len() });
        }
        Ok(self.kernels.values().map(|f| eval_unchecked(f, xi)).sum())
    }

    /// `E[X]`, the order-0 coefficient.
    pub fn expectation(&self) -> f64 {
        self.kernels.get(&0).map_or(0.0, |f| f.coeff(&[]))
    }

    /// `E[X²] = Σ_n n!‖f_n‖²`.
    pub fn second_moment(&self) -> f64 {
        self.kernels.iter().map(|(&n, f)| factorial(n) * f.norm_sq()).sum()
    }
}

/// Chaos expansion of `I_n(f)·I_m(g)`:
/// `Σ_{r ≤ n∧m} r!·C(n,r)·C(m,r)·I_{n+m−2r}(f ⊗̂_r g)`.
pub fn product_expand(f: &SymTensor, g: &SymTensor) -> Result<ChaosVariable> {
    let (n, m) = (f.order(), g.order());
    let mut out = ChaosVariable::zero(f.dim());
    for r in 0..=n.min(m) {
        let c = symtensor::contract(f, g, r)?;
        out.add_kernel(&c, factorial(r) * binomial(n, r) * binomial(m, r))?;
    }
    Ok(out)
}

/// `D^k I_n(f)`: the component on `e_{κ_1} ⊗ … ⊗ e_{κ_k}` is the chaos
/// variable `n!/(n−k)!·I_{n−k}(⟨f, e_κ⟩)`, stored for sorted `κ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeField {
    n: usize,
    k: usize,
    dim: usize,
    components: BTreeMap<MultiIndex, SymTensor>,
}

impl DerivativeField {
    pub fn order(&self) -> usize {
        self.k
    }

    pub fn chaos_order(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Kernel of the `κ` component (already multiplied by `n!/(n−k)!`).
    pub fn component(&self, kappa: &[usize]) -> Option<&SymTensor> {
        let mut key = kappa.to_vec();
        key.sort_unstable();
        self.components.get(&key)
    }

    /// The derivative at `ξ` as an order-`k` symmetric tensor.
    pub fn eval(&self, xi: &[f64]) -> Result<SymTensor> {
        if xi.len() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: xi.len() });
        }
        let kf = factorial(self.k);
        let mut out = SymTensor::zero(self.k, self.dim);
        for (kappa, g) in &self.components {
            let entry = eval_unchecked(g, xi);
            out.add_term(kappa, entry * kf / symtensor::alpha_factorial(kappa));
        }
        Ok(out)
    }
}

/// `D^k I_n(f)`; errors when `k > n`.
pub fn malliavin(f: &SymTensor, k: usize) -> Result<DerivativeField> {
    let n = f.order();
    if k > n {
        return Err(Error::DerivativeOrder { k, n });
    }
    Ok(malliavin_or_zero(f, k))
}

/// `D^k I_n(f)`, the zero field when `k > n`.
pub fn malliavin_or_zero(f: &SymTensor, k: usize) -> DerivativeField {
    let (n, dim) = (f.order(), f.dim());
    let mut components = BTreeMap::new();
    if k <= n {
        let scale = factorial(n) / factorial(n - k);
        let mut seen = BTreeMap::new();
        for (alpha, _) in f.terms() {
            for kappa in sub_multisets_of(alpha, k) {
                seen.entry(kappa).or_insert(());
            }
        }
        for kappa in seen.into_keys() {
            let probe = SymTensor::basis(&kappa, dim).expect("indices from f");
            let g = symtensor::contract(f, &probe, k).expect("shapes agree").scaled(scale);
            if !g.is_zero() {
                components.insert(kappa, g);
            }
        }
    }
    DerivativeField { n, k, dim, components }
}

fn sub_multisets_of(alpha: &[usize], k: usize) -> Vec<MultiIndex> {
    let mut out: Vec<MultiIndex> = Vec::new();
    let mult = multiplicities(alpha);
    fn rec(m: &[(usize, usize)], pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        if pos == m.len() {
            return;
        }
        let (i, c) = m[pos];
        for take in 0..=c.min(left) {
            cur.extend(std::iter::repeat_n(i, take));
            rec(m, pos + 1, left - take, cur, out);
            cur.truncate(cur.len() - take);
        }
    }
    rec(&mult, 0, k, &mut Vec::new(), &mut out);
    out
}

/// Chaos expansion of `⟨D^k I_n(f), D^k I_n(g)⟩_{H^{⊗k}}`:
/// `(n!/(n−k)!)² Σ_{r ≤ n−k} r!·C(n−k,r)²·I_{2n−2k−2r}(f ⊗̂_{r+k} g)`.
pub fn inner_dk(f: &SymTensor, g: &SymTensor, k: usize) -> Result<ChaosVariable> {
    let n = f.order();
    if g.order() != n {
        return Err(Error::OrderMismatch { left: n, right: g.order() });
    }
    if k > n {
        return Err(Error::DerivativeOrder { k, n });
    }
    let lead = (factorial(n) / factorial(n - k)).powi(2);
    let mut out = ChaosVariable::zero(f.dim());
    for r in 0..=(n - k) {
        let c = symtensor::contract(f, g, r + k)?;
        out.add_kernel(&c, lead * factorial(r) * binomial(n - k, r).powi(2))?;
    }
    Ok(out)
}

/// Monte Carlo moment comparison `‖X‖_q / ‖X‖_p` against the hypercontractive bound.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct MomentRatio {
    pub p: f64,
    pub q: f64,
    pub norm_p: f64,
    pub norm_q: f64,
    pub ratio: f64,
    pub bound: f64,
    pub samples: usize,
}

pub const MIN_MOMENT_SAMPLES: usize = 10_000;

/// Estimates `‖X‖_q/‖X‖_p` for a single-order chaos variable.
pub fn moment_ratio(v: &ChaosVariable, p: f64, q: f64, samples: usize, seed: u64) -> Result<MomentRatio> {
    if samples < MIN_MOMENT_SAMPLES {
        return invalid(format!("moment_ratio needs at least {MIN_MOMENT_SAMPLES} samples, got {samples}"));
    }
    if !(p > 1.0 && q > p) {
        return invalid(format!("need 1 < p < q, got p={p}, q={q}"));
    }
    let n = v
        .homogeneous_order()
        .ok_or_else(|| Error::Invalid("moment_ratio needs a single nonzero chaos order".into()))?;
    let dim = v.dim();
    let draws = mc::par_map(samples, |i| {
        let xi = mc::normals(seed, i as u64, dim);
        v.eval(&xi).expect("dimension fixed")
    });
    let mp = draws.iter().map(|x| x.abs().powf(p)).sum::<f64>() / samples as f64;
    let mq = draws.iter().map(|x| x.abs().powf(q)).sum::<f64>() / samples as f64;
    if !mp.is_finite() || !mq.is_finite() || mp == 0.0 {
        return Err(Error::NonFinite { t0: 0.0, t1: 0.0 });
    }
    let (norm_p, norm_q) = (mp.powf(1.0 / p), mq.powf(1.0 / q));
    Ok(MomentRatio {
        p,
        q,
        norm_p,
        norm_q,
        ratio: norm_q / norm_p,
        bound: ((q - 1.0) / (p - 1.0)).powf(n as f64 / 2.0),
        samples,
    })
}

/// Monte Carlo estimate of `E[I_n(f)·I_m(g)]`.
pub fn mc_cross_moment(f: &SymTensor, g: &SymTensor, samples: usize, seed: u64) -> Result<MeanSe> {
    if f.dim() != g.dim() {
        return Err(Error::DimensionMismatch { left: f.dim(), right: g.dim() });
    }
    let dim = f.dim();
    let draws = mc::par_map(samples, |i| {
        let xi = mc::normals(seed, i as u64, dim);
        eval_unchecked(f, &xi) * eval_unchecked(g, &xi)
    });
    Ok(MeanSe::of(&draws))
}

/// All order-`n` basis monomials of `R^dim`, normalized to unit length.
pub fn orthonormal_basis(order: usize, dim: usize) -> Vec<SymTensor> {
    multi_indices(order, dim)
        .into_iter()
        .map(|a| {
            let s = (factorial(order) / symtensor::alpha_factorial(&a)).sqrt();
            SymTensor::basis(&a, dim).expect("in range").scaled(s)
        })
        .collect()
}
