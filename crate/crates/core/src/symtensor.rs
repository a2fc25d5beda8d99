//! Sparse symmetric tensors over a truncated orthonormal basis.
//!
//! A tensor of order `n` is stored as coefficients on the un-normalized
//! symmetrized monomials `ê_α = Sym(e_{α_1} ⊗ … ⊗ e_{α_n})`, keyed by the
//! sorted multi-index `α` (0-based). With this convention
//! `⟨ê_α, ê_β⟩ = δ_{αβ} α!/n!`, where `α!` is the product of the factorials
//! of the multiplicities in `α`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted multi-index with entries in `0..dim`.
pub type MultiIndex = Vec<usize>;

const FACTORIAL_TABLE_LEN: usize = 171;

/// `k!` as a float (exact up to 22!).
pub fn factorial(k: usize) -> f64 {
    thread_local! {
        static TABLE: [f64; FACTORIAL_TABLE_LEN] = {
            let mut t = [1.0; FACTORIAL_TABLE_LEN];
            for i in 1..FACTORIAL_TABLE_LEN {
                t[i] = t[i - 1] * i as f64;
            }
            t
        };
    }
    assert!(k < FACTORIAL_TABLE_LEN, "factorial({k}) overflows f64");
    TABLE.with(|t| t[k])
}

/// `C(n, k)` as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Multiplicity form of a sorted multi-index: `(index, count)` pairs.
pub fn multiplicities(idx: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &i in idx {
        match out.last_mut() {
            Some((j, c)) if *j == i => *c += 1,
            _ => out.push((i, 1)),
        }
    }
    out
}

/// `α!`: product of multiplicity factorials.
pub fn alpha_factorial(idx: &[usize]) -> f64 {
    multiplicities(idx).iter().map(|&(_, c)| factorial(c)).product()
}

/// All sorted multi-indices of length `order` over `0..dim`, lexicographic.
pub fn multi_indices(order: usize, dim: usize) -> Vec<MultiIndex> {
    fn rec(start: usize, left: usize, dim: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..dim {
            cur.push(i);
            rec(i, left - 1, dim, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, order, dim, &mut Vec::with_capacity(order), &mut out);
    out
}

/// Number of sorted multi-indices of length `order` over `dim` symbols.
pub fn sym_dim(order: usize, dim: usize) -> usize {
    if dim == 0 {
        return usize::from(order == 0);
    }
    binomial(dim + order - 1, order).round() as usize
}

fn merge_sorted(a: &[usize], b: &[usize]) -> MultiIndex {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Removes the multiset `sub` from the sorted multi-index `idx`; `None` if not contained.
pub fn multiset_difference(idx: &[usize], sub: &[usize]) -> Option<MultiIndex> {
    let mut out = Vec::with_capacity(idx.len().saturating_sub(sub.len()));
    let mut j = 0;
    for &i in idx {
        if j < sub.len() && sub[j] == i {
            j += 1;
        } else {
            if j < sub.len() && sub[j] < i {
                return None;
            }
            out.push(i);
        }
    }
    (j == sub.len()).then_some(out)
}

/// Sparse symmetric tensor of fixed order on `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor {
    order: usize,
    dim: usize,
    coeffs: BTreeMap<MultiIndex, f64>,
}

impl SymTensor {
    pub fn zero(order: usize, dim: usize) -> Self {
        Self { order, dim, coeffs: BTreeMap::new() }
    }

    /// Order-0 tensor holding `c`.
    pub fn scalar(c: f64, dim: usize) -> Self {
        let mut t = Self::zero(0, dim);
        t.add_term(&[], c);
        t
    }

    /// The monomial `ê_α` for an unsorted index list.
    pub fn basis(idx: &[usize], dim: usize) -> Result<Self> {
        let mut t = Self::zero(idx.len(), dim);
        t.try_add_term(idx, 1.0)?;
        Ok(t)
    }

    /// Order-1 tensor with the given coordinates.
    pub fn from_vector(v: &[f64]) -> Self {
        let mut t = Self::zero(1, v.len());
        for (i, &c) in v.iter().enumerate() {
            t.add_term(&[i], c);
        }
        t
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Iterates `(α, c_α)` in lexicographic order of `α`.
    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> + '_ {
        self.coeffs.iter().map(|(k, &v)| (k, v))
    }

    /// Coefficient on `ê_α`; `idx` need not be sorted.
    pub fn coeff(&self, idx: &[usize]) -> f64 {
        let mut key = idx.to_vec();
        key.sort_unstable();
        self.coeffs.get(&key).copied().unwrap_or(0.0)
    }

    /// Entry `T[i_1, …, i_n]` of the tensor in `(R^dim)^{⊗n}`.
    pub fn entry(&self, idx: &[usize]) -> f64 {
        let mut key = idx.to_vec();
        key.sort_unstable();
        let c = self.coeffs.get(&key).copied().unwrap_or(0.0);
        c * alpha_factorial(&key) / factorial(self.order)
    }

    fn try_add_term(&mut self, idx: &[usize], c: f64) -> Result<()> {
        if idx.len() != self.order {
            return Err(Error::OrderMismatch { left: self.order, right: idx.len() });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.dim) {
            return Err(Error::DimensionMismatch { left: self.dim, right: bad + 1 });
        }
        let mut key = idx.to_vec();
        key.sort_unstable();
        self.add_sorted(key, c);
        Ok(())
    }

    /// Adds `c·ê_α`. Panics if `idx` has the wrong length or an index out of range.
    pub fn add_term(&mut self, idx: &[usize], c: f64) {
        self.try_add_term(idx, c).expect("malformed multi-index");
    }

    fn add_sorted(&mut self, key: MultiIndex, c: f64) {
        if c == 0.0 {
            return;
        }
        let slot = self.coeffs.entry(key).or_insert(0.0);
        *slot += c;
    }

    /// Drops coefficients with magnitude at most `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.coeffs.retain(|_, c| c.abs() > tol);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn scale(&mut self, s: f64) {
        if s == 0.0 {
            self.coeffs.clear();
            return;
        }
        for c in self.coeffs.values_mut() {
            *c *= s;
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: other.dim });
        }
        if self.order != other.order {
            return Err(Error::OrderMismatch { left: self.order, right: other.order });
        }
        Ok(())
    }

    /// `self += s·other`.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (k, &c) in &other.coeffs {
            self.add_sorted(k.clone(), s * c);
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn norm_sq(&self) -> f64 {
        let nf = factorial(self.order);
        self.coeffs.iter().map(|(k, c)| c * c * alpha_factorial(k) / nf).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Coordinates in the orthonormal basis `ê_α·√(n!/α!)`, indexed as
    /// [`multi_indices`]`(order, dim)`.
    pub fn orthonormal_coords(&self) -> Vec<f64> {
        let all = multi_indices(self.order, self.dim);
        let nf = factorial(self.order);
        all.iter().map(|a| self.coeffs.get(a).map_or(0.0, |c| c * (alpha_factorial(a) / nf).sqrt())).collect()
    }

    /// Inverse of [`SymTensor::orthonormal_coords`].
    pub fn from_orthonormal_coords(order: usize, dim: usize, coords: &[f64]) -> Result<Self> {
        let all = multi_indices(order, dim);
        if all.len() != coords.len() {
            return Err(Error::DimensionMismatch { left: all.len(), right: coords.len() });
        }
        let nf = factorial(order);
        let mut t = Self::zero(order, dim);
        for (a, &x) in all.into_iter().zip(coords) {
            let c = x / (alpha_factorial(&a) / nf).sqrt();
            t.add_sorted(a, c);
        }
        Ok(t)
    }

    /// Dense entries in row-major order over `(0..dim)^order`.
    pub fn to_dense(&self) -> Vec<f64> {
        let len = self.dim.pow(self.order as u32);
        let mut out = vec![0.0; len];
        let mut idx = vec![0usize; self.order];
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut rem = flat;
            for p in (0..self.order).rev() {
                idx[p] = rem % self.dim;
                rem /= self.dim;
            }
            *slot = self.entry(&idx);
        }
        out
    }
}

/// `⟨a, b⟩` in `(R^dim)^{⊗n}`.
pub fn inner(a: &SymTensor, b: &SymTensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let (small, large) = if a.nnz() <= b.nnz() { (a, b) } else { (b, a) };
    let nf = factorial(a.order);
    Ok(small.coeffs.iter().filter_map(|(k, c)| large.coeffs.get(k).map(|d| c * d * alpha_factorial(k) / nf)).sum())
}

/// Symmetrized tensor product `a ⊗̂ b`.
pub fn symmetrize_outer(a: &SymTensor, b: &SymTensor) -> Result<SymTensor> {
    contract(a, b, 0)
}

/// Sub-multisets of size `r` of the multiplicity list `avail`.
fn sub_multisets(avail: &[(usize, usize)], r: usize) -> Vec<MultiIndex> {
    fn rec(avail: &[(usize, usize)], pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        if pos == avail.len() {
            return;
        }
        let (i, m) = avail[pos];
        for take in (0..=m.min(left)).rev() {
            for _ in 0..take {
                cur.push(i);
            }
            rec(avail, pos + 1, left - take, cur, out);
            for _ in 0..take {
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(avail, 0, r, &mut Vec::with_capacity(r), &mut out);
    out
}

fn common_multiplicities(a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let ma = multiplicities(a);
    let mb = multiplicities(b);
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < ma.len() && j < mb.len() {
        match ma[i].0.cmp(&mb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((ma[i].0, ma[i].1.min(mb[j].1)));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Symmetrized `r`-fold contraction `a ⊗̂_r b`, of order `n + m − 2r`.
pub fn contract(a: &SymTensor, b: &SymTensor, r: usize) -> Result<SymTensor> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { left: a.dim, right: b.dim });
    }
    let (n, m) = (a.order, b.order);
    if r > n.min(m) {
        return Err(Error::ContractionDepth { r, max: n.min(m) });
    }
    let mut out = SymTensor::zero(n + m - 2 * r, a.dim);
    let (nf, mf, rf) = (factorial(n), factorial(m), factorial(r));
    let (nrf, mrf) = (factorial(n - r), factorial(m - r));
    for (alpha, ca) in &a.coeffs {
        let af = alpha_factorial(alpha);
        for (beta, cb) in &b.coeffs {
            let bf = alpha_factorial(beta);
            let common = common_multiplicities(alpha, beta);
            for gamma in sub_multisets(&common, r) {
                let ra = multiset_difference(alpha, &gamma).expect("gamma ⊆ alpha");
                let rb = multiset_difference(beta, &gamma).expect("gamma ⊆ beta");
                let w = rf / alpha_factorial(&gamma)
                    * (af / nf)
                    * (bf / mf)
                    * (nrf / alpha_factorial(&ra))
                    * (mrf / alpha_factorial(&rb));
                out.add_sorted(merge_sorted(&ra, &rb), ca * cb * w);
            }
        }
    }
    Ok(out)
}

/// `h^{⊗k}` for an order-1 tensor `h`.
pub fn power(h: &SymTensor, k: usize) -> Result<SymTensor> {
    if h.order != 1 {
        return Err(Error::OrderMismatch { left: 1, right: h.order });
    }
    let mut out = SymTensor::scalar(1.0, h.dim);
    for _ in 0..k {
        out = symmetrize_outer(&out, h)?;
    }
    Ok(out)
}

/// `Σ_α c_α h^α`, which equals `⟨f, h^{⊗n}⟩`.
pub fn pair_with_power(f: &SymTensor, h: &[f64]) -> Result<f64> {
    if f.dim != h.len() {
        return Err(Error::DimensionMismatch { left: f.dim, right: h.len() });
    }
    Ok(f.coeffs.iter().map(|(k, c)| c * k.iter().map(|&i| h[i]).product::<f64>()).sum())
}

#[derive(Serialize, Deserialize)]
struct EntryRepr {
    idx: Vec<usize>,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    order: usize,
    dim: usize,
    entries: Vec<EntryRepr>,
}

/// JSON form uses 1-based indices.
impl Serialize for SymTensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr {
            order: self.order,
            dim: self.dim,
            entries: self
                .coeffs
                .iter()
                .map(|(k, &c)| EntryRepr { idx: k.iter().map(|i| i + 1).collect(), c })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymTensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = TensorRepr::deserialize(d)?;
        let mut t = SymTensor::zero(repr.order, repr.dim);
        for e in repr.entries {
            if e.idx.contains(&0) {
                return Err(D::Error::custom("multi-index entries are 1-based"));
            }
            let idx: Vec<usize> = e.idx.iter().map(|i| i - 1).collect();
            t.try_add_term(&idx, e.c).map_err(D::Error::custom)?;
        }
        Ok(t)
    }
}
