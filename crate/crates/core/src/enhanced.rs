//! The enhanced process `X̂ = (X, DX, …, DⁿX)`: a chaos process together
//! with all of its Malliavin derivatives, lifted jointly as one rough path.
//!
//! Derivative layers are flattened into orthonormal coordinates of
//! `Sym^k(R^M)`, so the joint lift is an ordinary level-2 path whose
//! sub-blocks are the cross integrals `∫ D^m X^a ⊗ dD^k X^b`.

use std::io::Write;

use serde::Serialize;

use crate::chaos::GaussianSample;
use crate::error::{invalid, Error, Result};
use crate::kernels::KernelPath;
use crate::mc::{self, fit_line, LineFit, MeanSe};
use crate::roughlift::{self, lift_piecewise_linear, Level2Path, PVariation};
use crate::symtensor::{self, sym_dim, SymTensor};

/// Largest base dimension for which full cross blocks are materialized.
pub const MAX_BLOCK_DIM: usize = 16;
/// Largest chaos order for which full cross blocks are materialized.
pub const MAX_BLOCK_ORDER: usize = 3;

/// `D^k X^j_{t_i}` for every component `j`, order `k ≤ n` and node `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedSample {
    grid: Vec<f64>,
    order: usize,
    dim: usize,
    /// `layers[j][k][i]`.
    layers: Vec<Vec<Vec<SymTensor>>>,
}

/// Evaluates `X̂` at the outcomes `omegas` (one per component).
pub fn enhance(k: &KernelPath, omegas: &[GaussianSample]) -> Result<EnhancedSample> {
    if omegas.is_empty() {
        return invalid("need at least one component");
    }
    let layers = omegas
        .iter()
        .map(|w| {
            if w.dim() != k.dim() {
                return Err(Error::DimensionMismatch { left: k.dim(), right: w.dim() });
            }
            Ok((0..=k.order()).map(|ord| (0..k.len()).map(|i| k.derivative(i, ord, &w.xi)).collect()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnhancedSample { grid: k.grid().to_vec(), order: k.order(), dim: k.dim(), layers })
}

/// Position of one `(component, order)` block in the flattened coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Block {
    pub component: usize,
    pub order: usize,
    pub offset: usize,
    pub len: usize,
}

impl EnhancedSample {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.layers.len()
    }

    /// `D^k X^j` at node `i`.
    pub fn value(&self, j: usize, k: usize, i: usize) -> &SymTensor {
        &self.layers[j][k][i]
    }

    /// Flattened layout: component-major, then derivative order.
    pub fn layout(&self) -> Vec<Block> {
        let mut out = Vec::new();
        let mut offset = 0;
        for component in 0..self.components() {
            for order in 0..=self.order {
                let len = sym_dim(order, self.dim);
                out.push(Block { component, order, offset, len });
                offset += len;
            }
        }
        out
    }

    /// Total number of flattened coordinates.
    pub fn flat_dim(&self) -> usize {
        self.layout().iter().map(|b| b.len).sum()
    }

    /// Node `i` in orthonormal flattened coordinates.
    pub fn flatten(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_dim());
        for comp in &self.layers {
            for layer in comp {
                out.extend(layer[i].orthonormal_coords());
            }
        }
        out
    }

    /// `X̂(ω + r·h)` from the finite expansion
    /// `D^k X(ω + rh) = Σ_m r^m/m!·⟨D^{k+m} X(ω), h^{⊗m}⟩`.
    pub fn translate(&self, h: &[Vec<f64>], r: f64) -> Result<Self> {
        if h.len() != self.components() {
            return Err(Error::DimensionMismatch { left: self.components(), right: h.len() });
        }
        let n = self.order;
        let mut layers = Vec::with_capacity(self.components());
        for (comp, hj) in self.layers.iter().zip(h) {
            if hj.len() != self.dim {
                return Err(Error::DimensionMismatch { left: self.dim, right: hj.len() });
            }
            let hv = SymTensor::from_vector(hj);
            let powers: Vec<SymTensor> = (0..=n).map(|m| symtensor::power(&hv, m)).collect::<Result<_>>()?;
            let mut out_comp = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let mut nodes = Vec::with_capacity(self.grid.len());
                for i in 0..self.grid.len() {
                    let mut acc = SymTensor::zero(k, self.dim);
                    let mut coef = 1.0;
                    for m in 0..=(n - k) {
                        if m > 0 {
                            coef *= r / m as f64;
                        }
                        let term = symtensor::contract(&comp[k + m][i], &powers[m], m)?;
                        acc.axpy(coef, &term)?;
                    }
                    nodes.push(acc);
                }
                out_comp.push(nodes);
            }
            layers.push(out_comp);
        }
        Ok(Self { grid: self.grid.clone(), order: n, dim: self.dim, layers })
    }

    /// `‖∫_{t_s}^{t_t} D^m X^a_{t_s,r} ⊗ dD^k X^b_r‖` for the piecewise-linear
    /// lift, from inner products of node values only:
    /// `Σ_{q,q'} ⟨U_q, U_{q'}⟩⟨ΔB_q, ΔB_{q'}⟩` with `U_q = ½(A_q + A_{q+1}) − A_s`.
    pub fn block_norm(&self, a: (usize, usize), b: (usize, usize), s: usize, t: usize) -> Result<f64> {
        let la = &self.layers[a.0][a.1];
        let lb = &self.layers[b.0][b.1];
        let u: Vec<SymTensor> = (s..t)
            .map(|q| {
                let mut x = la[q].add(&la[q + 1])?.scaled(0.5);
                x.axpy(-1.0, &la[s])?;
                Ok(x)
            })
            .collect::<Result<_>>()?;
        let db: Vec<SymTensor> = (s..t).map(|q| lb[q + 1].sub(&lb[q])).collect::<Result<_>>()?;
        let mut acc = 0.0;
        for i in 0..u.len() {
            for j in 0..u.len() {
                acc += symtensor::inner(&u[i], &u[j])? * symtensor::inner(&db[i], &db[j])?;
            }
        }
        Ok(acc.max(0.0).sqrt())
    }
}

/// Joint lift of `X̂` with the block layout of its coordinates.
#[derive(Clone, Debug)]
pub struct EnhancedLift {
    pub path: Level2Path,
    pub layout: Vec<Block>,
}

/// Largest number of stored level-2 entries (`segments × D²`).
const MAX_LIFT_ENTRIES: usize = 60_000_000;

/// Lifts the piecewise-linear interpolation of `X̂`; every cross block on a
/// segment is `½ ΔA ⊗ ΔB`.
pub fn lift_enhanced(s: &EnhancedSample) -> Result<EnhancedLift> {
    if s.dim > MAX_BLOCK_DIM {
        return Err(Error::TooLarge { what: "base dimension for cross blocks", size: s.dim, limit: MAX_BLOCK_DIM });
    }
    if s.order > MAX_BLOCK_ORDER {
        return Err(Error::TooLarge { what: "chaos order for cross blocks", size: s.order, limit: MAX_BLOCK_ORDER });
    }
    let d = s.flat_dim();
    let entries = (s.grid.len() - 1) * d * d;
    if entries > MAX_LIFT_ENTRIES {
        return Err(Error::TooLarge { what: "enhanced lift entries", size: entries, limit: MAX_LIFT_ENTRIES });
    }
    let values: Vec<Vec<f64>> = (0..s.grid.len()).map(|i| s.flatten(i)).collect();
    Ok(EnhancedLift { path: lift_piecewise_linear(&s.grid, &values)?, layout: s.layout() })
}

impl EnhancedLift {
    pub fn find(&self, component: usize, order: usize) -> Option<Block> {
        self.layout.iter().copied().find(|b| b.component == component && b.order == order)
    }

    /// Sub-block `(a, b)` of `𝕏_{t_i,t_j}`, row-major `a.len × b.len`.
    pub fn block(&self, a: Block, b: Block, i: usize, j: usize) -> Vec<f64> {
        let (_, xx) = self.path.increment(i, j);
        let d = self.path.dim();
        let mut out = Vec::with_capacity(a.len * b.len);
        for r in a.offset..a.offset + a.len {
            out.extend_from_slice(&xx[r * d + b.offset..r * d + b.offset + b.len]);
        }
        out
    }

    /// Homogeneous `p`-variation of `X̂`.
    pub fn p_variation(&self, p: f64) -> Result<PVariation> {
        roughlift::p_variation(&self.path, p)
    }

    /// CSV of block norms of `𝕏_{t_i,t_j}` (columns `comp_a,order_a,comp_b,order_b,norm`).
    pub fn write_block_norms<W: Write>(&self, i: usize, j: usize, mut w: W) -> std::io::Result<()> {
        writeln!(w, "comp_a,order_a,comp_b,order_b,norm")?;
        for a in &self.layout {
            for b in &self.layout {
                let blk = self.block(*a, *b, i, j);
                let nrm = blk.iter().map(|x| x * x).sum::<f64>().sqrt();
                writeln!(w, "{},{},{},{},{:.17e}", a.component + 1, a.order, b.component + 1, b.order, nrm)?;
            }
        }
        Ok(())
    }
}

/// Unit-norm Cameron–Martin direction spread over all components.
pub fn unit_direction(components: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = (0..components).map(|j| mc::normals(seed, j as u64, dim)).collect();
    let nrm = raw.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    raw.into_iter().map(|v| v.into_iter().map(|x| x / nrm).collect()).collect()
}

/// Growth of `‖T_{rh} X̂‖^p / ‖X̂‖^p` in `r`.
#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    pub kernel: String,
    pub order: usize,
    pub p: f64,
    pub r: Vec<f64>,
    pub mean_ratio: Vec<MeanSe>,
    /// Fit of `log E[ratio]` against `log r`.
    pub fit: LineFit,
    /// `n·p + p/2`.
    pub slope_limit: f64,
}

/// Monte Carlo translation growth of the enhanced lift along `h`.
pub fn translation_growth(
    k: &KernelPath,
    h: &[Vec<f64>],
    r_list: &[f64],
    p: f64,
    samples: usize,
    seed: u64,
) -> Result<GrowthReport> {
    if r_list.len() < 2 || r_list.iter().any(|r| *r <= 0.0) {
        return invalid("need at least two positive translation sizes");
    }
    let d = h.len();
    let rows = mc::par_map(samples, |i| -> Result<Vec<f64>> {
        let omegas = roughlift::sample_components(k, d, seed, i as u64);
        let s = enhance(k, &omegas)?;
        let base = lift_enhanced(&s)?.p_variation(p)?.homogeneous_pow();
        r_list
            .iter()
            .map(|&r| Ok(lift_enhanced(&s.translate(h, r)?)?.p_variation(p)?.homogeneous_pow() / base))
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mean_ratio: Vec<MeanSe> =
        (0..r_list.len()).map(|j| MeanSe::of(&rows.iter().map(|v| v[j]).collect::<Vec<_>>())).collect();
    let lx: Vec<f64> = r_list.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = mean_ratio.iter().map(|m| m.mean.ln()).collect();
    let fit = fit_line(&lx, &ly).ok_or_else(|| Error::Invalid("degenerate growth fit".into()))?;
    let n = k.order() as f64;
    Ok(GrowthReport {
        kernel: k.label().to_string(),
        order: k.order(),
        p,
        r: r_list.to_vec(),
        mean_ratio,
        fit,
        slope_limit: n * p + p / 2.0,
    })
}

/// Dense driver for the Malliavin RDE: `X^j`, `DX^j` and optionally `D²X^j`
/// at each node in global Cameron–Martin coordinates (component `j` occupies
/// coordinates `j·M..(j+1)·M`).
#[derive(Clone, Debug)]
pub struct GradientDriver {
    pub times: Vec<f64>,
    pub components: usize,
    /// `d · M`.
    pub cm_dim: usize,
    /// `x[i][j]`.
    pub x: Vec<Vec<f64>>,
    /// `dx[i][j]`, length `cm_dim`.
    pub dx: Vec<Vec<Vec<f64>>>,
    /// `d2x[i][j]`, row-major `cm_dim × cm_dim` tensor entries.
    pub d2x: Option<Vec<Vec<Vec<f64>>>>,
}

/// Largest `d·M` for which the second derivative layer is materialized.
pub const MAX_SECOND_LAYER_DIM: usize = 2 * MAX_BLOCK_DIM;

impl GradientDriver {
    /// Builds the driver for `X^j = I_n(f_t)(ω_j)`, with `D²X` if `second`.
    pub fn new(k: &KernelPath, omegas: &[GaussianSample], second: bool) -> Result<Self> {
        let d = omegas.len();
        let m = k.dim();
        let cm_dim = d * m;
        if second && cm_dim > MAX_SECOND_LAYER_DIM {
            return Err(Error::TooLarge { what: "second derivative layer", size: cm_dim, limit: MAX_SECOND_LAYER_DIM });
        }
        let nodes = k.len();
        let mut x = vec![vec![0.0; d]; nodes];
        let mut dx = vec![vec![vec![0.0; cm_dim]; d]; nodes];
        let mut d2x = second.then(|| vec![vec![vec![0.0; cm_dim * cm_dim]; d]; nodes]);
        for (j, w) in omegas.iter().enumerate() {
            if w.dim() != m {
                return Err(Error::DimensionMismatch { left: m, right: w.dim() });
            }
            for i in 0..nodes {
                x[i][j] = k.eval(i, &w.xi);
                let g = k.gradient(i, &w.xi);
                dx[i][j][j * m..(j + 1) * m].copy_from_slice(&g);
                if let Some(d2) = d2x.as_mut() {
                    let t = k.derivative(i, 2, &w.xi);
                    for (a, _) in t.terms() {
                        let v = t.entry(a);
                        let (p, q) = (j * m + a[0], j * m + a[1]);
                        d2[i][j][p * cm_dim + q] = v;
                        d2[i][j][q * cm_dim + p] = v;
                    }
                }
            }
        }
        Ok(Self { times: k.grid().to_vec(), components: d, cm_dim, x, dx, d2x })
    }

    /// Level-2 lift of the scalar part `X`.
    pub fn lift(&self) -> Result<Level2Path> {
        lift_piecewise_linear(&self.times, &self.x)
    }
}

/// Node values of `X(ω + r·h)` by re-evaluating the kernels at shifted coordinates.
pub fn translated_values(k: &KernelPath, omegas: &[GaussianSample], h: &[Vec<f64>], r: f64) -> Result<Vec<Vec<f64>>> {
    let shifted = omegas.iter().zip(h).map(|(w, hj)| w.shifted(hj, r)).collect::<Result<Vec<_>>>()?;
    roughlift::process_values(k, &shifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{brownian_kernel, brownian_product, dyadic_grid};

    #[test]
    fn translate_matches_reevaluation() {
        let k = brownian_product(2, &dyadic_grid(2)).unwrap();
        let omegas = roughlift::sample_components(&k, 2, 3, 0);
        let s = enhance(&k, &omegas).unwrap();
        let h = unit_direction(2, k.dim(), 1);
        let r = 0.7;
        let moved = s.translate(&h, r).unwrap();
        let shifted: Vec<GaussianSample> = omegas.iter().zip(&h).map(|(w, hj)| w.shifted(hj, r).unwrap()).collect();
        let direct = enhance(&k, &shifted).unwrap();
        for j in 0..2 {
            for ord in 0..=2 {
                for i in 0..k.len() {
                    let d = moved.value(j, ord, i).sub(direct.value(j, ord, i)).unwrap().norm();
                    assert!(d < 1e-10, "component {j} order {ord} node {i}: {d}");
                }
            }
        }
    }

    #[test]
    fn guard_rejects_large_base_dimension() {
        let k = brownian_kernel(32, &dyadic_grid(5)).unwrap();
        let s = enhance(&k, &roughlift::sample_components(&k, 1, 0, 0)).unwrap();
        assert!(matches!(lift_enhanced(&s), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn block_norm_matches_materialized_block() {
        let k = brownian_product(2, &dyadic_grid(2)).unwrap();
        let s = enhance(&k, &roughlift::sample_components(&k, 2, 9, 4)).unwrap();
        let lift = lift_enhanced(&s).unwrap();
        for (a, b) in [((0, 1), (0, 1)), ((0, 0), (1, 2)), ((1, 2), (0, 1))] {
            let ba = lift.find(a.0, a.1).unwrap();
            let bb = lift.find(b.0, b.1).unwrap();
            let m = lift.block(ba, bb, 1, 4);
            let direct = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            let via_inner = s.block_norm(a, b, 1, 4).unwrap();
            assert!((direct - via_inner).abs() < 1e-10 * (1.0 + direct));
        }
    }
}
