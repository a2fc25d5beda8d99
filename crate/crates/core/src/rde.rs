//! Rough differential equations `dY = Σ_i V_i(Y) dX^i` driven by level-2
//! paths, with the Jacobian flow and the first two Malliavin derivatives
//! propagated jointly with the solution.
//!
//! The stepper is the explicit second-order (Davie) scheme
//! `Y ← Y + V_j(Y) ΔX^j + DV_j(Y)V_i(Y) 𝕏^{ij}`. Derivative layers are
//! propagated by differentiating that discrete map, so on a piecewise-linear
//! driver they agree with finite differences of the scheme itself up to
//! rounding.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::enhanced::GradientDriver;
use crate::error::{invalid, Error, Result};
use crate::kernels::KernelPath;
use crate::mc::{self, MeanSe};
use crate::roughlift::{self, Level2Path};
use crate::symtensor::binomial;

/// A family of `d` smooth vector fields on `R^e` with analytic derivatives.
///
/// Layouts are row-major: `jacobian[a*e+b] = ∂_b V^a`,
/// `hessian[(a*e+b)*e+c] = ∂_b∂_c V^a`, and `third` likewise with four indices.
/// Implementations must be reentrant.
pub trait VectorFieldSet: Send + Sync {
    fn state_dim(&self) -> usize;
    fn driver_dim(&self) -> usize;
    fn eval(&self, i: usize, y: &[f64], out: &mut [f64]);
    fn jacobian(&self, i: usize, y: &[f64], out: &mut [f64]);
    fn hessian(&self, i: usize, y: &[f64], out: &mut [f64]);
    fn third(&self, i: usize, y: &[f64], out: &mut [f64]);

    /// Upper bounds on `sup|V|, sup|DV|, sup|D²V|, sup|D³V|` when finite.
    fn bounds(&self) -> Option<[f64; 4]> {
        None
    }
}

fn mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let e = x.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = m[a * e..(a + 1) * e].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

/// `V_i(y) = A_i y + b_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFields {
    e: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl AffineFields {
    /// `a[i]` is `e×e` row-major, `b[i]` has length `e`.
    pub fn new(e: usize, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return invalid("need one matrix and one offset per field");
        }
        for (m, v) in a.iter().zip(&b) {
            if m.len() != e * e {
                return Err(Error::DimensionMismatch { left: e * e, right: m.len() });
            }
            if v.len() != e {
                return Err(Error::DimensionMismatch { left: e, right: v.len() });
            }
        }
        Ok(Self { e, a, b })
    }

    /// Scalar `dY = Y dX`.
    pub fn scalar_linear() -> Self {
        Self { e: 1, a: vec![vec![1.0]], b: vec![vec![0.0]] }
    }

    /// All fields identically zero.
    pub fn zero(e: usize, d: usize) -> Self {
        Self { e, a: vec![vec![0.0; e * e]; d], b: vec![vec![0.0; e]; d] }
    }
}

impl VectorFieldSet for AffineFields {
    fn state_dim(&self) -> usize {
        self.e
    }

    fn driver_dim(&self) -> usize {
        self.a.len()
    }

    fn eval(&self, i: usize, y: &[f64], out: &mut [f64]) {
        mat_vec(&self.a[i], y, out);
        for (o, b) in out.iter_mut().zip(&self.b[i]) {
            *o += b;
        }
    }

    fn jacobian(&self, i: usize, _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a[i]);
    }

    fn hessian(&self, _i: usize, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn third(&self, _i: usize, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Bounded smooth fields `V_i(y) = B_i tanh(A_i y + c_i)` with hidden width `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TanhFields {
    e: usize,
    w: usize,
    /// `w×e` per field.
    a: Vec<Vec<f64>>,
    /// `e×w` per field.
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl TanhFields {
    pub fn new(e: usize, w: usize, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() || a.len() != c.len() {
            return invalid("need A, B and c for every field");
        }
        for ((ai, bi), ci) in a.iter().zip(&b).zip(&c) {
            if ai.len() != w * e || bi.len() != e * w || ci.len() != w {
                return invalid("tanh field shapes must be A: w×e, B: e×w, c: w");
            }
        }
        Ok(Self { e, w, a, b, c })
    }

    /// Reproducible random fields with entries of size `scale`.
    pub fn random(e: usize, d: usize, w: usize, scale: f64, seed: u64) -> Self {
        let draw = |stream: u64, len: usize| -> Vec<f64> {
            mc::normals(seed, stream, len).into_iter().map(|x| scale * x / (e as f64).sqrt()).collect()
        };
        let a = (0..d).map(|i| draw(3 * i as u64, w * e)).collect();
        let b = (0..d).map(|i| draw(3 * i as u64 + 1, e * w)).collect();
        let c = (0..d).map(|i| draw(3 * i as u64 + 2, w)).collect();
        Self { e, w, a, b, c }
    }

    /// `tanh` and its first three derivatives at the hidden pre-activations.
    fn activations(&self, i: usize, y: &[f64]) -> [Vec<f64>; 4] {
        let (e, w) = (self.e, self.w);
        let mut s = vec![0.0; w];
        for (k, sk) in s.iter_mut().enumerate() {
            let z: f64 = self.c[i][k] + (0..e).map(|b| self.a[i][k * e + b] * y[b]).sum::<f64>();
            *sk = z.tanh();
        }
        let t1: Vec<f64> = s.iter().map(|x| 1.0 - x * x).collect();
        let t2: Vec<f64> = s.iter().zip(&t1).map(|(x, d)| -2.0 * x * d).collect();
        let t3: Vec<f64> = s.iter().zip(&t1).map(|(x, d)| d * (6.0 * x * x - 2.0)).collect();
        [s, t1, t2, t3]
    }

    fn row_abs_max(m: &[f64], cols: usize) -> f64 {
        m.chunks(cols).map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

impl VectorFieldSet for TanhFields {
    fn state_dim(&self) -> usize {
        self.e
    }

    fn driver_dim(&self) -> usize {
        self.a.len()
    }

    fn eval(&self, i: usize, y: &[f64], out: &mut [f64]) {
        let [s, ..] = self.activations(i, y);
        mat_vec(&self.b[i], &s, out);
    }

    fn jacobian(&self, i: usize, y: &[f64], out: &mut [f64]) {
        let (e, w) = (self.e, self.w);
        let [_, t1, ..] = self.activations(i, y);
        out.fill(0.0);
        for a in 0..e {
            for k in 0..w {
                let bk = self.b[i][a * w + k] * t1[k];
                for b in 0..e {
                    out[a * e + b] += bk * self.a[i][k * e + b];
                }
            }
        }
    }

    fn hessian(&self, i: usize, y: &[f64], out: &mut [f64]) {
        let (e, w) = (self.e, self.w);
        let [_, _, t2, _] = self.activations(i, y);
        out.fill(0.0);
        for a in 0..e {
            for k in 0..w {
                let bk = self.b[i][a * w + k] * t2[k];
                let ak = &self.a[i][k * e..(k + 1) * e];
                for b in 0..e {
                    for c in 0..e {
                        out[(a * e + b) * e + c] += bk * ak[b] * ak[c];
                    }
                }
            }
        }
    }

    fn third(&self, i: usize, y: &[f64], out: &mut [f64]) {
        let (e, w) = (self.e, self.w);
        let [_, _, _, t3] = self.activations(i, y);
        out.fill(0.0);
        for a in 0..e {
            for k in 0..w {
                let bk = self.b[i][a * w + k] * t3[k];
                let ak = &self.a[i][k * e..(k + 1) * e];
                for b in 0..e {
                    for c in 0..e {
                        for q in 0..e {
                            out[((a * e + b) * e + c) * e + q] += bk * ak[b] * ak[c] * ak[q];
                        }
                    }
                }
            }
        }
    }

    fn bounds(&self) -> Option<[f64; 4]> {
        // |tanh| ≤ 1, |tanh'| ≤ 1, |tanh''| ≤ 4/(3√3), |tanh'''| ≤ 2.
        let mut out = [0.0f64; 4];
        for i in 0..self.a.len() {
            let nb = Self::row_abs_max(&self.b[i], self.w);
            let na = Self::row_abs_max(&self.a[i], self.e);
            let c2 = 4.0 / (3.0 * 3f64.sqrt());
            for (m, (o, c)) in out.iter_mut().zip([1.0, 1.0, c2, 2.0]).enumerate() {
                *o = o.max(nb * c * na.powi(m as i32));
            }
        }
        Some(out)
    }
}

/// Appends a drift `V₀` as the last driver component; pair it with
/// [`Level2Path::with_time`].
pub struct WithDrift<F, G> {
    pub fields: F,
    /// Driver dimension one.
    pub drift: G,
}

impl<F: VectorFieldSet, G: VectorFieldSet> WithDrift<F, G> {
    pub fn new(fields: F, drift: G) -> Result<Self> {
        if drift.driver_dim() != 1 || drift.state_dim() != fields.state_dim() {
            return invalid("drift must be a single field on the same state space");
        }
        Ok(Self { fields, drift })
    }
}

impl<F: VectorFieldSet, G: VectorFieldSet> VectorFieldSet for WithDrift<F, G> {
    fn state_dim(&self) -> usize {
        self.fields.state_dim()
    }

    fn driver_dim(&self) -> usize {
        self.fields.driver_dim() + 1
    }

    fn eval(&self, i: usize, y: &[f64], out: &mut [f64]) {
        if i < self.fields.driver_dim() {
            self.fields.eval(i, y, out)
        } else {
            self.drift.eval(0, y, out)
        }
    }

    fn jacobian(&self, i: usize, y: &[f64], out: &mut [f64]) {
        if i < self.fields.driver_dim() {
            self.fields.jacobian(i, y, out)
        } else {
            self.drift.jacobian(0, y, out)
        }
    }

    fn hessian(&self, i: usize, y: &[f64], out: &mut [f64]) {
        if i < self.fields.driver_dim() {
            self.fields.hessian(i, y, out)
        } else {
            self.drift.hessian(0, y, out)
        }
    }

    fn third(&self, i: usize, y: &[f64], out: &mut [f64]) {
        if i < self.fields.driver_dim() {
            self.fields.third(i, y, out)
        } else {
            self.drift.third(0, y, out)
        }
    }

    fn bounds(&self) -> Option<[f64; 4]> {
        let (a, b) = (self.fields.bounds()?, self.drift.bounds()?);
        Some([a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2]), a[3].max(b[3])])
    }
}

/// Worst relative discrepancy between the supplied derivatives and central
/// differences of the next-lower derivative at random points of scale `radius`.
pub fn check_derivatives(v: &dyn VectorFieldSet, points: usize, radius: f64, seed: u64) -> f64 {
    let e = v.state_dim();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in 0..points {
        let y: Vec<f64> = mc::normals(seed, p as u64, e).into_iter().map(|x| radius * x).collect();
        for i in 0..v.driver_dim() {
            let mut analytic = [vec![0.0; e * e], vec![0.0; e * e * e], vec![0.0; e * e * e * e]];
            v.jacobian(i, &y, &mut analytic[0]);
            v.hessian(i, &y, &mut analytic[1]);
            v.third(i, &y, &mut analytic[2]);
            for b in 0..e {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[b] += h;
                ym[b] -= h;
                // Order 0 → 1, 1 → 2, 2 → 3.
                for level in 0..3 {
                    let size = e.pow(level as u32 + 1);
                    let (mut fp, mut fm) = (vec![0.0; size], vec![0.0; size]);
                    match level {
                        0 => {
                            v.eval(i, &yp, &mut fp);
                            v.eval(i, &ym, &mut fm);
                        }
                        1 => {
                            v.jacobian(i, &yp, &mut fp);
                            v.jacobian(i, &ym, &mut fm);
                        }
                        _ => {
                            v.hessian(i, &yp, &mut fp);
                            v.hessian(i, &ym, &mut fm);
                        }
                    }
                    for (idx, (p1, m1)) in fp.iter().zip(&fm).enumerate() {
                        let fd = (p1 - m1) / (2.0 * h);
                        let an = analytic[level][idx * e + b];
                        worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
                    }
                }
            }
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SchemeOrder {
    /// Euler: level one only.
    First,
    /// Davie: uses `(ΔX, 𝕏)`.
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SchemeOptions {
    pub order: SchemeOrder,
    /// Equal sub-steps per segment; needs linear segments when above one.
    pub substeps: usize,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self { order: SchemeOrder::Second, substeps: 1 }
    }
}

impl SchemeOptions {
    pub fn with_substeps(substeps: usize) -> Self {
        Self { substeps, ..Self::default() }
    }
}

/// Solution of an RDE on the driver's nodes.
#[derive(Clone, Debug, Serialize)]
pub struct SolutionPath {
    pub times: Vec<f64>,
    pub state_dim: usize,
    pub y: Vec<Vec<f64>>,
    /// `e×e` row-major per node.
    pub jacobian: Option<Vec<Vec<f64>>>,
    pub det: Option<Vec<f64>>,
    /// Cameron–Martin dimension of the derivative layers.
    pub cm_dim: usize,
    /// `e×cm` row-major per node.
    pub dy: Option<Vec<Vec<f64>>>,
    /// `e×cm×cm` row-major per node.
    pub d2y: Option<Vec<Vec<f64>>>,
    pub scheme: SchemeOptions,
    pub steps: usize,
    pub warnings: Vec<String>,
}

impl SolutionPath {
    pub fn final_state(&self) -> &[f64] {
        &self.y[self.y.len() - 1]
    }

    /// `⟨DY_{t_i}, h⟩` per state coordinate.
    pub fn pair_dy(&self, i: usize, h: &[f64]) -> Option<Vec<f64>> {
        let dy = &self.dy.as_ref()?[i];
        Some(dy.chunks(self.cm_dim).map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum()).collect())
    }

    /// `⟨D²Y_{t_i}, h ⊗ h⟩` per state coordinate.
    pub fn pair_d2y(&self, i: usize, h: &[f64]) -> Option<Vec<f64>> {
        let m = self.cm_dim;
        let d2 = &self.d2y.as_ref()?[i];
        Some(
            d2.chunks(m * m)
                .map(|blk| (0..m).map(|p| h[p] * (0..m).map(|q| blk[p * m + q] * h[q]).sum::<f64>()).sum())
                .collect(),
        )
    }

    /// `sup_t |J_t|` (Frobenius).
    pub fn sup_jacobian_norm(&self) -> Option<f64> {
        Some(self.jacobian.as_ref()?.iter().map(|j| frob(j)).fold(0.0, f64::max))
    }

    /// `sup_t |DY_t|` (Frobenius over state and Cameron–Martin coordinates).
    pub fn sup_dy_norm(&self) -> Option<f64> {
        Some(self.dy.as_ref()?.iter().map(|j| frob(j)).fold(0.0, f64::max))
    }

    /// CSV with columns `t, y1..ye` and, when present, `j11..jee`, `dy_norm`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let e = self.state_dim;
        let mut header = vec!["t".to_string()];
        header.extend((1..=e).map(|a| format!("y{a}")));
        if self.jacobian.is_some() {
            for a in 1..=e {
                header.extend((1..=e).map(|b| format!("j{a}_{b}")));
            }
        }
        if self.dy.is_some() {
            header.push("dy_norm".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = vec![format!("{t:.17e}")];
            row.extend(self.y[i].iter().map(|x| format!("{x:.17e}")));
            if let Some(j) = &self.jacobian {
                row.extend(j[i].iter().map(|x| format!("{x:.17e}")));
            }
            if let Some(dy) = &self.dy {
                row.push(format!("{:.17e}", frob(&dy[i])));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn frob(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dense state carried through the stepper.
struct State {
    y: Vec<f64>,
    jac: Option<Vec<f64>>,
    dy: Option<Vec<f64>>,
    d2y: Option<Vec<f64>>,
}

impl State {
    fn is_finite(&self) -> bool {
        let ok = |v: &Option<Vec<f64>>| v.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()));
        self.y.iter().all(|x| x.is_finite()) && ok(&self.jac) && ok(&self.dy) && ok(&self.d2y)
    }
}

/// Increments of one (sub)step.
struct StepDriver<'a> {
    dx: &'a [f64],
    /// `d×d`, `∫ X^i dX^j`.
    xx: &'a [f64],
    /// `ΔDX^j`, each of length `cm`.
    dd: &'a [Vec<f64>],
    /// `ΔD²X^j`, each `cm×cm`.
    de: &'a [Vec<f64>],
}

/// `out (e×cols) += m (e×e) · x (e×cols)`.
fn mat_mul_add(m: &[f64], x: &[f64], cols: usize, out: &mut [f64]) {
    let e = out.len() / cols.max(1);
    for a in 0..e {
        for b in 0..e {
            let mab = m[a * e + b];
            if mab == 0.0 {
                continue;
            }
            let (src, dst) = (&x[b * cols..(b + 1) * cols], &mut out[a * cols..(a + 1) * cols]);
            for (o, s) in dst.iter_mut().zip(src) {
                *o += mab * s;
            }
        }
    }
}

fn step(v: &dyn VectorFieldSet, second: bool, drv: &StepDriver, cm: usize, st: &mut State) {
    let e = v.state_dim();
    let d = v.driver_dim();
    let need_deriv = st.jac.is_some() || st.dy.is_some();
    let need_d2 = st.d2y.is_some();
    let y = &st.y;

    let mut vv = vec![vec![0.0; e]; d];
    let mut dv = vec![vec![0.0; e * e]; d];
    for i in 0..d {
        v.eval(i, y, &mut vv[i]);
        v.jacobian(i, y, &mut dv[i]);
    }
    let mut d2v = Vec::new();
    if (second && need_deriv) || need_d2 {
        d2v = vec![vec![0.0; e * e * e]; d];
        for (i, h) in d2v.iter_mut().enumerate() {
            v.hessian(i, y, h);
        }
    }
    let mut d3v = Vec::new();
    if second && need_d2 {
        d3v = vec![vec![0.0; e * e * e * e]; d];
        for (i, t) in d3v.iter_mut().enumerate() {
            v.third(i, y, t);
        }
    }

    // w[i][j] = DV_j V_i.
    let mut w = vec![vec![vec![0.0; e]; d]; d];
    if second {
        for i in 0..d {
            for j in 0..d {
                mat_vec(&dv[j], &vv[i], &mut w[i][j]);
            }
        }
    }

    let mut y_new = y.clone();
    for j in 0..d {
        for a in 0..e {
            y_new[a] += vv[j][a] * drv.dx[j];
        }
    }
    if second {
        for i in 0..d {
            for j in 0..d {
                let c = drv.xx[i * d + j];
                for a in 0..e {
                    y_new[a] += c * w[i][j][a];
                }
            }
        }
    }

    if need_deriv || need_d2 {
        // H[i][j] = D²V_j[V_i, ·] + DV_j DV_i.
        let mut hmat = Vec::new();
        if second {
            hmat = vec![vec![vec![0.0; e * e]; d]; d];
            for i in 0..d {
                for j in 0..d {
                    let hij = &mut hmat[i][j];
                    for a in 0..e {
                        for c in 0..e {
                            let mut acc = 0.0;
                            for b in 0..e {
                                acc += d2v[j][(a * e + b) * e + c] * vv[i][b] + dv[j][a * e + b] * dv[i][b * e + c];
                            }
                            hij[a * e + c] = acc;
                        }
                    }
                }
            }
        }
        let mut lmat = vec![0.0; e * e];
        for j in 0..d {
            for (l, x) in lmat.iter_mut().zip(&dv[j]) {
                *l += x * drv.dx[j];
            }
        }
        if second {
            for i in 0..d {
                for j in 0..d {
                    let c = drv.xx[i * d + j];
                    for (l, x) in lmat.iter_mut().zip(&hmat[i][j]) {
                        *l += c * x;
                    }
                }
            }
        }
        // c_m = V_m + ½Σ_j (w_mj + w_jm) Δ_j.
        let mut cvec = vv.clone();
        if second {
            for m in 0..d {
                for j in 0..d {
                    for a in 0..e {
                        cvec[m][a] += 0.5 * (w[m][j][a] + w[j][m][a]) * drv.dx[j];
                    }
                }
            }
        }

        if let Some(jac) = st.jac.as_mut() {
            let mut out = jac.clone();
            mat_mul_add(&lmat, jac, e, &mut out);
            *jac = out;
        }

        let dy_old = st.dy.clone();
        if let Some(d2y) = st.d2y.as_mut() {
            let dy = dy_old.as_ref().expect("second layer needs the first");
            let mut out = d2y.clone();
            mat_mul_add(&lmat, d2y, cm * cm, &mut out);
            // Bilinear forcing Bt[DY_p, DY_q].
            let mut bt = vec![0.0; e * e * e];
            for j in 0..d {
                for (o, x) in bt.iter_mut().zip(&d2v[j]) {
                    *o += drv.dx[j] * x;
                }
            }
            if second {
                for i in 0..d {
                    for j in 0..d {
                        let c = drv.xx[i * d + j];
                        if c == 0.0 {
                            continue;
                        }
                        for a in 0..e {
                            for b in 0..e {
                                for q in 0..e {
                                    let mut acc = 0.0;
                                    for r in 0..e {
                                        acc += d3v[j][((a * e + r) * e + b) * e + q] * vv[i][r];
                                        acc += dv[j][a * e + r] * d2v[i][(r * e + b) * e + q];
                                        acc += d2v[j][(a * e + r) * e + q] * dv[i][r * e + b];
                                        acc += d2v[j][(a * e + r) * e + b] * dv[i][r * e + q];
                                    }
                                    bt[(a * e + b) * e + q] += c * acc;
                                }
                            }
                        }
                    }
                }
            }
            for a in 0..e {
                for b in 0..e {
                    for q in 0..e {
                        let coef = bt[(a * e + b) * e + q];
                        if coef == 0.0 {
                            continue;
                        }
                        let (rb, rq) = (&dy[b * cm..(b + 1) * cm], &dy[q * cm..(q + 1) * cm]);
                        let blk = &mut out[a * cm * cm..(a + 1) * cm * cm];
                        for p in 0..cm {
                            let s = coef * rb[p];
                            if s == 0.0 {
                                continue;
                            }
                            for (o, x) in blk[p * cm..(p + 1) * cm].iter_mut().zip(rq) {
                                *o += s * x;
                            }
                        }
                    }
                }
            }
            // Σ_m (R_m DY)_p ΔD_m[q] + (p ↔ q), R_m = DV_m + ½Σ_j (H_mj + H_jm) Δ_j.
            for m in 0..d {
                let mut rm = dv[m].clone();
                if second {
                    for j in 0..d {
                        for (r, (x, y2)) in rm.iter_mut().zip(hmat[m][j].iter().zip(&hmat[j][m])) {
                            *r += 0.5 * (x + y2) * drv.dx[j];
                        }
                    }
                }
                let mut pm = vec![0.0; e * cm];
                mat_mul_add(&rm, dy, cm, &mut pm);
                let ddm = &drv.dd[m];
                for a in 0..e {
                    let row = &pm[a * cm..(a + 1) * cm];
                    let blk = &mut out[a * cm * cm..(a + 1) * cm * cm];
                    for p in 0..cm {
                        for q in 0..cm {
                            blk[p * cm + q] += row[p] * ddm[q] + row[q] * ddm[p];
                        }
                    }
                }
            }
            // Σ_m c_m ⊗ ΔD²X^m.
            for m in 0..d {
                for a in 0..e {
                    let c = cvec[m][a];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, x) in out[a * cm * cm..(a + 1) * cm * cm].iter_mut().zip(&drv.de[m]) {
                        *o += c * x;
                    }
                }
            }
            // Σ_ij ½(w_ij + w_ji) ΔD^i ⊗ ΔD^j.
            if second {
                for i in 0..d {
                    for j in 0..d {
                        for a in 0..e {
                            let c = 0.5 * (w[i][j][a] + w[j][i][a]);
                            if c == 0.0 {
                                continue;
                            }
                            let blk = &mut out[a * cm * cm..(a + 1) * cm * cm];
                            for p in 0..cm {
                                let s = c * drv.dd[i][p];
                                if s == 0.0 {
                                    continue;
                                }
                                for (o, x) in blk[p * cm..(p + 1) * cm].iter_mut().zip(&drv.dd[j]) {
                                    *o += s * x;
                                }
                            }
                        }
                    }
                }
            }
            *d2y = out;
        }

        if let Some(dy) = st.dy.as_mut() {
            let mut out = dy.clone();
            mat_mul_add(&lmat, dy, cm, &mut out);
            for m in 0..d {
                for a in 0..e {
                    let c = cvec[m][a];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, x) in out[a * cm..(a + 1) * cm].iter_mut().zip(&drv.dd[m]) {
                        *o += c * x;
                    }
                }
            }
            *dy = out;
        }
    }
    st.y = y_new;
}

fn check_dims(v: &dyn VectorFieldSet, driver_dim: usize, y0: &[f64]) -> Result<()> {
    if v.driver_dim() != driver_dim {
        return Err(Error::DimensionMismatch { left: v.driver_dim(), right: driver_dim });
    }
    if v.state_dim() != y0.len() {
        return Err(Error::DimensionMismatch { left: v.state_dim(), right: y0.len() });
    }
    Ok(())
}

fn identity(e: usize) -> Vec<f64> {
    let mut m = vec![0.0; e * e];
    for a in 0..e {
        m[a * e + a] = 1.0;
    }
    m
}

fn determinant(m: &[f64], e: usize) -> f64 {
    DMatrix::from_row_slice(e, e, m).determinant()
}

/// Drives `State` through the level-2 path `x`, with optional derivative increments
/// per segment (`dd[k][j]`, `de[k][j]`).
fn integrate(
    x: &Level2Path,
    v: &dyn VectorFieldSet,
    mut st: State,
    cm: usize,
    dd: Option<&[Vec<Vec<f64>>]>,
    de: Option<&[Vec<Vec<f64>>]>,
    opts: SchemeOptions,
) -> Result<SolutionPath> {
    let e = v.state_dim();
    let d = x.dim();
    if opts.substeps == 0 {
        return invalid("substeps must be positive");
    }
    if opts.substeps > 1 && !x.has_linear_segments() {
        return invalid("sub-stepping needs a piecewise-linear driver");
    }
    let second = opts.order == SchemeOrder::Second;
    let s = opts.substeps as f64;
    let times = x.times().to_vec();
    let mut y = vec![st.y.clone()];
    let mut jac = st.jac.as_ref().map(|j| vec![j.clone()]);
    let mut det = st.jac.as_ref().map(|_| vec![1.0]);
    let mut dys = st.dy.as_ref().map(|m| vec![m.clone()]);
    let mut d2ys = st.d2y.as_ref().map(|m| vec![m.clone()]);
    let mut warnings = Vec::new();
    let empty: Vec<Vec<f64>> = vec![Vec::new(); d];
    let zero_cm: Vec<Vec<f64>> = vec![vec![0.0; cm]; d];
    let zero_cm2: Vec<Vec<f64>> = vec![vec![0.0; cm * cm]; d];
    for k in 0..x.len() - 1 {
        let dx: Vec<f64> = x.value(k + 1).iter().zip(x.value(k)).map(|(a, b)| (a - b) / s).collect();
        let xx: Vec<f64> = x.segment(k).iter().map(|v| v / (s * s)).collect();
        let ddk: Vec<Vec<f64>> = match dd {
            Some(dd) => dd[k].iter().map(|r| r.iter().map(|v| v / s).collect()).collect(),
            None if st.dy.is_some() => zero_cm.clone(),
            None => empty.clone(),
        };
        let dek: Vec<Vec<f64>> = match de {
            Some(de) => de[k].iter().map(|r| r.iter().map(|v| v / s).collect()).collect(),
            None if st.d2y.is_some() => zero_cm2.clone(),
            None => empty.clone(),
        };
        let drv = StepDriver { dx: &dx, xx: &xx, dd: &ddk, de: &dek };
        for _ in 0..opts.substeps {
            step(v, second, &drv, cm, &mut st);
        }
        if !st.is_finite() {
            return Err(Error::NonFinite { t0: times[k], t1: times[k + 1] });
        }
        y.push(st.y.clone());
        if let (Some(js), Some(j)) = (jac.as_mut(), st.jac.as_ref()) {
            let dt = determinant(j, e);
            if dt.abs() < f64::MIN_POSITIVE {
                warnings.push(format!("Jacobian determinant underflow at node {}", k + 1));
            }
            det.as_mut().expect("det tracks jac").push(dt);
            js.push(j.clone());
        }
        if let (Some(out), Some(m)) = (dys.as_mut(), st.dy.as_ref()) {
            out.push(m.clone());
        }
        if let (Some(out), Some(m)) = (d2ys.as_mut(), st.d2y.as_ref()) {
            out.push(m.clone());
        }
    }
    Ok(SolutionPath {
        times,
        state_dim: e,
        y,
        jacobian: jac,
        det,
        cm_dim: cm,
        dy: dys,
        d2y: d2ys,
        scheme: opts,
        steps: (x.len() - 1) * opts.substeps,
        warnings,
    })
}

/// Solves `dY = V(Y) dX` from `y0`.
pub fn solve(x: &Level2Path, v: &dyn VectorFieldSet, y0: &[f64], opts: SchemeOptions) -> Result<SolutionPath> {
    check_dims(v, x.dim(), y0)?;
    integrate(x, v, State { y: y0.to_vec(), jac: None, dy: None, d2y: None }, 0, None, None, opts)
}

/// Solves for `Y` together with `J = ∂Y/∂y₀`.
pub fn jacobian(x: &Level2Path, v: &dyn VectorFieldSet, y0: &[f64], opts: SchemeOptions) -> Result<SolutionPath> {
    check_dims(v, x.dim(), y0)?;
    let e = y0.len();
    integrate(x, v, State { y: y0.to_vec(), jac: Some(identity(e)), dy: None, d2y: None }, 0, None, None, opts)
}

/// Solves for `Y`, `J`, `DY` and (for `k = 2`) `D²Y` driven by `X̂`.
///
/// The derivative layers solve the linear equations
/// `dDY = DV(Y)DY dX + V(Y) dDX` and
/// `dD²Y = (DV(Y)D²Y + D²V(Y)[DY,DY]) dX + 2 DV(Y)DY ⊗̂ dDX + V(Y) dD²X`.
pub fn malliavin_rde(
    driver: &GradientDriver,
    v: &dyn VectorFieldSet,
    y0: &[f64],
    k: usize,
    opts: SchemeOptions,
) -> Result<SolutionPath> {
    if !(1..=2).contains(&k) {
        return invalid(format!("Malliavin RDE supports k = 1 or 2, got {k}"));
    }
    if k == 2 && driver.d2x.is_none() {
        return Err(Error::MissingLayer { order: 2 });
    }
    let x = driver.lift()?;
    check_dims(v, x.dim(), y0)?;
    let e = y0.len();
    let cm = driver.cm_dim;
    let nodes = driver.times.len();
    let diff = |layer: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        (0..nodes - 1)
            .map(|i| {
                layer[i + 1].iter().zip(&layer[i]).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect()
            })
            .collect()
    };
    let dd = diff(&driver.dx);
    let de = if k == 2 { Some(diff(driver.d2x.as_ref().expect("checked above"))) } else { None };
    let st = State {
        y: y0.to_vec(),
        jac: Some(identity(e)),
        dy: Some(vec![0.0; e * cm]),
        d2y: (k == 2).then(|| vec![0.0; e * cm * cm]),
    };
    integrate(&x, v, st, cm, Some(&dd), de.as_deref(), opts)
}

/// One term `C(k,r)·D^{|π|}V(Y)[D^{b_1}Y, …] ⊗ dD^r X` of the `k`-th
/// derivative equation, grouped by block sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DerivativeTerm {
    /// Order of the driver derivative `D^r X`.
    pub driver_order: usize,
    /// Leibniz weight `C(k, r)`.
    pub leibniz: u64,
    /// Block sizes `b_1 ≥ b_2 ≥ …` (the field is differentiated `blocks.len()` times).
    pub blocks: Vec<usize>,
    /// Number of set partitions with these block sizes.
    pub count: u64,
}

/// All set partitions of `{0, …, m−1}` in canonical (restricted-growth) order.
pub fn set_partitions(m: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; m];
    fn rec(i: usize, max: usize, labels: &mut [usize], out: &mut Vec<Vec<Vec<usize>>>) {
        let m = labels.len();
        if i == m {
            let blocks = if m == 0 { 0 } else { max + 1 };
            let mut p = vec![Vec::new(); blocks];
            for (x, &l) in labels.iter().enumerate() {
                p[l].push(x);
            }
            out.push(p);
            return;
        }
        let top = if i == 0 { 0 } else { max + 1 };
        for l in 0..=top {
            labels[i] = l;
            rec(i + 1, max.max(l), labels, out);
        }
    }
    rec(0, 0, &mut labels, &mut out);
    out
}

/// Terms of the linear equation for `D^kY`: Leibniz over `r` driver
/// derivatives and Faà di Bruno over the remaining `k − r`.
///
/// The `r = 0` group with a single block of size `k` is the homogeneous part
/// `DV(Y) D^kY dX`.
pub fn derivative_terms(k: usize) -> Vec<DerivativeTerm> {
    let mut out = Vec::new();
    for r in 0..=k {
        let m = k - r;
        let mut groups: std::collections::BTreeMap<Vec<usize>, u64> = std::collections::BTreeMap::new();
        if m == 0 {
            groups.insert(Vec::new(), 1);
        } else {
            for p in set_partitions(m) {
                let mut sizes: Vec<usize> = p.iter().map(|b| b.len()).collect();
                sizes.sort_unstable_by(|a, b| b.cmp(a));
                *groups.entry(sizes).or_default() += 1;
            }
        }
        for (blocks, count) in groups.into_iter().rev() {
            out.push(DerivativeTerm { driver_order: r, leibniz: binomial(k, r) as u64, blocks, count });
        }
    }
    out
}

/// Which sup-norm [`moment_scan`] samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MomentQuantity {
    Jacobian,
    Malliavin,
}

/// Empirical moments `E[Q^p]` with a sample-doubling stability flag.
#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub quantity: MomentQuantity,
    pub kernel: String,
    pub p: Vec<f64>,
    pub moments: Vec<MeanSe>,
    /// Same estimate on the first half of the samples.
    pub half_moments: Vec<MeanSe>,
    pub stable: Vec<bool>,
    /// Largest `p` with every smaller listed exponent also stable.
    pub largest_stable_p: Option<f64>,
}

/// Monte Carlo integrability profile of `sup_t |J_t|` or `sup_t |DY_t|`.
#[allow(clippy::too_many_arguments)]
pub fn moment_scan(
    k: &KernelPath,
    v: &dyn VectorFieldSet,
    y0: &[f64],
    quantity: MomentQuantity,
    p_list: &[f64],
    samples: usize,
    seed: u64,
    opts: SchemeOptions,
) -> Result<MomentReport> {
    if samples < 1000 {
        return invalid(format!("moment scan needs at least 1000 samples, got {samples}"));
    }
    if p_list.is_empty() || p_list.iter().any(|p| *p <= 0.0) {
        return invalid("moment exponents must be positive");
    }
    let d = v.driver_dim();
    let sup = mc::par_map(samples, |i| -> Result<f64> {
        let omegas = roughlift::sample_components(k, d, seed, i as u64);
        match quantity {
            MomentQuantity::Jacobian => {
                let x = roughlift::lift_process(k, &omegas)?;
                Ok(jacobian(&x, v, y0, opts)?.sup_jacobian_norm().expect("jacobian requested"))
            }
            MomentQuantity::Malliavin => {
                let drv = GradientDriver::new(k, &omegas, false)?;
                Ok(malliavin_rde(&drv, v, y0, 1, opts)?.sup_dy_norm().expect("dy requested"))
            }
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let half = samples / 2;
    let mut moments = Vec::new();
    let mut half_moments = Vec::new();
    let mut stable = Vec::new();
    for &p in p_list {
        let pow: Vec<f64> = sup.iter().map(|q| q.powf(p)).collect();
        let full = MeanSe::of(&pow);
        let h = MeanSe::of(&pow[..half]);
        let ok = full.mean.is_finite()
            && h.mean.is_finite()
            && ((h.mean - full.mean).abs() <= 3.0 * h.se || (h.se == 0.0 && h.mean == full.mean));
        moments.push(full);
        half_moments.push(h);
        stable.push(ok);
    }
    let largest_stable_p = p_list.iter().zip(&stable).take_while(|(_, s)| **s).map(|(p, _)| *p).last();
    Ok(MomentReport {
        quantity,
        kernel: k.label().to_string(),
        p: p_list.to_vec(),
        moments,
        half_moments,
        stable,
        largest_stable_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughlift::lift_piecewise_linear;

    fn canonical(n: usize) -> Level2Path {
        let t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let v: Vec<Vec<f64>> = t.iter().map(|x| vec![*x]).collect();
        lift_piecewise_linear(&t, &v).unwrap()
    }

    #[test]
    fn exponential_on_canonical_time() {
        let sol = solve(&canonical(1 << 10), &AffineFields::scalar_linear(), &[1.0], SchemeOptions::default()).unwrap();
        assert!((sol.final_state()[0] - 1f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn zero_fields_freeze_state() {
        let x = canonical(16);
        let sol = jacobian(&x, &AffineFields::zero(2, 1), &[0.3, -1.0], SchemeOptions::default()).unwrap();
        assert!(sol.y.iter().all(|y| y == &[0.3, -1.0]));
        assert!(sol.jacobian.unwrap().iter().all(|j| j == &identity(2)));
    }

    #[test]
    fn tanh_derivatives_match_differences() {
        let v = TanhFields::random(3, 2, 4, 0.8, 11);
        assert!(check_derivatives(&v, 5, 1.0, 2) < 1e-6);
        let b = v.bounds().unwrap();
        assert!(b.iter().all(|x| x.is_finite() && *x > 0.0));
    }

    #[test]
    fn blow_up_names_interval() {
        let a = AffineFields::new(1, vec![vec![1e100]], vec![vec![0.0]]).unwrap();
        let err = solve(&canonical(4), &a, &[1.0], SchemeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn partitions_count_bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52, 203];
        for (m, b) in bell.iter().enumerate() {
            assert_eq!(set_partitions(m).len(), *b);
        }
    }

    #[test]
    fn second_derivative_terms() {
        let t = derivative_terms(2);
        let find = |r: usize, blocks: &[usize]| t.iter().find(|x| x.driver_order == r && x.blocks == blocks).cloned();
        assert_eq!(find(0, &[2]).unwrap().count, 1);
        assert_eq!(find(0, &[1, 1]).unwrap().count, 1);
        let mixed = find(1, &[1]).unwrap();
        assert_eq!((mixed.leibniz, mixed.count), (2, 1));
        assert_eq!(find(2, &[]).unwrap().leibniz, 1);
        assert_eq!(t.len(), 4);
        // Faà di Bruno for m = 3: {3}, {2,1}×3, {1,1,1}.
        let t3 = derivative_terms(3);
        assert_eq!(t3.iter().filter(|x| x.driver_order == 0).map(|x| x.count).sum::<u64>(), 5);
    }
}
