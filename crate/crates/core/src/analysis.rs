//! Path functionals built on the homogeneous `p`-variation: the greedy
//! sequence `τ_i` with its count `N_α` and accumulated local variation `M_α`,
//! Monte Carlo tails of `N_α`, the rate function
//! `I(x) = inf{½‖h‖² : ⟨f_t, h^{⊗n}⟩ = x_t}`, and dilation diagnostics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::enhanced::{enhance, lift_enhanced};
use crate::error::{invalid, Error, Result};
use crate::kernels::KernelPath;
use crate::mc::{self, fit_line, wilson, LineFit, MeanSe};
use crate::roughlift::{lift_piecewise_linear, lift_process, sample_components, Level2Path, NormTable};
use crate::symtensor::SymTensor;

/// Relative slack on `M_α ≤ α(2N+1)` covering the bisection tolerance.
pub const M_SLACK: f64 = 1e-9;

/// Control used by the greedy sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GreedyNorm {
    /// `‖X‖^p_{p-var} + ‖𝕏‖^{p/2}_{p/2-var}`.
    Homogeneous,
    /// `‖X‖^p_{p-var}` only.
    Level1,
}

#[derive(Clone, Debug, Serialize)]
pub struct PartitionStats {
    pub alpha: f64,
    pub p: f64,
    pub norm: GreedyNorm,
    /// Greedy times `τ_1, τ_2, …` up to and including the terminal time.
    pub taus: Vec<f64>,
    /// `N_α = #{i ≥ 1 : τ_i < T}`.
    pub n: usize,
    /// Best admissible partition sum found on the refined nodes (a lower bound on `M_α`).
    pub m_accumulated: f64,
    /// `α(2N + 1)`.
    pub m_certificate: f64,
    /// `ω(0, T)` on the refined nodes.
    pub homogeneous_norm_p: f64,
    pub nodes: usize,
}

impl PartitionStats {
    /// `α·N ≤ ω(0, T)`.
    pub fn count_bound_holds(&self) -> bool {
        self.alpha * self.n as f64 <= self.homogeneous_norm_p * (1.0 + 1e-12)
    }

    /// `M_α ≤ α(2N + 1)`.
    pub fn accumulation_bound_holds(&self) -> bool {
        self.m_accumulated <= self.m_certificate * (1.0 + M_SLACK)
    }
}

/// `ω` on a fixed node set.
struct Control<'a> {
    table: NormTable,
    p: f64,
    norm: GreedyNorm,
    x: &'a Level2Path,
}

impl<'a> Control<'a> {
    fn new(x: &'a Level2Path, p: f64, norm: GreedyNorm) -> Self {
        Self { table: x.norm_table(), p, norm, x }
    }

    fn combine(&self, s1: f64, s2: f64) -> f64 {
        match self.norm {
            GreedyNorm::Homogeneous => s1 + s2,
            GreedyNorm::Level1 => s1,
        }
    }

    /// `ω(t_start, t_j)` for every `j`, plus the separate level sums.
    fn from(&self, start: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (v1, v2) = self.table.pvar_sums_from(start, self.p);
        let w = v1.iter().zip(&v2).map(|(a, b)| self.combine(*a, *b)).collect();
        (w, v1, v2)
    }

    /// `ω(t_start, t)` for `t = t_{j−1} + λ(t_j − t_{j−1})`, as a function of `λ`.
    fn partial(&self, start: usize, j: usize, v1: &[f64], v2: &[f64]) -> impl Fn(f64) -> f64 + '_ {
        let d = self.x.dim();
        let delta: Vec<f64> = self.x.value(j).iter().zip(self.x.value(j - 1)).map(|(a, b)| a - b).collect();
        let dd: f64 = delta.iter().map(|v| v * v).sum();
        // Per anchor k: best sums up to t_k and coefficients of ‖A + λΔ‖², ‖B + λC + λ²E‖².
        let anchors: Vec<(f64, f64, [f64; 3], [f64; 5])> = (start..j)
            .map(|k| {
                let (a, b) = if k == j - 1 { (vec![0.0; d], vec![0.0; d * d]) } else { self.x.increment(k, j - 1) };
                let ad: f64 = a.iter().zip(&delta).map(|(p, q)| p * q).sum();
                let aa: f64 = a.iter().map(|v| v * v).sum();
                let mut q = [0.0; 5];
                for r in 0..d {
                    for c in 0..d {
                        let bb = b[r * d + c];
                        let cc = a[r] * delta[c];
                        let ee = 0.5 * delta[r] * delta[c];
                        q[0] += bb * bb;
                        q[1] += 2.0 * bb * cc;
                        q[2] += cc * cc + 2.0 * bb * ee;
                        q[3] += 2.0 * cc * ee;
                        q[4] += ee * ee;
                    }
                }
                (v1[k], v2[k], [aa, 2.0 * ad, dd], q)
            })
            .collect();
        let p = self.p;
        move |lam: f64| {
            let (mut s1, mut s2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (b1, b2, l1, l2) in &anchors {
                let n1 = (l1[0] + lam * (l1[1] + lam * l1[2])).max(0.0).sqrt();
                let n2 = (l2[0] + lam * (l2[1] + lam * (l2[2] + lam * (l2[3] + lam * l2[4])))).max(0.0).sqrt();
                s1 = s1.max(b1 + n1.powf(p));
                s2 = s2.max(b2 + n2.powf(p / 2.0));
            }
            self.combine(s1, s2)
        }
    }
}

/// Greedy sequence with the homogeneous control.
pub fn greedy(x: &Level2Path, alpha: f64, p: f64) -> Result<PartitionStats> {
    greedy_with(x, alpha, p, GreedyNorm::Homogeneous)
}

/// Greedy sequence `τ_{i+1} = inf{t > τ_i : ω(τ_i, t) ≥ α} ∧ T`.
///
/// Each `τ_i` is located by bisection inside a linear segment and inserted
/// as a node, so every later functional sees it; `ω(τ_i, τ_{i+1}) ≥ α`
/// holds on the final node set.
pub fn greedy_with(x: &Level2Path, alpha: f64, p: f64, norm: GreedyNorm) -> Result<PartitionStats> {
    if alpha.is_nan() || alpha <= 0.0 {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    if p.is_nan() || p < 1.0 {
        return invalid(format!("p must be at least 1, got {p}"));
    }
    if !x.has_linear_segments() {
        return invalid("greedy partitions need a piecewise-linear lift");
    }
    let mut path = x.clone();
    let mut start = 0usize;
    let t_end = *path.times().last().expect("nonempty path");
    let mut taus = Vec::new();
    loop {
        let tau = {
            let ctl = Control::new(&path, p, norm);
            let (w, v1, v2) = ctl.from(start);
            let last = path.len() - 1;
            let Some(j) = (start + 1..=last).find(|&j| w[j] >= alpha) else {
                taus.push(t_end);
                break;
            };
            let f = ctl.partial(start, j, &v1, &v2);
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if f(mid) >= alpha {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let (t0, t1) = (path.times()[j - 1], path.times()[j]);
            let tau = (t0 + hi * (t1 - t0)).min(t1);
            if tau <= t0 {
                t1
            } else {
                tau
            }
        };
        taus.push(tau);
        if tau >= t_end {
            break;
        }
        let (refined, idx) = path.insert_node(tau)?;
        path = refined;
        start = idx;
    }
    let n = taus.iter().filter(|&&t| t < t_end).count();
    let ctl = Control::new(&path, p, norm);
    let m = path.len();
    let omega: Vec<Vec<f64>> = (0..m).map(|s| ctl.from(s).0).collect();
    let cap = alpha * (1.0 + M_SLACK);
    // best[j] = max Σ ω over admissible partitions of [t_0, t_j].
    let mut best = vec![f64::NEG_INFINITY; m];
    best[0] = 0.0;
    for j in 1..m {
        for i in 0..j {
            if best[i] > f64::NEG_INFINITY && omega[i][j] <= cap {
                best[j] = best[j].max(best[i] + omega[i][j]);
            }
        }
    }
    Ok(PartitionStats {
        alpha,
        p,
        norm,
        taus,
        n,
        m_accumulated: best[m - 1],
        m_certificate: alpha * (2 * n + 1) as f64,
        homogeneous_norm_p: omega[0][m - 1],
        nodes: m,
    })
}

/// Which lift the tail and greedy Monte Carlo runs act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LiftTarget {
    /// The process `X` alone.
    Process,
    /// The enhanced process `X̂ = (X, DX, …)`.
    Enhanced,
}

/// Greedy statistics of sample `index`.
pub fn greedy_sample(
    k: &KernelPath,
    components: usize,
    target: LiftTarget,
    alpha: f64,
    p: f64,
    seed: u64,
    index: u64,
) -> Result<PartitionStats> {
    let omegas = sample_components(k, components, seed, index);
    let lift = match target {
        LiftTarget::Process => lift_process(k, &omegas)?,
        LiftTarget::Enhanced => lift_enhanced(&enhance(k, &omegas)?)?.path,
    };
    greedy(&lift, alpha, p)
}

/// Survival of `N_α` with a shape fit.
#[derive(Clone, Debug, Serialize)]
pub struct TailReport {
    pub kernel: String,
    pub order: usize,
    pub target: LiftTarget,
    pub alpha: f64,
    pub p: f64,
    pub samples: usize,
    pub m: Vec<usize>,
    pub exceedances: Vec<usize>,
    pub survival: Vec<f64>,
    /// 95% Wilson intervals.
    pub wilson: Vec<(f64, f64)>,
    /// Fit of `log P̂(N_α > M)` against `M^{2/(np)}` over tail bins with enough exceedances.
    pub fit: Option<LineFit>,
    pub fit_bins: usize,
    pub degenerate: bool,
    /// Median of `‖X̂‖^p`, an empirical stand-in for the unknown level constant.
    pub median_norm_p: f64,
    /// Every sample satisfied both greedy bounds.
    pub bounds_hold: bool,
    pub count_bound_failures: usize,
    pub accumulation_bound_failures: usize,
    pub monotone: bool,
    /// Tail constants are not computable; the fit checks shape only.
    pub qualitative: bool,
    pub mean_n: MeanSe,
}

/// Fewest exceedances for an `M` bin to enter the fit.
pub const MIN_EXCEEDANCES: usize = 20;

/// Largest survival probability for an `M` bin to count as tail.
pub const TAIL_START: f64 = 0.5;

/// Monte Carlo tail of `N_α`.
#[allow(clippy::too_many_arguments)]
pub fn tail_scan(
    k: &KernelPath,
    components: usize,
    target: LiftTarget,
    alpha: f64,
    p: f64,
    m_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<TailReport> {
    if samples == 0 || m_list.is_empty() {
        return invalid("tail scan needs samples and at least one threshold");
    }
    let stats = mc::par_map(samples, |i| greedy_sample(k, components, target, alpha, p, seed, i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(tail_from_stats(k, target, alpha, p, m_list, &stats))
}

/// Tail summary of precomputed greedy statistics.
pub fn tail_from_stats(
    k: &KernelPath,
    target: LiftTarget,
    alpha: f64,
    p: f64,
    m_list: &[usize],
    stats: &[PartitionStats],
) -> TailReport {
    let samples = stats.len();
    let ns: Vec<usize> = stats.iter().map(|s| s.n).collect();
    let exceedances: Vec<usize> = m_list.iter().map(|&m| ns.iter().filter(|&&n| n > m).count()).collect();
    let survival: Vec<f64> = exceedances.iter().map(|&e| e as f64 / samples as f64).collect();
    let wilson_ci = exceedances.iter().map(|&e| wilson(e, samples, 1.96)).collect();
    let order = k.order() as f64;
    let (mut fx, mut fy) = (Vec::new(), Vec::new());
    for ((&m, &e), &s) in m_list.iter().zip(&exceedances).zip(&survival) {
        if e >= MIN_EXCEEDANCES && s <= TAIL_START {
            fx.push((m as f64).powf(2.0 / (order * p)));
            fy.push(s.ln());
        }
    }
    let fit = fit_line(&fx, &fy);
    let mut norms: Vec<f64> = stats.iter().map(|s| s.homogeneous_norm_p).collect();
    norms.sort_by(f64::total_cmp);
    let count_fail = stats.iter().filter(|s| !s.count_bound_holds()).count();
    let acc_fail = stats.iter().filter(|s| !s.accumulation_bound_holds()).count();
    let mut sorted: Vec<(usize, f64)> = m_list.iter().copied().zip(survival.iter().copied()).collect();
    sorted.sort_by_key(|x| x.0);
    TailReport {
        kernel: k.label().to_string(),
        order: k.order(),
        target,
        alpha,
        p,
        samples,
        m: m_list.to_vec(),
        exceedances: exceedances.clone(),
        survival,
        wilson: wilson_ci,
        fit_bins: fx.len(),
        degenerate: exceedances.iter().all(|&e| e == 0) || fit.is_none(),
        fit,
        median_norm_p: norms[norms.len() / 2],
        bounds_hold: count_fail == 0 && acc_fail == 0,
        count_bound_failures: count_fail,
        accumulation_bound_failures: acc_fail,
        monotone: sorted.windows(2).all(|w| w[1].1 <= w[0].1),
        qualitative: true,
        mean_n: MeanSe::of(&ns.iter().map(|&n| n as f64).collect::<Vec<_>>()),
    }
}

impl TailReport {
    /// CSV with columns `m,exceedances,survival,lo,hi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "m,exceedances,survival,lo,hi")?;
        for i in 0..self.m.len() {
            let (lo, hi) = self.wilson[i];
            writeln!(w, "{},{},{:.17e},{:.17e},{:.17e}", self.m[i], self.exceedances[i], self.survival[i], lo, hi)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RateMethod {
    /// Exact minimum-norm solve for `n = 1`, augmented Lagrangian otherwise.
    Auto,
    /// Augmented Lagrangian with quasi-Newton inner solves for every `n`.
    AugmentedLagrangian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateOptions {
    pub method: RateMethod,
    pub starts: usize,
    pub seed: u64,
    /// Feasibility tolerance on `max_t |⟨f_t, h^{⊗n}⟩ − x_t|`.
    pub tolerance: f64,
    pub max_outer: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self { method: RateMethod::Auto, starts: 32, seed: 0, tolerance: 1e-6, max_outer: 40 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RateStatus {
    Feasible,
    /// No feasible `h` found; `residual` is the floor across restarts.
    Infeasible,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateResult {
    pub target: Vec<f64>,
    pub h_star: Vec<f64>,
    /// `½‖h*‖²`.
    pub value: f64,
    pub residual: f64,
    pub status: RateStatus,
    /// Final residual of every start, in start order.
    pub start_residuals: Vec<f64>,
    pub start_values: Vec<f64>,
}

/// Constraint system `c_t(h) = ⟨f_t, h^{⊗n}⟩ − x_t` on the kernel nodes.
struct Constraints {
    terms: Vec<Vec<(Vec<usize>, f64)>>,
    target: Vec<f64>,
}

impl Constraints {
    fn values(&self, h: &[f64]) -> Vec<f64> {
        self.terms
            .iter()
            .zip(&self.target)
            .map(|(t, x)| t.iter().map(|(idx, c)| c * idx.iter().map(|&i| h[i]).product::<f64>()).sum::<f64>() - x)
            .collect()
    }

    /// Adds `Σ_t w_t ∇c_t(h)` into `g`.
    fn grad_combination(&self, h: &[f64], w: &[f64], g: &mut [f64]) {
        for (t, &wt) in self.terms.iter().zip(w) {
            if wt == 0.0 {
                continue;
            }
            for (idx, c) in t {
                for pos in 0..idx.len() {
                    let rest: f64 = idx.iter().enumerate().filter(|(q, _)| *q != pos).map(|(_, &i)| h[i]).product();
                    g[idx[pos]] += wt * c * rest;
                }
            }
        }
    }
}

/// Minimizes `f` by L-BFGS with Armijo backtracking.
fn lbfgs(f: &dyn Fn(&[f64], &mut [f64]) -> f64, x0: Vec<f64>, iters: usize, gtol: f64) -> Vec<f64> {
    let n = x0.len();
    let mem = 8;
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for _ in 0..iters {
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn <= gtol {
            break;
        }
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.iter().zip(&q).map(|(p, r)| p * r).sum::<f64>();
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let sy: f64 = s.iter().zip(y).map(|(p, r)| p * r).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * y.iter().zip(&q).map(|(p, r)| p * r).sum::<f64>();
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
            hist.clear();
        }
        let mut step = 1.0;
        let mut gnew = vec![0.0; n];
        let mut xnew;
        let mut fnew;
        loop {
            xnew = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect::<Vec<_>>();
            fnew = f(&xnew, &mut gnew);
            if fnew <= fx + 1e-4 * step * slope || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        if step < 1e-20 {
            break;
        }
        let s: Vec<f64> = xnew.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(p, r)| p * r).sum();
        if sy > 1e-300 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > mem {
                hist.remove(0);
            }
        }
        x = xnew;
        g = gnew;
        fx = fnew;
    }
    x
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn augmented_lagrangian(c: &Constraints, dim: usize, h0: Vec<f64>, opts: &RateOptions) -> Vec<f64> {
    let m = c.target.len();
    let mut lam = vec![0.0; m];
    let mut mu = 10.0;
    let mut h = h0;
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_outer {
        let lam_now = lam.clone();
        let obj = |x: &[f64], g: &mut [f64]| -> f64 {
            let cv = c.values(x);
            g.copy_from_slice(x);
            let w: Vec<f64> = cv.iter().zip(&lam_now).map(|(ci, li)| li + mu * ci).collect();
            c.grad_combination(x, &w, g);
            0.5 * x.iter().map(|v| v * v).sum::<f64>()
                + cv.iter().zip(&lam_now).map(|(ci, li)| li * ci + 0.5 * mu * ci * ci).sum::<f64>()
        };
        h = lbfgs(&obj, h, 500, 1e-12);
        let cv = c.values(&h);
        let res = max_abs(&cv);
        if res <= 1e-3 * opts.tolerance {
            break;
        }
        for (l, ci) in lam.iter_mut().zip(&cv) {
            *l += mu * ci;
        }
        if res > 0.25 * prev {
            mu = (mu * 10.0).min(1e12);
        }
        prev = res;
    }
    debug_assert_eq!(h.len(), dim);
    h
}

/// Rate function `I(x)` of the chaos process with kernel path `k` at the
/// target values `x` (one per kernel node).
pub fn rate_function(k: &KernelPath, target: &[f64], opts: &RateOptions) -> Result<RateResult> {
    if target.len() != k.len() {
        return Err(Error::DimensionMismatch { left: k.len(), right: target.len() });
    }
    if opts.starts == 0 {
        return invalid("need at least one start");
    }
    let n = k.order();
    let dim = k.dim();
    let kernels: Vec<SymTensor> = (0..k.len()).map(|i| k.kernel(i)).collect();
    let cons = Constraints {
        terms: kernels.iter().map(|f| f.terms().map(|(idx, c)| (idx.clone(), c)).collect()).collect(),
        target: target.to_vec(),
    };
    let finish = |h: Vec<f64>, starts_r: Vec<f64>, starts_v: Vec<f64>| {
        let residual = max_abs(&cons.values(&h));
        let value = 0.5 * h.iter().map(|v| v * v).sum::<f64>();
        let status = if residual <= opts.tolerance { RateStatus::Feasible } else { RateStatus::Infeasible };
        RateResult {
            target: target.to_vec(),
            h_star: h,
            value,
            residual,
            status,
            start_residuals: starts_r,
            start_values: starts_v,
        }
    };
    if target.iter().all(|x| *x == 0.0) {
        return Ok(finish(vec![0.0; dim], vec![0.0], vec![0.0]));
    }
    if n == 1 && opts.method == RateMethod::Auto {
        let a = DMatrix::from_fn(k.len(), dim, |t, i| kernels[t].coeff(&[i]));
        let svd = a.clone().svd(true, true);
        let pinv = svd.pseudo_inverse(1e-12).map_err(|e| Error::Invalid(e.to_string()))?;
        let h = pinv * DVector::from_column_slice(target);
        let h: Vec<f64> = h.iter().copied().collect();
        let r = max_abs(&cons.values(&h));
        let v = 0.5 * h.iter().map(|x| x * x).sum::<f64>();
        return Ok(finish(h, vec![r], vec![v]));
    }
    if n == 0 {
        return invalid("rate function needs a positive chaos order");
    }
    let scale = max_abs(target).powf(1.0 / n as f64).max(1e-3) / (dim as f64).sqrt();
    let runs = mc::par_map(opts.starts, |s| {
        let h0: Vec<f64> = mc::normals(opts.seed, s as u64, dim).into_iter().map(|x| scale * x).collect();
        let h = augmented_lagrangian(&cons, dim, h0, opts);
        let r = max_abs(&cons.values(&h));
        let v = 0.5 * h.iter().map(|x| x * x).sum::<f64>();
        (h, r, v)
    });
    let start_residuals: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let start_values: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let best = runs
        .iter()
        .filter(|r| r.1 <= opts.tolerance)
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .or_else(|| runs.iter().min_by(|a, b| a.1.total_cmp(&b.1)))
        .expect("at least one start");
    Ok(finish(best.0.clone(), start_residuals, start_values))
}

/// Dilation identities for one `ε`.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub eps: f64,
    /// Worst `|‖εⁿX‖_{level 1} − εⁿ‖X‖_{level 1}| / εⁿ‖X‖` over samples.
    pub level1_rel_err: f64,
    /// Worst `|‖δ𝕏‖ − ε²ⁿ‖𝕏‖| / ε²ⁿ‖𝕏‖`.
    pub level2_rel_err: f64,
    pub homogeneous_rel_err: f64,
    /// Mean of `‖X(εξ)‖ / (εⁿ‖X(ξ)‖)`; differs from one through lower chaos terms.
    pub exact_composition_ratio: MeanSe,
    pub mean_n: MeanSe,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub kernel: String,
    pub order: usize,
    pub p: f64,
    pub alpha: f64,
    pub rows: Vec<ScalingRow>,
    /// `N_α(εⁿX)` nonincreasing as `ε` decreases, in every sample.
    pub monotone_n: bool,
    pub max_rel_err: f64,
}

/// Checks `εⁿ`-homogeneity of the homogeneous norm under the dilation
/// `X ↦ εⁿX` and compares with the exact composition `ξ ↦ εξ`.
#[allow(clippy::too_many_arguments)]
pub fn scaling_check(
    k: &KernelPath,
    components: usize,
    eps_list: &[f64],
    p: f64,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if eps_list.iter().any(|e| *e <= 0.0) || eps_list.is_empty() {
        return invalid("dilation factors must be positive");
    }
    let n = k.order() as i32;
    let mut order: Vec<usize> = (0..eps_list.len()).collect();
    order.sort_by(|&a, &b| eps_list[b].total_cmp(&eps_list[a]));
    // Per dilation: level-1, level-2 and homogeneous errors, exact ratio, greedy count.
    type Cell = (f64, f64, f64, f64, usize);
    let per_sample = mc::par_map(samples, |i| -> Result<Vec<Cell>> {
        let omegas = sample_components(k, components, seed, i as u64);
        let x = lift_process(k, &omegas)?;
        let base = x.norm_table().p_variation(p);
        eps_list
            .iter()
            .map(|&eps| {
                let s = eps.powi(n);
                let dil = x.dilate(s);
                let pv = dil.norm_table().p_variation(p);
                let e1 = (pv.level1 - s * base.level1).abs() / (s * base.homogeneous);
                let e2 = (pv.level2 - s * s * base.level2).abs() / (s * s * base.level2).max(f64::MIN_POSITIVE);
                let eh = (pv.homogeneous - s * base.homogeneous).abs() / (s * base.homogeneous);
                let comp: Vec<_> = omegas.iter().map(|w| w.dilated(eps)).collect();
                let exact = lift_process(k, &comp)?.norm_table().p_variation(p).homogeneous / (s * base.homogeneous);
                let nn = greedy(&dil, alpha, p)?.n;
                Ok((e1.max(0.0), e2, eh, exact, nn))
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (j, &eps) in eps_list.iter().enumerate() {
        let col: Vec<_> = per_sample.iter().map(|r| r[j]).collect();
        rows.push(ScalingRow {
            eps,
            level1_rel_err: col.iter().map(|c| c.0).fold(0.0, f64::max),
            level2_rel_err: col.iter().map(|c| c.1).fold(0.0, f64::max),
            homogeneous_rel_err: col.iter().map(|c| c.2).fold(0.0, f64::max),
            exact_composition_ratio: MeanSe::of(&col.iter().map(|c| c.3).collect::<Vec<_>>()),
            mean_n: MeanSe::of(&col.iter().map(|c| c.4 as f64).collect::<Vec<_>>()),
        });
    }
    let monotone_n = per_sample.iter().all(|r| order.windows(2).all(|w| r[w[1]].4 <= r[w[0]].4));
    let max_rel_err =
        rows.iter().map(|r| r.level1_rel_err.max(r.level2_rel_err).max(r.homogeneous_rel_err)).fold(0.0, f64::max);
    Ok(ScalingReport { kernel: k.label().to_string(), order: k.order(), p, alpha, rows, monotone_n, max_rel_err })
}

/// Canonical lift of `t ↦ t` on `nodes` equal cells of `[0, 1]` (for hand checks).
pub fn identity_path(nodes: usize) -> Result<Level2Path> {
    let t: Vec<f64> = (0..=nodes).map(|i| i as f64 / nodes as f64).collect();
    let v: Vec<Vec<f64>> = t.iter().map(|x| vec![*x]).collect();
    lift_piecewise_linear(&t, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{brownian_kernel, dyadic_grid, linear_kernel};

    #[test]
    fn unit_speed_line_splits_into_quarters() {
        let s = greedy_with(&identity_path(1).unwrap(), 0.25, 1.0, GreedyNorm::Level1).unwrap();
        assert_eq!(s.n, 3);
        for (t, e) in s.taus.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert!((t - e).abs() < 1e-12, "{:?}", s.taus);
        }
        assert!(s.count_bound_holds() && s.accumulation_bound_holds());
    }

    #[test]
    fn small_paths_have_no_greedy_steps() {
        let x = identity_path(4).unwrap().dilate(0.1);
        let s = greedy(&x, 1.0, 2.5).unwrap();
        assert_eq!(s.n, 0);
        assert_eq!(s.taus, vec![1.0]);
    }

    #[test]
    fn brownian_rate_is_one_half() {
        let g = dyadic_grid(3);
        let k = brownian_kernel(8, &g).unwrap();
        let r = rate_function(&k, &g, &RateOptions::default()).unwrap();
        assert_eq!(r.status, RateStatus::Feasible);
        assert!((r.value - 0.5).abs() < 1e-10);
        let h = (1.0f64 / 8.0).sqrt();
        assert!(r.h_star.iter().all(|x| (x - h).abs() < 1e-10));
    }

    #[test]
    fn square_kernel_rate() {
        let g = dyadic_grid(2);
        let k = linear_kernel(&SymTensor::basis(&[0, 0], 3).unwrap(), &g).unwrap();
        let c = 2.0;
        let x: Vec<f64> = g.iter().map(|t| c * t).collect();
        let r = rate_function(&k, &x, &RateOptions { starts: 4, ..Default::default() }).unwrap();
        assert_eq!(r.status, RateStatus::Feasible);
        assert!((r.value - c / 2.0).abs() < 1e-8, "{}", r.value);
    }
}
