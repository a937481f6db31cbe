//! Duhamel series `p^A = sum_{k>=1} p^{<>k}` with
//! `(f <> g)_t(x, y) = int_0^t int f_{t-s}(x, z) g_s(z, y) w(dz) ds`.
//!
//! Three solver paths share the term ledger:
//! * uniform `w = c Leb`: the time convolution collapses by Chapman-Kolmogorov
//!   and is solved in time only, on Gauss-Legendre collocation nodes;
//! * atoms: a Volterra system on the atom positions with product-trapezoid
//!   weights on a geometric time mesh;
//! * bounded 1-d densities: rows `y -> p^{<>k}_t(x, y)` advanced by a
//!   second-order exponential integrator in Fourier space.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{FkError, Result};
use crate::kernels::{density_from_exponent, g_frak, kernel_for_model, KernelGrid, Layout, SpectralOptions, TransitionKernel};
use crate::levy_models::{LevyModel, Point, ScaleFunction};
use crate::measures::{big_f, SignedMeasure};
use crate::quadrature::{gauss_legendre, gl16, gl_panel, graded_to_zero, integrate_with_breaks};

/// Translation-invariant base kernel: the model, a pointwise kernel and its
/// displacement grid at the output times.
#[derive(Clone)]
pub struct BaseKernel {
    pub model: Arc<LevyModel>,
    pub kernel: Arc<dyn TransitionKernel>,
    pub grid: KernelGrid,
}

impl BaseKernel {
    pub fn new(model: LevyModel, times: &[f64], half_width: f64, dx: f64, opts: &SpectralOptions) -> Result<Self> {
        let grid = density_from_exponent(&model, times, half_width, dx, opts)?;
        let kernel = kernel_for_model(&model)?;
        Ok(BaseKernel { model: Arc::new(model), kernel, grid })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolverPath {
    Uniform,
    Atoms,
    Density,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub k_max: usize,
    /// Half width of the reduced box holding `(x, y)`-indexed terms.
    pub out_half_width: f64,
    /// Output spacing as a multiple of the base spacing.
    pub out_stride: usize,
    /// Geometric time mesh density (atom path).
    pub mesh_per_decade: usize,
    pub mesh_decades: f64,
    /// Largest step of the exponential integrator as a fraction of the
    /// final time (density path).
    pub max_step_fraction: f64,
    pub residual_probes: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-6,
            k_max: 40,
            out_half_width: 2.0,
            out_stride: 5,
            mesh_per_decade: 32,
            mesh_decades: 12.0,
            max_step_fraction: 1.0 / 200.0,
            residual_probes: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DuhamelSolution {
    pub path: SolverPath,
    #[serde(skip)]
    pub base: KernelGrid,
    #[serde(skip)]
    pub terms: Vec<KernelGrid>,
    /// `sup |p^{<>k}_t|` over the output grid at the last output time.
    pub sup_norms: Vec<f64>,
    /// `[k][time]` sup-norms.
    pub sup_norms_by_time: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
    pub q: f64,
    /// First term index (1-based) from which all ratios stay below 1.
    pub k0: usize,
    #[serde(skip)]
    pub p_a: KernelGrid,
    pub truncation_bound: f64,
    pub t0: Option<f64>,
    /// `sup |p^A - p - p <> p^A|` on random probes; equals the first
    /// omitted term.
    pub residual: f64,
    pub min_value: f64,
}

impl DuhamelSolution {
    pub fn times(&self) -> &[f64] {
        &self.p_a.times
    }

    /// CSV `k,t,sup_norm,ratio`.
    pub fn write_ledger_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "k,t,sup_norm,ratio")?;
        for (k, row) in self.sup_norms_by_time.iter().enumerate() {
            for (ti, s) in row.iter().enumerate() {
                let ratio = if k > 0 && self.sup_norms_by_time[k - 1][ti] > 0.0 { s / self.sup_norms_by_time[k - 1][ti] } else { f64::NAN };
                writeln!(w, "{},{:e},{s:e},{ratio:e}", k + 1, self.p_a.times[ti])?;
            }
        }
        Ok(())
    }

    /// CSV `x,y,value` of `p^A` at time index `ti`.
    pub fn write_slice_csv<W: Write>(&self, w: &mut W, ti: usize) -> std::io::Result<()> {
        writeln!(w, "x,y,value")?;
        let g = &self.p_a;
        let s = g.slice(ti);
        match g.layout {
            Layout::Displacement => {
                for (i, v) in s.iter().enumerate() {
                    let d = g.point(i);
                    writeln!(w, "0,{:.6},{v:e}", d[0])?;
                }
            }
            Layout::Pairwise => {
                let np = g.points_per_space();
                for i in 0..np {
                    for j in 0..np {
                        writeln!(w, "{:.6},{:.6},{:e}", g.point(i)[0], g.point(j)[0], s[i * np + j])?;
                    }
                }
            }
        }
        Ok(())
    }

    /// `c` with `sup |p^{<>k}_t / g_t| <= c^k` for `k = 2..K`, and the
    /// per-term ratios `sup |p^{<>k}_t / g_t|` at time index `ti`.
    pub fn term_envelope(&self, ti: usize, n: usize, alpha: f64, d: f64) -> (f64, Vec<f64>) {
        let t = self.p_a.times[ti];
        let mut per_k = Vec::new();
        let mut c: f64 = 0.0;
        for (k, term) in self.terms.iter().enumerate() {
            let s = term.slice(ti);
            let np = term.points_per_space();
            let mut sup: f64 = 0.0;
            for (idx, v) in s.iter().enumerate() {
                let (x, y) = match term.layout {
                    Layout::Displacement => ([0.0; 2], term.point(idx)),
                    Layout::Pairwise => (term.point(idx / np), term.point(idx % np)),
                };
                let disp = [y[0] - x[0], y[1] - x[1]];
                sup = sup.max(v.abs() / g_frak(t, &disp, n, alpha, d));
            }
            per_k.push(sup);
            if k >= 1 {
                c = c.max(sup.powf(1.0 / (k + 1) as f64));
            }
        }
        (c, per_k)
    }
}

fn check_tol(opts: &SolveOptions) -> Result<()> {
    if !(opts.tol > 0.0) {
        return Err(FkError::InvalidParameter("tol must be positive".into()));
    }
    if opts.k_max < 1 {
        return Err(FkError::InvalidParameter("k_max must be at least 1".into()));
    }
    Ok(())
}

/// Runs the series until the geometric tail estimate drops below `tol`.
pub fn solve(base: &BaseKernel, w: &SignedMeasure, opts: &SolveOptions) -> Result<DuhamelSolution> {
    check_tol(opts)?;
    let sol = run(base, w, opts, None)?;
    if sol.truncation_bound < opts.tol && sol.residual > 10.0 * opts.tol {
        return Err(FkError::ResidualCheck(format!("residual {:.3e} exceeds 10 tol = {:.1e}", sol.residual, 10.0 * opts.tol)));
    }
    Ok(sol)
}

/// Exactly `k` terms, no truncation rule.
pub fn iterated_kernels(base: &BaseKernel, w: &SignedMeasure, k: usize, opts: &SolveOptions) -> Result<DuhamelSolution> {
    if k < 1 {
        return Err(FkError::InvalidParameter("need at least one term".into()));
    }
    run(base, w, opts, Some(k))
}

fn run(base: &BaseKernel, w: &SignedMeasure, opts: &SolveOptions, fixed: Option<usize>) -> Result<DuhamelSolution> {
    w.validate()?;
    if w.dim != base.dim() {
        return Err(FkError::GridMismatch(format!("measure dimension {} vs kernel dimension {}", w.dim, base.dim())));
    }
    if !base.model.is_translation_invariant() {
        return Err(FkError::UnsupportedModel("the solver needs a translation-invariant base kernel".into()));
    }
    let uniform_only = !w.has_atoms() && w.parts.is_empty();
    if uniform_only {
        return uniform_path(base, w.uniform, opts, fixed);
    }
    if w.has_atoms() {
        if !w.parts.is_empty() || w.uniform != 0.0 {
            return Err(FkError::UnsupportedModel("atoms mixed with a density part".into()));
        }
        return atom_path(base, w, opts, fixed);
    }
    if base.dim() != 1 {
        return Err(FkError::UnsupportedModel("density parts are one-dimensional".into()));
    }
    density_path(base, w, opts, fixed)
}

/// Ledger bookkeeping shared by the paths: ratios, `q`, `k0`, the tail
/// bound and the stopping rule.
struct Ledger {
    sup_by_time: Vec<Vec<f64>>,
}

impl Ledger {
    fn last_sup(&self, k: usize) -> f64 {
        *self.sup_by_time[k].last().unwrap()
    }

    fn ratios(&self) -> Vec<f64> {
        (1..self.sup_by_time.len())
            .map(|k| {
                let a = self.last_sup(k - 1);
                if a > 0.0 { self.last_sup(k) / a } else { 0.0 }
            })
            .collect()
    }

    fn q(&self) -> f64 {
        let r = self.ratios();
        if r.is_empty() {
            return 0.0;
        }
        r[r.len().saturating_sub(3)..].iter().copied().fold(0.0, f64::max)
    }

    fn tail(&self) -> f64 {
        let q = self.q();
        let k = self.sup_by_time.len();
        if k < 2 {
            return f64::INFINITY;
        }
        let last = self.last_sup(k - 1);
        if last == 0.0 {
            return 0.0;
        }
        if q >= 1.0 { f64::INFINITY } else { q * last / (1.0 - q) }
    }

    fn k0(&self) -> usize {
        let r = self.ratios();
        let mut k0 = r.len() + 1;
        for i in (0..r.len()).rev() {
            if r[i] < 1.0 {
                k0 = i + 1;
            } else {
                break;
            }
        }
        k0
    }

    /// Five consecutive growing terms.
    fn growing(&self) -> bool {
        let r = self.ratios();
        r.len() >= 5 && r[r.len() - 5..].iter().all(|&x| x > 1.0)
    }

    fn non_contracting(&self, times: &[f64]) -> FkError {
        let n = self.sup_by_time.len();
        let ok: Vec<f64> = (0..times.len())
            .filter(|&ti| (1..n).all(|k| self.sup_by_time[k - 1][ti] == 0.0 || self.sup_by_time[k][ti] < self.sup_by_time[k - 1][ti]))
            .map(|ti| times[ti])
            .collect();
        match ok.last() {
            Some(t) => FkError::NonContracting(format!("term norms grow at the final time; ratios stay below 1 up to t = {t}")),
            None => FkError::NonContracting("term norms grow at every output time".into()),
        }
    }
}

fn finish(
    path: SolverPath,
    base: &BaseKernel,
    terms: Vec<KernelGrid>,
    ledger: Ledger,
    residual: f64,
) -> DuhamelSolution {
    let mut p_a = terms[0].clone();
    for t in &terms[1..] {
        for (a, b) in p_a.values.iter_mut().zip(&t.values) {
            *a += b;
        }
    }
    let min_value = p_a.values.iter().copied().fold(f64::INFINITY, f64::min);
    let sup_norms = (0..ledger.sup_by_time.len()).map(|k| ledger.last_sup(k)).collect();
    DuhamelSolution {
        path,
        base: base.grid.clone(),
        sup_norms,
        ratios: ledger.ratios(),
        q: ledger.q(),
        k0: ledger.k0(),
        truncation_bound: ledger.tail(),
        sup_norms_by_time: ledger.sup_by_time,
        terms,
        p_a,
        t0: None,
        residual,
        min_value,
    }
}

fn slice_sups(g: &KernelGrid) -> Vec<f64> {
    (0..g.times.len()).map(|ti| g.slice(ti).iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
}

/// Stop once the tail estimate is below `tol`; error on sustained growth.
fn keep_going(ledger: &Ledger, opts: &SolveOptions, fixed: Option<usize>, times: &[f64]) -> Result<bool> {
    let k = ledger.sup_by_time.len();
    if let Some(kf) = fixed {
        return Ok(k < kf);
    }
    if ledger.growing() {
        return Err(ledger.non_contracting(times));
    }
    if k >= 2 && ledger.tail() < opts.tol {
        return Ok(false);
    }
    Ok(k < opts.k_max)
}

// ---------------------------------------------------------------------------
// Uniform measure.

/// Collocation on Gauss-Legendre nodes of `[0, T]` for `v -> c int_0^t v`.
struct Collocation {
    nodes: Vec<f64>,
    bary: Vec<f64>,
    integ: Vec<Vec<f64>>,
}

impl Collocation {
    fn new(t_max: f64, n: usize) -> Self {
        let (x, _) = gauss_legendre(n);
        let nodes: Vec<f64> = x.iter().map(|u| 0.5 * t_max * (u + 1.0)).collect();
        let bary: Vec<f64> = (0..n)
            .map(|j| 1.0 / (0..n).filter(|&k| k != j).map(|k| nodes[j] - nodes[k]).product::<f64>())
            .collect();
        let (gx, gw) = gauss_legendre(n);
        let mut c = Collocation { nodes, bary, integ: vec![] };
        let mut integ = vec![vec![0.0; n]; n];
        for i in 0..n {
            let ti = c.nodes[i];
            for (u, wq) in gx.iter().zip(&gw) {
                let s = 0.5 * ti * (u + 1.0);
                let l = c.basis(s);
                for j in 0..n {
                    integ[i][j] += 0.5 * ti * wq * l[j];
                }
            }
        }
        c.integ = integ;
        c
    }

    fn basis(&self, s: f64) -> Vec<f64> {
        let n = self.nodes.len();
        if let Some(j) = self.nodes.iter().position(|&x| x == s) {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            return e;
        }
        let terms: Vec<f64> = (0..n).map(|j| self.bary[j] / (s - self.nodes[j])).collect();
        let den: f64 = terms.iter().sum();
        terms.into_iter().map(|v| v / den).collect()
    }

    fn eval(&self, v: &[f64], s: f64) -> f64 {
        self.basis(s).iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

fn uniform_path(base: &BaseKernel, c: f64, opts: &SolveOptions, fixed: Option<usize>) -> Result<DuhamelSolution> {
    let times = base.grid.times.clone();
    let t_max = *times.last().unwrap();
    let k_cap = fixed.unwrap_or(opts.k_max);
    let col = Collocation::new(t_max, (k_cap + 2).clamp(8, 64));
    let n = col.nodes.len();
    let base_sup = slice_sups(&base.grid);
    let mut v = vec![1.0; n];
    let mut terms = vec![base.grid.clone()];
    let mut ledger = Ledger { sup_by_time: vec![base_sup.clone()] };
    let scale_at = |v: &[f64]| -> Vec<f64> { times.iter().map(|&t| col.eval(v, t)).collect() };
    let step = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| c * col.integ[i].iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).collect() };
    while keep_going(&ledger, opts, fixed, &times)? {
        if terms.len() >= n - 1 {
            tracing::warn!("collocation degree reached; stopping the uniform series");
            break;
        }
        v = step(&v);
        let sc = scale_at(&v);
        let mut g = base.grid.clone();
        for (ti, s) in sc.iter().enumerate() {
            for x in g.slice_mut(ti) {
                *x *= s;
            }
        }
        ledger.sup_by_time.push(sc.iter().zip(&base_sup).map(|(a, b)| a.abs() * b).collect());
        terms.push(g);
    }
    let next = scale_at(&step(&v));
    let residual = next.iter().zip(&base_sup).map(|(a, b)| a.abs() * b).fold(0.0, f64::max);
    Ok(finish(SolverPath::Uniform, base, terms, ledger, residual))
}

// ---------------------------------------------------------------------------
// Atoms.

/// Geometric mesh `0 = s_0 < s_1 < ... < s_N = T` containing `extra`.
pub fn geometric_mesh(t_max: f64, per_decade: usize, decades: f64, extra: &[f64]) -> Vec<f64> {
    let n = (decades * per_decade as f64).round() as usize;
    let mut s: Vec<f64> = (0..=n).map(|i| t_max * 10f64.powf(-decades + i as f64 / per_decade as f64)).collect();
    s.extend(extra.iter().copied().filter(|&e| e > 0.0 && e <= t_max));
    s.push(0.0);
    s.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(s.len());
    for v in s {
        match out.last() {
            Some(&p) if (v - p).abs() <= 1e-9 * v.abs().max(1e-300) => {
                // Prefer the requested time over the geometric node.
                if extra.contains(&v) {
                    *out.last_mut().unwrap() = v;
                }
            }
            _ => out.push(v),
        }
    }
    out
}

/// Product-trapezoid weights of `a(tau) = kernel(tau, d)` at target node
/// `n`: `int_{s_1}^{s_n} a(s_n - s) b(s) ds ~ sum_m w[m] b_m`, plus the mean
/// of `a(s_n - .)` over the first panel `[0, s_1]`.
struct ProductWeights {
    w: Vec<f64>,
    first_mean: f64,
}

fn product_weights(kernel: &dyn TransitionKernel, d: &Point, mesh: &[f64], n: usize) -> Result<ProductWeights> {
    let a = |tau: f64| kernel.density(tau, d);
    let rule = gl16();
    let sn = mesh[n];
    let singular = d[0] == 0.0 && d[1] == 0.0;
    let mut w = vec![0.0; n + 1];
    let last_moments = |h: f64| -> Result<(f64, f64)> {
        if singular {
            let m0 = graded_to_zero(a, h, 40);
            if m0.divergent {
                return Err(FkError::Divergent(format!("int_0 p_tau(0) d tau diverges (tail exponent {:.3})", m0.tail_exponent)));
            }
            let m1 = graded_to_zero(|tau| tau * a(tau), h, 40);
            Ok((m0.value, m1.value))
        } else {
            let m0 = integrate_with_breaks(a, 0.0, h, &[], 1e-300, 1e-10).value;
            let m1 = integrate_with_breaks(|tau| tau * a(tau), 0.0, h, &[], 1e-300, 1e-10).value;
            Ok((m0, m1))
        }
    };
    let first_mean = if n == 1 {
        last_moments(mesh[1])?.0 / mesh[1]
    } else {
        let mut f = |s: f64| a(sn - s);
        gl_panel(&mut f, 0.0, mesh[1], rule) / mesh[1]
    };
    for p in 1..n {
        let (lo, hi) = (mesh[p], mesh[p + 1]);
        let h = hi - lo;
        if p + 1 == n {
            let (m0, m1) = last_moments(h)?;
            w[p] += m1 / h;
            w[p + 1] += m0 - m1 / h;
        } else {
            let mut f0 = |s: f64| a(sn - s) * (hi - s) / h;
            let mut f1 = |s: f64| a(sn - s) * (s - lo) / h;
            w[p] += gl_panel(&mut f0, lo, hi, rule);
            w[p + 1] += gl_panel(&mut f1, lo, hi, rule);
        }
    }
    Ok(ProductWeights { w, first_mean })
}

/// `int_0^{s_1} b` from the power law through `b_1, b_2`.
fn first_panel_mass(b1: f64, b2: f64, s1: f64, s2: f64) -> f64 {
    let beta = if b1 != 0.0 && b2 != 0.0 && b1.signum() == b2.signum() {
        ((b2 / b1).ln() / (s2 / s1).ln()).clamp(-0.99, 10.0)
    } else {
        1.0
    };
    b1 * s1 / (1.0 + beta)
}

fn apply_weights(pw: &ProductWeights, b: &dyn Fn(usize) -> f64, mesh: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for m in 1..=n {
        if pw.w[m] != 0.0 {
            acc += pw.w[m] * b(m);
        }
    }
    let b2 = if mesh.len() > 2 { b(2) } else { b(1) };
    acc + pw.first_mean * first_panel_mass(b(1), b2, mesh[1], mesh[2.min(mesh.len() - 1)])
}

fn out_grid(base: &BaseKernel, opts: &SolveOptions, layout: Layout) -> Result<KernelGrid> {
    let dx = base.grid.dx * opts.out_stride.max(1) as f64;
    let half = (opts.out_half_width / dx).floor().max(1.0) * dx;
    if half > base.grid.half_width + 1e-12 {
        return Err(FkError::GridMismatch("output box exceeds the base box".into()));
    }
    KernelGrid::new(base.dim(), layout, base.grid.times.clone(), half, dx, base.grid.model_hash.clone())
}

fn atom_path(base: &BaseKernel, w: &SignedMeasure, opts: &SolveOptions, fixed: Option<usize>) -> Result<DuhamelSolution> {
    let kernel = &*base.kernel;
    let times = base.grid.times.clone();
    let t_max = *times.last().unwrap();
    let mesh = geometric_mesh(t_max, opts.mesh_per_decade, opts.mesh_decades, &times);
    let nm = mesh.len() - 1;
    let out_idx: Vec<usize> = times.iter().map(|t| mesh.iter().position(|s| s == t).unwrap()).collect();
    let atoms: Vec<(Point, f64)> = w.atoms.iter().copied().filter(|a| a.1 != 0.0).collect();
    let na = atoms.len();
    let template = out_grid(base, opts, Layout::Pairwise)?;
    let np = template.points_per_space();
    let pts: Vec<Point> = (0..np).map(|i| template.point(i)).collect();
    let diff = |to: &Point, from: &Point| [to[0] - from[0], to[1] - from[1]];

    // Atom-to-atom weights for every target node.
    let aa: Vec<Vec<Vec<ProductWeights>>> = (0..na)
        .map(|i| {
            (0..na)
                .map(|j| (1..=nm).map(|n| product_weights(kernel, &diff(&atoms[j].0, &atoms[i].0), &mesh, n)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    // Output-point-to-atom weights at the output nodes.
    let xa: Vec<Vec<Vec<ProductWeights>>> = pts
        .par_iter()
        .map(|x| {
            (0..na)
                .map(|j| out_idx.iter().map(|&n| product_weights(kernel, &diff(&atoms[j].0, x), &mesh, n)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // u[j][n][y] = p^{<>k}_{s_n}(z_j, y).
    let mut u: Vec<Vec<Vec<f64>>> = (0..na)
        .map(|j| (0..=nm).map(|n| if n == 0 { vec![0.0; np] } else { pts.iter().map(|y| kernel.density(mesh[n], &diff(y, &atoms[j].0))).collect() }).collect())
        .collect();

    let mut first = template.clone();
    for (ti, &t) in times.iter().enumerate() {
        let s = first.slice_mut(ti);
        for i in 0..np {
            for j in 0..np {
                s[i * np + j] = kernel.density(t, &diff(&pts[j], &pts[i]));
            }
        }
    }
    let mut ledger = Ledger { sup_by_time: vec![slice_sups(&first)] };
    let mut terms = vec![first];

    let next_u = |u: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        (0..na)
            .map(|i| {
                (0..=nm)
                    .map(|n| {
                        if n == 0 {
                            return vec![0.0; np];
                        }
                        (0..np)
                            .map(|y| {
                                (0..na)
                                    .map(|j| atoms[j].1 * apply_weights(&aa[i][j][n - 1], &|m| u[j][m][y], &mesh, n))
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let output = |u: &Vec<Vec<Vec<f64>>>| -> KernelGrid {
        let mut g = template.clone();
        for (ti, &n) in out_idx.iter().enumerate() {
            let vals: Vec<f64> = (0..np * np)
                .into_par_iter()
                .map(|idx| {
                    let (xi, y) = (idx / np, idx % np);
                    (0..na).map(|j| atoms[j].1 * apply_weights(&xa[xi][j][ti], &|m| u[j][m][y], &mesh, n)).sum()
                })
                .collect();
            g.slice_mut(ti).copy_from_slice(&vals);
        }
        g
    };

    while keep_going(&ledger, opts, fixed, &times)? {
        let g = output(&u);
        ledger.sup_by_time.push(slice_sups(&g));
        terms.push(g);
        u = next_u(&u);
        if u.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(FkError::Divergent("non-finite iterated kernel".into()));
        }
    }
    let next = output(&u);
    let residual = probe_sup(&next, opts);
    Ok(finish(SolverPath::Atoms, base, terms, ledger, residual))
}

/// `sup |g|` over random probe points at the last time.
fn probe_sup(g: &KernelGrid, opts: &SolveOptions) -> f64 {
    let s = g.slice(g.times.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.residual_probes).map(|_| s[rng.gen_range(0..s.len())].abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Bounded densities (1-d).

/// One row `y -> p^{<>k}_t(x, y)` per term on the fine grid.
#[derive(Debug, Clone)]
pub struct RowSolution {
    pub x: f64,
    /// Fine grid nodes in `[-L, L]`.
    pub nodes: Vec<f64>,
    pub times: Vec<f64>,
    /// `[k][time][node]`.
    pub terms: Vec<Vec<Vec<f64>>>,
    /// First omitted term, `[time][node]`.
    pub next: Vec<Vec<f64>>,
}

impl RowSolution {
    pub fn p_a(&self, ti: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes.len()];
        for t in &self.terms {
            for (o, v) in out.iter_mut().zip(&t[ti]) {
                *o += v;
            }
        }
        out
    }

    pub fn spacing(&self) -> f64 {
        self.nodes[1] - self.nodes[0]
    }
}

fn phi12(z: Complex64) -> (Complex64, Complex64) {
    if z.norm() < 1e-3 {
        let z2 = z * z;
        (1.0 - z / 2.0 + z2 / 6.0 - z2 * z / 24.0, 0.5 - z / 6.0 + z2 / 24.0 - z2 * z / 120.0)
    } else {
        let e = (-z).exp();
        ((1.0 - e) / z, (z - 1.0 + e) / (z * z))
    }
}

/// Shared FFT setup of the density path.
pub struct DensityRows {
    dx_f: f64,
    half_width: f64,
    n_f: usize,
    m: usize,
    psi: Vec<Complex64>,
    xi: Vec<f64>,
    v: Vec<f64>,
    mesh: Vec<f64>,
    out_idx: Vec<usize>,
    k_terms: usize,
}

impl DensityRows {
    /// Chooses a refined spacing, the start time `s_1` below which the
    /// potential is frozen at `V(x)`, and the step mesh.
    pub fn new(base: &BaseKernel, w: &SignedMeasure, k_terms: usize, opts: &SolveOptions) -> Result<Self> {
        let times = &base.grid.times;
        let t_min = times[0];
        let t_max = *times.last().unwrap();
        let model = &base.model;
        let mut refine = 2usize;
        let s1 = loop {
            let dx_f = base.grid.dx / refine as f64;
            let edge = model.psi(&[PI / dx_f, 0.0])?.re;
            let s1 = 23.0 / edge;
            if s1 <= 0.1 * t_min || refine >= 16 {
                break s1.min(0.1 * t_min);
            }
            refine *= 2;
        };
        let dx_f = base.grid.dx / refine as f64;
        let half_width = base.grid.half_width;
        let n_f = (2.0 * half_width / dx_f).round() as usize + 1;
        let m = (2 * (n_f - 1)).next_power_of_two();
        let period = m as f64 * dx_f;
        let xi: Vec<f64> = (0..m).map(|k| 2.0 * PI * (if k <= m / 2 { k as f64 } else { k as f64 - m as f64 }) / period).collect();
        let psi: Vec<Complex64> = xi.iter().map(|&x| model.psi(&[-x, 0.0])).collect::<Result<_>>()?;
        let v: Vec<f64> = (0..m).map(|j| if j < n_f { w.density_value(&[-half_width + j as f64 * dx_f, 0.0]) } else { 0.0 }).collect();
        let h_max = t_max * opts.max_step_fraction;
        let mut mesh = vec![s1];
        while *mesh.last().unwrap() < t_max * (1.0 - 1e-12) {
            let s = *mesh.last().unwrap();
            let h = (0.2 * s).min(h_max);
            mesh.push((s + h).min(t_max));
        }
        mesh.extend(times.iter().copied());
        mesh.sort_by(f64::total_cmp);
        mesh.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
        let out_idx = times.iter().map(|t| mesh.iter().position(|s| (s - t).abs() <= 1e-12 * t).unwrap()).collect();
        Ok(DensityRows { dx_f, half_width, n_f, m, psi, xi, v, mesh, out_idx, k_terms })
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_f).map(|j| -self.half_width + j as f64 * self.dx_f).collect()
    }

    /// Terms `1..=k_terms` and the next one for the row through `x`.
    pub fn row(&self, x: f64) -> RowSolution {
        let m = self.m;
        let kt = self.k_terms + 1;
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let xa = x + self.half_width;
        let r1 = |s: f64| -> Vec<Complex64> {
            (0..m).map(|k| (-s * self.psi[k] - Complex64::new(0.0, self.xi[k] * xa)).exp() / self.dx_f).collect()
        };
        let to_phys = |r: &[Complex64]| -> Vec<f64> {
            let mut b = r.to_vec();
            inv.process(&mut b);
            b.iter().map(|c| c.re / m as f64).collect()
        };
        let nonlinear = |phys: &[f64]| -> Vec<Complex64> {
            let mut b: Vec<Complex64> = phys.iter().zip(&self.v).map(|(u, v)| Complex64::new(u * v, 0.0)).collect();
            fwd.process(&mut b);
            b
        };
        let vx = {
            let j = ((x + self.half_width) / self.dx_f).round() as usize;
            self.v[j.min(self.n_f - 1)]
        };
        let s1 = self.mesh[0];
        let base1 = r1(s1);
        // Frozen potential on [0, s_1]: p^{<>k}_{s_1} = (V(x) s_1)^{k-1}/(k-1)! p_{s_1}.
        let mut r: Vec<Vec<Complex64>> = (0..kt)
            .map(|k| {
                let f = (0..k).fold(1.0, |acc, i| acc * vx * s1 / (i + 1) as f64);
                base1.iter().map(|c| c * f).collect()
            })
            .collect();
        let mut phys: Vec<Vec<f64>> = r.iter().map(|x| to_phys(x)).collect();
        let mut nl: Vec<Vec<Complex64>> = phys.iter().map(|p| nonlinear(p)).collect();
        let nt = self.out_idx.len();
        let mut terms = vec![vec![vec![0.0; self.n_f]; nt]; self.k_terms];
        let mut next = vec![vec![0.0; self.n_f]; nt];
        let record = |n: usize, phys: &Vec<Vec<f64>>, terms: &mut Vec<Vec<Vec<f64>>>, next: &mut Vec<Vec<f64>>| {
            if let Some(ti) = self.out_idx.iter().position(|&o| o == n) {
                for k in 0..kt {
                    let dst = if k < self.k_terms { &mut terms[k][ti] } else { &mut next[ti] };
                    dst.copy_from_slice(&phys[k][..self.n_f]);
                }
            }
        };
        record(0, &phys, &mut terms, &mut next);
        let mut cache: Option<(f64, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>)> = None;
        for n in 0..self.mesh.len() - 1 {
            let h = self.mesh[n + 1] - self.mesh[n];
            if cache.as_ref().map(|c| (c.0 - h).abs() > 1e-15 * h).unwrap_or(true) {
                let mut e = Vec::with_capacity(m);
                let mut wa = Vec::with_capacity(m);
                let mut wb = Vec::with_capacity(m);
                for k in 0..m {
                    let z = self.psi[k] * h;
                    let (p1, p2) = phi12(z);
                    e.push((-z).exp());
                    wa.push((p1 - p2) * h);
                    wb.push(p2 * h);
                }
                cache = Some((h, e, wa, wb));
            }
            let (_, e, wa, wb) = cache.as_ref().unwrap();
            let mut new_r = vec![r1(self.mesh[n + 1])];
            let mut new_phys = vec![to_phys(&new_r[0])];
            let mut new_nl = vec![nonlinear(&new_phys[0])];
            for k in 1..kt {
                let nr: Vec<Complex64> = (0..m).map(|j| e[j] * r[k][j] + wa[j] * nl[k - 1][j] + wb[j] * new_nl[k - 1][j]).collect();
                let p = to_phys(&nr);
                new_nl.push(nonlinear(&p));
                new_phys.push(p);
                new_r.push(nr);
            }
            r = new_r;
            phys = new_phys;
            nl = new_nl;
            record(n + 1, &phys, &mut terms, &mut next);
        }
        RowSolution { x, nodes: self.nodes(), times: self.out_idx.iter().map(|&i| self.mesh[i]).collect(), terms, next }
    }
}

/// Number of terms making `(|V|_inf T)^{k-1}/(k-1)!` negligible against `tol`.
fn density_terms(w: &SignedMeasure, t_max: f64, half_width: f64, opts: &SolveOptions, fixed: Option<usize>) -> usize {
    if let Some(k) = fixed {
        return k;
    }
    let n = 4000;
    let vmax = (0..=n).map(|i| w.density_value(&[-half_width + 2.0 * half_width * i as f64 / n as f64, 0.0]).abs()).fold(0.0, f64::max);
    let a = vmax * t_max;
    let mut term = 1.0;
    let mut k = 1;
    while k < opts.k_max && term > 1e-3 * opts.tol {
        term *= a / k as f64;
        k += 1;
    }
    k.max(2)
}

fn density_path(base: &BaseKernel, w: &SignedMeasure, opts: &SolveOptions, fixed: Option<usize>) -> Result<DuhamelSolution> {
    let times = base.grid.times.clone();
    let t_max = *times.last().unwrap();
    let k_terms = density_terms(w, t_max, base.grid.half_width, opts, fixed);
    let rows = DensityRows::new(base, w, k_terms, opts)?;
    let template = out_grid(base, opts, Layout::Pairwise)?;
    let np = template.points_per_space();
    let pts: Vec<f64> = (0..np).map(|i| template.point(i)[0]).collect();
    let stride = ((template.dx / rows.dx_f).round() as usize).max(1);
    let offset = ((template.half_width - rows.half_width).abs() / rows.dx_f).round() as usize;
    let solved: Vec<RowSolution> = pts.par_iter().map(|&x| rows.row(x)).collect();
    let mut terms: Vec<KernelGrid> = (0..k_terms).map(|_| template.clone()).collect();
    let mut next = template.clone();
    for (xi, row) in solved.iter().enumerate() {
        for ti in 0..times.len() {
            for yj in 0..np {
                let f = offset + yj * stride;
                for k in 0..k_terms {
                    terms[k].slice_mut(ti)[xi * np + yj] = row.terms[k][ti][f];
                }
                next.slice_mut(ti)[xi * np + yj] = row.next[ti][f];
            }
        }
    }
    let ledger = Ledger { sup_by_time: terms.iter().map(slice_sups).collect() };
    if fixed.is_none() && ledger.growing() {
        return Err(ledger.non_contracting(&times));
    }
    let residual = probe_sup(&next, opts);
    Ok(finish(SolverPath::Density, base, terms, ledger, residual))
}

/// Row `y -> p^{<>k}_t(x, y)` of a bounded one-dimensional density measure
/// on the refined grid, with the term count picked as in [`solve`].
pub fn density_row(base: &BaseKernel, w: &SignedMeasure, x: f64, opts: &SolveOptions) -> Result<RowSolution> {
    w.validate()?;
    if w.has_atoms() || base.dim() != 1 {
        return Err(FkError::UnsupportedModel("density rows need a one-dimensional measure without atoms".into()));
    }
    let t_max = *base.grid.times.last().unwrap();
    let k = density_terms(w, t_max, base.grid.half_width, opts, None);
    Ok(DensityRows::new(base, w, k, opts)?.row(x))
}

// ---------------------------------------------------------------------------
// Dense-mesh oracle for a single point mass.

/// `p^A_t(x, y)` for `w = q delta_{z0}` from the scalar Volterra equation
/// `u(s) = p_s(y - z0) + q int_0^s p_{s-r}(0) u(r) dr`, `u(s) = p^A_s(z0, y)`,
/// and `p^A_t(x, y) = p_t(y - x) + q int_0^t p_{t-r}(z0 - x) u(r) dr`.
/// Uniform mesh with `steps` panels; `u` is piecewise linear and the kernel
/// moments on each lag panel are integrated separately, so the weak
/// singularity of `p_tau(0)` is handled exactly up to quadrature.
pub fn point_mass_oracle(kernel: &dyn TransitionKernel, z0: &Point, q: f64, x: &Point, y: &Point, t: f64, steps: usize) -> Result<f64> {
    if steps < 2 || !(t > 0.0) {
        return Err(FkError::InvalidParameter("need t > 0 and at least two steps".into()));
    }
    let h = t / steps as f64;
    let moments = |d: Point| -> Result<Vec<(f64, f64)>> {
        let singular = d[0] == 0.0 && d[1] == 0.0;
        let rule = gl16();
        (0..steps)
            .map(|j| {
                let (lo, hi) = (j as f64 * h, (j + 1) as f64 * h);
                if j == 0 && singular {
                    let m0 = graded_to_zero(|tau| kernel.density(tau, &d), h, 60);
                    if m0.divergent {
                        return Err(FkError::Divergent("int_0 p_tau(0) d tau diverges".into()));
                    }
                    let m1 = graded_to_zero(|tau| tau * kernel.density(tau, &d), h, 60);
                    return Ok((m0.value, m1.value));
                }
                let m0 = if j == 0 {
                    integrate_with_breaks(|tau| kernel.density(tau, &d), 0.0, h, &[], 1e-300, 1e-12).value
                } else {
                    gl_panel(&mut |tau| kernel.density(tau, &d), lo, hi, rule)
                };
                let m1 = if j == 0 {
                    integrate_with_breaks(|tau| tau * kernel.density(tau, &d), 0.0, h, &[], 1e-300, 1e-12).value
                } else {
                    gl_panel(&mut |tau| tau * kernel.density(tau, &d), lo, hi, rule)
                };
                Ok((m0, m1))
            })
            .collect()
    };
    // Weights of u(s_n - tau) on lag panel j: (at tau = j h, at tau = (j+1) h).
    let weights = |m: &[(f64, f64)]| -> Vec<(f64, f64)> {
        m.iter().enumerate().map(|(j, &(m0, m1))| ((j + 1) as f64 * m0 - m1 / h, m1 / h - j as f64 * m0)).collect()
    };
    let w0 = weights(&moments([0.0; 2])?);
    let wx = weights(&moments([z0[0] - x[0], z0[1] - x[1]])?);
    let dy = [y[0] - z0[0], y[1] - z0[1]];
    if dy == [0.0; 2] {
        return Err(FkError::InvalidParameter("y must differ from the atom".into()));
    }
    let mut u = vec![0.0; steps + 1];
    for n in 1..=steps {
        // u(s_n) = p_{s_n}(dy) + q sum_j [w_j^a u(s_{n-j}) + w_j^b u(s_{n-j-1})].
        let mut acc = kernel.density(n as f64 * h, &dy);
        for j in 0..n {
            let (wa, wb) = w0[j];
            if j > 0 {
                acc += q * wa * u[n - j];
            }
            acc += q * wb * u[n - j - 1];
        }
        u[n] = acc / (1.0 - q * w0[0].0);
    }
    let mut conv = 0.0;
    for j in 0..steps {
        let (wa, wb) = wx[j];
        conv += wa * u[steps - j] + wb * u[steps - j - 1];
    }
    let d = [y[0] - x[0], y[1] - x[1]];
    Ok(kernel.density(t, &d) + q * conv)
}

// ---------------------------------------------------------------------------
// Grid-level convolution.

/// `s -> value` from a grid, with power-law extrapolation in time below the
/// first slice.
fn grid_value(g: &KernelGrid, s: f64, x: &Point, y: &Point) -> f64 {
    if let Some(v) = g.value(s, x, y) {
        return v;
    }
    let (t1, t2) = (g.times[0], g.times[1.min(g.times.len() - 1)]);
    let v1 = g.value(t1, x, y).unwrap_or(0.0);
    let v2 = g.value(t2, x, y).unwrap_or(0.0);
    if v1 == 0.0 || t2 == t1 {
        return 0.0;
    }
    if v2 == 0.0 || v1.signum() != v2.signum() {
        return v1;
    }
    let beta = ((v2 / v1).ln() / (t2 / t1).ln()).max(-0.99);
    v1 * (s / t1).powf(beta)
}

/// Midpoint nodes graded like `u^3` toward both ends of `[0, t]`.
fn graded_midpoints(t: f64, per_half: usize) -> Vec<(f64, f64)> {
    let g = 3.0;
    let mut out = Vec::with_capacity(2 * per_half);
    for j in 0..per_half {
        let (a, b) = (j as f64 / per_half as f64, (j + 1) as f64 / per_half as f64);
        let u = 0.5 * (a + b);
        let s = 0.5 * t * u.powf(g);
        let ds = 0.5 * t * g * u.powf(g - 1.0) / per_half as f64;
        out.push((s, ds));
        out.push((t - s, ds));
    }
    out
}

/// One slice of `(f <> g)_t` on the nodes of `f`. Displacement inputs with
/// a uniform measure give a displacement slice; otherwise the result is
/// `(x, y)`-indexed.
pub fn diamond(f: &KernelGrid, g: &KernelGrid, w: &SignedMeasure, t: f64) -> Result<KernelGrid> {
    if f.dim != g.dim || f.dim != w.dim || (f.dx - g.dx).abs() > 1e-12 || (f.half_width - g.half_width).abs() > 1e-12 {
        return Err(FkError::GridMismatch("f, g and w must share dimension and spatial grid".into()));
    }
    for h in [f, g] {
        if *h.times.last().unwrap() < t * (1.0 - 1e-12) || h.times[0] > 1e-2 * t {
            return Err(FkError::GridMismatch(format!("grid times must cover (0.01 t, t] for t = {t}")));
        }
    }
    let nodes = graded_midpoints(t, 128);
    let disp = f.layout == Layout::Displacement && g.layout == Layout::Displacement;
    let uniform_only = !w.has_atoms() && w.parts.is_empty();
    let np = f.points_per_space();
    let pts: Vec<Point> = (0..np).map(|i| f.point(i)).collect();
    let origin = [0.0; 2];
    if uniform_only && disp {
        let mut out = KernelGrid::new(f.dim, Layout::Displacement, vec![t], f.half_width, f.dx, f.model_hash.clone())?;
        if w.uniform == 0.0 {
            return Ok(out);
        }
        if f.dim != 1 {
            return Err(FkError::UnsupportedModel("grid diamond with a uniform measure is one-dimensional".into()));
        }
        let n = np;
        let m = (2 * n).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let half = (n - 1) / 2;
        let mut acc = vec![0.0; n];
        let t_lo = f.times[0].max(g.times[0]);
        for &(s, ds) in &nodes {
            let fa: Vec<f64> = pts.iter().map(|d| grid_value(f, t - s, &origin, d)).collect();
            if s < t_lo || t - s < t_lo {
                // Narrow factor: the convolution reduces to the other factor
                // times the narrow one's mass.
                let (wide, narrow_t, narrow) = if s < t_lo { (fa.clone(), t_lo, g) } else { (pts.iter().map(|d| grid_value(g, s, &origin, d)).collect(), t_lo, f) };
                let ti = narrow.times.partition_point(|&x| x < narrow_t).min(narrow.times.len() - 1);
                let mass = narrow.slice_mass(ti, 0);
                for (a, v) in acc.iter_mut().zip(&wide) {
                    *a += w.uniform * ds * v * mass;
                }
                continue;
            }
            let ga: Vec<f64> = pts.iter().map(|d| grid_value(g, s, &origin, d)).collect();
            let mut bf: Vec<Complex64> = (0..m).map(|i| Complex64::new(if i < n { fa[i] } else { 0.0 }, 0.0)).collect();
            let mut bg: Vec<Complex64> = (0..m).map(|i| Complex64::new(if i < n { ga[i] } else { 0.0 }, 0.0)).collect();
            fwd.process(&mut bf);
            fwd.process(&mut bg);
            let mut prod: Vec<Complex64> = bf.iter().zip(&bg).map(|(a, b)| a * b).collect();
            inv.process(&mut prod);
            for (i, a) in acc.iter_mut().enumerate() {
                // Linear convolution index of displacement node i.
                let c = prod[i + half].re / m as f64;
                *a += w.uniform * ds * c * f.dx;
            }
        }
        out.slice_mut(0).copy_from_slice(&acc);
        return Ok(out);
    }
    if w.uniform != 0.0 {
        return Err(FkError::UnsupportedModel("grid diamond with a uniform part needs displacement inputs".into()));
    }
    let mut out = KernelGrid::new(f.dim, Layout::Pairwise, vec![t], f.half_width, f.dx, f.model_hash.clone())?;
    let mut zs: Vec<(Point, f64)> = w.atoms.iter().copied().filter(|a| a.1 != 0.0).collect();
    if !w.parts.is_empty() {
        let (lo, hi) = w.hull();
        let nodes_z = f.nodes();
        for &z in nodes_z.iter().filter(|&&z| z >= lo[0] && z <= hi[0]) {
            let v = w.density_value(&[z, 0.0]);
            if v != 0.0 {
                zs.push(([z, 0.0], v * f.dx));
            }
        }
    }
    let vals: Vec<f64> = (0..np)
        .into_par_iter()
        .flat_map_iter(|xi| {
            let x = pts[xi];
            let fx: Vec<Vec<f64>> = zs.iter().map(|(z, _)| nodes.iter().map(|&(s, _)| grid_value(f, t - s, &x, z)).collect()).collect();
            let pts = &pts;
            let zs = &zs;
            let nodes = &nodes;
            (0..np).map(move |yi| {
                let y = pts[yi];
                let mut acc = 0.0;
                for (zi, (z, q)) in zs.iter().enumerate() {
                    let mut s_acc = 0.0;
                    for (si, &(s, ds)) in nodes.iter().enumerate() {
                        s_acc += ds * fx[zi][si] * grid_value(g, s, z, &y);
                    }
                    acc += q * s_acc;
                }
                acc
            })
        })
        .collect();
    out.slice_mut(0).copy_from_slice(&vals);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Horizon and grid convergence.

/// Largest `t0` in `(0, 1]` with `c1 F(t0) < 1/2`, by bisection.
pub fn contraction_horizon(scale: &ScaleFunction, w: &SignedMeasure, kappa: f64, c1: f64) -> Result<f64> {
    if !(c1 > 0.0 && kappa > 0.0) {
        return Err(FkError::InvalidParameter("kappa and C1 must be positive".into()));
    }
    let f = |t: f64| big_f(scale, w, kappa, t);
    let f1 = f(1.0)?;
    if !f1.is_finite() {
        return Err(FkError::Divergent("F(t) = int_0^t phi_kappa diverges; no contraction horizon".into()));
    }
    if c1 * f1 < 0.5 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    // Bisection in log t once a bracket below is found.
    let mut probe = 0.5;
    while c1 * f(probe)? >= 0.5 {
        hi = probe;
        probe *= 0.5;
        if probe < 1e-300 {
            return Err(FkError::NonContracting("C1 F(t) >= 1/2 for all representable t".into()));
        }
    }
    lo = lo.max(probe);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if c1 * f(mid)? < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    Ok(lo)
}

/// Grid-convergence study. At level `r` the base spacing is divided and the
/// time-mesh density multiplied by `r`.
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub levels: Vec<usize>,
    /// `sup |p^A_{level i} - p^A_{level i+1}|` on the common output grid.
    pub differences: Vec<f64>,
    pub order: Option<f64>,
    pub pass: bool,
}

/// Solves at each refinement level and compares `p^A` at the last output
/// time on the coarsest output grid.
pub fn uniqueness_probe(
    model: &LevyModel,
    w: &SignedMeasure,
    times: &[f64],
    half_width: f64,
    dx: f64,
    spectral: &SpectralOptions,
    opts: &SolveOptions,
    levels: &[usize],
    tol: f64,
) -> Result<UniquenessReport> {
    if levels.len() < 2 {
        return Err(FkError::InvalidParameter("need at least two resolutions".into()));
    }
    let mut sols = Vec::new();
    for &lv in levels {
        let base = BaseKernel::new(model.clone(), times, half_width, dx / lv as f64, spectral)?;
        let mut o = opts.clone();
        o.out_stride = opts.out_stride * lv;
        o.mesh_per_decade = opts.mesh_per_decade * lv;
        o.max_step_fraction = opts.max_step_fraction / lv as f64;
        sols.push(solve(&base, w, &o)?);
    }
    let ti = times.len() - 1;
    let differences: Vec<f64> = sols
        .windows(2)
        .map(|p| {
            let (coarse, fine) = (&sols[0].p_a, &p[1].p_a);
            let t = times[ti];
            let np = coarse.points_per_space();
            (0..coarse.slice_len())
                .map(|idx| {
                    let (x, y) = match coarse.layout {
                        Layout::Displacement => ([0.0; 2], coarse.point(idx)),
                        Layout::Pairwise => (coarse.point(idx / np), coarse.point(idx % np)),
                    };
                    let a = p[0].p_a.value(t, &x, &y).unwrap_or(0.0);
                    let b = fine.value(t, &x, &y).unwrap_or(0.0);
                    (a - b).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let order = if differences.len() >= 2 {
        let (d1, d2) = (differences[differences.len() - 2], differences[differences.len() - 1]);
        let r = levels[levels.len() - 1] as f64 / levels[levels.len() - 2] as f64;
        if d1 > 0.0 && d2 > 0.0 { Some((d1 / d2).ln() / r.ln()) } else if d2 == 0.0 { Some(f64::INFINITY) } else { None }
    } else {
        None
    };
    let all_zero = differences.iter().all(|&d| d == 0.0);
    let last_ok = *differences.last().unwrap() < tol;
    let pass = all_zero || (last_ok && order.map(|o| o >= 1.0).unwrap_or(true));
    Ok(UniquenessReport { levels: levels.to_vec(), differences, order, pass })
}
