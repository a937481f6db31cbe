//! Transition kernels: closed forms, spectral inversion onto grids, the
//! reference kernel `g_t`, envelopes and the chaining lower bound.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{FkError, Result};
use crate::levy_models::{ball_volume, norm, LevyMeasure, LevyModel, Point, ScaleFunction};
use crate::quadrature::{geomspace, integrate_with_breaks};
use crate::stable::StableStd;

/// Translation-invariant transition density `p_t(x, y) = k_t(y - x)`.
pub trait TransitionKernel: Send + Sync {
    fn dim(&self) -> usize;
    /// Density of the displacement `d = y - x` after time `t`.
    fn density(&self, t: f64, d: &Point) -> f64;
    /// Total mass after time `t`.
    fn mass(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Brownian kernel with covariance `variance * t * I`.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    pub dim: usize,
    pub variance: f64,
}

impl TransitionKernel for GaussianKernel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn density(&self, t: f64, d: &Point) -> f64 {
        let v = self.variance * t;
        let r2 = d[0] * d[0] + if self.dim == 2 { d[1] * d[1] } else { 0.0 };
        (-r2 / (2.0 * v)).exp() / (2.0 * PI * v).powf(self.dim as f64 / 2.0)
    }
}

/// Standard Brownian density in dimension `dim`.
pub fn gaussian_kernel(t: f64, x: &Point, y: &Point, dim: usize) -> f64 {
    GaussianKernel { dim, variance: 1.0 }.density(t, &[y[0] - x[0], y[1] - x[1]])
}

/// One-dimensional symmetric stable kernel with symbol `scale * |xi|^alpha`.
#[derive(Debug, Clone)]
pub struct StableKernel {
    pub alpha: f64,
    pub scale: f64,
    table: Arc<StableStd>,
}

impl StableKernel {
    pub fn new(alpha: f64, scale: f64) -> Self {
        StableKernel { alpha, scale, table: StableStd::get(alpha) }
    }
}

impl TransitionKernel for StableKernel {
    fn dim(&self) -> usize {
        1
    }
    fn density(&self, t: f64, d: &Point) -> f64 {
        let s = (self.scale * t).powf(1.0 / self.alpha);
        self.table.pdf(d[0] / s) / s
    }
}

/// Kernel of a translation-invariant symmetric one-dimensional model by
/// direct numerical Fourier inversion.
#[derive(Clone)]
pub struct SpectralKernel {
    model: Arc<LevyModel>,
}

impl SpectralKernel {
    pub fn new(model: &LevyModel) -> Result<Self> {
        if model.dim() != 1 || !model.is_translation_invariant() {
            return Err(FkError::UnsupportedModel("spectral kernel needs a translation-invariant 1-d model".into()));
        }
        Ok(SpectralKernel { model: Arc::new(model.clone()) })
    }
}

impl TransitionKernel for SpectralKernel {
    fn dim(&self) -> usize {
        1
    }
    fn density(&self, t: f64, d: &Point) -> f64 {
        let psi = |xi: f64| self.model.psi(&[xi, 0.0]).unwrap_or(Complex64::new(f64::INFINITY, 0.0));
        let mut cut = 1.0;
        while (t * psi(cut).re) < 40.0 && cut < 1e9 {
            cut *= 2.0;
        }
        let x = d[0];
        let n = if x.abs() > 0.0 { ((cut * x.abs() / PI).ceil() as usize).clamp(1, 20000) } else { 1 };
        let breaks: Vec<f64> = (1..n).map(|k| k as f64 * cut / n as f64).collect();
        let f = |xi: f64| {
            let p = psi(xi);
            (-t * p.re).exp() * (xi * x + t * p.im).cos()
        };
        integrate_with_breaks(f, 0.0, cut, &breaks, 1e-15, 1e-10).value / PI
    }
}

/// Exact kernel for models with a closed form, spectral otherwise.
pub fn kernel_for_model(model: &LevyModel) -> Result<Arc<dyn TransitionKernel>> {
    if !model.is_translation_invariant() {
        return Err(FkError::UnsupportedModel("kernel of a state-dependent model".into()));
    }
    let dim = model.dim();
    let drift_free = matches!(model.drift, crate::levy_models::Drift::Constant(a) if a == [0.0, 0.0]);
    match (&model.measure, drift_free) {
        (LevyMeasure::Zero { .. }, true) if model.gaussian_variance > 0.0 => {
            Ok(Arc::new(GaussianKernel { dim, variance: model.gaussian_variance }))
        }
        (LevyMeasure::Stable { alpha, .. }, true) if dim == 1 && model.gaussian_variance == 0.0 => {
            let scale = model.psi(&[1.0, 0.0])?.re;
            Ok(Arc::new(StableKernel::new(*alpha, scale)))
        }
        _ if dim == 1 => Ok(Arc::new(SpectralKernel::new(model)?)),
        _ => Err(FkError::UnsupportedModel("no pointwise kernel for this 2-d model; use a grid".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Values indexed by `(time, displacement)`.
    Displacement,
    /// Values indexed by `(time, x, y)`.
    Pairwise,
}

/// Kernel values on a uniform box `[-L, L]^dim` at ascending times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelGrid {
    pub dim: usize,
    pub layout: Layout,
    pub times: Vec<f64>,
    pub half_width: f64,
    pub dx: f64,
    pub n_side: usize,
    pub model_hash: String,
    /// Mass removed by clipping negative values, per time slice.
    pub clipped_mass: Vec<f64>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl KernelGrid {
    pub fn new(dim: usize, layout: Layout, times: Vec<f64>, half_width: f64, dx: f64, model_hash: String) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) || times[0] <= 0.0 {
            return Err(FkError::InvalidParameter("times must be positive and strictly ascending".into()));
        }
        if !(dx > 0.0 && half_width > 0.0) {
            return Err(FkError::InvalidParameter("box and step must be positive".into()));
        }
        let n_side = (2.0 * half_width / dx).round() as usize + 1;
        if ((n_side - 1) as f64 * dx - 2.0 * half_width).abs() > 1e-9 * half_width {
            return Err(FkError::InvalidParameter(format!("2L = {} is not a multiple of dx = {dx}", 2.0 * half_width)));
        }
        let mut g = KernelGrid { dim, layout, clipped_mass: vec![0.0; times.len()], times, half_width, dx, n_side, model_hash, values: vec![] };
        g.values = vec![0.0; g.times.len() * g.slice_len()];
        Ok(g)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_side).map(|i| -self.half_width + i as f64 * self.dx).collect()
    }

    pub fn points_per_space(&self) -> usize {
        self.n_side.pow(self.dim as u32)
    }

    pub fn slice_len(&self) -> usize {
        match self.layout {
            Layout::Displacement => self.points_per_space(),
            Layout::Pairwise => self.points_per_space().pow(2),
        }
    }

    pub fn slice(&self, ti: usize) -> &[f64] {
        let n = self.slice_len();
        &self.values[ti * n..(ti + 1) * n]
    }

    pub fn slice_mut(&mut self, ti: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.values[ti * n..(ti + 1) * n]
    }

    /// Coordinates of the flat spatial index `i`.
    pub fn point(&self, i: usize) -> Point {
        let nodes = |k: usize| -self.half_width + k as f64 * self.dx;
        if self.dim == 1 {
            [nodes(i), 0.0]
        } else {
            [nodes(i / self.n_side), nodes(i % self.n_side)]
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.dim as i32)
    }

    /// Multilinear interpolation weights of a point; empty outside the box.
    fn stencil(&self, p: &Point) -> Vec<(usize, f64)> {
        let mut idx = [0usize; 2];
        let mut frac = [0f64; 2];
        for a in 0..self.dim {
            let u = (p[a] + self.half_width) / self.dx;
            if !(u >= -1e-9 && u <= (self.n_side - 1) as f64 + 1e-9) {
                return vec![];
            }
            let i = (u.floor() as usize).min(self.n_side - 2);
            idx[a] = i;
            frac[a] = (u - i as f64).clamp(0.0, 1.0);
        }
        if self.dim == 1 {
            vec![(idx[0], 1.0 - frac[0]), (idx[0] + 1, frac[0])]
        } else {
            let n = self.n_side;
            let (i, j, u, v) = (idx[0], idx[1], frac[0], frac[1]);
            vec![
                (i * n + j, (1.0 - u) * (1.0 - v)),
                ((i + 1) * n + j, u * (1.0 - v)),
                (i * n + j + 1, (1.0 - u) * v),
                ((i + 1) * n + j + 1, u * v),
            ]
        }
    }

    fn spatial_value(&self, ti: usize, x: &Point, y: &Point) -> f64 {
        let s = self.slice(ti);
        match self.layout {
            Layout::Displacement => {
                let d = [y[0] - x[0], y[1] - x[1]];
                self.stencil(&d).iter().map(|(i, w)| w * s[*i]).sum()
            }
            Layout::Pairwise => {
                let np = self.points_per_space();
                let sx = self.stencil(x);
                let sy = self.stencil(y);
                let mut acc = 0.0;
                for (i, wi) in &sx {
                    for (j, wj) in &sy {
                        acc += wi * wj * s[i * np + j];
                    }
                }
                acc
            }
        }
    }

    /// Interpolated `p_t(x, y)`: multilinear in space, monotone cubic in
    /// `ln t`. Returns `None` outside the tabulated time range.
    pub fn value(&self, t: f64, x: &Point, y: &Point) -> Option<f64> {
        let n = self.times.len();
        if t < self.times[0] * (1.0 - 1e-12) || t > self.times[n - 1] * (1.0 + 1e-12) {
            return None;
        }
        if n == 1 {
            return Some(self.spatial_value(0, x, y));
        }
        let j = self.times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
        if (t - self.times[j]).abs() <= 1e-14 * t {
            return Some(self.spatial_value(j, x, y));
        }
        let lo = j.saturating_sub(1);
        let hi = (j + 2).min(n - 1);
        let s: Vec<f64> = (lo..=hi).map(|i| self.times[i].ln()).collect();
        let v: Vec<f64> = (lo..=hi).map(|i| self.spatial_value(i, x, y)).collect();
        Some(pchip_eval(&s, &v, j - lo, t.ln()))
    }

    /// `Delta x^dim * sum` of a displacement slice, or of row `x_index` for
    /// a pairwise slice.
    pub fn slice_mass(&self, ti: usize, x_index: usize) -> f64 {
        let s = self.slice(ti);
        let np = self.points_per_space();
        let row = match self.layout {
            Layout::Displacement => s,
            Layout::Pairwise => &s[x_index * np..(x_index + 1) * np],
        };
        row.iter().sum::<f64>() * self.cell_volume()
    }

    /// Writes the container: magic line, header length, JSON header,
    /// little-endian `f64` values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = serde_json::to_vec(self).map_err(|e| FkError::Format(e.to_string()))?;
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(FkError::Format("not a kernel grid container".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let mut g: KernelGrid = serde_json::from_slice(&header).map_err(|e| FkError::Format(e.to_string()))?;
        r.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        if n != g.times.len() * g.slice_len() {
            return Err(FkError::Format(format!("value count {n} does not match header")));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        g.values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(g)
    }

    /// CSV export: `t,x[,x2],value` for displacement grids and
    /// `t,x[,x2],y[,y2],value` for pairwise grids.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let coords = |p: &Point| if self.dim == 1 { format!("{}", p[0]) } else { format!("{},{}", p[0], p[1]) };
        let np = self.points_per_space();
        let head = match (self.layout, self.dim) {
            (Layout::Displacement, 1) => "t,x,value",
            (Layout::Displacement, _) => "t,x1,x2,value",
            (Layout::Pairwise, 1) => "t,x,y,value",
            (Layout::Pairwise, _) => "t,x1,x2,y1,y2,value",
        };
        writeln!(w, "{head}")?;
        for (ti, &t) in self.times.iter().enumerate() {
            let s = self.slice(ti);
            match self.layout {
                Layout::Displacement => {
                    for (i, v) in s.iter().enumerate() {
                        writeln!(w, "{t},{},{v:e}", coords(&self.point(i)))?;
                    }
                }
                Layout::Pairwise => {
                    for i in 0..np {
                        for j in 0..np {
                            writeln!(w, "{t},{},{},{:e}", coords(&self.point(i)), coords(&self.point(j)), s[i * np + j])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

const GRID_MAGIC: &[u8; 8] = b"FKGRID1\n";

impl TransitionKernel for KernelGrid {
    fn dim(&self) -> usize {
        self.dim
    }
    fn density(&self, t: f64, d: &Point) -> f64 {
        self.value(t, &[0.0, 0.0], d).unwrap_or(0.0)
    }
}

/// Monotone cubic (Fritsch-Carlson) interpolation on interval `j` of `(s, v)`.
fn pchip_eval(s: &[f64], v: &[f64], j: usize, x: f64) -> f64 {
    let n = s.len();
    let h: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (v[i + 1] - v[i]) / h[i]).collect();
    let slope = |k: usize| -> f64 {
        if k == 0 {
            return end_slope(h[0], h.get(1).copied().unwrap_or(h[0]), del[0], del.get(1).copied().unwrap_or(del[0]));
        }
        if k == n - 1 {
            let m = n - 2;
            return end_slope(h[m], if m > 0 { h[m - 1] } else { h[m] }, del[m], if m > 0 { del[m - 1] } else { del[m] });
        }
        let (d0, d1) = (del[k - 1], del[k]);
        if d0 * d1 <= 0.0 {
            return 0.0;
        }
        let w1 = 2.0 * h[k] + h[k - 1];
        let w2 = h[k] + 2.0 * h[k - 1];
        (w1 + w2) / (w1 / d0 + w2 / d1)
    };
    let (m0, m1) = (slope(j), slope(j + 1));
    let hh = h[j];
    let u = (x - s[j]) / hh;
    let h00 = (1.0 + 2.0 * u) * (1.0 - u).powi(2);
    let h10 = u * (1.0 - u).powi(2);
    let h01 = u * u * (3.0 - 2.0 * u);
    let h11 = u * u * (u - 1.0);
    h00 * v[j] + h10 * hh * m0 + h01 * v[j + 1] + h11 * hh * m1
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

/// Options for [`density_from_exponent`].
#[derive(Debug, Clone)]
pub struct SpectralOptions {
    pub mass_tol: f64,
    /// FFT period as a multiple of the box width `2L`.
    pub pad: usize,
    /// Largest internal refinement of `dx` used to resolve `exp(-t psi)`.
    pub max_refine: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { mass_tol: 5e-3, pad: 4, max_refine: 64 }
    }
}

/// Default geometric time grid: 40 points in `[1e-3, 1]`.
pub fn default_times() -> Vec<f64> {
    geomspace(1e-3, 1.0, 40)
}

/// Inverts `exp(-t psi)` by FFT onto `[-L, L]^dim` with step `dx`.
///
/// The frequency extent is refined internally (halving `dx`) until
/// `exp(-t psi)` at the Nyquist boundary is below `1e-12`; the FFT period is
/// `pad * 2L`. Negative values are clipped and the clipped mass recorded.
pub fn density_from_exponent(model: &LevyModel, times: &[f64], half_width: f64, dx: f64, opts: &SpectralOptions) -> Result<KernelGrid> {
    if !model.is_translation_invariant() {
        return Err(FkError::UnsupportedModel("density_from_exponent needs constant drift and coefficient".into()));
    }
    let dim = model.dim();
    let mut grid = KernelGrid::new(dim, Layout::Displacement, times.to_vec(), half_width, dx, model.hash_hex())?;
    let n = grid.n_side;
    let t_min = times[0];
    let mut refine = 1usize;
    loop {
        let xi = PI * refine as f64 / dx;
        let edge = if dim == 1 { [xi, 0.0] } else { [xi, 0.0] };
        let p = model.psi(&edge)?;
        if (-t_min * p.re).exp() < 1e-12 || refine >= opts.max_refine {
            if (-t_min * p.re).exp() >= 1e-12 {
                tracing::warn!(refine, "spectral truncation above 1e-12 at the smallest time");
            }
            break;
        }
        refine *= 2;
    }
    let fine_dx = dx / refine as f64;
    let fine_n = (n - 1) * refine + 1;
    let m = (opts.pad * (fine_n - 1)).next_power_of_two();
    let period = m as f64 * fine_dx;
    let freq = |k: usize| 2.0 * PI * (if k <= m / 2 { k as f64 } else { k as f64 - m as f64 }) / period;

    // p_t(z) = (2 pi)^{-1} int exp(i xi z) exp(-t psi(-xi)) d xi, matching
    // the inverse FFT sign.
    let psi_tab: Vec<Complex64> = if dim == 1 {
        (0..m).into_par_iter().map(|k| model.psi(&[-freq(k), 0.0]).unwrap()).collect()
    } else {
        (0..m * m).into_par_iter().map(|k| model.psi(&[-freq(k / m), -freq(k % m)]).unwrap()).collect()
    };
    let half = (n - 1) / 2;
    let slices: Vec<(Vec<f64>, f64)> = times
        .par_iter()
        .map(|&t| {
            let mut planner = FftPlanner::new();
            let fft = planner.plan_fft_inverse(m);
            let mut buf: Vec<Complex64> = psi_tab.iter().map(|p| (-t * p).exp()).collect();
            if dim == 1 {
                fft.process(&mut buf);
            } else {
                fft2_inverse(&mut buf, m, &*fft);
            }
            let norm_c = 1.0 / period.powi(dim as i32);
            let at = |i: isize| -> usize { i.rem_euclid(m as isize) as usize };
            let mut out = vec![0.0; grid.points_per_space()];
            let mut clipped = 0.0;
            for (idx, o) in out.iter_mut().enumerate() {
                let v = if dim == 1 {
                    let off = (idx as isize - half as isize) * refine as isize;
                    buf[at(off)].re * norm_c
                } else {
                    let (i, j) = (idx / n, idx % n);
                    let oi = (i as isize - half as isize) * refine as isize;
                    let oj = (j as isize - half as isize) * refine as isize;
                    buf[at(oi) * m + at(oj)].re * norm_c
                };
                if v < 0.0 {
                    clipped -= v;
                    *o = 0.0;
                } else {
                    *o = v;
                }
            }
            (out, clipped * dx.powi(dim as i32))
        })
        .collect();
    for (ti, (vals, clipped)) in slices.into_iter().enumerate() {
        if clipped > 1e-4 {
            tracing::warn!(t = times[ti], clipped, "clipped negative mass");
        }
        grid.clipped_mass[ti] = clipped;
        grid.slice_mut(ti).copy_from_slice(&vals);
    }
    for ti in 0..times.len() {
        let defect = (1.0 - grid.slice_mass(ti, 0)).abs();
        if defect > opts.mass_tol {
            return Err(FkError::GridTooSmall { defect, tol: opts.mass_tol, suggested_l: 2.0 * half_width });
        }
    }
    Ok(grid)
}

fn fft2_inverse(buf: &mut [Complex64], m: usize, fft: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_exact_mut(m) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); m];
    for j in 0..m {
        for i in 0..m {
            col[i] = buf[i * m + j];
        }
        fft.process(&mut col);
        for i in 0..m {
            buf[i * m + j] = col[i];
        }
    }
}

/// Envelope constants: `f_low = a1 (1 - a2 |x|)_+`, `f_up = a3 exp(-a4 |x|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

pub fn f_low(x: &Point, dim: usize, a1: f64, a2: f64) -> f64 {
    a1 * (1.0 - a2 * norm(x, dim)).max(0.0)
}

pub fn f_up(x: &Point, dim: usize, a3: f64, a4: f64) -> f64 {
    a3 * (-a4 * norm(x, dim)).exp()
}

/// Reference kernel `g_t(x) = t^{-n/alpha} (1 + |x| t^{-1/alpha})^{-(d+alpha)}`.
pub fn g_frak(t: f64, x: &Point, n: usize, alpha: f64, d: f64) -> f64 {
    let s = t.powf(1.0 / alpha);
    let r = norm(x, n);
    if r == 0.0 {
        return t.powf(-(n as f64) / alpha);
    }
    // s^{d+alpha-n} / (s + r)^{d+alpha}: no overflow for tiny t.
    s.powf(d + alpha - n as f64) / (s + r).powf(d + alpha)
}

/// Chaining certificate for `p_t(x, y) > 0` at distance `dist`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainCertificate {
    pub steps: usize,
    pub lower_bound: f64,
}

/// Smallest `N` with `dist / N <= 1 / (4 a2 rho_{t/N})`, together with the
/// lower bound `(a1/2)^N (|B_1| / (8 a2)^n)^{N-1} rho_{t/N}^n`.
///
/// The bound holds whenever `p_s(u, v) >= rho_s^n f_low((v - u) rho_s)`
/// for all `s <= t`: intermediate points range over balls of radius
/// `1 / (8 a2 rho)` around equally spaced points on the segment, so each
/// hop is at most `1 / (2 a2 rho)` and each factor is at least
/// `a1 rho^n / 2`.
pub fn positivity_chain(scale: &ScaleFunction, env: &Envelope, dim: usize, t: f64, dist: f64, n_max: usize) -> Result<ChainCertificate> {
    for steps in 1..=n_max {
        let rho = scale.rho(t / steps as f64)?;
        if dist / steps as f64 <= 1.0 / (4.0 * env.a2 * rho) {
            let nf = steps as f64;
            let ball = ball_volume(dim) / (8.0 * env.a2).powi(dim as i32);
            let ln_bound = nf * (env.a1 / 2.0).ln() + (nf - 1.0) * ball.ln() + dim as f64 * rho.ln();
            return Ok(ChainCertificate { steps, lower_bound: ln_bound.exp() });
        }
    }
    Err(FkError::CertificateUnavailable(format!("no chain with at most {n_max} steps at distance {dist}, t = {t}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::levy_models::{Coefficient, Drift};

    #[test]
    fn gaussian_reference_values() {
        assert_relative_eq!(gaussian_kernel(1.0, &[0.0; 2], &[0.0; 2], 1), 0.398_942_280_401_432_7, epsilon = 1e-15);
        let a = gaussian_kernel(0.7, &[0.2, 0.0], &[-1.1, 0.0], 1);
        let b = gaussian_kernel(0.7, &[-1.1, 0.0], &[0.2, 0.0], 1);
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_chapman_kolmogorov() {
        let (s, t) = (0.3, 0.45);
        let (x, y) = (0.4, -0.9);
        let ck = crate::quadrature::integrate(
            |z| gaussian_kernel(s, &[x, 0.0], &[z, 0.0], 1) * gaussian_kernel(t, &[z, 0.0], &[y, 0.0], 1),
            -30.0,
            30.0,
            1e-14,
            1e-12,
        )
        .value;
        assert!((ck - gaussian_kernel(s + t, &[x, 0.0], &[y, 0.0], 1)).abs() < 1e-6);
    }

    #[test]
    fn g_frak_values() {
        assert_eq!(g_frak(1.0, &[0.0; 2], 1, 1.5, 1.0), 1.0);
        assert_relative_eq!(g_frak(1.0, &[1.0, 0.0], 1, 1.0, 1.0), 0.25, epsilon = 1e-15);
        // g_{c^alpha t}(c x) = c^{-n} g_t(x)
        let (c, t, alpha) = (1.7f64, 0.3, 1.5);
        let lhs = g_frak(c.powf(alpha) * t, &[c * 0.8, 0.0], 1, alpha, 0.5);
        assert_relative_eq!(lhs, g_frak(t, &[0.8, 0.0], 1, alpha, 0.5) / c, max_relative = 1e-13);
    }

    #[test]
    fn envelopes() {
        assert_relative_eq!(f_up(&[2.0, 0.0], 1, 3.0, 0.5), 3.0 / std::f64::consts::E, epsilon = 1e-15);
        assert_eq!(f_low(&[2.0, 0.0], 1, 1.0, 1.0), 0.0);
        assert_eq!(f_low(&[0.0, 0.0], 1, 0.7, 1.0), 0.7);
    }

    #[test]
    fn cauchy_grid_matches_closed_form() {
        let m = LevyModel::pure_jump(LevyMeasure::stable_unit(1.0, 1).unwrap()).unwrap();
        let opts = SpectralOptions { mass_tol: 0.05, ..Default::default() };
        let g = density_from_exponent(&m, &[0.5], 10.0, 0.02, &opts).unwrap();
        let mut err: f64 = 0.0;
        for (i, v) in g.slice(0).iter().enumerate() {
            let x = g.point(i)[0];
            err = err.max((v - 0.5 / (PI * (0.25 + x * x))).abs());
        }
        assert!(err < 1e-4, "sup error {err}");
    }

    #[test]
    fn brownian_grid_matches_gaussian() {
        let m = LevyModel::brownian(1, 1.0).unwrap();
        let g = density_from_exponent(&m, &default_times(), 10.0, 0.02, &SpectralOptions::default()).unwrap();
        for (ti, &t) in g.times.iter().enumerate() {
            for (i, v) in g.slice(ti).iter().enumerate() {
                let x = g.point(i);
                assert!((v - gaussian_kernel(t, &[0.0; 2], &x, 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn drifted_grid_is_shifted_gaussian() {
        let m = LevyModel::new(LevyMeasure::Zero { dim: 1 }, Drift::Constant([1.5, 0.0]), Coefficient::Constant(1.0), 1.0).unwrap();
        let g = density_from_exponent(&m, &[0.5], 10.0, 0.02, &SpectralOptions::default()).unwrap();
        for (i, v) in g.slice(0).iter().enumerate() {
            let x = g.point(i);
            assert!((v - gaussian_kernel(0.5, &[0.75, 0.0], &x, 1)).abs() < 1e-6);
        }
    }

    #[test]
    fn small_box_reports_suggested_width() {
        let m = LevyModel::pure_jump(LevyMeasure::stable_unit(1.0, 1).unwrap()).unwrap();
        match density_from_exponent(&m, &[1.0], 2.0, 0.05, &SpectralOptions::default()) {
            Err(FkError::GridTooSmall { suggested_l, .. }) => assert!(suggested_l > 2.0),
            other => panic!("expected GridTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn interpolation_in_time_and_space() {
        let m = LevyModel::brownian(1, 1.0).unwrap();
        let g = density_from_exponent(&m, &geomspace(0.1, 1.0, 25), 8.0, 0.01, &SpectralOptions::default()).unwrap();
        for &(t, y) in &[(0.137, 0.333), (0.5, -1.234), (0.91, 2.0)] {
            let v = g.value(t, &[0.0; 2], &[y, 0.0]).unwrap();
            assert_relative_eq!(v, gaussian_kernel(t, &[0.0; 2], &[y, 0.0], 1), max_relative = 2e-3);
        }
        assert!(g.value(0.05, &[0.0; 2], &[0.0; 2]).is_none());
    }

    #[test]
    fn spectral_kernel_matches_stable_table() {
        let m = LevyModel::pure_jump(LevyMeasure::stable_unit(1.5, 1).unwrap()).unwrap();
        let s = SpectralKernel::new(&m).unwrap();
        let k = StableKernel::new(1.5, 1.0);
        for &x in &[0.0, 0.3, 2.0, 7.5] {
            assert_relative_eq!(s.density(0.4, &[x, 0.0]), k.density(0.4, &[x, 0.0]), max_relative = 1e-6);
        }
    }

    #[test]
    fn brownian_planar_grid() {
        let m = LevyModel::brownian(2, 1.0).unwrap();
        let g = density_from_exponent(&m, &[0.25, 1.0], 6.0, 0.1, &SpectralOptions { pad: 2, ..Default::default() }).unwrap();
        for (ti, &t) in g.times.iter().enumerate() {
            for i in (0..g.points_per_space()).step_by(97) {
                let p = g.point(i);
                assert!((g.slice(ti)[i] - gaussian_kernel(t, &[0.0; 2], &p, 2)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn container_round_trip() {
        let m = LevyModel::brownian(1, 1.0).unwrap();
        let g = density_from_exponent(&m, &[0.5, 1.0], 5.0, 0.1, &SpectralOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.fkg");
        g.save(&path).unwrap();
        let h = KernelGrid::load(&path).unwrap();
        assert_eq!(g.values, h.values);
        assert_eq!(g.times, h.times);
        assert_eq!(g.model_hash, h.model_hash);
    }

    #[test]
    fn chain_brownian_growth_and_origin() {
        let sf = ScaleFunction::power(2.0);
        let env = Envelope { a1: 0.3, a2: 0.5, a3: 1.0, a4: 1.0 };
        assert_eq!(positivity_chain(&sf, &env, 1, 1.0, 0.0, 1000).unwrap().steps, 1);
        // N ~ (4 a2 dist)^2 / t
        let pts: Vec<(f64, f64)> = [10.0, 20.0, 40.0, 80.0]
            .iter()
            .map(|&d| (d * d, positivity_chain(&sf, &env, 1, 1.0, d, 100_000).unwrap().steps as f64))
            .collect();
        for w in pts.windows(2) {
            let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            assert!((slope / 4.0 - 1.0).abs() < 0.1, "slope {slope}");
        }
        assert!(matches!(positivity_chain(&sf, &env, 1, 1.0, 1e4, 10), Err(FkError::CertificateUnavailable(_))));
    }
}
