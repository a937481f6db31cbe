//! Signed measures `w`, their volume function `h(r) = sup_x |w|(B(x, r))`,
//! Kato-type diagnostics and the space-time identity used to compare them.
//!
//! Atoms and a uniform part are supported in dimensions 1 and 2; bounded or
//! integrable density parts are one-dimensional.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erf;

use crate::error::{FkError, Result};
use crate::kernels::{g_frak, TransitionKernel};
use crate::levy_models::{ball_volume, norm, Point, ScaleFunction};
use crate::quadrature::{graded_to_infinity, graded_to_zero, graded_to_zero_until, integrate, integrate_with_breaks, linear_fit};

/// One-dimensional density parts with exact interval masses where available.
#[derive(Clone)]
pub enum DensityPart {
    /// `c` on `[a, b]`.
    Indicator { a: f64, b: f64, c: f64 },
    /// `c |y - z|^{-gamma}` on `|y - z| <= radius`, `0 < gamma < 1`.
    PowerSingular { center: f64, gamma: f64, c: f64, radius: f64 },
    /// `c / (|y - z| ln^3(1/|y - z|))` on `|y - z| < radius < 1`; the ball
    /// mass around `z` is `c / ln^2(1/r)`.
    LogSingular { center: f64, c: f64, radius: f64 },
    /// `c exp(-(y - z)^2 / (2 w^2))`.
    GaussianBump { center: f64, width: f64, c: f64 },
    /// `amp cos(freq y + phase)` on `[a, b]`.
    Cosine { amp: f64, freq: f64, phase: f64, a: f64, b: f64 },
    /// Bounded callable on `[a, b]`, integrated numerically.
    Callable { f: Arc<dyn Fn(f64) -> f64 + Send + Sync>, a: f64, b: f64, label: String },
}

impl DensityPart {
    pub fn value(&self, y: f64) -> f64 {
        match self {
            DensityPart::Indicator { a, b, c } => if y >= *a && y <= *b { *c } else { 0.0 },
            DensityPart::PowerSingular { center, gamma, c, radius } => {
                let u = (y - center).abs();
                if u <= *radius && u > 0.0 { c * u.powf(-gamma) } else if u == 0.0 { f64::INFINITY * c.signum() } else { 0.0 }
            }
            DensityPart::LogSingular { center, c, radius } => {
                let u = (y - center).abs();
                if u < *radius && u > 0.0 { c / (u * (-u.ln()).powi(3)) } else if u == 0.0 { f64::INFINITY * c.signum() } else { 0.0 }
            }
            DensityPart::GaussianBump { center, width, c } => c * (-(y - center).powi(2) / (2.0 * width * width)).exp(),
            DensityPart::Cosine { amp, freq, phase, a, b } => if y >= *a && y <= *b { amp * (freq * y + phase).cos() } else { 0.0 },
            DensityPart::Callable { f, a, b, .. } => if y >= *a && y <= *b { f(y) } else { 0.0 },
        }
    }

    /// `value(x + u)`, with the distance to a singular centre formed as
    /// `(x - centre) + u` so it stays exact for small `u`.
    pub fn value_at_offset(&self, x: f64, u: f64) -> f64 {
        match self {
            DensityPart::PowerSingular { center, gamma, c, radius } => {
                let d = ((x - center) + u).abs();
                if d <= *radius && d > 0.0 { c * d.powf(-gamma) } else if d == 0.0 { f64::INFINITY * c.signum() } else { 0.0 }
            }
            DensityPart::LogSingular { center, c, radius } => {
                let d = ((x - center) + u).abs();
                if d < *radius && d > 0.0 { c / (d * (-d.ln()).powi(3)) } else if d == 0.0 { f64::INFINITY * c.signum() } else { 0.0 }
            }
            _ => self.value(x + u),
        }
    }

    /// `(lo, hi)` outside of which the part vanishes (Gaussian: 12 widths).
    pub fn support(&self) -> (f64, f64) {
        match self {
            DensityPart::Indicator { a, b, .. } | DensityPart::Cosine { a, b, .. } | DensityPart::Callable { a, b, .. } => (*a, *b),
            DensityPart::PowerSingular { center, radius, .. } | DensityPart::LogSingular { center, radius, .. } => (center - radius, center + radius),
            DensityPart::GaussianBump { center, width, .. } => (center - 12.0 * width, center + 12.0 * width),
        }
    }

    fn breaks(&self) -> Vec<f64> {
        let (lo, hi) = self.support();
        let mut b = vec![lo, hi];
        match self {
            DensityPart::PowerSingular { center, .. } | DensityPart::LogSingular { center, .. } | DensityPart::GaussianBump { center, .. } => {
                b.push(*center)
            }
            DensityPart::Cosine { freq, phase, a, b: hi, .. } if *freq != 0.0 => {
                // Zeros of the cosine.
                let k0 = ((freq * a + phase) / PI - 0.5).floor() as i64;
                let k1 = ((freq * hi + phase) / PI - 0.5).ceil() as i64;
                for k in k0..=k1 {
                    let y = ((k as f64 + 0.5) * PI - phase) / freq;
                    if y > *a && y < *hi {
                        b.push(y);
                    }
                }
            }
            _ => {}
        }
        b
    }

    /// `|part|([lo, hi])`.
    pub fn abs_mass(&self, lo: f64, hi: f64) -> f64 {
        let (s0, s1) = self.support();
        let (lo, hi) = (lo.max(s0), hi.min(s1));
        if !(hi > lo) {
            return 0.0;
        }
        match self {
            DensityPart::Indicator { c, .. } => c.abs() * (hi - lo),
            DensityPart::PowerSingular { center, gamma, c, .. } => {
                let prim = |u: f64| u.powf(1.0 - gamma) / (1.0 - gamma);
                c.abs() * two_sided_mass(*center, lo, hi, prim)
            }
            DensityPart::LogSingular { center, c, .. } => {
                let prim = |u: f64| if u <= 0.0 { 0.0 } else { 0.5 / (-u.ln()).powi(2) };
                c.abs() * two_sided_mass(*center, lo, hi, prim)
            }
            DensityPart::GaussianBump { center, width, c } => {
                let cdf = |y: f64| 0.5 * (1.0 + erf((y - center) / (width * 2f64.sqrt())));
                c.abs() * width * (2.0 * PI).sqrt() * (cdf(hi) - cdf(lo))
            }
            DensityPart::Cosine { .. } | DensityPart::Callable { .. } => {
                let brk: Vec<f64> = self.breaks().into_iter().filter(|&y| y > lo && y < hi).collect();
                integrate_with_breaks(|y| self.value(y).abs(), lo, hi, &brk, 1e-15, 1e-12).value
            }
        }
    }
}

/// Mass of `[lo, hi]` for a density symmetric around `z` with one-sided
/// primitive `prim(u) = int_0^u`.
fn two_sided_mass<F: Fn(f64) -> f64>(z: f64, lo: f64, hi: f64, prim: F) -> f64 {
    let right = if hi > z { prim(hi - z) - prim((lo - z).max(0.0)) } else { 0.0 };
    let left = if lo < z { prim(z - lo) - prim((z - hi).max(0.0)) } else { 0.0 };
    right.max(0.0) + left.max(0.0)
}

/// Signed measure: atoms, a multiple of Lebesgue measure and density parts.
#[derive(Clone)]
pub struct SignedMeasure {
    pub dim: usize,
    pub atoms: Vec<(Point, f64)>,
    pub uniform: f64,
    pub parts: Vec<DensityPart>,
}

impl std::fmt::Debug for SignedMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SignedMeasure(dim={}, atoms={:?}, uniform={}, parts={})", self.dim, self.atoms, self.uniform, self.parts.len())
    }
}

impl SignedMeasure {
    pub fn zero(dim: usize) -> Self {
        SignedMeasure { dim, atoms: vec![], uniform: 0.0, parts: vec![] }
    }

    pub fn dirac(dim: usize, at: Point, q: f64) -> Self {
        SignedMeasure { dim, atoms: vec![(at, q)], uniform: 0.0, parts: vec![] }
    }

    pub fn lebesgue(dim: usize, c: f64) -> Self {
        SignedMeasure { dim, atoms: vec![], uniform: c, parts: vec![] }
    }

    pub fn density(parts: Vec<DensityPart>) -> Self {
        SignedMeasure { dim: 1, atoms: vec![], uniform: 0.0, parts }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(FkError::UnsupportedModel(format!("dimension {}", self.dim)));
        }
        if self.dim == 2 && !self.parts.is_empty() {
            return Err(FkError::UnsupportedModel("density parts are one-dimensional".into()));
        }
        for p in &self.parts {
            match p {
                DensityPart::PowerSingular { gamma, .. } if !(*gamma > 0.0 && *gamma < 1.0) => {
                    return Err(FkError::InvalidParameter("power singularity needs 0 < gamma < 1".into()))
                }
                DensityPart::LogSingular { radius, .. } if !(*radius > 0.0 && *radius < 1.0) => {
                    return Err(FkError::InvalidParameter("log singularity needs radius in (0, 1)".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut m = self.clone();
        for a in m.atoms.iter_mut() {
            a.1 *= k;
        }
        m.uniform *= k;
        m.parts = m
            .parts
            .into_iter()
            .map(|p| match p {
                DensityPart::Indicator { a, b, c } => DensityPart::Indicator { a, b, c: k * c },
                DensityPart::PowerSingular { center, gamma, c, radius } => DensityPart::PowerSingular { center, gamma, c: k * c, radius },
                DensityPart::LogSingular { center, c, radius } => DensityPart::LogSingular { center, c: k * c, radius },
                DensityPart::GaussianBump { center, width, c } => DensityPart::GaussianBump { center, width, c: k * c },
                DensityPart::Cosine { amp, freq, phase, a, b } => DensityPart::Cosine { amp: k * amp, freq, phase, a, b },
                DensityPart::Callable { f, a, b, label } => {
                    DensityPart::Callable { f: Arc::new(move |y| k * f(y)), a, b, label: format!("{k}*{label}") }
                }
            })
            .collect();
        m
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.1 == 0.0) && self.uniform == 0.0 && self.parts.is_empty()
    }

    pub fn has_atoms(&self) -> bool {
        self.atoms.iter().any(|a| a.1 != 0.0)
    }

    /// Signed density of the absolutely continuous part (uniform included).
    pub fn density_value(&self, y: &Point) -> f64 {
        self.uniform + if self.dim == 1 { self.parts.iter().map(|p| p.value(y[0])).sum::<f64>() } else { 0.0 }
    }

    /// `|w|(R^n)`; infinite with a uniform part.
    pub fn total_variation(&self) -> f64 {
        if self.uniform != 0.0 {
            return f64::INFINITY;
        }
        self.atoms.iter().map(|a| a.1.abs()).sum::<f64>() + self.parts.iter().map(|p| p.abs_mass(f64::NEG_INFINITY, f64::INFINITY)).sum::<f64>()
    }

    /// `(w^+(R^n), w^-(R^n))` for atoms and sign-definite parts.
    pub fn positive_negative(&self) -> (f64, f64) {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (_, q) in &self.atoms {
            if *q > 0.0 { pos += q } else { neg -= q }
        }
        for p in &self.parts {
            let (lo, hi) = p.support();
            let brk = p.breaks();
            pos += integrate_with_breaks(|y| p.value(y).max(0.0), lo, hi, &brk, 1e-15, 1e-10).value;
            neg += integrate_with_breaks(|y| (-p.value(y)).max(0.0), lo, hi, &brk, 1e-15, 1e-10).value;
        }
        if self.uniform > 0.0 {
            pos = f64::INFINITY;
        } else if self.uniform < 0.0 {
            neg = f64::INFINITY;
        }
        (pos, neg)
    }

    /// `|w|(B(x, r))` for the closed ball; density parts add their total
    /// variations.
    pub fn ball_mass(&self, x: &Point, r: f64) -> f64 {
        let dim = self.dim;
        let mut m = self.uniform.abs() * ball_volume(dim) * r.powi(dim as i32);
        for (p, q) in &self.atoms {
            if norm(&[p[0] - x[0], p[1] - x[1]], dim) <= r {
                m += q.abs();
            }
        }
        if dim == 1 {
            m += self.parts.iter().map(|p| p.abs_mass(x[0] - r, x[0] + r)).sum::<f64>();
        }
        m
    }

    /// Hull of atoms and density supports (a point for the pure uniform case).
    pub fn hull(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (p, _) in &self.atoms {
            for a in 0..self.dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for p in &self.parts {
            let (a, b) = p.support();
            lo[0] = lo[0].min(a);
            hi[0] = hi[0].max(b);
        }
        if !lo[0].is_finite() {
            return ([0.0; 2], [0.0; 2]);
        }
        for a in self.dim..2 {
            lo[a] = 0.0;
            hi[a] = 0.0;
        }
        (lo, hi)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.parts.iter().flat_map(|p| p.breaks()).collect();
        b.extend(self.atoms.iter().map(|a| a.0[0]));
        b
    }

    /// Probe centres for suprema over `x`: atoms, density breakpoints and a
    /// mesh, midpoints, and `random` seeded points in the hull.
    pub fn probe_centers(&self, random: usize, mesh: usize) -> Vec<Point> {
        let mut out: Vec<Point> = self.atoms.iter().map(|a| a.0).collect();
        let (lo, hi) = self.hull();
        if self.dim == 1 {
            out.extend(self.breakpoints().into_iter().map(|y| [y, 0.0]));
            let (a, b) = (lo[0], hi[0]);
            if b > a {
                out.extend((0..=mesh).map(|i| [a + (b - a) * i as f64 / mesh as f64, 0.0]));
            }
        }
        for i in 0..self.atoms.len() {
            for j in i + 1..self.atoms.len() {
                let (p, q) = (self.atoms[i].0, self.atoms[j].0);
                out.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x6b61_746f);
        for _ in 0..random {
            let mut p = [0.0; 2];
            for a in 0..self.dim {
                p[a] = if hi[a] > lo[a] { rng.gen_range(lo[a]..=hi[a]) } else { lo[a] };
            }
            out.push(p);
        }
        if out.is_empty() {
            out.push([0.0; 2]);
        }
        out
    }

    /// Extra probes that make the supremum exact for 1-d atoms at radius `r`.
    fn radius_probes(&self, r: f64) -> Vec<Point> {
        let mut out = Vec::new();
        if self.dim == 1 {
            for (p, _) in &self.atoms {
                out.push([p[0] + r, 0.0]);
                out.push([p[0] - r, 0.0]);
            }
            for part in &self.parts {
                let (a, b) = part.support();
                out.extend([[a + r, 0.0], [b - r, 0.0]]);
            }
        }
        out
    }
}

/// Volume function `h(r) = sup_x |w|(B(x, r))` over the probe centres.
pub fn volume_h(w: &SignedMeasure, r: f64) -> f64 {
    let probes = w.probe_centers(1000, 400);
    volume_h_with(w, r, &probes)
}

fn volume_h_with(w: &SignedMeasure, r: f64, probes: &[Point]) -> f64 {
    let mut best: f64 = 0.0;
    for p in probes.iter().chain(w.radius_probes(r).iter()) {
        best = best.max(w.ball_mass(p, r));
    }
    best
}

/// Laplace transform `h^(lambda) = int_0^inf exp(-lambda v) h(v) dv`.
pub fn laplace_h(w: &SignedMeasure, lambda: f64) -> f64 {
    HProfile::new(w, 1000, 400).laplace(lambda)
}

/// Volume function of one measure, prepared for repeated Laplace transforms.
///
/// The uniform part contributes in closed form and `h` of the remainder is
/// constant past the diameter of its support. Pure atoms are summed exactly
/// over the jump points; otherwise `h` is tabulated on a log grid and
/// interpolated linearly in log-log coordinates.
pub struct HProfile {
    dim: usize,
    uniform: f64,
    rest: SignedMeasure,
    probes: Vec<Point>,
    v_star: f64,
    total: f64,
    jumps: Vec<f64>,
    table: Option<(Vec<f64>, Vec<f64>)>,
}

const TABLE_DECADES: f64 = 30.0;
const TABLE_PER_DECADE: usize = 60;

impl HProfile {
    pub fn new(w: &SignedMeasure, random: usize, mesh: usize) -> Self {
        let dim = w.dim;
        let mut rest = w.clone();
        rest.uniform = 0.0;
        let probes = rest.probe_centers(random, mesh);
        let (lo, hi) = rest.hull();
        let v_star = norm(&[hi[0] - lo[0], hi[1] - lo[1]], dim).max(1e-300);
        let total = if rest.is_zero() { 0.0 } else { rest.total_variation() };
        let mut jumps: Vec<f64> = vec![];
        for i in 0..rest.atoms.len() {
            for j in i + 1..rest.atoms.len() {
                let (p, q) = (rest.atoms[i].0, rest.atoms[j].0);
                let d = norm(&[p[0] - q[0], p[1] - q[1]], dim);
                jumps.push(0.5 * d);
                jumps.push(d);
            }
        }
        let table = if rest.parts.is_empty() {
            None
        } else {
            let n = (TABLE_DECADES as usize) * TABLE_PER_DECADE;
            let l_hi = v_star.ln();
            let l_lo = l_hi - TABLE_DECADES * std::f64::consts::LN_10;
            let lv: Vec<f64> = (0..=n).map(|i| l_lo + (l_hi - l_lo) * i as f64 / n as f64).collect();
            let lh: Vec<f64> = lv.iter().map(|&l| volume_h_with(&rest, l.exp(), &probes).max(1e-300).ln()).collect();
            Some((lv, lh))
        };
        HProfile { dim, uniform: w.uniform.abs(), rest, probes, v_star, total, jumps, table }
    }

    /// `h(v)` without the uniform part.
    fn h_rest(&self, v: f64) -> f64 {
        if v >= self.v_star {
            return self.total;
        }
        match &self.table {
            None => volume_h_with(&self.rest, v, &self.probes),
            Some((lv, lh)) => {
                let l = v.ln();
                let n = lv.len();
                let step = lv[1] - lv[0];
                // Power-law extrapolation below the table.
                let k = (((l - lv[0]) / step).floor().max(0.0) as usize).min(n - 2);
                let f = (l - lv[k]) / step;
                (lh[k] + f * (lh[k + 1] - lh[k])).exp()
            }
        }
    }

    pub fn h(&self, v: f64) -> f64 {
        self.uniform * ball_volume(self.dim) * v.powi(self.dim as i32) + self.h_rest(v)
    }

    pub fn laplace(&self, lambda: f64) -> f64 {
        let uni = if self.dim == 1 { 2.0 / lambda.powi(2) } else { 2.0 * PI / lambda.powi(3) } * self.uniform;
        if self.total == 0.0 {
            return uni;
        }
        let v_star = self.v_star;
        let head = if self.table.is_none() {
            let mut pts: Vec<f64> = self.jumps.iter().copied().filter(|&b| b > 0.0 && b < v_star).collect();
            pts.push(0.0);
            pts.push(v_star);
            pts.sort_by(f64::total_cmp);
            pts.dedup();
            pts.windows(2)
                .map(|s| {
                    let mid = 0.5 * (s[0] + s[1]);
                    self.h_rest(mid) * ((-lambda * s[0]).exp() - (-lambda * s[1]).exp()) / lambda
                })
                .sum::<f64>()
        } else {
            let mut brk: Vec<f64> = self.jumps.clone();
            for part in &self.rest.parts {
                let (a, b) = part.support();
                brk.push(0.5 * (b - a));
                brk.push(b - a);
            }
            brk.extend([1.0 / lambda, 10.0 / lambda, 100.0 / lambda]);
            let f = |v: f64| (-lambda * v).exp() * self.h_rest(v);
            let first = (0.01 / lambda).min(v_star);
            let g = graded_to_zero(f, first, 60).value;
            g + if first < v_star { integrate_with_breaks(f, first, v_star, &brk, 1e-300, 1e-9).value } else { 0.0 }
        };
        uni + head + self.total * (-lambda * v_star).exp() / lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Criterion {
    SK,
    KNAlpha,
    H1,
    H2,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::SK => "S_K",
            Criterion::KNAlpha => "K_n_alpha",
            Criterion::H1 => "H1",
            Criterion::H2 => "H2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    InClass,
    NotInClass,
    Inconclusive,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::InClass => "in",
            Verdict::NotInClass => "not-in",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KatoReport {
    pub criterion: Criterion,
    /// `(t, value)` per probe time; `inf` marks a divergent integral.
    pub probes: Vec<(f64, f64)>,
    pub limit_estimate: f64,
    pub verdict: Verdict,
    pub zeta: Option<f64>,
    pub r_squared: Option<f64>,
}

impl KatoReport {
    /// CSV rows `criterion,t,value,verdict,zeta`.
    pub fn write_csv<W: Write>(&self, w: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "criterion,t,value,verdict,zeta")?;
        }
        let z = self.zeta.map(|z| format!("{z:.6}")).unwrap_or_default();
        for (t, v) in &self.probes {
            writeln!(w, "{},{t:e},{v:e},{},{z}", self.criterion.name(), self.verdict.name())?;
        }
        Ok(())
    }
}

/// Reference kernel `g_t` as a transition kernel (not normalised).
#[derive(Debug, Clone, Copy)]
pub struct ReferenceKernel {
    pub n: usize,
    pub alpha: f64,
    pub d: f64,
}

impl TransitionKernel for ReferenceKernel {
    fn dim(&self) -> usize {
        self.n
    }
    fn density(&self, t: f64, d: &Point) -> f64 {
        g_frak(t, d, self.n, self.alpha, self.d)
    }
    fn mass(&self, _t: f64) -> f64 {
        if self.n == 1 && self.d + self.alpha > 1.0 {
            2.0 / (self.d + self.alpha - 1.0)
        } else {
            f64::INFINITY
        }
    }
}

/// `int_0^t p_s(d) ds`, with divergence reported as `inf`.
fn time_potential(kernel: &dyn TransitionKernel, t: f64, d: &Point) -> f64 {
    // Off the diagonal p_s(d) vanishes as s -> 0, possibly only below s ~ |d|^alpha.
    let g = if d[0] == 0.0 && d[1] == 0.0 {
        graded_to_zero(|s| kernel.density(s, d), t, 90)
    } else {
        let max_levels = ((t / 1e-290).log2().floor().max(8.0)) as usize;
        graded_to_zero_until(|s| kernel.density(s, d), t, 4, max_levels, 1e-16)
    };
    if g.divergent {
        f64::INFINITY
    } else {
        g.value
    }
}

/// `chi_t(x) = int_0^t int p_s(x, y) |w|(dy) ds`.
pub fn chi(kernel: &dyn TransitionKernel, w: &SignedMeasure, t: f64, x: &Point) -> f64 {
    chi_with(kernel, w, t, x, |z| time_potential(kernel, t, &[z, 0.0]))
}

/// `chi` with the 1-d potential `z -> int_0^t p_s(z) ds` supplied by the caller.
fn chi_with<U: Fn(f64) -> f64>(kernel: &dyn TransitionKernel, w: &SignedMeasure, t: f64, x: &Point, potential: U) -> f64 {
    let dim = w.dim;
    let mut total = w.uniform.abs() * kernel.mass(1.0) * t;
    for (p, q) in &w.atoms {
        if *q != 0.0 {
            total += q.abs() * time_potential(kernel, t, &[p[0] - x[0], p[1] - x[1]]);
        }
    }
    if dim == 1 && !w.parts.is_empty() {
        let mut brk = w.breakpoints();
        brk.push(x[0]);
        let u_zero = std::cell::OnceCell::new();
        for part in &w.parts {
            let (lo, hi) = part.support();
            let f = |y: f64| {
                let v = part.value(y).abs();
                // A node rounded onto x or a singular point carries no mass.
                if v == 0.0 || !v.is_finite() || y == x[0] {
                    0.0
                } else {
                    v * potential(y - x[0])
                }
            };
            let x0 = x[0];
            if x0 < lo || x0 > hi {
                total += integrate_with_breaks(f, lo, hi, &brk, 1e-13, 1e-7).value;
                continue;
            }
            // Graded panels toward x up to the nearest other breakpoint on each side.
            let right = brk.iter().copied().filter(|&b| b > x0 && b < hi).fold(hi, f64::min);
            let left = brk.iter().copied().filter(|&b| b < x0 && b > lo).fold(lo, f64::max);
            for edge in [right, left] {
                if edge == x0 {
                    continue;
                }
                let dir = (edge - x0).signum();
                // In the offset u the potential keeps full precision near x.
                let g = |u: f64| {
                    let v = part.value_at_offset(x0, dir * u).abs();
                    // A node rounded onto a singular point carries no mass.
                    if v == 0.0 || !v.is_finite() {
                        0.0
                    } else {
                        v * potential(dir * u)
                    }
                };
                let mass = |u: f64| if dir > 0.0 { part.abs_mass(x0, x0 + u) } else { part.abs_mass(x0 - u, x0) };
                let u_zero = *u_zero.get_or_init(|| time_potential(kernel, t, &[0.0, 0.0]));
                let near = near_integral(g, (edge - x0).abs(), mass, |u| potential(dir * u), u_zero);
                if !near.is_finite() {
                    return f64::INFINITY;
                }
                total += near;
            }
            total += integrate_with_breaks(&f, lo, left, &brk, 1e-13, 1e-7).value;
            total += integrate_with_breaks(&f, right, hi, &brk, 1e-13, 1e-7).value;
        }
    }
    total
}

/// `int_0^delta f` for `f(u) = |density| U(u)` with `U` largest at 0, on
/// panels halving toward 0. With `U(0)` finite the piece below a panel edge
/// `u` lies between `U(u) M(u)` and `U(0) M(u)` for the exact mass `M`;
/// otherwise the tail is closed from the fitted power law.
fn near_integral<F: Fn(f64) -> f64, M: Fn(f64) -> f64, U: Fn(f64) -> f64>(f: F, delta: f64, mass: M, potential: U, u_zero: f64) -> f64 {
    let mut total = 0.0;
    let (mut prev, mut last) = (f64::NAN, f64::NAN);
    let (mut r_prev, mut closed_prev) = (f64::NAN, f64::NAN);
    let mut hi = delta;
    let mut u_prev = potential(delta);
    let mut slopes = [f64::NAN; 3];
    let mut growing = 0;
    for k in 0..1100 {
        let lo = 0.5 * hi;
        if lo == 0.0 {
            break;
        }
        let v = integrate(&f, lo, hi, 1e-300, 1e-10).value;
        total += v;
        (prev, last) = (last, v);
        hi = lo;
        let u = potential(hi).min(u_zero);
        if u_zero.is_finite() {
            let m = mass(hi);
            if m == 0.0 || (u_zero - u) * m <= 1e-10 * total {
                return total + 0.5 * (u + u_zero) * m;
            }
        } else if last == 0.0 {
            break;
        } else {
            let r = last / prev;
            let closed = total + last * r / (1.0 - r);
            if k >= 8 && r < 1.0 && r_prev < 1.0 && (closed - closed_prev).abs() <= 1e-8 * closed {
                return closed;
            }
            (r_prev, closed_prev) = (r, closed);
            // U is locally integrable, so growth only signals divergence once U
            // follows a steady power above -1.
            slopes = [slopes[1], slopes[2], (u / u_prev).ln() / -std::f64::consts::LN_2];
            let steady = slopes.iter().all(|s| *s > -1.0) && (slopes[2] - slopes[0]).abs() < 0.01;
            growing = if last >= prev && steady { growing + 1 } else { 0 };
            if growing >= 3 {
                return f64::INFINITY;
            }
        }
        u_prev = u;
    }
    if !u_zero.is_finite() && last > 0.0 {
        let r = last / prev;
        if !(r < 1.0) {
            return f64::INFINITY;
        }
        return total + last * r / (1.0 - r);
    }
    total + u_zero * mass(hi)
}

/// `z -> int_0^t p_s(z) ds` in 1-d, tabulated in `ln |z|` (one table per
/// sign) with four-point Lagrange interpolation of `ln U`.
struct PotentialTable<'a> {
    kernel: &'a dyn TransitionKernel,
    t: f64,
    ln_lo: f64,
    step: f64,
    ln_u: [Vec<f64>; 2],
}

impl<'a> PotentialTable<'a> {
    const PER_DECADE: usize = 40;
    const DECADES: usize = 12;

    fn new(kernel: &'a dyn TransitionKernel, t: f64, z_max: f64) -> Self {
        let n = Self::PER_DECADE * Self::DECADES + 1;
        let step = std::f64::consts::LN_10 / Self::PER_DECADE as f64;
        let ln_lo = z_max.ln() - Self::DECADES as f64 * std::f64::consts::LN_10;
        let row = |sign: f64| -> Vec<f64> {
            (0..n)
                .into_par_iter()
                .map(|i| time_potential(kernel, t, &[sign * (ln_lo + i as f64 * step).exp(), 0.0]).max(1e-300).ln())
                .collect()
        };
        PotentialTable { kernel, t, ln_lo, step, ln_u: [row(1.0), row(-1.0)] }
    }

    fn eval(&self, z: f64) -> f64 {
        if z == 0.0 {
            return 0.0;
        }
        let table = &self.ln_u[usize::from(z < 0.0)];
        let n = table.len();
        let v = (z.abs().ln() - self.ln_lo) / self.step;
        if v < 0.0 || v > (n - 1) as f64 || !table.iter().all(|u| u.is_finite()) {
            return time_potential(self.kernel, self.t, &[z, 0.0]);
        }
        let i = (v.floor() as usize).clamp(1, n - 3);
        let u = v - i as f64;
        let (y0, y1, y2, y3) = (table[i - 1], table[i], table[i + 1], table[i + 2]);
        let a = -u * (u - 1.0) * (u - 2.0) / 6.0;
        let b = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
        let c = -(u + 1.0) * u * (u - 2.0) / 2.0;
        let d = (u + 1.0) * u * (u - 1.0) / 6.0;
        (a * y0 + b * y1 + c * y2 + d * y3).exp()
    }
}

/// `chi` at several centres, sharing one potential table for density parts.
fn chi_sup(kernel: &dyn TransitionKernel, w: &SignedMeasure, t: f64, probes: &[Point]) -> f64 {
    if w.dim == 1 && !w.parts.is_empty() {
        let (lo, hi) = w.hull();
        let table = PotentialTable::new(kernel, t, (hi[0] - lo[0]).max(1e-300));
        probes.iter().map(|x| chi_with(kernel, w, t, x, |z| table.eval(z))).fold(0.0, f64::max)
    } else {
        probes.iter().map(|x| chi(kernel, w, t, x)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct KatoOptions {
    pub threshold: f64,
    pub random_probes: usize,
    pub mesh: usize,
}

impl Default for KatoOptions {
    fn default() -> Self {
        KatoOptions { threshold: 0.05, random_probes: 24, mesh: 24 }
    }
}

/// Default probe times for the small-time limits.
pub fn default_kato_times() -> Vec<f64> {
    crate::quadrature::geomspace(1e-6, 1e-1, 6)
}

/// Verdict on `v(t) -> 0`: in-class once a probe falls below `threshold`.
/// A clean positive power law above the threshold is followed to the time
/// where the fit predicts the crossing, at most eight times.
fn limit_verdict<F: Fn(f64) -> f64>(criterion: Criterion, mut probes: Vec<(f64, f64)>, threshold: f64, eval: F) -> KatoReport {
    let report = |probes: Vec<(f64, f64)>, verdict: Verdict, fit: Option<(f64, f64)>| {
        let limit = probes.iter().min_by(|a, b| a.0.total_cmp(&b.0)).map(|p| p.1).unwrap_or(f64::NAN);
        let limit = if verdict == Verdict::NotInClass && probes.iter().any(|p| !p.1.is_finite()) { f64::INFINITY } else { limit };
        KatoReport { criterion, probes, limit_estimate: limit, verdict, zeta: fit.map(|f| f.0), r_squared: fit.map(|f| f.1) }
    };
    for _ in 0..=8 {
        if probes.iter().any(|(_, v)| !v.is_finite()) {
            return report(probes, Verdict::NotInClass, None);
        }
        let mut sorted = probes.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (t_min, v_min) = sorted[0];
        if v_min < threshold {
            let fit = power_fit(&sorted);
            return report(probes, Verdict::InClass, fit);
        }
        let Some((zeta, r2)) = power_fit(&sorted) else { return report(probes, Verdict::Inconclusive, None) };
        if zeta <= 0.02 {
            return report(probes, Verdict::NotInClass, Some((zeta, r2)));
        }
        if r2 <= 0.99 {
            return report(probes, Verdict::Inconclusive, Some((zeta, r2)));
        }
        let tau = (t_min * (0.5 * threshold / v_min).powf(1.0 / zeta)).clamp(1e-300, 0.1 * t_min);
        if tau >= t_min {
            return report(probes, Verdict::Inconclusive, Some((zeta, r2)));
        }
        probes.push((tau, eval(tau)));
    }
    let mut sorted = probes.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fit = power_fit(&sorted);
    let verdict = if sorted[0].1 < threshold { Verdict::InClass } else { Verdict::Inconclusive };
    report(probes, verdict, fit)
}

/// Log-log slope and `R^2` over the three smallest probe times.
fn power_fit(sorted: &[(f64, f64)]) -> Option<(f64, f64)> {
    let tail = &sorted[..sorted.len().min(3)];
    if tail.len() < 2 || tail.iter().any(|p| p.1 <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = tail.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = tail.iter().map(|p| p.1.ln()).collect();
    let (_, zeta, r2) = linear_fit(&lx, &ly);
    Some((zeta, if tail.len() == 2 { 1.0 } else { r2 }))
}

/// Kato class via the kernel: `sup_x chi_t(x) -> 0` as `t -> 0`.
pub fn kato_sk(kernel: &dyn TransitionKernel, w: &SignedMeasure, t_seq: &[f64], opts: &KatoOptions) -> KatoReport {
    let probes = w.probe_centers(opts.random_probes, opts.mesh);
    let sup = |t: f64| chi_sup(kernel, w, t, &probes);
    let vals: Vec<(f64, f64)> = t_seq.iter().map(|&t| (t, sup(t))).collect();
    limit_verdict(Criterion::SK, vals, opts.threshold, sup)
}

/// `sup_x int_0^t |w|(B(x, s)) / s^{n+1-alpha} ds -> 0`.
pub fn kato_k_n_alpha(w: &SignedMeasure, n: usize, alpha: f64, t_seq: &[f64], opts: &KatoOptions) -> KatoReport {
    let probes = w.probe_centers(opts.random_probes, opts.mesh);
    let expo = n as f64 + 1.0 - alpha;
    let sup = |t: f64| {
        probes
            .iter()
            .map(|x| {
                let g = graded_to_zero(|s| w.ball_mass(x, s) / s.powf(expo), t, 90);
                if g.divergent { f64::INFINITY } else { g.value }
            })
            .fold(0.0, f64::max)
    };
    let vals: Vec<(f64, f64)> = t_seq.iter().map(|&t| (t, sup(t))).collect();
    limit_verdict(Criterion::KNAlpha, vals, opts.threshold, sup)
}

/// Power-law verdict: in-class iff the log-log slope is positive, the fit
/// has `R^2 > 0.99` and the slope over the smaller half of the probes is at
/// least 3/4 of the slope over the larger half (no decay of the exponent
/// toward 0).
fn power_verdict(criterion: Criterion, probes: Vec<(f64, f64)>, divergent: bool) -> KatoReport {
    if divergent || probes.iter().any(|(_, v)| !v.is_finite()) {
        return KatoReport { criterion, probes, limit_estimate: f64::INFINITY, verdict: Verdict::NotInClass, zeta: None, r_squared: None };
    }
    let mut sorted = probes.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lx: Vec<f64> = sorted.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = sorted.iter().map(|p| p.1.max(1e-300).ln()).collect();
    let (_, zeta, r2) = linear_fit(&lx, &ly);
    let k = lx.len() / 2;
    let (_, z_small, _) = linear_fit(&lx[..=k], &ly[..=k]);
    let (_, z_large, _) = linear_fit(&lx[k..], &ly[k..]);
    let drifting = z_small < 0.75 * z_large;
    let verdict = if zeta <= 0.0 || drifting {
        Verdict::NotInClass
    } else if r2 > 0.99 {
        Verdict::InClass
    } else {
        Verdict::Inconclusive
    };
    KatoReport { criterion, probes, limit_estimate: sorted[0].1, verdict, zeta: Some(zeta), r_squared: Some(r2) }
}

/// `phi_nu(s) = rho_s^{n+1} h^(nu rho_s)`.
pub fn phi_nu(scale: &ScaleFunction, w: &SignedMeasure, nu: f64, s: f64) -> Result<f64> {
    phi_with(scale, &HProfile::new(w, 1000, 400), nu, s)
}

fn phi_with(scale: &ScaleFunction, prof: &HProfile, nu: f64, s: f64) -> Result<f64> {
    let rho = scale.rho(s)?;
    let n = scale.dim_hint().unwrap_or(prof.dim) as i32;
    Ok(rho.powi(n + 1) * prof.laplace(nu * rho))
}

/// `F(t) = int_0^t phi_kappa(s) ds`; `inf` when the integral diverges.
pub fn big_f(scale: &ScaleFunction, w: &SignedMeasure, kappa: f64, t: f64) -> Result<f64> {
    big_f_with(scale, &HProfile::new(w, 200, 100), kappa, t)
}

fn big_f_with(scale: &ScaleFunction, prof: &HProfile, kappa: f64, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let mut err = None;
    let g = graded_to_zero(
        |s| match phi_with(scale, prof, kappa, s) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        t,
        70,
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(if g.divergent { f64::INFINITY } else { g.value })
}

/// Condition H1: `G(t) = int_0^t rho_s^{n+1} h^(rho_s) ds <= C t^zeta`.
pub fn check_h1(scale: &ScaleFunction, w: &SignedMeasure, t_seq: &[f64]) -> Result<KatoReport> {
    let prof = HProfile::new(w, 200, 100);
    let mut divergent = false;
    let mut vals = Vec::with_capacity(t_seq.len());
    for &t in t_seq {
        let g = big_f_with(scale, &prof, 1.0, t)?;
        divergent |= !g.is_finite();
        vals.push((t, g));
    }
    Ok(power_verdict(Criterion::H1, vals, divergent))
}

/// Condition H2: `int_0^t h(v) / v^{n+1-alpha} dv <= c t^zeta`.
pub fn check_h2(w: &SignedMeasure, n: usize, alpha: f64, t_seq: &[f64]) -> KatoReport {
    let prof = HProfile::new(w, 200, 100);
    let expo = n as f64 + 1.0 - alpha;
    let mut divergent = false;
    let vals: Vec<(f64, f64)> = t_seq
        .iter()
        .map(|&t| {
            let g = graded_to_zero(|v| prof.h(v) / v.powf(expo), t, 70);
            divergent |= g.divergent;
            (t, if g.divergent { f64::INFINITY } else { g.value })
        })
        .collect();
    power_verdict(Criterion::H2, vals, divergent)
}

/// Both sides of the space-time identity
/// `int_0^t int s^{-n/alpha} (1 ^ s^{1/alpha}/|x-y|)^{alpha+d} w(dy) ds
///   = c (int_0^{t^{1/alpha}} m(v) v^{alpha-n-1} dv
///        + t^{(d+2alpha-n)/alpha} int_{t^{1/alpha}}^inf m(v) v^{-d-1-alpha} dv)`
/// with `c = alpha (d+alpha) / (d+2alpha-n)` and `m(v) = |w|(B(x, v))`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

pub fn ka2_identity_check(w: &SignedMeasure, x: &Point, n: usize, alpha: f64, d: f64, t: f64) -> Result<IdentityCheck> {
    if !(d > n as f64 - alpha) {
        return Err(FkError::InvalidParameter(format!("need d > n - alpha, got d = {d}")));
    }
    let nf = n as f64;
    let dim = w.dim;
    // Left side: time integral of the kernel at distance r, then space.
    let kern = |r: f64| -> f64 {
        let f = |s: f64| {
            let ratio = if r == 0.0 { 1.0 } else { (s.powf(1.0 / alpha) / r).min(1.0) };
            s.powf(-nf / alpha) * ratio.powf(alpha + d)
        };
        let kink = r.powf(alpha);
        if r == 0.0 {
            let g = graded_to_zero(f, t, 90);
            return if g.divergent { f64::INFINITY } else { g.value };
        }
        let a = kink.min(t);
        let head = graded_to_zero(f, a, 60).value;
        let tail = if a < t { integrate_with_breaks(f, a, t, &[], 1e-300, 1e-12).value } else { 0.0 };
        head + tail
    };
    let mut lhs = 0.0;
    for (p, q) in &w.atoms {
        lhs += q.abs() * kern(norm(&[p[0] - x[0], p[1] - x[1]], dim));
    }
    if w.uniform != 0.0 {
        let surf = if dim == 1 { 2.0 } else { 2.0 * PI };
        let radial = |r: f64| kern(r) * r.powi(dim as i32 - 1);
        let near = graded_to_zero(radial, 1.0, 60).value;
        let far = graded_to_infinity(radial, 1.0, 80).value;
        lhs += w.uniform.abs() * surf * (near + far);
    }
    if dim == 1 {
        for part in &w.parts {
            let (lo, hi) = part.support();
            let mut brk = part.breaks();
            brk.push(x[0]);
            lhs += integrate_with_breaks(|y| part.value(y).abs() * kern((y - x[0]).abs()), lo, hi, &brk, 1e-300, 1e-9).value;
        }
    }

    // Right side from ball masses.
    let big_t = t.powf(1.0 / alpha);
    let m = |v: f64| w.ball_mass(x, v);
    let mut brk: Vec<f64> = w.atoms.iter().map(|(p, _)| norm(&[p[0] - x[0], p[1] - x[1]], dim)).collect();
    for part in &w.parts {
        for b in part.breaks() {
            brk.push((b - x[0]).abs());
        }
    }
    let first = brk.iter().copied().filter(|&b| b > 0.0).fold(big_t, f64::min);
    let g1 = graded_to_zero(|v| m(v) * v.powf(alpha - nf - 1.0), first, 90);
    if g1.divergent {
        return Ok(IdentityCheck { lhs, rhs: f64::INFINITY, rel_err: if lhs.is_infinite() { 0.0 } else { f64::INFINITY } });
    }
    let i1 = g1.value + integrate_with_breaks(|v| m(v) * v.powf(alpha - nf - 1.0), first, big_t, &brk, 1e-300, 1e-11).value;
    let far_start = brk.iter().copied().fold(big_t, f64::max).max(big_t);
    let i2_mid = integrate_with_breaks(|v| m(v) * v.powf(-d - 1.0 - alpha), big_t, far_start, &brk, 1e-300, 1e-11).value;
    let i2_tail = graded_to_infinity(|v| m(v) * v.powf(-d - 1.0 - alpha), far_start, 80).value;
    let c = alpha * (d + alpha) / (d + 2.0 * alpha - nf);
    let rhs = c * (i1 + t.powf((d + 2.0 * alpha - nf) / alpha) * (i2_mid + i2_tail));
    let rel_err = if lhs == 0.0 && rhs == 0.0 { 0.0 } else { (lhs - rhs).abs() / lhs.abs().max(rhs.abs()) };
    Ok(IdentityCheck { lhs, rhs, rel_err })
}
