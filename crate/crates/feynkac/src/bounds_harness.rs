//! Fits and verifies envelope claims on computed kernels: the lower bound
//! `rho_t^n f_low((y - x) rho_t) <= p^A_t(x, y)`, the single-kernel upper
//! bound `p^A_t(x, y) <= C g_t(y - x)`, and the on-diagonal scaling
//! `p^A_t(x, x) ~ rho_t^n`.
//!
//! Points in the outer 10% of the spatial box are excluded.

use std::io::Write;

use serde::Serialize;

use crate::error::{FkError, Result};
use crate::kernels::{f_low, g_frak, Envelope, KernelGrid, Layout};
use crate::levy_models::{norm, Point, ScaleFunction};
use crate::quadrature::linear_fit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundVerdict {
    Pass,
    Fail,
    Inconclusive,
}

impl BoundVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            BoundVerdict::Pass => "pass",
            BoundVerdict::Fail => "fail",
            BoundVerdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub claim: String,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub a3: Option<f64>,
    pub a4: Option<f64>,
    pub c: Option<f64>,
    pub t_range: (f64, f64),
    /// Half width of the inner box the samples came from.
    pub box_half_width: f64,
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack of the bound, relative to the bound itself.
    pub worst_margin: f64,
    pub verdict: BoundVerdict,
    pub note: String,
}

impl BoundReport {
    fn empty(claim: &str, t_range: (f64, f64), box_half_width: f64) -> Self {
        BoundReport {
            claim: claim.to_string(),
            a1: None,
            a2: None,
            a3: None,
            a4: None,
            c: None,
            t_range,
            box_half_width,
            samples: 0,
            violations: 0,
            worst_margin: f64::NAN,
            verdict: BoundVerdict::Inconclusive,
            note: String::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "claim,a1,a2,a3,a4,C,violations,worst_margin,verdict")?;
        }
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:e},{}",
            self.claim,
            f(self.a1),
            f(self.a2),
            f(self.a3),
            f(self.a4),
            f(self.c),
            self.violations,
            self.worst_margin,
            self.verdict.name()
        )
    }
}

/// One grid value with its coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub t: f64,
    pub x: Point,
    pub y: Point,
    pub value: f64,
}

/// Grid values at times in `[t_lo, t_hi]` with both points inside the inner
/// 90% of the box.
pub fn inner_samples(g: &KernelGrid, t_lo: f64, t_hi: f64) -> Vec<Sample> {
    let inner = 0.9 * g.half_width + 1e-12;
    let inside = |p: &Point| (0..g.dim).all(|a| p[a].abs() <= inner);
    let np = g.points_per_space();
    let mut out = Vec::new();
    for (ti, &t) in g.times.iter().enumerate() {
        if t < t_lo * (1.0 - 1e-12) || t > t_hi * (1.0 + 1e-12) {
            continue;
        }
        let s = g.slice(ti);
        for (idx, &value) in s.iter().enumerate() {
            let (x, y) = match g.layout {
                Layout::Displacement => ([0.0; 2], g.point(idx)),
                Layout::Pairwise => (g.point(idx / np), g.point(idx % np)),
            };
            if inside(&x) && inside(&y) {
                out.push(Sample { t, x, y, value });
            }
        }
    }
    out
}

/// `(u, q) = (|y - x| rho_t, p / rho_t^n)` per sample.
fn normalized(samples: &[Sample], scale: &ScaleFunction, dim: usize) -> Result<Vec<(f64, f64)>> {
    let mut cache: Vec<(f64, f64)> = Vec::new();
    samples
        .iter()
        .map(|s| {
            let rho = match cache.iter().find(|c| c.0 == s.t) {
                Some(c) => c.1,
                None => {
                    let r = scale.rho(s.t)?;
                    cache.push((s.t, r));
                    r
                }
            };
            let d = [s.y[0] - s.x[0], s.y[1] - s.x[1]];
            Ok((norm(&d, dim) * rho, s.value / rho.powi(dim as i32)))
        })
        .collect()
}

/// Largest `a1` with `q >= a1 (1 - a2 u)` wherever `a2 u < 1`; zero when a
/// constrained value is not positive.
fn max_a1(data: &[(f64, f64)], a2: f64) -> f64 {
    let mut a1 = f64::INFINITY;
    for &(u, q) in data {
        let w = 1.0 - a2 * u;
        if w > 0.0 {
            if q <= 0.0 {
                return 0.0;
            }
            a1 = a1.min(q / w);
        }
    }
    if a1.is_finite() { a1 } else { 0.0 }
}

/// Largest `u` reached at every time: the lower envelope must vanish
/// before it to be verified at all times.
fn covered_radius(samples: &[Sample], data: &[(f64, f64)]) -> f64 {
    let mut per_t: Vec<(f64, f64)> = Vec::new();
    for (s, d) in samples.iter().zip(data) {
        match per_t.iter_mut().find(|p| p.0 == s.t) {
            Some(p) => p.1 = p.1.max(d.0),
            None => per_t.push((s.t, d.0)),
        }
    }
    per_t.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
}

fn lower_report(claim: &str, g: &KernelGrid, t_range: (f64, f64), samples: &[Sample], data: &[(f64, f64)], a1: f64, a2: f64) -> BoundReport {
    let mut r = BoundReport::empty(claim, t_range, 0.9 * g.half_width);
    r.samples = samples.len();
    r.a1 = Some(a1);
    r.a2 = Some(a2);
    let mut worst = f64::INFINITY;
    for &(u, q) in data {
        let bound = a1 * (1.0 - a2 * u);
        if bound > 0.0 {
            let margin = (q - bound) / bound;
            worst = worst.min(margin);
            if margin < -1e-12 {
                r.violations += 1;
            }
        }
    }
    r.worst_margin = worst;
    r.verdict = if r.violations == 0 && a1 >= 1e-6 && !samples.is_empty() { BoundVerdict::Pass } else { BoundVerdict::Fail };
    r
}

/// Largest `a1` for a fixed `a2`.
pub fn fit_lower_envelope_with_a2(g: &KernelGrid, scale: &ScaleFunction, t_range: (f64, f64), a2: f64) -> Result<BoundReport> {
    if !(a2 > 0.0) {
        return Err(FkError::InvalidParameter("a2 must be positive".into()));
    }
    let samples = inner_samples(g, t_range.0, t_range.1);
    let data = normalized(&samples, scale, g.dim)?;
    let a1 = max_a1(&data, a2);
    let mut r = lower_report("lower_envelope", g, t_range, &samples, &data, a1, a2);
    if a1 < 1e-6 {
        r.note = "no positive a1 at this a2".into();
    }
    Ok(r)
}

/// Fits `(a1, a2)` maximizing the envelope mass `a1 / a2^n` among constants
/// valid on every sample, with `a2` large enough that the support of
/// `f_low` stays inside the sampled box at each time.
pub fn fit_lower_envelope(g: &KernelGrid, scale: &ScaleFunction, t_range: (f64, f64)) -> Result<BoundReport> {
    let samples = inner_samples(g, t_range.0, t_range.1);
    if samples.is_empty() {
        return Err(FkError::InvalidParameter(format!("no grid times in [{}, {}]", t_range.0, t_range.1)));
    }
    let data = normalized(&samples, scale, g.dim)?;
    let a2_min = 1.0 / covered_radius(&samples, &data);
    let n = g.dim as i32;
    let objective = |la2: f64| {
        let a2 = la2.exp();
        max_a1(&data, a2) / a2.powi(n)
    };
    let (lo, hi) = (a2_min.ln(), (a2_min * 1e6).ln());
    let m = 120;
    let grid: Vec<f64> = (0..=m).map(|i| lo + (hi - lo) * i as f64 / m as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| objective(x)).collect();
    let best = (0..=m).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(m)]);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let mut best_x = grid[best];
    let mut best_v = vals[best];
    for _ in 0..60 {
        let c = b - gr * (b - a);
        let d = a + gr * (b - a);
        let (fc, fd) = (objective(c), objective(d));
        for (x, v) in [(c, fc), (d, fd)] {
            if v > best_v {
                best_v = v;
                best_x = x;
            }
        }
        if fc >= fd {
            b = d;
        } else {
            a = c;
        }
    }
    let a2 = best_x.exp();
    let a1 = max_a1(&data, a2);
    let mut r = lower_report("lower_envelope", g, t_range, &samples, &data, a1, a2);
    if a1 < 1e-6 {
        r.verdict = BoundVerdict::Fail;
        r.note = "no feasible (a1, a2) with a1 >= 1e-6".into();
    }
    Ok(r)
}

/// Counts violations of a given lower envelope.
pub fn verify_lower_envelope(g: &KernelGrid, scale: &ScaleFunction, t_range: (f64, f64), env: &Envelope) -> Result<BoundReport> {
    let samples = inner_samples(g, t_range.0, t_range.1);
    let data = normalized(&samples, scale, g.dim)?;
    Ok(lower_report("lower_envelope_verify", g, t_range, &samples, &data, env.a1, env.a2))
}

/// `rho_t^n f_low((y - x) rho_t)` for reporting.
pub fn lower_bound_value(scale: &ScaleFunction, env: &Envelope, dim: usize, t: f64, d: &Point) -> Result<f64> {
    let rho = scale.rho(t)?;
    Ok(rho.powi(dim as i32) * f_low(&[d[0] * rho, d[1] * rho], dim, env.a1, env.a2))
}

/// Smallest `C` with `value <= C g_t(y - x)` over the samples.
fn fit_upper_c(samples: &[Sample], n: usize, alpha: f64, d: f64) -> f64 {
    samples
        .iter()
        .map(|s| s.value / g_frak(s.t, &[s.y[0] - s.x[0], s.y[1] - s.x[1]], n, alpha, d))
        .fold(0.0, f64::max)
}

fn upper_report(claim: &str, levels: &[&KernelGrid], n: usize, alpha: f64, d: f64, t_range: (f64, f64)) -> Result<BoundReport> {
    if levels.is_empty() {
        return Err(FkError::InvalidParameter("need at least one grid".into()));
    }
    let cs: Vec<(f64, usize)> = levels
        .iter()
        .map(|g| {
            let s = inner_samples(g, t_range.0, t_range.1);
            (fit_upper_c(&s, n, alpha, d), s.len())
        })
        .collect();
    let finest = levels.last().unwrap();
    let (c, count) = *cs.last().unwrap();
    let mut r = BoundReport::empty(claim, t_range, 0.9 * finest.half_width);
    r.c = Some(c);
    r.samples = count;
    let samples = inner_samples(finest, t_range.0, t_range.1);
    let mut worst = f64::INFINITY;
    for s in &samples {
        let b = c * g_frak(s.t, &[s.y[0] - s.x[0], s.y[1] - s.x[1]], n, alpha, d);
        let m = (b - s.value) / b;
        worst = worst.min(m);
        if m < -1e-12 {
            r.violations += 1;
        }
    }
    r.worst_margin = worst;
    let drift = cs.windows(2).map(|w| (w[1].0 - w[0].0).abs() / w[0].0).fold(0.0, f64::max);
    r.note = format!("C per level {:?}; max drift {drift:.3}", cs.iter().map(|c| c.0).collect::<Vec<_>>());
    r.verdict = if count == 0 || !c.is_finite() || c <= 0.0 || r.violations > 0 {
        BoundVerdict::Fail
    } else if levels.len() < 2 || drift > 0.1 {
        BoundVerdict::Inconclusive
    } else {
        BoundVerdict::Pass
    };
    Ok(r)
}

/// Prerequisite `p_t <= c g_t` on the base kernel and the main bound
/// `p^A_t <= C g_t`, each fitted on successive refinements (coarse first).
/// More than 10% drift of the fitted constant between refinements makes
/// the verdict inconclusive.
pub fn check_single_kernel_upper(
    pa_levels: &[&KernelGrid],
    base_levels: &[&KernelGrid],
    n: usize,
    alpha: f64,
    d: f64,
    t_range: (f64, f64),
) -> Result<(BoundReport, BoundReport)> {
    let pre = upper_report("base_upper", base_levels, n, alpha, d, t_range)?;
    let mut main = upper_report("single_kernel_upper", pa_levels, n, alpha, d, t_range)?;
    if pre.verdict != BoundVerdict::Pass && main.verdict == BoundVerdict::Pass {
        main.verdict = BoundVerdict::Inconclusive;
        main.note.push_str("; base-kernel prerequisite did not pass");
    }
    Ok((pre, main))
}

#[derive(Debug, Clone, Serialize)]
pub struct RhoScalingReport {
    pub times: Vec<f64>,
    pub diagonal: Vec<f64>,
    pub rho_n: Vec<f64>,
    pub slope_kernel: f64,
    pub slope_rho: f64,
    pub relative_difference: f64,
    pub pass: bool,
}

/// Log-log slopes of `t -> p^A_t(x, x)` at the box centre and of
/// `t -> rho_t^n`; pass when they agree within 10%.
pub fn compare_rho_scaling(g: &KernelGrid, scale: &ScaleFunction, t_range: (f64, f64)) -> Result<RhoScalingReport> {
    let origin = [0.0; 2];
    let mut times = Vec::new();
    let mut diagonal = Vec::new();
    let mut rho_n = Vec::new();
    for &t in g.times.iter().filter(|&&t| t >= t_range.0 * (1.0 - 1e-12) && t <= t_range.1 * (1.0 + 1e-12)) {
        let v = g.value(t, &origin, &origin).unwrap_or(f64::NAN);
        if v > 0.0 {
            times.push(t);
            diagonal.push(v);
            rho_n.push(scale.rho(t)?.powi(g.dim as i32));
        }
    }
    if times.len() < 2 {
        return Err(FkError::InvalidParameter("need two times with a positive diagonal".into()));
    }
    let lt: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let slope = |v: &[f64]| linear_fit(&lt, &v.iter().map(|x| x.ln()).collect::<Vec<_>>()).1;
    let slope_kernel = slope(&diagonal);
    let slope_rho = slope(&rho_n);
    let relative_difference = (slope_kernel - slope_rho).abs() / slope_rho.abs();
    Ok(RhoScalingReport { times, diagonal, rho_n, slope_kernel, slope_rho, relative_difference, pass: relative_difference <= 0.1 })
}
