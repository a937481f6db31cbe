//! One-dimensional quadrature: Gauss-Kronrod adaptive integration, fixed
//! Gauss-Legendre rules and log-graded panels for integrable endpoint
//! singularities.

use std::collections::BinaryHeap;
use std::sync::OnceLock;

// 21-point Kronrod extension of the 10-point Gauss rule.
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_958_109_831_074,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Single 21-point Gauss-Kronrod panel. Returns `(estimate, error)`.
pub fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[10];
    let mut rg = 0.0;
    for j in 0..10 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    let k = rk * h;
    let g = rg * h;
    (k, (k - g).abs())
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Gauss-Kronrod integration over `[a, b]` split at the
/// given interior break points.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> QuadResult {
    if a == b {
        return QuadResult { value: 0.0, error: 0.0, converged: true };
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|&x| x > lo && x < hi).collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut edges = Vec::with_capacity(pts.len() + 2);
    edges.push(lo);
    edges.extend(pts);
    edges.push(hi);

    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut err = 0.0;
    for w in edges.windows(2) {
        let (v, e) = gk21(&mut f, w[0], w[1]);
        total += v;
        err += e;
        heap.push(Panel { a: w[0], b: w[1], value: v, error: e });
    }
    let max_panels = 4000;
    let mut converged = false;
    while heap.len() < max_panels {
        if err <= abs_tol.max(rel_tol * total.abs()) {
            converged = true;
            break;
        }
        let Some(p) = heap.pop() else { break };
        let m = 0.5 * (p.a + p.b);
        if m <= p.a || m >= p.b {
            heap.push(p);
            break;
        }
        let (v1, e1) = gk21(&mut f, p.a, m);
        let (v2, e2) = gk21(&mut f, m, p.b);
        total += v1 + v2 - p.value;
        err += e1 + e2 - p.error;
        heap.push(Panel { a: p.a, b: m, value: v1, error: e1 });
        heap.push(Panel { a: m, b: p.b, value: v2, error: e2 });
    }
    if !converged {
        // Resum to shed accumulated cancellation before the final check.
        total = heap.iter().map(|p| p.value).sum();
        err = heap.iter().map(|p| p.error).sum();
        converged = err <= abs_tol.max(rel_tol * total.abs());
    }
    QuadResult { value: sign * total, error: err, converged }
}

pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> QuadResult {
    integrate_with_breaks(f, a, b, &[], abs_tol, rel_tol)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Cached 16-point rule used by the graded panel integrators.
pub fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Fixed Gauss-Legendre sum over `[a, b]` with the supplied rule.
pub fn gl_panel<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    rule.0.iter().zip(&rule.1).map(|(&x, &w)| w * f(c + h * x)).sum::<f64>() * h
}

/// Result of a graded integral toward a possibly singular endpoint.
#[derive(Debug, Clone, Copy)]
pub struct GradedResult {
    pub value: f64,
    /// Fitted local power `beta` of the integrand `~ s^beta` at the singular end.
    pub tail_exponent: f64,
    pub divergent: bool,
}

/// Integrates `f` over `(0, t]` with dyadic panels `[t 2^{-k-1}, t 2^{-k}]`.
/// The contribution below the last panel is closed analytically from the
/// fitted power law; a fitted power `<= -1` flags divergence.
pub fn graded_to_zero<F: FnMut(f64) -> f64>(mut f: F, t: f64, levels: usize) -> GradedResult {
    let rule = gl16();
    let mut total = 0.0;
    let mut prev = f64::NAN;
    let mut last = f64::NAN;
    let mut hi = t;
    for _ in 0..levels.max(2) {
        let lo = 0.5 * hi;
        let v = gl_panel(&mut f, lo, hi, rule);
        total += v;
        prev = last;
        last = v;
        hi = lo;
    }
    close_tail(total, prev, last, 0.5)
}

/// As [`graded_to_zero`], but descends until a shrinking panel falls below
/// `rel` times the running total (at least `min_levels`, at most
/// `max_levels` panels). For integrands that vanish at 0 after a possibly
/// long singular-looking stretch.
pub fn graded_to_zero_until<F: FnMut(f64) -> f64>(mut f: F, t: f64, min_levels: usize, max_levels: usize, rel: f64) -> GradedResult {
    let rule = gl16();
    let mut total = 0.0;
    let mut prev = f64::NAN;
    let mut last = f64::NAN;
    let mut hi = t;
    for k in 0..max_levels.max(2) {
        let lo = 0.5 * hi;
        let v = gl_panel(&mut f, lo, hi, rule);
        total += v;
        prev = last;
        last = v;
        hi = lo;
        if k + 1 >= min_levels && (last == 0.0 || (last.abs() < prev.abs() && last.abs() <= rel * total.abs())) {
            break;
        }
    }
    close_tail(total, prev, last, 0.5)
}

/// Integrates `f` over `[a, inf)` with geometric panels `[a 2^k, a 2^{k+1}]`.
pub fn graded_to_infinity<F: FnMut(f64) -> f64>(mut f: F, a: f64, levels: usize) -> GradedResult {
    let rule = gl16();
    let mut total = 0.0;
    let mut prev = f64::NAN;
    let mut last = f64::NAN;
    let mut lo = a;
    for _ in 0..levels.max(2) {
        let hi = 2.0 * lo;
        let v = gl_panel(&mut f, lo, hi, rule);
        total += v;
        prev = last;
        last = v;
        lo = hi;
    }
    close_tail(total, prev, last, 2.0)
}

fn close_tail(total: f64, prev: f64, last: f64, step: f64) -> GradedResult {
    if last == 0.0 {
        return GradedResult { value: total, tail_exponent: f64::NEG_INFINITY, divergent: false };
    }
    if prev == 0.0 || prev.signum() != last.signum() {
        return GradedResult { value: total, tail_exponent: f64::NAN, divergent: false };
    }
    let r = last / prev;
    // Panel ratio is step^{beta+1} for an integrand ~ s^beta.
    let beta = r.ln() / step.ln() - 1.0;
    if r >= 1.0 {
        return GradedResult { value: f64::INFINITY * last.signum(), tail_exponent: beta, divergent: true };
    }
    GradedResult { value: total + last * r / (1.0 - r), tail_exponent: beta, divergent: false }
}

/// Composite Gauss-Legendre over log-spaced panels on `[a, b]`, `0 < a < b`.
pub fn log_panels<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, per_decade: usize) -> f64 {
    let rule = gl16();
    let decades = (b / a).log10().max(1e-12);
    let n = ((decades * per_decade as f64).ceil() as usize).max(1);
    let r = (b / a).powf(1.0 / n as f64);
    let mut lo = a;
    let mut total = 0.0;
    for i in 0..n {
        let hi = if i + 1 == n { b } else { lo * r };
        total += gl_panel(&mut f, lo, hi, rule);
        lo = hi;
    }
    total
}

/// Ordinary least squares fit `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (a, b, r2)
}

/// Geometric sequence of `n` points from `a` to `b` inclusive.
pub fn geomspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let la = a.ln();
    let step = (b.ln() - la) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { b } else { (la + step * i as f64).exp() }).collect()
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { b } else { a + step * i as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gk_polynomials_and_smooth() {
        let r = integrate(|x| x.powi(5) - 3.0 * x, -1.0, 2.0, 1e-14, 1e-14);
        assert_relative_eq!(r.value, 63.0 / 6.0 - 4.5, epsilon = 1e-12);
        let r = integrate(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-13, 1e-13);
        assert_relative_eq!(r.value, 2.0, epsilon = 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn adaptive_handles_sqrt_singularity() {
        let r = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10, 1e-10);
        assert_relative_eq!(r.value, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn breaks_help_kinks() {
        let r = integrate_with_breaks(|x: f64| (x - 0.3).abs(), 0.0, 1.0, &[0.3], 1e-14, 1e-14);
        assert_relative_eq!(r.value, 0.045 + 0.245, epsilon = 1e-13);
    }

    #[test]
    fn gauss_legendre_weights_and_exactness() {
        for n in [1, 2, 5, 16, 33] {
            let (x, w) = gauss_legendre(n);
            assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
            let deg = 2 * n - 1;
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert_relative_eq!(q, exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn graded_power_laws() {
        let g = graded_to_zero(|s: f64| s.powf(-0.5), 1.0, 30);
        assert!(!g.divergent);
        assert_relative_eq!(g.value, 2.0, epsilon = 1e-10);
        assert_relative_eq!(g.tail_exponent, -0.5, epsilon = 1e-8);
        let g = graded_to_zero(|s: f64| 1.0 / s, 1.0, 30);
        assert!(g.divergent);
        let g = graded_to_infinity(|v: f64| v.powf(-2.5), 1.0, 40);
        assert_relative_eq!(g.value, 1.0 / 1.5, epsilon = 1e-10);
    }

    #[test]
    fn fit_recovers_line() {
        let x = linspace(0.0, 1.0, 11);
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert_relative_eq!(a, 2.0, epsilon = 1e-12);
        assert_relative_eq!(b, -3.0, epsilon = 1e-12);
        assert_relative_eq!(r2, 1.0, epsilon = 1e-12);
    }
}
