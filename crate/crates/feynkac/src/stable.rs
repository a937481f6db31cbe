//! Standard symmetric alpha-stable law with characteristic function
//! `exp(-|xi|^alpha)`: density, distribution function and samplers.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::quadrature::integrate_with_breaks;

/// Tabulated density and cdf of the standard symmetric stable law.
#[derive(Debug)]
pub struct StableStd {
    pub alpha: f64,
    step: f64,
    ln_pdf: Vec<f64>,
    cdf: Vec<f64>,
    x_max: f64,
}

const V_MAX: f64 = 7.7; // asinh(1100)
const NODES: usize = 3081;

impl StableStd {
    /// Shared table for `alpha`, built on first use.
    pub fn get(alpha: f64) -> Arc<StableStd> {
        static CACHE: OnceLock<Mutex<HashMap<u64, Arc<StableStd>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(t) = cache.lock().unwrap().get(&alpha.to_bits()) {
            return t.clone();
        }
        let t = Arc::new(StableStd::build(alpha));
        cache.lock().unwrap().insert(alpha.to_bits(), t.clone());
        t
    }

    fn build(alpha: f64) -> StableStd {
        assert!(alpha > 0.0 && alpha <= 2.0, "stability index must lie in (0, 2]");
        let step = V_MAX / (NODES - 1) as f64;
        let vals: Vec<(f64, f64)> = (0..NODES)
            .into_par_iter()
            .map(|i| {
                let x = (i as f64 * step).sinh();
                (stable_pdf_direct(alpha, x).ln(), stable_cdf_direct(alpha, x))
            })
            .collect();
        let (ln_pdf, cdf) = vals.into_iter().unzip();
        StableStd { alpha, step, ln_pdf, cdf, x_max: V_MAX.sinh() * 0.999 }
    }

    fn lookup(&self, table: &[f64], x: f64) -> f64 {
        let v = x.asinh() / self.step;
        let i = (v.floor() as isize).clamp(1, NODES as isize - 3) as usize;
        let u = v - i as f64;
        let (y0, y1, y2, y3) = (table[i - 1], table[i], table[i + 1], table[i + 2]);
        // Four-point Lagrange through nodes i-1..i+2.
        let a = -u * (u - 1.0) * (u - 2.0) / 6.0;
        let b = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
        let c = -(u + 1.0) * u * (u - 2.0) / 2.0;
        let d = (u + 1.0) * u * (u - 1.0) / 6.0;
        a * y0 + b * y1 + c * y2 + d * y3
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let x = x.abs();
        if self.alpha == 2.0 {
            return (-x * x / 4.0).exp() / (4.0 * PI).sqrt();
        }
        if self.alpha == 1.0 {
            return 1.0 / (PI * (1.0 + x * x));
        }
        if x > self.x_max {
            return stable_pdf_tail(self.alpha, x);
        }
        if x < self.step {
            return stable_pdf_direct(self.alpha, x);
        }
        self.lookup(&self.ln_pdf, x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let ax = x.abs();
        let upper = if self.alpha == 1.0 {
            0.5 + ax.atan() / PI
        } else if ax > self.x_max {
            1.0 - stable_sf_tail(self.alpha, ax)
        } else if ax < self.step {
            stable_cdf_direct(self.alpha, ax)
        } else {
            self.lookup(&self.cdf, ax)
        };
        if x >= 0.0 {
            upper
        } else {
            1.0 - upper
        }
    }
}

/// Power series at the origin, convergent for `alpha > 1`.
fn pdf_series_origin(alpha: f64, x: f64) -> f64 {
    let mut sum = 0.0;
    for k in 0..80 {
        let kk = k as f64;
        let ln_term = ln_gamma((2.0 * kk + 1.0) / alpha) - ln_gamma(2.0 * kk + 1.0) + 2.0 * kk * x.ln().max(-700.0);
        let term = ln_term.exp();
        if k == 0 {
            sum += gamma(1.0 / alpha);
        } else {
            sum += if k % 2 == 1 { -term } else { term };
            if term < 1e-17 * sum.abs() {
                break;
            }
        }
    }
    sum / (PI * alpha)
}

/// Leading terms of the large-`x` expansion.
fn stable_pdf_tail(alpha: f64, x: f64) -> f64 {
    let mut s = 0.0;
    for k in 1..=4 {
        let kk = k as f64;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        s += sign * gamma(kk * alpha + 1.0) / gamma(kk + 1.0) * (kk * PI * alpha / 2.0).sin() * x.powf(-kk * alpha - 1.0);
    }
    s / PI
}

fn stable_sf_tail(alpha: f64, x: f64) -> f64 {
    let mut s = 0.0;
    for k in 1..=4 {
        let kk = k as f64;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        s += sign * gamma(kk * alpha) / gamma(kk + 1.0) * (kk * PI * alpha / 2.0).sin() * x.powf(-kk * alpha);
    }
    s / PI
}

/// Angles where `ln g(theta)` crosses a few levels around 0; the integrands
/// concentrate there for large `|x|`, so they serve as quadrature breaks.
fn peak_breaks(alpha: f64, lx: f64) -> Vec<f64> {
    let lg = |th: f64| lx + ln_v(alpha, th);
    let decreasing = alpha > 1.0;
    [-6.0, -2.0, 0.0, 2.0, 4.0]
        .iter()
        .map(|&level| {
            let (mut lo, mut hi) = (0.0, FRAC_PI_2);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if (lg(mid) > level) == decreasing {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

fn ln_v(alpha: f64, theta: f64) -> f64 {
    let e = alpha / (alpha - 1.0);
    e * (theta.cos().ln() - (alpha * theta).sin().ln()) + ((alpha - 1.0) * theta).cos().ln() - theta.cos().ln()
}

/// Density by the Zolotarev integral (series near the origin when `alpha > 1`).
pub fn stable_pdf_direct(alpha: f64, x: f64) -> f64 {
    let x = x.abs();
    if alpha == 1.0 {
        return 1.0 / (PI * (1.0 + x * x));
    }
    if alpha == 2.0 {
        return (-x * x / 4.0).exp() / (4.0 * PI).sqrt();
    }
    if x == 0.0 || (alpha < 1.0 && x < 1e-300) {
        return gamma(1.0 + 1.0 / alpha) / PI;
    }
    if alpha > 1.0 && x <= 1.0 {
        return pdf_series_origin(alpha, x);
    }
    let e = alpha / (alpha - 1.0);
    let lx = e * x.ln();
    let g = |th: f64| {
        let lg = lx + ln_v(alpha, th);
        if lg > 700.0 {
            return 0.0;
        }
        let gv = lg.exp();
        gv * (-gv).exp()
    };
    let r = integrate_with_breaks(g, 0.0, FRAC_PI_2, &peak_breaks(alpha, lx), 1e-300, 1e-11);
    // g e^{-g} is integrated, so the x^{1/(alpha-1)} prefactor becomes 1/x.
    alpha * r.value / (PI * (alpha - 1.0).abs() * x)
}

pub fn stable_cdf_direct(alpha: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let ax = x.abs();
    let upper = if alpha == 1.0 {
        0.5 + ax.atan() / PI
    } else if alpha == 2.0 {
        0.5 * (1.0 + statrs::function::erf::erf(ax / 2.0))
    } else if alpha > 1.0 && ax <= 1.0 {
        // Integrate the origin series termwise.
        let mut sum = 0.0;
        for k in 0..80 {
            let kk = k as f64;
            let ln_term = ln_gamma((2.0 * kk + 1.0) / alpha) - ln_gamma(2.0 * kk + 1.0) + (2.0 * kk + 1.0) * ax.ln()
                - (2.0 * kk + 1.0).ln();
            let term = ln_term.exp();
            sum += if k % 2 == 1 { -term } else { term };
            if k > 0 && term < 1e-17 * sum.abs() {
                break;
            }
        }
        0.5 + sum / (PI * alpha)
    } else {
        let e = alpha / (alpha - 1.0);
        let lx = e * ax.ln();
        let h = |th: f64| {
            let lg = lx + ln_v(alpha, th);
            if lg > 700.0 {
                0.0
            } else {
                (-lg.exp()).exp()
            }
        };
        let r = integrate_with_breaks(h, 0.0, FRAC_PI_2, &peak_breaks(alpha, lx), 1e-300, 1e-12).value / PI;
        if alpha > 1.0 {
            1.0 - r
        } else {
            0.5 + r
        }
    };
    if x > 0.0 {
        upper
    } else {
        1.0 - upper
    }
}

/// Chambers-Mallows-Stuck draw of the standard symmetric stable law.
pub fn sample_cms<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u = PI * (rng.gen::<f64>() - 0.5);
    let w = -(1.0 - rng.gen::<f64>()).ln();
    if alpha == 1.0 {
        return u.tan();
    }
    (alpha * u).sin() / u.cos().powf(1.0 / alpha) * ((u - alpha * u).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Positive stable draw with Laplace transform `exp(-s^a)`, `0 < a < 1` (Kanter).
pub fn sample_positive_stable<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let u = PI * rng.gen::<f64>().max(1e-300);
    let w = -(1.0 - rng.gen::<f64>()).ln();
    let zol = ((a * u).sin().powf(a) * ((1.0 - a) * u).sin().powf(1.0 - a) / u.sin()).powf(1.0 / (1.0 - a));
    (zol / w).powf((1.0 - a) / a)
}

/// Isotropic standard stable vector in `R^2`, `E exp(i xi.X) = exp(-|xi|^alpha)`.
pub fn sample_isotropic_2d<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> [f64; 2] {
    let sub = if alpha == 2.0 { 1.0 } else { sample_positive_stable(alpha / 2.0, rng) };
    let scale = (2.0 * sub).sqrt();
    let g: [f64; 2] = [rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)];
    [scale * g[0], scale * g[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, integrate_with_breaks};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    // Independent Fourier inversion: (1/pi) int_0^inf exp(-xi^alpha) cos(x xi) dxi.
    fn fourier_pdf(alpha: f64, x: f64) -> f64 {
        let cut = 40f64.powf(1.0 / alpha);
        let breaks: Vec<f64> = (1..400).map(|k| k as f64 * cut / 400.0).collect();
        integrate_with_breaks(|xi: f64| (-xi.powf(alpha)).exp() * (x * xi).cos(), 0.0, cut, &breaks, 1e-15, 1e-13)
            .value
            / PI
    }

    #[test]
    fn density_matches_fourier_inversion() {
        for &alpha in &[0.5, 0.8, 1.2, 1.5, 1.9] {
            let t = StableStd::get(alpha);
            for &x in &[0.0, 0.05, 0.7, 1.0, 1.3, 3.0, 8.0] {
                let f = fourier_pdf(alpha, x);
                assert_relative_eq!(t.pdf(x), f, max_relative = 2e-6, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn origin_value_and_limits() {
        let t = StableStd::get(1.5);
        assert_relative_eq!(t.pdf(0.0), gamma(1.0 + 1.0 / 1.5) / PI, epsilon = 1e-14);
        assert_relative_eq!(t.pdf(1e5), stable_pdf_tail(1.5, 1e5), max_relative = 1e-8);
        assert_relative_eq!(t.cdf(0.0), 0.5, epsilon = 1e-14);
        assert!(t.cdf(1e6) > 0.999_999);
    }

    #[test]
    fn cdf_integrates_pdf() {
        for &alpha in &[0.7, 1.5] {
            let t = StableStd::get(alpha);
            for &x in &[0.3, 1.0, 2.5, 20.0] {
                let direct = 0.5 + integrate(|y| stable_pdf_direct(alpha, y), 0.0, x, 1e-14, 1e-11).value;
                assert_relative_eq!(t.cdf(x), direct, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn interpolation_is_smooth_between_nodes() {
        let t = StableStd::get(1.5);
        for &x in &[0.137, 2.718, 41.3, 512.7] {
            assert_relative_eq!(t.pdf(x), stable_pdf_direct(1.5, x), max_relative = 1e-7);
        }
    }

    #[test]
    fn isotropic_2d_characteristic_function() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let xi = [0.6, -0.8];
        let mut acc = 0.0;
        for _ in 0..n {
            let x = sample_isotropic_2d(1.5, &mut rng);
            acc += (xi[0] * x[0] + xi[1] * x[1]).cos();
        }
        assert!((acc / n as f64 - (-1.0f64).exp()).abs() < 0.006);
    }
}
