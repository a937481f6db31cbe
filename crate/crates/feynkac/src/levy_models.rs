//! Levy measures and Levy-type models: the symbol bounds `q^U`, `q^L`,
//! the radial majorant `q*`, the scale function `rho_t`, structural
//! condition checks and exact or approximate increment samplers.
//!
//! Models live in dimension 1 or 2. Points are stored as `[f64; 2]`; in
//! dimension 1 only the first component is used.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use sha2::{Digest, Sha256};
use statrs::function::gamma::gamma;

use crate::error::{FkError, Result};
use crate::quadrature::{graded_to_zero, integrate, integrate_with_breaks};
use crate::stable;

pub type Point = [f64; 2];
pub type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;
pub type CoefFn = Arc<dyn Fn(&Point, &Point) -> f64 + Send + Sync>;

fn dot(a: &Point, b: &Point, dim: usize) -> f64 {
    a[..dim].iter().zip(&b[..dim]).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &Point, dim: usize) -> f64 {
    if dim == 1 {
        a[0].abs()
    } else {
        a[0].hypot(a[1])
    }
}

/// Surface measure of the unit sphere in dimension 1 or 2.
pub fn sphere_area(dim: usize) -> f64 {
    if dim == 1 {
        2.0
    } else {
        2.0 * PI
    }
}

/// Volume of the unit ball in dimension 1 or 2.
pub fn ball_volume(dim: usize) -> f64 {
    if dim == 1 {
        2.0
    } else {
        PI
    }
}

/// `E[min((a cos T)^2, 1)]` for `T` uniform on the unit sphere.
fn shell_upper(dim: usize, a: f64) -> f64 {
    if dim == 1 {
        return (a * a).min(1.0);
    }
    if a <= 1.0 {
        return 0.5 * a * a;
    }
    let th0 = (1.0 / a).acos();
    (2.0 / PI) * (th0 + a * a * (PI / 4.0 - th0 / 2.0 - (2.0 * th0).sin() / 4.0))
}

/// `E[(a cos T)^2 ; |a cos T| <= 1]`.
fn shell_lower(dim: usize, a: f64) -> f64 {
    if dim == 1 {
        return if a <= 1.0 { a * a } else { 0.0 };
    }
    if a <= 1.0 {
        return 0.5 * a * a;
    }
    let th0 = (1.0 / a).acos();
    (2.0 / PI) * a * a * (PI / 4.0 - th0 / 2.0 - (2.0 * th0).sin() / 4.0)
}

/// `E[1 - cos(a cos T)]`.
fn shell_cos(dim: usize, a: f64) -> f64 {
    if dim == 1 {
        2.0 * (0.5 * a).sin().powi(2)
    } else {
        one_minus_j0(a)
    }
}

/// `1 - J_0(x)`; power series below 4, rational approximation above.
pub fn one_minus_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 4.0 {
        let q = ax * ax / 4.0;
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 1..60 {
            term *= -q / (k * k) as f64;
            sum -= term;
            if term.abs() < 1e-18 {
                break;
            }
        }
        return sum;
    }
    let z = 8.0 / ax;
    let y = z * z;
    let xx = ax - 0.785_398_164;
    let a1 = 1.0 + y * (-0.109_862_862_7e-2 + y * (0.273_451_040_7e-4 + y * (-0.207_337_063_9e-5 + y * 0.209_388_721_1e-6)));
    let a2 = -0.156_249_999_5e-1 + y * (0.143_048_876_5e-3 + y * (-0.691_114_765_1e-5 + y * (0.762_109_516_1e-6 - y * 0.934_935_152e-7)));
    1.0 - (0.636_619_772 / ax).sqrt() * (xx.cos() * a1 - z * xx.sin() * a2)
}

/// `E|cos T|^alpha` over the unit sphere.
fn mean_abs_cos_pow(dim: usize, alpha: f64) -> f64 {
    if dim == 1 {
        1.0
    } else {
        gamma((alpha + 1.0) / 2.0) / (PI.sqrt() * gamma(alpha / 2.0 + 1.0))
    }
}

#[derive(Clone)]
pub enum LevyMeasure {
    /// No jumps.
    Zero { dim: usize },
    /// Density `intensity * |u|^{-dim-alpha}`.
    Stable { alpha: f64, intensity: f64, dim: usize },
    /// Shells of radius `2^{-k upsilon}` carrying mass `2^{k gamma}`; in
    /// dimension 1 each of the two atoms of a shell carries `2^{k gamma}`.
    DiscretizedStable { gamma: f64, upsilon: f64, k_min: i32, k_max: i32, dim: usize },
    Atoms { dim: usize, atoms: Vec<(Point, f64)> },
    /// Isotropic density `f(|u|)` supported in `|u| <= truncation`.
    Radial { dim: usize, f: DensityFn, truncation: f64, label: String },
    /// One-dimensional density `f(u)` supported in `|u| <= truncation`.
    Density1D { f: DensityFn, truncation: f64, label: String },
}

impl fmt::Debug for LevyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl LevyMeasure {
    pub fn stable(alpha: f64, intensity: f64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if !(alpha > 0.0 && alpha < 2.0) || intensity <= 0.0 {
            return Err(FkError::InvalidParameter(format!("stable measure needs 0 < alpha < 2 and intensity > 0, got ({alpha}, {intensity})")));
        }
        Ok(LevyMeasure::Stable { alpha, intensity, dim })
    }

    /// Stable measure normalised so that the symbol is `|xi|^alpha`.
    pub fn stable_unit(alpha: f64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let intensity = 1.0 / stable_symbol_factor(alpha, 1.0, dim);
        Self::stable(alpha, intensity, dim)
    }

    /// Discretized stable measure. `range` defaults to the wider of
    /// `[-20, 60]` and the range whose neglected shells contribute less
    /// than `1e-8` to `int (|u|^2 ^ 1) mu(du)`.
    pub fn discretized_stable(gamma: f64, upsilon: f64, dim: usize, range: Option<(i32, i32)>) -> Result<Self> {
        check_dim(dim)?;
        if !(gamma > 0.0 && upsilon > 0.0) {
            return Err(FkError::InvalidParameter("gamma and upsilon must be positive".into()));
        }
        if gamma >= 2.0 * upsilon {
            return Err(FkError::InvalidParameter(format!("gamma = {gamma} must be below 2 upsilon = {}", 2.0 * upsilon)));
        }
        let (k_min, k_max) = match range {
            Some(r) => r,
            None => default_shell_range(gamma, upsilon, dim),
        };
        if k_min > k_max {
            return Err(FkError::InvalidParameter("empty shell range".into()));
        }
        Ok(LevyMeasure::DiscretizedStable { gamma, upsilon, k_min, k_max, dim })
    }

    pub fn atoms(dim: usize, atoms: Vec<(Point, f64)>) -> Result<Self> {
        check_dim(dim)?;
        if atoms.iter().any(|(p, w)| *w < 0.0 || norm(p, dim) == 0.0) {
            return Err(FkError::InvalidParameter("atoms need non-negative mass away from the origin".into()));
        }
        Ok(LevyMeasure::Atoms { dim, atoms })
    }

    pub fn dim(&self) -> usize {
        match self {
            LevyMeasure::Zero { dim }
            | LevyMeasure::Stable { dim, .. }
            | LevyMeasure::DiscretizedStable { dim, .. }
            | LevyMeasure::Atoms { dim, .. }
            | LevyMeasure::Radial { dim, .. } => *dim,
            LevyMeasure::Density1D { .. } => 1,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            LevyMeasure::Zero { dim } => format!("zero(dim={dim})"),
            LevyMeasure::Stable { alpha, intensity, dim } => format!("stable(alpha={alpha},c={intensity},dim={dim})"),
            LevyMeasure::DiscretizedStable { gamma, upsilon, k_min, k_max, dim } => {
                format!("discretized_stable(gamma={gamma},upsilon={upsilon},k=[{k_min},{k_max}],dim={dim})")
            }
            LevyMeasure::Atoms { dim, atoms } => format!("atoms(dim={dim},{atoms:?})"),
            LevyMeasure::Radial { dim, truncation, label, .. } => format!("radial({label},R={truncation},dim={dim})"),
            LevyMeasure::Density1D { truncation, label, .. } => format!("density1d({label},R={truncation})"),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            LevyMeasure::Atoms { dim, atoms } => atoms.iter().all(|(p, w)| {
                atoms.iter().any(|(q, v)| (0..*dim).all(|i| (p[i] + q[i]).abs() < 1e-12) && (w - v).abs() <= 1e-12 * w.abs().max(1.0))
            }),
            LevyMeasure::Density1D { f, truncation, .. } => {
                let r = *truncation;
                (1..=64).all(|i| {
                    let u = r * i as f64 / 65.0;
                    (f(u) - f(-u)).abs() <= 1e-10 * f(u).abs().max(1e-300)
                })
            }
            _ => true,
        }
    }

    fn shells(&self) -> Option<Vec<(f64, f64)>> {
        if let LevyMeasure::DiscretizedStable { gamma, upsilon, k_min, k_max, dim } = self {
            let per = if *dim == 1 { 2.0 } else { 1.0 };
            Some(
                (*k_min..=*k_max)
                    .map(|k| (2f64.powf(-(k as f64) * upsilon), per * 2f64.powf(k as f64 * gamma)))
                    .collect(),
            )
        } else {
            None
        }
    }

    /// Total mass of `(|u|^2 ^ 1) mu(du)` neglected by the shell truncation.
    pub fn truncation_tail(&self) -> f64 {
        match self {
            LevyMeasure::DiscretizedStable { gamma, upsilon, k_min, k_max, dim } => {
                shell_tail(*gamma, *upsilon, *dim, *k_min, *k_max)
            }
            _ => 0.0,
        }
    }

    /// `int (|u|^2 ^ 1) mu(du)`, which must be finite for a Levy measure.
    pub fn levy_integral(&self) -> f64 {
        let dim = self.dim();
        match self {
            LevyMeasure::Zero { .. } => 0.0,
            LevyMeasure::Stable { alpha, intensity, dim } => intensity * sphere_area(*dim) * (1.0 / (2.0 - alpha) + 1.0 / alpha),
            LevyMeasure::DiscretizedStable { .. } => self.shells().unwrap().iter().map(|(r, w)| w * (r * r).min(1.0)).sum(),
            LevyMeasure::Atoms { atoms, .. } => atoms.iter().map(|(p, w)| w * dot(p, p, dim).min(1.0)).sum(),
            LevyMeasure::Radial { f, truncation, .. } => {
                radial_integral(f, dim, *truncation, |r| (r * r).min(1.0), &[1.0])
            }
            LevyMeasure::Density1D { f, truncation, .. } => {
                let g = |u: f64| f(u) * (u * u).min(1.0);
                two_sided(&g, *truncation, &[1.0])
            }
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 1 || dim == 2 {
        Ok(())
    } else {
        Err(FkError::UnsupportedModel(format!("dimension {dim}; only 1 and 2 are implemented")))
    }
}

fn shell_tail(gamma: f64, upsilon: f64, dim: usize, k_min: i32, k_max: i32) -> f64 {
    let per = if dim == 1 { 2.0 } else { 1.0 };
    // Shells below k_min have radius >= 1 once k_min <= 0.
    let low = if k_min <= 0 { 2f64.powf((k_min - 1) as f64 * gamma) / (1.0 - 2f64.powf(-gamma)) } else { f64::INFINITY };
    let rate = gamma - 2.0 * upsilon;
    let high = 2f64.powf((k_max + 1) as f64 * rate) / (1.0 - 2f64.powf(rate));
    per * (low + high)
}

fn default_shell_range(gamma: f64, upsilon: f64, dim: usize) -> (i32, i32) {
    let (mut lo, mut hi) = (-20, 60);
    while shell_tail(gamma, upsilon, dim, lo, hi) >= 1e-8 {
        let per = if dim == 1 { 2.0 } else { 1.0 };
        let low = per * 2f64.powf((lo - 1) as f64 * gamma) / (1.0 - 2f64.powf(-gamma));
        if low >= 0.5e-8 {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    (lo, hi)
}

/// Symbol factor `s` with `psi(xi) = s |xi|^alpha` for a stable measure.
fn stable_symbol_factor(alpha: f64, intensity: f64, dim: usize) -> f64 {
    let radial = if (alpha - 1.0).abs() < 1e-15 { PI / 2.0 } else { PI / (2.0 * gamma(1.0 + alpha) * (PI * alpha / 2.0).sin()) };
    intensity * sphere_area(dim) * mean_abs_cos_pow(dim, alpha) * radial
}

/// `|S| int_0^R f(r) r^{dim-1} g(r) dr` with graded panels at the origin.
fn radial_integral<G: Fn(f64) -> f64>(f: &DensityFn, dim: usize, r_max: f64, g: G, breaks: &[f64]) -> f64 {
    let h = |r: f64| f(r) * r.powi(dim as i32 - 1) * g(r);
    let first = breaks.iter().copied().filter(|&b| b > 0.0 && b < r_max).fold(r_max, f64::min).min(r_max);
    let inner = graded_to_zero(h, first, 80).value;
    sphere_area(dim) * (inner + log_outer(&h, first, r_max, breaks))
}

/// `int_a^b h(r) dr` computed in the variable `ln r`.
fn log_outer<H: Fn(f64) -> f64>(h: &H, a: f64, b: f64, breaks: &[f64]) -> f64 {
    if a >= b {
        return 0.0;
    }
    let lb: Vec<f64> = breaks.iter().filter(|&&x| x > a && x < b).map(|x| x.ln()).collect();
    integrate_with_breaks(|s: f64| { let r = s.exp(); h(r) * r }, a.ln(), b.ln(), &lb, 1e-300, 1e-11).value
}

fn two_sided<G: Fn(f64) -> f64>(g: &G, r_max: f64, breaks: &[f64]) -> f64 {
    let one = |s: f64| {
        let h = |u: f64| g(s * u);
        let first = breaks.iter().copied().filter(|&b| b > 0.0 && b < r_max).fold(r_max, f64::min);
        let inner = graded_to_zero(h, first, 80).value;
        inner + log_outer(&h, first, r_max, breaks)
    };
    one(1.0) + one(-1.0)
}

#[derive(Clone)]
pub enum Drift {
    Constant(Point),
    Field(FieldFn),
}

#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// Variable intensity `m(x, u)` with declared bounds and Holder data.
    Field { m: CoefFn, b1: f64, b2: f64, holder_gamma: f64, b4: f64, symmetric: bool },
}

/// Levy-type model: measure `mu`, drift `a`, intensity coefficient `m`,
/// optional Gaussian part with covariance `gaussian_variance * I`.
#[derive(Clone)]
pub struct LevyModel {
    pub measure: LevyMeasure,
    pub drift: Drift,
    pub coefficient: Coefficient,
    pub gaussian_variance: f64,
}

impl fmt::Debug for LevyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl LevyModel {
    /// Builds a model and validates the structural conditions; a model whose
    /// symbol ratio exceeds 2 must be driftless and symmetric.
    pub fn new(measure: LevyMeasure, drift: Drift, coefficient: Coefficient, gaussian_variance: f64) -> Result<Self> {
        if gaussian_variance < 0.0 {
            return Err(FkError::InvalidParameter("negative Gaussian variance".into()));
        }
        let li = measure.levy_integral();
        if !li.is_finite() {
            return Err(FkError::InvalidParameter("measure does not integrate |u|^2 ^ 1".into()));
        }
        let model = LevyModel { measure, drift, coefficient, gaussian_variance };
        model.check_a2(&[[0.0, 0.0], [1.0, -0.5], [-2.0, 3.0]])?;
        if li > 0.0 {
            let a1 = check_a1(&model, 1.0, 16);
            if a1.satisfied && a1.beta_hat > 2.0 {
                let driftless = match &model.drift {
                    Drift::Constant(a) => a.iter().all(|v| *v == 0.0),
                    Drift::Field(_) => false,
                };
                let sym_coef = match &model.coefficient {
                    Coefficient::Constant(_) => true,
                    Coefficient::Field { symmetric, .. } => *symmetric,
                };
                if !(driftless && sym_coef && model.measure.is_symmetric()) {
                    return Err(FkError::InvalidParameter(format!(
                        "symbol ratio {:.3} > 2 requires zero drift and a symmetric kernel",
                        a1.beta_hat
                    )));
                }
            }
        }
        Ok(model)
    }

    /// Pure jump model with zero drift and unit intensity.
    pub fn pure_jump(measure: LevyMeasure) -> Result<Self> {
        Self::new(measure, Drift::Constant([0.0; 2]), Coefficient::Constant(1.0), 0.0)
    }

    /// Brownian motion with covariance `variance * I`.
    pub fn brownian(dim: usize, variance: f64) -> Result<Self> {
        check_dim(dim)?;
        Self::new(LevyMeasure::Zero { dim }, Drift::Constant([0.0; 2]), Coefficient::Constant(1.0), variance)
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    pub fn describe(&self) -> String {
        let drift = match &self.drift {
            Drift::Constant(a) => format!("{a:?}"),
            Drift::Field(_) => "field".into(),
        };
        let coef = match &self.coefficient {
            Coefficient::Constant(c) => format!("{c}"),
            Coefficient::Field { b1, b2, .. } => format!("field[{b1},{b2}]"),
        };
        format!("{};drift={drift};m={coef};sigma2={}", self.measure.describe(), self.gaussian_variance)
    }

    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn constant_parts(&self) -> Result<(Point, f64)> {
        let a = match &self.drift {
            Drift::Constant(a) => *a,
            Drift::Field(_) => return Err(FkError::UnsupportedModel("state-dependent drift".into())),
        };
        let m = match &self.coefficient {
            Coefficient::Constant(m) => *m,
            Coefficient::Field { .. } => return Err(FkError::UnsupportedModel("state-dependent coefficient".into())),
        };
        Ok((a, m))
    }

    pub fn is_translation_invariant(&self) -> bool {
        self.constant_parts().is_ok()
    }

    /// Characteristic exponent, `E exp(i xi.X_t) = exp(-t psi(xi))`.
    pub fn psi(&self, xi: &Point) -> Result<Complex64> {
        let (a, m) = self.constant_parts()?;
        let dim = self.dim();
        let k = norm(xi, dim);
        let gauss = 0.5 * self.gaussian_variance * k * k;
        let drift = Complex64::new(0.0, -dot(&a, xi, dim));
        let jump: Complex64 = match &self.measure {
            LevyMeasure::Zero { .. } => Complex64::new(0.0, 0.0),
            LevyMeasure::Stable { alpha, intensity, dim } => {
                Complex64::new(stable_symbol_factor(*alpha, *intensity, *dim) * k.powf(*alpha), 0.0)
            }
            LevyMeasure::DiscretizedStable { .. } => {
                let s: f64 = self.measure.shells().unwrap().iter().map(|(r, w)| w * shell_cos(dim, k * r)).sum();
                Complex64::new(s, 0.0)
            }
            LevyMeasure::Atoms { atoms, .. } => atoms
                .iter()
                .map(|(u, w)| {
                    let p = dot(xi, u, dim);
                    let comp = if norm(u, dim) <= 1.0 { p } else { 0.0 };
                    Complex64::new(w * (1.0 - p.cos()), w * (comp - p.sin()))
                })
                .sum(),
            LevyMeasure::Radial { f, truncation, .. } => {
                let brk = oscillation_breaks(k, *truncation);
                Complex64::new(radial_integral(f, dim, *truncation, |r| shell_cos(dim, k * r), &brk), 0.0)
            }
            LevyMeasure::Density1D { f, truncation, .. } => {
                let x = xi[0];
                let brk = oscillation_breaks(x.abs(), *truncation);
                let re = two_sided(&|u: f64| f(u) * (1.0 - (x * u).cos()), *truncation, &brk);
                let im = two_sided(
                    &|u: f64| f(u) * (if u.abs() <= 1.0 { x * u } else { 0.0 } - (x * u).sin()),
                    *truncation,
                    &brk,
                );
                Complex64::new(re, im)
            }
        };
        Ok(drift + gauss + m * jump)
    }

    /// Structural bounds on `m` and `a` from probe points: returns
    /// `(b1, b2, b3)` or an error if `m` is not bounded away from 0.
    pub fn check_a2(&self, probes: &[Point]) -> Result<(f64, f64, f64)> {
        let dim = self.dim();
        let (b1, b2) = match &self.coefficient {
            Coefficient::Constant(m) => (*m, *m),
            Coefficient::Field { m, b1, b2, .. } => {
                for x in probes {
                    for u in probes {
                        let v = m(x, u);
                        if !(v >= *b1 && v <= *b2) {
                            return Err(FkError::InvalidParameter(format!("coefficient {v} at {x:?},{u:?} leaves [{b1},{b2}]")));
                        }
                    }
                }
                (*b1, *b2)
            }
        };
        if !(b1 > 0.0 && b2.is_finite()) {
            return Err(FkError::InvalidParameter(format!("coefficient bounds [{b1}, {b2}] are not admissible")));
        }
        let b3 = match &self.drift {
            Drift::Constant(a) => norm(a, dim),
            Drift::Field(a) => probes.iter().map(|x| norm(&a(x), dim)).fold(0.0, f64::max),
        };
        Ok((b1, b2, b3))
    }

    /// Declared Holder data `(gamma, b4)` of `m`; constant coefficients are
    /// trivially Holder with `b4 = 0`.
    pub fn check_a3(&self) -> Result<(f64, f64)> {
        match &self.coefficient {
            Coefficient::Constant(_) => Ok((1.0, 0.0)),
            Coefficient::Field { holder_gamma, b4, .. } => {
                if *holder_gamma > 0.0 && *holder_gamma <= 1.0 && *b4 >= 0.0 && b4.is_finite() {
                    Ok((*holder_gamma, *b4))
                } else {
                    Err(FkError::InvalidParameter("Holder exponent must lie in (0, 1] with finite constant".into()))
                }
            }
        }
    }
}

fn oscillation_breaks(k: f64, r_max: f64) -> Vec<f64> {
    if k == 0.0 {
        return vec![];
    }
    let period = 2.0 * PI / k;
    let n = ((r_max / period).ceil() as usize).min(4000);
    let mut b: Vec<f64> = (1..=n).map(|i| i as f64 * period).filter(|&r| r < r_max).collect();
    b.insert(0, 1.0 / k);
    b
}

/// `q^U(xi) = int min((xi.u)^2, 1) mu(du)`.
pub fn q_upper(model: &LevyModel, xi: &Point) -> f64 {
    q_generic(model, xi, true)
}

/// `q^L(xi) = int_{|xi.u| <= 1} (xi.u)^2 mu(du)`.
pub fn q_lower(model: &LevyModel, xi: &Point) -> f64 {
    q_generic(model, xi, false)
}

fn q_generic(model: &LevyModel, xi: &Point, upper: bool) -> f64 {
    let dim = model.dim();
    let k = norm(xi, dim);
    if k == 0.0 {
        return 0.0;
    }
    let shell = |a: f64| if upper { shell_upper(dim, a) } else { shell_lower(dim, a) };
    match &model.measure {
        LevyMeasure::Zero { .. } => 0.0,
        LevyMeasure::Stable { alpha, intensity, dim } => {
            let tail = if upper { 1.0 / alpha } else { 0.0 };
            intensity * sphere_area(*dim) * mean_abs_cos_pow(*dim, *alpha) * k.powf(*alpha) * (1.0 / (2.0 - alpha) + tail)
        }
        LevyMeasure::DiscretizedStable { .. } => model.measure.shells().unwrap().iter().map(|(r, w)| w * shell(k * r)).sum(),
        LevyMeasure::Atoms { atoms, .. } => atoms
            .iter()
            .map(|(u, w)| {
                let p = dot(xi, u, dim).powi(2);
                if p <= 1.0 {
                    w * p
                } else if upper {
                    *w
                } else {
                    0.0
                }
            })
            .sum(),
        LevyMeasure::Radial { f, truncation, .. } => radial_integral(f, dim, *truncation, |r| shell(k * r), &[1.0 / k]),
        LevyMeasure::Density1D { f, truncation, .. } => {
            let x = xi[0];
            let g = |u: f64| {
                let p = (x * u).powi(2);
                f(u) * if p <= 1.0 {
                    p
                } else if upper {
                    1.0
                } else {
                    0.0
                }
            };
            two_sided(&g, *truncation, &[1.0 / k])
        }
    }
}

fn is_isotropic(m: &LevyMeasure) -> bool {
    matches!(m, LevyMeasure::Stable { .. } | LevyMeasure::DiscretizedStable { .. } | LevyMeasure::Radial { .. } | LevyMeasure::Zero { .. })
}

fn directions(dim: usize, count: usize) -> Vec<Point> {
    if dim == 1 {
        return vec![[1.0, 0.0], [-1.0, 0.0]];
    }
    (0..count)
        .map(|i| {
            let th = 2.0 * PI * i as f64 / count as f64;
            [th.cos(), th.sin()]
        })
        .collect()
}

/// `q*(r) = sup_{|l| = 1} q^U(r l)`; 64 directions in dimension 2.
pub fn q_star(model: &LevyModel, r: f64) -> f64 {
    if is_isotropic(&model.measure) {
        return q_upper(model, &[r, 0.0]);
    }
    directions(model.dim(), 64).iter().map(|l| q_upper(model, &[r * l[0], r * l[1]])).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct A1Report {
    pub satisfied: bool,
    pub beta_hat: f64,
    pub offending_r: Option<f64>,
    /// `(r, sup q^U / inf q^L)` per probed radius.
    pub ratios: Vec<(f64, f64)>,
}

/// Probes `sup_l q^U(r l) <= beta inf_l q^L(r l)` on `max(probe_count, 16)`
/// radii log-spaced in `[r_min, 1e3 r_min]` and at least 8 directions.
pub fn check_a1(model: &LevyModel, r_min: f64, probe_count: usize) -> A1Report {
    let dim = model.dim();
    let radii = crate::quadrature::geomspace(r_min, 1e3 * r_min, probe_count.max(16));
    let dirs = directions(dim, 16);
    let mut ratios = Vec::with_capacity(radii.len());
    let mut offending = None;
    let mut beta: f64 = 1.0;
    for &r in &radii {
        let mut up: f64 = 0.0;
        let mut lo = f64::INFINITY;
        for l in &dirs {
            let xi = [r * l[0], r * l[1]];
            up = up.max(q_upper(model, &xi));
            lo = lo.min(q_lower(model, &xi));
        }
        let ratio = if lo > 0.0 { up / lo } else { f64::INFINITY };
        if !ratio.is_finite() && offending.is_none() {
            offending = Some(r);
        }
        beta = beta.max(ratio);
        ratios.push((r, ratio));
    }
    A1Report { satisfied: offending.is_none(), beta_hat: beta, offending_r: offending, ratios }
}

/// Scale function `rho_t = inf { r : q*(r) = 1/t }`.
#[derive(Clone, Debug)]
pub enum ScaleFunction {
    /// `rho_t = prefactor * t^{-1/alpha}`.
    Power { alpha: f64, prefactor: f64 },
    Numeric(Arc<LevyModel>),
}

impl ScaleFunction {
    /// Closed form for stable and Brownian models, bisection otherwise.
    pub fn for_model(model: &LevyModel) -> ScaleFunction {
        match &model.measure {
            LevyMeasure::Stable { alpha, .. } => {
                let k = q_star(model, 1.0);
                ScaleFunction::Power { alpha: *alpha, prefactor: k.powf(-1.0 / alpha) }
            }
            LevyMeasure::Zero { .. } if model.gaussian_variance > 0.0 => {
                ScaleFunction::Power { alpha: 2.0, prefactor: model.gaussian_variance.sqrt().recip() }
            }
            _ => ScaleFunction::Numeric(Arc::new(model.clone())),
        }
    }

    pub fn power(alpha: f64) -> ScaleFunction {
        ScaleFunction::Power { alpha, prefactor: 1.0 }
    }

    pub fn rho(&self, t: f64) -> Result<f64> {
        match self {
            ScaleFunction::Power { alpha, prefactor } => Ok(prefactor * t.powf(-1.0 / alpha)),
            ScaleFunction::Numeric(model) => rho(model, t),
        }
    }

    pub fn dim_hint(&self) -> Option<usize> {
        match self {
            ScaleFunction::Power { .. } => None,
            ScaleFunction::Numeric(m) => Some(m.dim()),
        }
    }
}

/// Bisection for `rho_t` in `[1e-8, 1e12]` to `|q*(rho) - 1/t| <= 1e-8 / t`.
pub fn rho(model: &LevyModel, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(FkError::InvalidParameter(format!("t = {t} must be positive")));
    }
    let target = 1.0 / t;
    let (mut lo, mut hi) = (1e-8f64, 1e12f64);
    let qlo = q_star(model, lo);
    let qhi = q_star(model, hi);
    if qlo > target || qhi < target {
        return Err(FkError::RhoOutOfRange { t });
    }
    if (qlo - target).abs() <= 1e-8 * target {
        return Ok(lo);
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        let q = q_star(model, mid);
        if (q - target).abs() <= 1e-8 * target {
            // Walk left to the infimum of the level set.
            let (mut a, mut b) = (lo, mid);
            for _ in 0..200 {
                let m = (a * b).sqrt();
                if q_star(model, m) >= target * (1.0 - 1e-8) {
                    b = m;
                } else {
                    a = m;
                }
                if b / a - 1.0 < 1e-14 {
                    break;
                }
            }
            return Ok(b);
        }
        if q < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    Err(FkError::RhoOutOfRange { t })
}

/// Increment sampler over a fixed time step. Stable measures are sampled
/// exactly; other measures use compound Poisson jumps above `eps` and a
/// Gaussian replacement for the jumps below it.
#[derive(Clone)]
pub struct IncrementSampler {
    dim: usize,
    dt: f64,
    drift: Point,
    gauss_chol: [[f64; 2]; 2],
    stable: Option<(f64, f64)>,
    rate: f64,
    big: BigJumps,
    pub eps: f64,
}

#[derive(Clone)]
enum BigJumps {
    None,
    /// Discrete radii (or atoms) with cumulative probabilities.
    Discrete { points: Vec<Point>, cumulative: Vec<f64>, isotropic: bool },
    /// Tabulated cumulative distribution of the jump radius or position.
    Tabulated { nodes: Vec<f64>, cumulative: Vec<f64>, isotropic: bool },
}

struct JumpSplit {
    rate: f64,
    small_cov: [[f64; 2]; 2],
    compensator: Point,
    m3: f64,
}

impl IncrementSampler {
    pub fn new(model: &LevyModel, dt: f64, eps: Option<f64>) -> Result<Self> {
        let (a, m) = model.constant_parts()?;
        let dim = model.dim();
        let eps = match eps {
            Some(e) => e,
            None => default_epsilon(model),
        };
        let sig = model.gaussian_variance;
        let mut cov = [[sig * dt, 0.0], [0.0, if dim == 2 { sig * dt } else { 0.0 }]];
        let mut drift = [a[0] * dt, a[1] * dt];
        let mut stable_part = None;
        let mut rate = 0.0;
        let mut big = BigJumps::None;
        match &model.measure {
            LevyMeasure::Zero { .. } => {}
            LevyMeasure::Stable { alpha, intensity, dim } => {
                let s = m * stable_symbol_factor(*alpha, *intensity, *dim);
                stable_part = Some((*alpha, (s * dt).powf(1.0 / alpha)));
            }
            _ => {
                let split = jump_split(&model.measure, eps);
                rate = m * split.rate;
                for i in 0..2 {
                    drift[i] -= m * dt * split.compensator[i];
                    for j in 0..2 {
                        cov[i][j] += m * dt * split.small_cov[i][j];
                    }
                }
                big = big_jumps(&model.measure, eps)?;
            }
        }
        let l00 = cov[0][0].max(0.0).sqrt();
        let l10 = if l00 > 0.0 { cov[1][0] / l00 } else { 0.0 };
        let l11 = (cov[1][1] - l10 * l10).max(0.0).sqrt();
        Ok(IncrementSampler {
            dim,
            dt,
            drift,
            gauss_chol: [[l00, 0.0], [l10, l11]],
            stable: stable_part,
            rate,
            big,
            eps,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        self.sample_signed(rng, 1.0)
    }

    /// As [`Self::sample`] with the Gaussian component multiplied by
    /// `gauss_sign`; the random stream is consumed identically, so two calls
    /// on equal streams with opposite signs form an antithetic pair.
    pub fn sample_signed<R: Rng + ?Sized>(&self, rng: &mut R, gauss_sign: f64) -> Point {
        let mut x = self.drift;
        let z0: f64 = gauss_sign * rng.sample::<f64, _>(StandardNormal);
        x[0] += self.gauss_chol[0][0] * z0;
        if self.dim == 2 {
            let z1: f64 = gauss_sign * rng.sample::<f64, _>(StandardNormal);
            x[1] += self.gauss_chol[1][0] * z0 + self.gauss_chol[1][1] * z1;
        }
        if let Some((alpha, scale)) = self.stable {
            if self.dim == 1 {
                x[0] += scale * stable::sample_cms(alpha, rng);
            } else {
                let s = stable::sample_isotropic_2d(alpha, rng);
                x[0] += scale * s[0];
                x[1] += scale * s[1];
            }
        }
        if self.rate > 0.0 {
            let lam = self.rate * self.dt;
            let n = if lam > 0.0 { Poisson::new(lam).map(|p| p.sample(rng) as u64).unwrap_or(0) } else { 0 };
            for _ in 0..n {
                let j = self.draw_jump(rng);
                x[0] += j[0];
                x[1] += j[1];
            }
        }
        x
    }

    fn draw_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let u: f64 = rng.gen();
        let (r, isotropic) = match &self.big {
            BigJumps::None => return [0.0; 2],
            BigJumps::Discrete { points, cumulative, isotropic } => {
                let i = cumulative.partition_point(|&c| c < u).min(points.len() - 1);
                if !isotropic {
                    return points[i];
                }
                (points[i][0], true)
            }
            BigJumps::Tabulated { nodes, cumulative, isotropic } => {
                let i = cumulative.partition_point(|&c| c < u).clamp(1, nodes.len() - 1);
                let (c0, c1) = (cumulative[i - 1], cumulative[i]);
                let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
                (nodes[i - 1] + w * (nodes[i] - nodes[i - 1]), *isotropic)
            }
        };
        if !isotropic {
            return [r, 0.0];
        }
        if self.dim == 1 {
            if rng.gen::<bool>() {
                [r, 0.0]
            } else {
                [-r, 0.0]
            }
        } else {
            let th = 2.0 * PI * rng.gen::<f64>();
            [r * th.cos(), r * th.sin()]
        }
    }
}

/// One increment over `dt` (builds a sampler; use [`IncrementSampler`] in loops).
pub fn sample_increment<R: Rng + ?Sized>(model: &LevyModel, dt: f64, rng: &mut R) -> Result<Point> {
    Ok(IncrementSampler::new(model, dt, None)?.sample(rng))
}

fn jump_split(measure: &LevyMeasure, eps: f64) -> JumpSplit {
    let dim = measure.dim();
    let iso = |s2: f64| {
        let v = s2 / dim as f64;
        [[v, 0.0], [0.0, if dim == 2 { v } else { 0.0 }]]
    };
    match measure {
        LevyMeasure::DiscretizedStable { .. } => {
            let shells = measure.shells().unwrap();
            let rate = shells.iter().filter(|(r, _)| *r > eps).map(|(_, w)| w).sum();
            let s2: f64 = shells.iter().filter(|(r, _)| *r <= eps).map(|(r, w)| w * r * r).sum();
            let m3 = shells.iter().filter(|(r, _)| *r <= eps).map(|(r, w)| w * r.powi(3)).sum();
            JumpSplit { rate, small_cov: iso(s2), compensator: [0.0; 2], m3 }
        }
        LevyMeasure::Atoms { atoms, .. } => {
            let mut s = JumpSplit { rate: 0.0, small_cov: [[0.0; 2]; 2], compensator: [0.0; 2], m3: 0.0 };
            for (u, w) in atoms {
                let r = norm(u, dim);
                if r > eps {
                    s.rate += w;
                    if r <= 1.0 {
                        s.compensator[0] += w * u[0];
                        s.compensator[1] += w * u[1];
                    }
                } else {
                    for i in 0..2 {
                        for j in 0..2 {
                            s.small_cov[i][j] += w * u[i] * u[j];
                        }
                    }
                    s.m3 += w * r.powi(3);
                }
            }
            s
        }
        LevyMeasure::Radial { f, truncation, .. } => {
            let r_max = *truncation;
            let e = eps.min(r_max);
            let rate = if e < r_max { sphere_area(dim) * integrate(|r| f(r) * r.powi(dim as i32 - 1), e, r_max, 1e-300, 1e-10).value } else { 0.0 };
            let s2 = sphere_area(dim) * graded_to_zero(|r: f64| f(r) * r.powi(dim as i32 + 1), e, 80).value;
            let m3 = sphere_area(dim) * graded_to_zero(|r: f64| f(r) * r.powi(dim as i32 + 2), e, 80).value;
            JumpSplit { rate, small_cov: iso(s2), compensator: [0.0; 2], m3 }
        }
        LevyMeasure::Density1D { f, truncation, .. } => {
            let r_max = *truncation;
            let e = eps.min(r_max);
            let mut s = JumpSplit { rate: 0.0, small_cov: [[0.0; 2]; 2], compensator: [0.0; 2], m3: 0.0 };
            for sg in [1.0, -1.0] {
                if e < r_max {
                    s.rate += integrate(|u| f(sg * u), e, r_max, 1e-300, 1e-10).value;
                    let top = r_max.min(1.0);
                    if e < top {
                        s.compensator[0] += sg * integrate(|u| u * f(sg * u), e, top, 1e-300, 1e-10).value;
                    }
                }
                s.small_cov[0][0] += graded_to_zero(|u: f64| u * u * f(sg * u), e, 80).value;
                s.m3 += graded_to_zero(|u: f64| u.powi(3) * f(sg * u), e, 80).value;
            }
            s
        }
        LevyMeasure::Zero { .. } | LevyMeasure::Stable { .. } => {
            JumpSplit { rate: 0.0, small_cov: [[0.0; 2]; 2], compensator: [0.0; 2], m3: 0.0 }
        }
    }
}

/// Largest `eps = 2^{-j}` whose neglected third moment is below `1e-3`
/// times the standard deviation of the Gaussian replacement.
pub fn default_epsilon(model: &LevyModel) -> f64 {
    for j in 0..60 {
        let eps = 2f64.powi(-j);
        let s = jump_split(&model.measure, eps);
        let sd = (s.small_cov[0][0] + s.small_cov[1][1]).sqrt();
        if s.m3 <= 1e-3 * sd {
            return eps;
        }
    }
    2f64.powi(-60)
}

fn big_jumps(measure: &LevyMeasure, eps: f64) -> Result<BigJumps> {
    let dim = measure.dim();
    Ok(match measure {
        LevyMeasure::DiscretizedStable { .. } => {
            let shells: Vec<(f64, f64)> = measure.shells().unwrap().into_iter().filter(|(r, _)| *r > eps).collect();
            discrete(shells.iter().map(|(r, w)| ([*r, 0.0], *w)).collect(), true)
        }
        LevyMeasure::Atoms { atoms, .. } => {
            discrete(atoms.iter().filter(|(u, _)| norm(u, dim) > eps).cloned().collect(), false)
        }
        LevyMeasure::Radial { f, truncation, .. } => {
            if eps >= *truncation {
                BigJumps::None
            } else {
                let nodes = crate::quadrature::geomspace(eps, *truncation, 2049);
                tabulate(&nodes, |r| f(r) * r.powi(dim as i32 - 1), true)
            }
        }
        LevyMeasure::Density1D { f, truncation, .. } => {
            if eps >= *truncation {
                BigJumps::None
            } else {
                let pos = crate::quadrature::geomspace(eps, *truncation, 2049);
                // Negative branch mirrored; the gap (-eps, eps) gets zero weight.
                let mut nodes: Vec<f64> = pos.iter().rev().map(|r| -r).collect();
                nodes.extend(pos.iter().copied());
                tabulate(&nodes, |u| if u.abs() < eps { 0.0 } else { f(u) }, false)
            }
        }
        LevyMeasure::Zero { .. } | LevyMeasure::Stable { .. } => BigJumps::None,
    })
}

fn discrete(items: Vec<(Point, f64)>, isotropic: bool) -> BigJumps {
    if items.is_empty() {
        return BigJumps::None;
    }
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    let mut cumulative = Vec::with_capacity(items.len());
    for (_, w) in &items {
        acc += w / total;
        cumulative.push(acc);
    }
    BigJumps::Discrete { points: items.into_iter().map(|(p, _)| p).collect(), cumulative, isotropic }
}

fn tabulate<F: Fn(f64) -> f64>(nodes: &[f64], g: F, isotropic: bool) -> BigJumps {
    let rule = crate::quadrature::gl16();
    let mut cumulative = vec![0.0];
    let mut acc = 0.0;
    let mut gg = |x: f64| g(x);
    for w in nodes.windows(2) {
        acc += crate::quadrature::gl_panel(&mut gg, w[0], w[1], rule);
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return BigJumps::None;
    }
    for c in cumulative.iter_mut() {
        *c /= acc;
    }
    BigJumps::Tabulated { nodes: nodes.to_vec(), cumulative, isotropic }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(m: LevyMeasure) -> LevyModel {
        LevyModel::pure_jump(m).unwrap()
    }

    #[test]
    fn two_atoms_give_half() {
        let m = model(LevyMeasure::atoms(1, vec![([1.0, 0.0], 1.0), ([-1.0, 0.0], 1.0)]).unwrap());
        assert_relative_eq!(q_upper(&m, &[0.5, 0.0]), 0.5, epsilon = 1e-15);
        assert_relative_eq!(q_lower(&m, &[0.5, 0.0]), 0.5, epsilon = 1e-15);
        assert_relative_eq!(q_upper(&m, &[3.0, 0.0]), 2.0, epsilon = 1e-15);
        assert_eq!(q_lower(&m, &[3.0, 0.0]), 0.0);
    }

    // Brute-force Riemann sum on log-spaced nodes over [-1e6, 1e6].
    fn brute_force_stable(alpha: f64, c: f64, xi: f64, upper: bool) -> f64 {
        let n = 10_000_000usize;
        let (lo, hi) = (1e-12f64.ln(), 1e6f64.ln());
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            let u = (lo + (i as f64 + 0.5) * h).exp();
            let p = (xi * u).powi(2);
            let g = if p <= 1.0 { p } else if upper { 1.0 } else { 0.0 };
            s += g * c * u.powf(-1.0 - alpha) * u * h;
        }
        2.0 * s
    }

    #[test]
    fn stable_closed_form_matches_brute_force() {
        let m = model(LevyMeasure::stable(1.5, 0.7, 1).unwrap());
        let qu = q_upper(&m, &[2.0, 0.0]);
        let ql = q_lower(&m, &[2.0, 0.0]);
        assert!((qu / brute_force_stable(1.5, 0.7, 2.0, true) - 1.0).abs() < 1e-4);
        assert!((ql / brute_force_stable(1.5, 0.7, 2.0, false) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn radial_density_matches_stable_closed_form() {
        for dim in [1, 2] {
            let alpha = 1.3;
            let st = model(LevyMeasure::stable(alpha, 1.0, dim).unwrap());
            let f: DensityFn = Arc::new(move |r: f64| r.powf(-(dim as f64) - alpha));
            let rad = model(LevyMeasure::Radial { dim, f, truncation: 1e9, label: "pow".into() });
            for &k in &[0.5, 2.0, 7.0] {
                let xi = [k, 0.0];
                assert_relative_eq!(q_upper(&rad, &xi), q_upper(&st, &xi), max_relative = 1e-6);
                assert_relative_eq!(q_lower(&rad, &xi), q_lower(&st, &xi), max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn shell_averages_match_angular_quadrature() {
        for &a in &[0.3f64, 1.0, 1.7, 25.0] {
            let breaks: Vec<f64> = if a > 1.0 { let t0 = (1.0 / a).acos(); vec![t0, PI - t0, PI + t0, 2.0 * PI - t0] } else { vec![] };
            let up_b = integrate_with_breaks(|t: f64| (a * a * t.cos().powi(2)).min(1.0), 0.0, 2.0 * PI, &breaks, 1e-14, 1e-13).value / (2.0 * PI);
            assert_relative_eq!(shell_upper(2, a), up_b, epsilon = 1e-10);
            let lo_b = integrate_with_breaks(|t: f64| { let p = a * a * t.cos().powi(2); if p <= 1.0 { p } else { 0.0 } }, 0.0, 2.0 * PI, &breaks, 1e-14, 1e-13).value / (2.0 * PI);
            assert_relative_eq!(shell_lower(2, a), lo_b, epsilon = 1e-10);
            let c = integrate(|t: f64| 1.0 - (a * t.cos()).cos(), 0.0, 2.0 * PI, 1e-14, 1e-13).value / (2.0 * PI);
            assert_relative_eq!(shell_cos(2, a), c, epsilon = 2e-8);
        }
    }

    #[test]
    fn unit_stable_symbol() {
        for dim in [1, 2] {
            for &alpha in &[0.6, 1.0, 1.5] {
                let m = model(LevyMeasure::stable_unit(alpha, dim).unwrap());
                let xi = [1.3, if dim == 2 { -0.4 } else { 0.0 }];
                let k = norm(&xi, dim);
                assert_relative_eq!(m.psi(&xi).unwrap().re, k.powf(alpha), max_relative = 1e-12);
            }
        }
        // The Cauchy intensity is 1/pi.
        if let LevyMeasure::Stable { intensity, .. } = LevyMeasure::stable_unit(1.0, 1).unwrap() {
            assert_relative_eq!(intensity, 1.0 / PI, max_relative = 1e-12);
        }
    }

    #[test]
    fn stable_psi_matches_radial_quadrature() {
        let alpha = 1.5;
        let st = model(LevyMeasure::stable(alpha, 1.0, 1).unwrap());
        let f: DensityFn = Arc::new(move |r: f64| r.powf(-1.0 - alpha));
        let rad = model(LevyMeasure::Radial { dim: 1, f, truncation: 1e7, label: "pow".into() });
        let a = st.psi(&[1.7, 0.0]).unwrap().re;
        let b = rad.psi(&[1.7, 0.0]).unwrap().re;
        assert_relative_eq!(a, b, max_relative = 1e-6);
    }

    #[test]
    fn degenerate_planar_measure_fails_a1() {
        let m = model(LevyMeasure::atoms(2, vec![([1.0, 0.0], 1.0), ([-1.0, 0.0], 1.0)]).unwrap());
        let r = check_a1(&m, 0.1, 16);
        assert!(!r.satisfied);
        assert!(r.offending_r.is_some());
    }

    #[test]
    fn discretized_stable_satisfies_a1() {
        let m = model(LevyMeasure::discretized_stable(1.0, 1.0, 1, None).unwrap());
        let r = check_a1(&m, 1.0, 16);
        assert!(r.satisfied && r.beta_hat.is_finite() && r.beta_hat >= 1.0);
        let m2 = model(LevyMeasure::discretized_stable(1.0, 1.0, 2, None).unwrap());
        assert!(check_a1(&m2, 1.0, 16).satisfied);
    }

    #[test]
    fn discretized_stable_construction() {
        assert!(LevyMeasure::discretized_stable(2.0, 1.0, 1, None).is_err());
        let m = LevyMeasure::discretized_stable(1.0, 1.0, 1, Some((0, 0))).unwrap();
        let shells = m.shells().unwrap();
        assert_eq!(shells, vec![(1.0, 2.0)]);
        let d = LevyMeasure::discretized_stable(1.0, 1.0, 1, None).unwrap();
        assert!(d.truncation_tail() < 1e-8);
        if let LevyMeasure::DiscretizedStable { k_min, k_max, .. } = d {
            assert!(k_min <= -20 && k_max >= 60);
        }
    }

    #[test]
    fn q_star_scaling_stable() {
        let m = model(LevyMeasure::stable(1.5, 1.0, 1).unwrap());
        for &r in &[10.0, 30.0, 100.0] {
            let ratio = q_star(&m, 2.0 * r) / q_star(&m, r);
            assert!((ratio / 2f64.powf(1.5) - 1.0).abs() < 0.02);
        }
        let m2 = model(LevyMeasure::stable(1.5, 1.0, 2).unwrap());
        assert_relative_eq!(q_star(&m2, 4.0) / q_star(&m2, 2.0), 2f64.powf(1.5), max_relative = 1e-12);
    }

    #[test]
    fn rho_power_law_slopes() {
        let st = model(LevyMeasure::stable(1.5, 1.0, 1).unwrap());
        let (a, b) = (rho(&st, 1e-3).unwrap(), rho(&st, 1.0).unwrap());
        let slope = (b / a).ln() / (1e3f64).ln();
        assert!((slope + 1.0 / 1.5).abs() < 0.01 / 1.5);
        assert_relative_eq!(q_star(&st, b), 1.0, max_relative = 1e-8);
        let sf = ScaleFunction::for_model(&st);
        assert_relative_eq!(sf.rho(0.3).unwrap(), rho(&st, 0.3).unwrap(), max_relative = 1e-7);
    }

    #[test]
    fn rho_out_of_range_for_finite_measure() {
        let m = model(LevyMeasure::atoms(1, vec![([1.0, 0.0], 1.0), ([-1.0, 0.0], 1.0)]).unwrap());
        assert!(matches!(rho(&m, 0.1), Err(FkError::RhoOutOfRange { .. })));
        assert!(rho(&m, 1.0).is_ok());
    }

    #[test]
    fn a4_rejects_drift_with_large_ratio() {
        let mu = LevyMeasure::stable(0.5, 1.0, 1).unwrap();
        assert!(LevyModel::new(mu.clone(), Drift::Constant([0.2, 0.0]), Coefficient::Constant(1.0), 0.0).is_err());
        assert!(LevyModel::new(mu, Drift::Constant([0.0, 0.0]), Coefficient::Constant(1.0), 0.0).is_ok());
        let asym = LevyMeasure::atoms(1, vec![([1.0, 0.0], 1.0), ([-0.5, 0.0], 3.0)]).unwrap();
        assert!(!asym.is_symmetric());
    }

    #[test]
    fn variable_coefficient_sampling_unsupported() {
        let m = LevyModel::new(
            LevyMeasure::stable(1.5, 1.0, 1).unwrap(),
            Drift::Constant([0.0; 2]),
            Coefficient::Field { m: Arc::new(|x: &Point, _u: &Point| 1.0 + 0.5 * x[0].sin()), b1: 0.5, b2: 1.5, holder_gamma: 1.0, b4: 0.5, symmetric: true },
            0.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_increment(&m, 0.1, &mut rng), Err(FkError::UnsupportedModel(_))));
        assert!(m.check_a3().is_ok());
    }

    #[test]
    fn j0_complement() {
        assert_relative_eq!(one_minus_j0(1.0), 1.0 - 0.765_197_686_557_966_6, epsilon = 1e-14);
        assert_relative_eq!(one_minus_j0(10.0), 1.0 + 0.245_935_764_451_348_3, epsilon = 1e-7);
        assert_relative_eq!(one_minus_j0(1e-3), 0.25e-6, max_relative = 1e-6);
    }

    #[test]
    fn compound_poisson_variance() {
        let m = model(LevyMeasure::discretized_stable(1.0, 1.0, 1, None).unwrap());
        let dt = 0.1;
        let s = IncrementSampler::new(&m, dt, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        // E cos(xi X) = exp(-dt psi(xi)) for symmetric laws.
        let xi = 3.0;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += (xi * s.sample(&mut rng)[0]).cos();
        }
        let expect = (-dt * m.psi(&[xi, 0.0]).unwrap().re).exp();
        assert!((acc / n as f64 - expect).abs() < 0.006, "{} vs {expect}", acc / n as f64);
    }
}
