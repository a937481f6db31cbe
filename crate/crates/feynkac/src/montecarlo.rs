//! Path simulation of `A_t = int_0^t V(X_s) ds` and weighted estimators of
//! `T^A_t f(x) = E^x[e^{A_t} f(X_t)]` and of the density `p^A_t(x, .)`.
//!
//! Every path `i` draws from its own ChaCha8 stream `(seed, i)`, and results
//! are reduced in path order, so estimates do not depend on the worker count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FkError, Result};
use crate::levy_models::{IncrementSampler, LevyModel, Point};
use crate::measures::SignedMeasure;
use crate::quadrature::linear_fit;

#[derive(Debug, Clone, Serialize)]
pub struct PathConfig {
    pub dt: f64,
    pub t: f64,
    /// Number of paths.
    pub m: usize,
    /// Small-jump cutoff; `None` picks the sampler default.
    pub eps: Option<f64>,
    pub seed: u64,
    /// Pairs paths with opposite Gaussian components.
    pub antithetic: bool,
}

impl PathConfig {
    pub fn new(dt: f64, t: f64, m: usize, seed: u64) -> Self {
        PathConfig { dt, t, m, eps: None, seed, antithetic: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.dt > 0.0 && self.dt <= self.t * (1.0 + 1e-12)) {
            return Err(FkError::InvalidParameter(format!("need 0 < dt <= t, got dt = {}, t = {}", self.dt, self.t)));
        }
        if self.m < 1000 {
            return Err(FkError::InvalidParameter(format!("at least 1000 paths are required, got {}", self.m)));
        }
        if self.antithetic && self.m % 2 == 1 {
            return Err(FkError::InvalidParameter("antithetic sampling needs an even path count".into()));
        }
        Ok(())
    }

    /// Step count and the step that divides `t` exactly.
    pub fn steps(&self) -> (usize, f64) {
        let n = (self.t / self.dt - 1e-9).ceil().max(1.0) as usize;
        (n, self.t / n as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FKEstimate {
    pub value: f64,
    pub stderr: f64,
    pub m: usize,
    /// Standard error above the absolute value.
    pub flagged: bool,
    pub notes: String,
}

impl FKEstimate {
    pub fn write_csv<W: Write>(&self, w: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "value,stderr,m,flagged,notes")?;
        }
        writeln!(w, "{:e},{:e},{},{},\"{}\"", self.value, self.stderr, self.m, self.flagged, self.notes)
    }
}

/// Left Riemann sum `dt sum_{i < n} V(path_i)` over a skeleton
/// `path_0 = x, ..., path_n = X_t`.
pub fn additive_functional<V: Fn(&Point) -> f64>(path: &[Point], dt: f64, v: V) -> f64 {
    if path.len() < 2 {
        return 0.0;
    }
    dt * path[..path.len() - 1].iter().map(|p| v(p)).sum::<f64>()
}

/// Pointwise potential of a measure without atoms.
pub fn potential_of(w: &SignedMeasure) -> Result<impl Fn(&Point) -> f64 + Sync + '_> {
    if w.has_atoms() {
        return Err(FkError::UnsupportedModel("point masses have no bounded potential; use the Volterra solver".into()));
    }
    Ok(move |p: &Point| w.density_value(p))
}

/// State of one path at a checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct PathState {
    pub position: Point,
    pub a: f64,
    /// Largest `|V|` seen along the skeleton so far.
    pub v_seen: f64,
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates `cfg.m` paths from `x` and records the state at each step index
/// in `checkpoints` (ascending, at most the final step). Output is
/// `[path][checkpoint]`.
pub fn simulate<V: Fn(&Point) -> f64 + Sync>(model: &LevyModel, v: &V, x: &Point, cfg: &PathConfig, checkpoints: &[usize]) -> Result<Vec<Vec<PathState>>> {
    cfg.validate()?;
    let (n, dt) = cfg.steps();
    if checkpoints.iter().any(|&c| c > n) || checkpoints.windows(2).any(|w| w[1] < w[0]) {
        return Err(FkError::InvalidParameter("checkpoints must be ascending step indices within the horizon".into()));
    }
    let sampler = IncrementSampler::new(model, dt, cfg.eps)?;
    let dim = model.dim();
    let out = (0..cfg.m)
        .into_par_iter()
        .map(|i| {
            let (stream, sign) = if cfg.antithetic { ((i / 2) as u64, if i % 2 == 0 { 1.0 } else { -1.0 }) } else { (i as u64, 1.0) };
            let mut rng = path_rng(cfg.seed, stream);
            let mut pos = *x;
            let mut a = 0.0;
            let mut v_seen: f64 = 0.0;
            let mut rec = Vec::with_capacity(checkpoints.len());
            let mut next = 0;
            for step in 0..=n {
                while next < checkpoints.len() && checkpoints[next] == step {
                    rec.push(PathState { position: pos, a, v_seen });
                    next += 1;
                }
                if step == n || next == checkpoints.len() {
                    break;
                }
                let vv = v(&pos);
                v_seen = v_seen.max(vv.abs());
                a += dt * vv;
                let inc = sampler.sample_signed(&mut rng, sign);
                for k in 0..dim {
                    pos[k] += inc[k];
                }
            }
            rec
        })
        .collect();
    Ok(out)
}

/// Mean and standard error; antithetic pairs are averaged first.
fn mean_se(samples: &[f64], antithetic: bool) -> (f64, f64) {
    let units: Vec<f64> = if antithetic { samples.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect() } else { samples.to_vec() };
    let n = units.len() as f64;
    let mean = units.iter().sum::<f64>() / n;
    let var = units.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn notes(cfg: &PathConfig, sampler_eps: f64, extra: &str) -> String {
    let (_, dt) = cfg.steps();
    let mut s = format!("dt={dt:e}; eps={sampler_eps:e}; time-discretization bias O(dt)");
    if !extra.is_empty() {
        s.push_str("; ");
        s.push_str(extra);
    }
    s
}

/// `E^x[A_t]`.
pub fn additive_mean<V: Fn(&Point) -> f64 + Sync>(model: &LevyModel, v: &V, x: &Point, cfg: &PathConfig) -> Result<FKEstimate> {
    let (n, dt) = cfg.steps();
    let states = simulate(model, v, x, cfg, &[n])?;
    let samples: Vec<f64> = states.iter().map(|s| s[0].a).collect();
    let (value, stderr) = mean_se(&samples, cfg.antithetic);
    let eps = IncrementSampler::new(model, dt, cfg.eps)?.eps;
    Ok(FKEstimate { value, stderr, m: cfg.m, flagged: stderr > value.abs(), notes: notes(cfg, eps, "") })
}

/// `E^x[e^{A_t} f(X_t)]`.
pub fn fk_expectation<V, F>(model: &LevyModel, v: &V, f: F, x: &Point, cfg: &PathConfig) -> Result<FKEstimate>
where
    V: Fn(&Point) -> f64 + Sync,
    F: Fn(&Point) -> f64,
{
    let (n, dt) = cfg.steps();
    let states = simulate(model, v, x, cfg, &[n])?;
    let samples: Vec<f64> = states.iter().map(|s| s[0].a.exp() * f(&s[0].position)).collect();
    let (value, stderr) = mean_se(&samples, cfg.antithetic);
    let v_seen = states.iter().map(|s| s[0].v_seen).fold(0.0, f64::max);
    let mut extra = String::new();
    if v_seen * cfg.t > 3.0 {
        tracing::warn!(v_seen, t = cfg.t, "sup |V| t exceeds 3; weights have large variance");
        extra = format!("sup|V|t >= {:.2} exceeds 3", v_seen * cfg.t);
    }
    let eps = IncrementSampler::new(model, dt, cfg.eps)?.eps;
    Ok(FKEstimate { value, stderr, m: cfg.m, flagged: stderr > value.abs(), notes: notes(cfg, eps, &extra) })
}

#[derive(Debug, Clone, Serialize)]
pub struct KhasminskiReport {
    pub times: Vec<f64>,
    /// `sup_x E^x |A_t|` over the probes.
    pub sup_abs_a: Vec<f64>,
    /// `sup_x E^x e^{|A_t|}` over the probes.
    pub sup_exp: Vec<f64>,
    /// `[probe][time]` of `E^x e^{|A_t|}`.
    pub per_probe: Vec<Vec<f64>>,
    pub c: f64,
    pub b: f64,
    /// `C e^{b t}` is above every probe value.
    pub dominates: bool,
    /// `sup_x E|A_t|` decreases as `t` decreases along the probe times.
    pub monotone: bool,
    /// Power-law exponent of `sup_x E|A_t|` in `t`.
    pub small_time_exponent: f64,
}

impl KhasminskiReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,sup_abs_a,sup_exp_abs_a,envelope")?;
        for (i, t) in self.times.iter().enumerate() {
            writeln!(w, "{t:e},{:e},{:e},{:e}", self.sup_abs_a[i], self.sup_exp[i], self.c * (self.b * t).exp())?;
        }
        Ok(())
    }
}

/// Fits `ln sup_x E e^{|A_t|} ~ ln C + b t` by least squares, then raises `C`
/// to the smallest value dominating every probe. `cfg.t` must be the
/// largest entry of `t_seq`; the probe times are rounded to the step grid.
pub fn khasminski_check<V: Fn(&Point) -> f64 + Sync>(model: &LevyModel, v: &V, probes: &[Point], t_seq: &[f64], cfg: &PathConfig) -> Result<KhasminskiReport> {
    if probes.is_empty() || t_seq.len() < 2 {
        return Err(FkError::InvalidParameter("need probe points and at least two times".into()));
    }
    let mut times = t_seq.to_vec();
    times.sort_by(f64::total_cmp);
    let t_max = *times.last().unwrap();
    let cfg = PathConfig { t: t_max, ..cfg.clone() };
    let (_, dt) = cfg.steps();
    let checkpoints: Vec<usize> = times.iter().map(|t| ((t / dt).round() as usize).max(1)).collect();
    let times: Vec<f64> = checkpoints.iter().map(|&c| c as f64 * dt).collect();
    let mut per_probe = Vec::new();
    let mut per_probe_abs = Vec::new();
    for x in probes {
        let states = simulate(model, v, x, &cfg, &checkpoints)?;
        let m = states.len() as f64;
        per_probe.push((0..times.len()).map(|j| states.iter().map(|s| s[j].a.abs().exp()).sum::<f64>() / m).collect::<Vec<_>>());
        per_probe_abs.push((0..times.len()).map(|j| states.iter().map(|s| s[j].a.abs()).sum::<f64>() / m).collect::<Vec<_>>());
    }
    let sup_over = |rows: &Vec<Vec<f64>>, j: usize| rows.iter().map(|r| r[j]).fold(0.0, f64::max);
    let sup_exp: Vec<f64> = (0..times.len()).map(|j| sup_over(&per_probe, j)).collect();
    let sup_abs_a: Vec<f64> = (0..times.len()).map(|j| sup_over(&per_probe_abs, j)).collect();
    let logs: Vec<f64> = sup_exp.iter().map(|y| y.ln()).collect();
    let (_, b, _) = linear_fit(&times, &logs);
    let b = b.max(0.0);
    let c = times.iter().zip(&sup_exp).map(|(t, y)| y * (-b * t).exp()).fold(1.0, f64::max);
    let dominates = times.iter().zip(&sup_exp).all(|(t, y)| *y <= c * (b * t).exp() * (1.0 + 1e-12));
    let monotone = sup_abs_a.windows(2).all(|w| w[0] <= w[1]);
    let positive: Vec<(f64, f64)> = times.iter().zip(&sup_abs_a).filter(|(_, a)| **a > 0.0).map(|(t, a)| (t.ln(), a.ln())).collect();
    let small_time_exponent = if positive.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = positive.into_iter().unzip();
        linear_fit(&xs, &ys).1
    } else {
        f64::INFINITY
    };
    Ok(KhasminskiReport { times, sup_abs_a, sup_exp, per_probe, c, b, dominates, monotone, small_time_exponent })
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelEstimate {
    pub y: Vec<Point>,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `(sum w)^2 / sum w^2` of the path weights `e^{A_t}`.
    pub ess: f64,
    pub flagged: bool,
    pub bandwidth: f64,
}

impl KernelEstimate {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "y0,y1,value,stderr")?;
        for (i, y) in self.y.iter().enumerate() {
            writeln!(w, "{:.6},{:.6},{:e},{:e}", y[0], y[1], self.value[i], self.stderr[i])?;
        }
        Ok(())
    }
}

/// Gaussian-kernel density estimate of `y -> p^A_t(x, y)` from the weighted
/// endpoints `(X_t, e^{A_t})`.
pub fn kernel_estimate<V: Fn(&Point) -> f64 + Sync>(model: &LevyModel, v: &V, x: &Point, cfg: &PathConfig, bandwidth: f64, y: &[Point]) -> Result<KernelEstimate> {
    if !(bandwidth > 0.0) {
        return Err(FkError::InvalidParameter("bandwidth must be positive".into()));
    }
    let (n, _) = cfg.steps();
    let states = simulate(model, v, x, cfg, &[n])?;
    let dim = model.dim();
    let mut pts: Vec<(Point, f64)> = states.iter().map(|s| (s[0].position, s[0].a.exp())).collect();
    let sw: f64 = pts.iter().map(|p| p.1).sum();
    let sw2: f64 = pts.iter().map(|p| p.1 * p.1).sum();
    let ess = sw * sw / sw2;
    pts.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
    let m = pts.len() as f64;
    let cut = 8.0 * bandwidth;
    let norm = (2.0 * std::f64::consts::PI).sqrt() * bandwidth;
    let norm = norm.powi(dim as i32);
    let est: Vec<(f64, f64)> = y
        .par_iter()
        .map(|yy| {
            let lo = pts.partition_point(|p| p.0[0] < yy[0] - cut);
            let hi = pts.partition_point(|p| p.0[0] <= yy[0] + cut);
            let (mut s1, mut s2) = (0.0, 0.0);
            for (p, wgt) in &pts[lo..hi] {
                let mut r2 = 0.0;
                for k in 0..dim {
                    r2 += (p[k] - yy[k]).powi(2);
                }
                let kv = wgt * (-0.5 * r2 / (bandwidth * bandwidth)).exp() / norm;
                s1 += kv;
                s2 += kv * kv;
            }
            let mean = s1 / m;
            let var = (s2 / m - mean * mean).max(0.0) * m / (m - 1.0);
            (mean, (var / m).sqrt())
        })
        .collect();
    let (value, stderr) = est.into_iter().unzip();
    Ok(KernelEstimate { y: y.to_vec(), value, stderr, ess, flagged: ess < 100.0, bandwidth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GaussianKernel;
    use crate::measures::{chi, DensityPart};

    fn brownian() -> LevyModel {
        LevyModel::brownian(1, 1.0).unwrap()
    }

    #[test]
    fn additive_functional_examples() {
        let path = vec![[0.0, 0.0], [0.3, 0.0], [-0.2, 0.0], [1.0, 0.0]];
        assert_eq!(additive_functional(&path, 0.1, |_| 0.0), 0.0);
        assert!((additive_functional(&path, 0.1, |_| 2.0) - 0.6).abs() < 1e-15);
        assert!((additive_functional(&path, 0.1, |p: &Point| p[0]) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn constant_potentials_are_deterministic() {
        let cfg = PathConfig::new(0.01, 1.0, 1000, 3);
        let e = fk_expectation(&brownian(), &|_: &Point| 0.0, |_: &Point| 1.0, &[0.0; 2], &cfg).unwrap();
        assert_eq!((e.value, e.stderr), (1.0, 0.0));
        let e = fk_expectation(&brownian(), &|_: &Point| 0.5, |_: &Point| 1.0, &[0.0; 2], &cfg).unwrap();
        assert!((e.value - 0.5f64.exp()).abs() < 1e-12 && e.stderr < 1e-12);
    }

    #[test]
    fn indicator_occupation_matches_chi() {
        let w = SignedMeasure::density(vec![DensityPart::Indicator { a: -1.0, b: 1.0, c: 1.0 }]);
        let v = potential_of(&w).unwrap();
        let cfg = PathConfig::new(2e-3, 1.0, 100_000, 11);
        let e = additive_mean(&brownian(), &v, &[0.0; 2], &cfg).unwrap();
        let exact = chi(&GaussianKernel { dim: 1, variance: 1.0 }, &w, 1.0, &[0.0; 2]);
        assert!((e.value - exact).abs() < 3.0 * e.stderr, "{} +- {} vs {exact}", e.value, e.stderr);
    }

    #[test]
    fn atoms_are_rejected() {
        assert!(potential_of(&SignedMeasure::dirac(1, [0.0; 2], 1.0)).is_err());
    }

    #[test]
    fn antithetic_pairs_cancel_odd_functions() {
        let cfg = PathConfig { antithetic: true, ..PathConfig::new(0.1, 1.0, 2000, 5) };
        let e = fk_expectation(&brownian(), &|_: &Point| 0.0, |p: &Point| p[0], &[0.0; 2], &cfg).unwrap();
        assert!(e.value.abs() < 1e-14);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let model = LevyModel::pure_jump(crate::levy_models::LevyMeasure::stable_unit(1.5, 1).unwrap()).unwrap();
        let cfg = PathConfig::new(0.01, 0.5, 4000, 99);
        let v = |p: &Point| 0.8 * p[0].cos();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fk_expectation(&model, &v, |p: &Point| (-p[0] * p[0]).exp(), &[0.0; 2], &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn brownian_kernel_estimate() {
        let cfg = PathConfig::new(1.0, 1.0, 1_000_000, 1);
        let y: Vec<Point> = (0..=60).map(|i| [-3.0 + 0.1 * i as f64, 0.0]).collect();
        let k = kernel_estimate(&brownian(), &|_: &Point| 0.0, &[0.0; 2], &cfg, 0.05, &y).unwrap();
        for (yy, v) in y.iter().zip(&k.value) {
            let exact = (-0.5 * yy[0] * yy[0]).exp() / (2.0 * std::f64::consts::PI).sqrt();
            assert!((v - exact).abs() < 0.01);
        }
        assert!(!k.flagged);
        let k = kernel_estimate(&brownian(), &|_: &Point| 0.3, &[0.0; 2], &cfg, 0.05, &y).unwrap();
        for (yy, v) in y.iter().zip(&k.value) {
            let exact = 0.3f64.exp() * (-0.5 * yy[0] * yy[0]).exp() / (2.0 * std::f64::consts::PI).sqrt();
            assert!((v - exact).abs() < 0.01);
        }
    }

    #[test]
    fn khasminski_examples() {
        let cfg = PathConfig::new(0.01, 1.0, 2000, 4);
        let probes = [[0.0, 0.0], [0.5, 0.0]];
        let ts = [0.05, 0.1, 0.2, 0.5, 1.0];
        let r = khasminski_check(&brownian(), &|_: &Point| 0.0, &probes, &ts, &cfg).unwrap();
        assert_eq!((r.c, r.b), (1.0, 0.0));
        let r = khasminski_check(&brownian(), &|p: &Point| 0.5 * p[0].cos(), &probes, &ts, &cfg).unwrap();
        assert!(r.b <= 0.55 && r.dominates && r.monotone, "{r:?}");
        let w = SignedMeasure::density(vec![DensityPart::Indicator { a: -1.0, b: 1.0, c: 0.5 }]);
        let v = potential_of(&w).unwrap();
        let r = khasminski_check(&brownian(), &v, &[[1.0, 0.0], [1.5, 0.0]], &[0.002, 0.005, 0.01, 0.02, 0.05], &PathConfig::new(1e-4, 0.05, 4000, 8)).unwrap();
        assert!(r.dominates && r.monotone && r.small_time_exponent >= 0.45, "{r:?}");
    }
}
