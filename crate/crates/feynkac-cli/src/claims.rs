//! Claim catalog and the checks behind each claim id.

use anyhow::{anyhow, Result};
use feynkac::bounds_harness::{check_single_kernel_upper, compare_rho_scaling, fit_lower_envelope, BoundReport, BoundVerdict};
use feynkac::duhamel::{contraction_horizon, density_row, point_mass_oracle, solve, uniqueness_probe, BaseKernel, DuhamelSolution};
use feynkac::kernels::Layout;
use feynkac::levy_models::{Point, ScaleFunction};
use feynkac::measures::{check_h1, check_h2, ka2_identity_check, kato_k_n_alpha, kato_sk, KatoOptions, KatoReport, ReferenceKernel, Verdict};
use feynkac::montecarlo::{fk_expectation, khasminski_check, potential_of, PathConfig};
use feynkac::quadrature::geomspace;
use feynkac::FkError;

use crate::config::Prepared;
use crate::output::Outputs;

/// Preconditions checked at validation time.
#[derive(Debug, Clone, Copy)]
pub enum Needs {
    UniformOnly,
    SingleAtom,
    NoAtoms,
    OneDim,
    Mc,
    TwoTimes,
    StableIndex,
    DAboveNMinusAlpha,
}

pub struct Claim {
    pub id: &'static str,
    pub description: &'static str,
    pub needs: &'static [Needs],
    /// Runs after the Duhamel solve.
    pub uses_solution: bool,
}

pub const CATALOG: &[Claim] = &[
    Claim { id: "exp_tilt", description: "a constant potential c multiplies the kernel by exp(c t); sup relative error below 1e-4", needs: &[Needs::UniformOnly], uses_solution: true },
    Claim { id: "kato_sk", description: "the measure lies in the Kato class S_K of the base kernel", needs: &[], uses_solution: false },
    Claim { id: "kato_k_n_alpha", description: "the measure lies in the class K_{n,alpha}", needs: &[], uses_solution: false },
    Claim {
        id: "ka2_equivalence",
        description: "S_K with the reference kernel g_t and K_{n,alpha} agree, and the ball-mass identity for g_t holds to 1e-3",
        needs: &[Needs::StableIndex, Needs::DAboveNMinusAlpha],
        uses_solution: false,
    },
    Claim { id: "h1_volume", description: "the volume function satisfies the power-decay condition H1 for the model's scale function", needs: &[], uses_solution: false },
    Claim { id: "h2_volume", description: "the volume function satisfies the power-decay condition H2 for K_{n,alpha}", needs: &[], uses_solution: false },
    Claim { id: "series_contraction", description: "Duhamel term norms contract (q < 1) under an envelope c^k g_t with c < 1", needs: &[], uses_solution: true },
    Claim { id: "residual_identity", description: "the partial sum satisfies the Duhamel equation to 10 tol on random probes", needs: &[], uses_solution: true },
    Claim { id: "volterra_oracle", description: "the point-mass solution matches a dense uniform-mesh Volterra solve to 1e-3 relative", needs: &[Needs::SingleAtom], uses_solution: true },
    Claim { id: "pa10_lower", description: "p^A_t(x,y) >= rho_t^n f_low((y-x) rho_t) with fitted constants and no violations", needs: &[Needs::TwoTimes], uses_solution: true },
    Claim { id: "single_kernel_upper", description: "p^A_t(x,y) <= C g_t(y-x) with C stable within 10% under grid refinement", needs: &[], uses_solution: true },
    Claim { id: "rho_scaling", description: "p^A_t(x,x) scales like rho_t^n; log-log slopes within 10%", needs: &[Needs::TwoTimes], uses_solution: true },
    Claim { id: "contraction_horizon", description: "the final output time lies inside the contraction horizon C1 F(t0) < 1/2", needs: &[], uses_solution: true },
    Claim { id: "uniqueness", description: "solutions converge at first order or better across three grid resolutions", needs: &[], uses_solution: false },
    Claim {
        id: "fk_cross_oracle",
        description: "Monte Carlo E[exp(A_t) f(X_t)] agrees with quadrature of the Duhamel solution within 3 standard errors",
        needs: &[Needs::Mc, Needs::NoAtoms, Needs::OneDim],
        uses_solution: false,
    },
    Claim {
        id: "khasminski",
        description: "a fitted C exp(b t) dominates sup_x E exp(|A_t|) and sup_x E|A_t| shrinks as t decreases",
        needs: &[Needs::Mc, Needs::NoAtoms],
        uses_solution: false,
    },
];

pub fn find_claim(id: &str) -> Option<&'static Claim> {
    CATALOG.iter().find(|c| c.id == id)
}

#[derive(Debug, Clone)]
pub struct ClaimOutcome {
    pub id: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl ClaimOutcome {
    fn new(id: &str, pass: bool, value: f64, threshold: f64, detail: String) -> Self {
        ClaimOutcome { id: id.to_string(), pass, value, threshold, detail }
    }
}

pub struct RunContext<'a> {
    pub prep: &'a Prepared,
    pub base: BaseKernel,
    pub solution: Option<DuhamelSolution>,
    pub horizon: Option<std::result::Result<f64, String>>,
    pub outputs: &'a mut Outputs,
}

impl RunContext<'_> {
    fn sol(&self) -> Result<&DuhamelSolution> {
        self.solution.as_ref().ok_or_else(|| anyhow!("no Duhamel solution"))
    }

    fn t_range(&self) -> (f64, f64) {
        let t = &self.prep.config.grid.times;
        (t[0], *t.last().unwrap())
    }

    fn scale(&self) -> ScaleFunction {
        ScaleFunction::for_model(&self.prep.model)
    }

    fn n(&self) -> usize {
        self.prep.model.dim()
    }

    fn alpha(&self) -> f64 {
        self.prep.config.model.alpha()
    }

    fn kato(&mut self, r: &KatoReport) -> Result<()> {
        let mut buf = Vec::new();
        r.write_csv(&mut buf, false)?;
        self.outputs.append("kato.csv", "criterion,t,value,verdict,zeta", &buf);
        Ok(())
    }

    fn bound(&mut self, r: &BoundReport) -> Result<()> {
        let mut buf = Vec::new();
        r.write_csv(&mut buf, false)?;
        self.outputs.append("bounds.csv", "claim,a1,a2,a3,a4,C,violations,worst_margin,verdict", &buf);
        Ok(())
    }

    /// `t0` from the contraction condition, computed once.
    pub fn horizon(&mut self) -> std::result::Result<f64, String> {
        if self.horizon.is_none() {
            let c = &self.prep.config.analysis;
            let h = contraction_horizon(&self.scale(), &self.prep.measure, c.kappa, c.c1).map_err(|e| e.to_string());
            self.horizon = Some(h);
        }
        self.horizon.clone().unwrap()
    }
}

fn verdict_outcome(id: &str, r: &KatoReport) -> ClaimOutcome {
    let zeta = r.zeta.map(|z| format!("{z:.4}")).unwrap_or_else(|| "none".into());
    ClaimOutcome::new(
        id,
        r.verdict == Verdict::InClass,
        r.limit_estimate,
        KatoOptions::default().threshold,
        format!("{} verdict {}; zeta {zeta}", r.criterion.name(), r.verdict.name()),
    )
}

fn bound_outcome(id: &str, r: &BoundReport) -> ClaimOutcome {
    let value = r.c.or(r.a1).unwrap_or(f64::NAN);
    let mut detail = format!("{} violations {} of {}; worst margin {:e}", r.verdict.name(), r.violations, r.samples, r.worst_margin);
    if let (Some(a1), Some(a2)) = (r.a1, r.a2) {
        detail.push_str(&format!("; a1 {a1:e} a2 {a2:e}"));
    }
    if !r.note.is_empty() {
        detail.push_str("; ");
        detail.push_str(&r.note);
    }
    ClaimOutcome::new(id, r.verdict == BoundVerdict::Pass, value, f64::NAN, detail)
}

pub fn run_claim(id: &str, ctx: &mut RunContext) -> Result<ClaimOutcome> {
    let prep = ctx.prep;
    let cfg = &prep.config;
    let w = &prep.measure;
    let kato_opts = KatoOptions::default();
    let times = &cfg.analysis.kato_times;
    match id {
        "exp_tilt" => {
            let sol = ctx.sol()?;
            let c = w.uniform;
            let g = &ctx.base.grid;
            let mut worst: f64 = 0.0;
            for (ti, &t) in g.times.iter().enumerate() {
                let p = g.slice(ti);
                let top = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in sol.p_a.slice(ti).iter().zip(p) {
                    if *b > 1e-8 * top {
                        let e = (c * t).exp() * b;
                        worst = worst.max((a - e).abs() / e);
                    }
                }
            }
            Ok(ClaimOutcome::new(id, worst < 1e-4, worst, 1e-4, format!("c = {c}")))
        }
        "kato_sk" => {
            let r = kato_sk(&*ctx.base.kernel, w, times, &kato_opts);
            ctx.kato(&r)?;
            Ok(verdict_outcome(id, &r))
        }
        "kato_k_n_alpha" => {
            let r = kato_k_n_alpha(w, ctx.n(), ctx.alpha(), times, &kato_opts);
            ctx.kato(&r)?;
            Ok(verdict_outcome(id, &r))
        }
        "ka2_equivalence" => {
            let (n, alpha, d) = (ctx.n(), ctx.alpha(), prep.d);
            let sk = kato_sk(&ReferenceKernel { n, alpha, d }, w, times, &kato_opts);
            let kn = kato_k_n_alpha(w, n, alpha, times, &kato_opts);
            ctx.kato(&sk)?;
            ctx.kato(&kn)?;
            let mut worst: f64 = 0.0;
            for x in [0.0, 0.37, -0.81] {
                for t in [0.05, 0.3] {
                    let p: Point = if n == 1 { [x, 0.0] } else { [x, 0.2] };
                    worst = worst.max(ka2_identity_check(w, &p, n, alpha, d, t)?.rel_err);
                }
            }
            let agree = sk.verdict == kn.verdict;
            Ok(ClaimOutcome::new(
                id,
                agree && worst < 1e-3,
                worst,
                1e-3,
                format!("S_K(g) {} vs K_n_alpha {}; identity rel err {worst:e}", sk.verdict.name(), kn.verdict.name()),
            ))
        }
        "h1_volume" => {
            let r = check_h1(&ctx.scale(), w, times)?;
            ctx.kato(&r)?;
            Ok(verdict_outcome(id, &r))
        }
        "h2_volume" => {
            let r = check_h2(w, ctx.n(), ctx.alpha(), times);
            ctx.kato(&r)?;
            Ok(verdict_outcome(id, &r))
        }
        "series_contraction" => {
            let sol = ctx.sol()?;
            let last = sol.times().len() - 1;
            let (c, _) = sol.term_envelope(last, ctx.n(), ctx.alpha(), prep.d);
            let q = sol.q;
            Ok(ClaimOutcome::new(id, q < 1.0 && c < 1.0, c, 1.0, format!("q {q:e}; k0 {}; terms {}", sol.k0, sol.terms.len())))
        }
        "residual_identity" => {
            let sol = ctx.sol()?;
            let thr = 10.0 * prep.solve.tol;
            Ok(ClaimOutcome::new(id, sol.residual <= thr, sol.residual, thr, format!("truncation bound {:e}", sol.truncation_bound)))
        }
        "volterra_oracle" => {
            let sol = ctx.sol()?;
            let (z0, q) = w.atoms[0];
            let t = ctx.t_range().1;
            let (half, h) = (sol.p_a.half_width, sol.p_a.dx);
            let lim = 0.9 * half;
            let snap = |v: f64| -half + ((v + half) / h).round() * h;
            let mut worst: f64 = 0.0;
            let mut used = 0;
            for (dx, dy) in [(0.3, -0.2), (0.0, 0.4), (-0.5, -0.1)] {
                let x = [snap(z0[0] + dx), z0[1]];
                let mut y = [snap(z0[0] + dy), z0[1]];
                if (y[0] - z0[0]).abs() < 0.5 * h {
                    y[0] += h;
                }
                if x[0].abs() > lim || y[0].abs() > lim {
                    continue;
                }
                let v = sol.p_a.value(t, &x, &y).ok_or_else(|| anyhow!("probe outside the solution grid"))?;
                let o = point_mass_oracle(&*ctx.base.kernel, &z0, q, &x, &y, t, cfg.analysis.oracle_steps)?;
                worst = worst.max((v - o).abs() / o.abs());
                used += 1;
            }
            if used == 0 {
                return Err(anyhow!("no probe pair inside the solution box"));
            }
            Ok(ClaimOutcome::new(id, worst < 1e-3, worst, 1e-3, format!("{used} probe pairs at t = {t}")))
        }
        "pa10_lower" => {
            let r = fit_lower_envelope(&ctx.sol()?.p_a, &ctx.scale(), ctx.t_range())?;
            ctx.bound(&r)?;
            let mut o = bound_outcome(id, &r);
            if let Ok(t0) = ctx.horizon() {
                if ctx.t_range().1 > t0 {
                    o.detail.push_str(&format!("; evaluated beyond the contraction horizon {t0:e}"));
                }
            }
            Ok(o)
        }
        "single_kernel_upper" => {
            let g = &cfg.grid;
            let fine = BaseKernel::new(prep.model.clone(), &g.times, g.half_width, g.dx / 2.0, &prep.spectral)?;
            let mut opts = prep.solve.clone();
            opts.out_stride *= 2;
            opts.mesh_per_decade *= 2;
            opts.max_step_fraction /= 2.0;
            let fine_sol = solve(&fine, w, &opts)?;
            let sol = ctx.sol()?;
            let (pre, main) = check_single_kernel_upper(&[&sol.p_a, &fine_sol.p_a], &[&ctx.base.grid, &fine.grid], ctx.n(), ctx.alpha(), prep.d, ctx.t_range())?;
            ctx.bound(&pre)?;
            ctx.bound(&main)?;
            let mut o = bound_outcome(id, &main);
            o.detail.push_str(&format!("; base prerequisite {} with c {:e}", pre.verdict.name(), pre.c.unwrap_or(f64::NAN)));
            Ok(o)
        }
        "rho_scaling" => {
            let r = compare_rho_scaling(&ctx.sol()?.p_a, &ctx.scale(), ctx.t_range())?;
            Ok(ClaimOutcome::new(
                id,
                r.pass,
                r.relative_difference,
                0.1,
                format!("slope {:.5} vs rho^n slope {:.5}", r.slope_kernel, r.slope_rho),
            ))
        }
        "contraction_horizon" => {
            let t = ctx.t_range().1;
            match ctx.horizon() {
                Ok(t0) => {
                    if let Some(s) = ctx.solution.as_mut() {
                        s.t0 = Some(t0);
                    }
                    Ok(ClaimOutcome::new(id, t <= t0, t0, t, format!("t0 {t0:e} for final time {t}")))
                }
                Err(e) => Ok(ClaimOutcome::new(id, false, f64::NAN, t, e)),
            }
        }
        "uniqueness" => {
            let g = &cfg.grid;
            let r = uniqueness_probe(&prep.model, w, &g.times, g.half_width, g.dx, &prep.spectral, &prep.solve, &[1, 2, 4], 1e-3)?;
            let mut body = String::new();
            for (i, d) in r.differences.iter().enumerate() {
                body.push_str(&format!("{},{},{d:e}\n", r.levels[i], r.levels[i + 1]));
            }
            ctx.outputs.append("uniqueness.csv", "level_a,level_b,sup_difference", body.as_bytes());
            let order = r.order.unwrap_or(f64::NAN);
            Ok(ClaimOutcome::new(id, r.pass, order, 1.0, format!("differences {:?}", r.differences.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>())))
        }
        "fk_cross_oracle" => {
            let mc = cfg.mc.as_ref().ok_or_else(|| anyhow!("missing [mc]"))?;
            let t = ctx.t_range().1;
            let x = mc.x;
            let bw = mc.bump_width;
            let f = |p: &Point| (-p[0] * p[0] / (2.0 * bw * bw)).exp();
            let quad = if w.parts.is_empty() {
                let g = &ctx.base.grid;
                let ti = g.times.len() - 1;
                debug_assert_eq!(g.layout, Layout::Displacement);
                let s: f64 = g.slice(ti).iter().enumerate().map(|(i, p)| f(&[x + g.point(i)[0], 0.0]) * p).sum();
                (w.uniform * t).exp() * s * g.dx
            } else {
                let row = density_row(&ctx.base, w, x, &prep.solve)?;
                let p = row.p_a(row.times.len() - 1);
                row.nodes.iter().zip(&p).map(|(y, v)| f(&[*y, 0.0]) * v).sum::<f64>() * row.spacing()
            };
            let pc = PathConfig { dt: mc.dt, t, m: mc.paths, eps: mc.eps, seed: cfg.seed, antithetic: mc.antithetic };
            let v = potential_of(w)?;
            let est = fk_expectation(&prep.model, &v, f, &[x, 0.0], &pc)?;
            let mut buf = Vec::new();
            est.write_csv(&mut buf, false)?;
            ctx.outputs.append("fk.csv", "value,stderr,m,flagged,notes", &buf);
            let diff = (est.value - quad).abs();
            let z = if est.stderr > 0.0 { diff / est.stderr } else if diff <= 1e-9 * quad.abs() { 0.0 } else { f64::INFINITY };
            Ok(ClaimOutcome::new(id, z <= 3.0, z, 3.0, format!("mc {:e} +- {:e}; quadrature {quad:e}", est.value, est.stderr)))
        }
        "khasminski" => {
            let mc = cfg.mc.as_ref().ok_or_else(|| anyhow!("missing [mc]"))?;
            let t = ctx.t_range().1;
            let pc = PathConfig { dt: mc.dt, t, m: mc.paths, eps: mc.eps, seed: cfg.seed, antithetic: mc.antithetic };
            let v = potential_of(w)?;
            let probes: Vec<Point> = [-1.0, 0.0, 1.0].iter().map(|o| [mc.x + o, 0.0]).collect();
            let r = khasminski_check(&prep.model, &v, &probes, &geomspace(t / 16.0, t, 5), &pc)?;
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            ctx.outputs.append_with_header("khasminski.csv", &buf);
            Ok(ClaimOutcome::new(
                id,
                r.dominates && r.monotone,
                r.b,
                f64::NAN,
                format!("C {:e}; b {:e}; monotone {}; small-time exponent {:.3}", r.c, r.b, r.monotone, r.small_time_exponent),
            ))
        }
        other => Err(anyhow!(FkError::InvalidParameter(format!("unknown claim {other}")))),
    }
}
