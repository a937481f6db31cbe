//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Criterion 7 asks for contraction of the Duhamel series for the Cauchy
//! process with a point mass; that series diverges from its second term,
//! so the criterion is reported as FAIL. The run still succeeds when the
//! failure is exactly that divergence; any other failure exits non-zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use feynkac::bounds_harness::{check_single_kernel_upper, fit_lower_envelope, BoundVerdict};
use feynkac::duhamel::{contraction_horizon, density_row, solve, uniqueness_probe, BaseKernel, SolveOptions};
use feynkac::kernels::SpectralOptions;
use feynkac::levy_models::{LevyMeasure, LevyModel, ScaleFunction};
use feynkac::measures::{ka2_identity_check, kato_k_n_alpha, kato_sk, DensityPart, KatoOptions, ReferenceKernel, SignedMeasure, Verdict};
use feynkac::montecarlo::{fk_expectation, khasminski_check, potential_of, PathConfig};
use feynkac::quadrature::{geomspace, linear_fit};
use feynkac::FkError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Fails for the documented reason.
    KnownFail(String),
}

fn stable(alpha: f64) -> LevyModel {
    LevyModel::pure_jump(LevyMeasure::stable_unit(alpha, 1).unwrap()).unwrap()
}

fn discretized(gamma: f64, upsilon: f64) -> LevyModel {
    LevyModel::pure_jump(LevyMeasure::discretized_stable(gamma, upsilon, 1, None).unwrap()).unwrap()
}

fn delta0(q: f64) -> SignedMeasure {
    SignedMeasure::dirac(1, [0.0; 2], q)
}

fn verdict_of(pass: bool, detail: String) -> Outcome {
    if pass {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn exp_tilt() -> feynkac::Result<Outcome> {
    let models = [
        ("brownian", LevyModel::brownian(1, 1.0)?),
        ("stable 1.5", stable(1.5)),
        ("cauchy", stable(1.0)),
        ("stable 0.8", stable(0.8)),
        ("discretized 1/1", discretized(1.0, 1.0)),
    ];
    // Box truncation does not enter the identity; heavy tails need a loose mass check.
    let spectral = SpectralOptions { mass_tol: 0.35, ..Default::default() };
    let times = [0.1, 0.5, 1.0];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, model) in models {
        let base = BaseKernel::new(model, &times, 10.0, 0.02, &spectral)?;
        for c in [0.8, -1.0] {
            let sol = solve(&base, &SignedMeasure::lebesgue(1, c), &SolveOptions::default())?;
            let mut e: f64 = 0.0;
            for (ti, &t) in times.iter().enumerate() {
                let p = base.grid.slice(ti);
                let top = p.iter().fold(0.0f64, |m, v| m.max(*v));
                for (a, b) in sol.p_a.slice(ti).iter().zip(p) {
                    if *b > 1e-8 * top {
                        let ex = (c * t).exp() * b;
                        e = e.max((a - ex).abs() / ex);
                    }
                }
            }
            worst = worst.max(e);
            parts.push(format!("{name} c={c}: {e:.1e}"));
        }
    }
    Ok(verdict_of(worst < 1e-4, format!("sup rel err {worst:.2e} < 1e-4 ({})", parts.join(", "))))
}

fn cross_oracle() -> feynkac::Result<Outcome> {
    let (l, t) = (12.0, 0.5);
    let model = stable(1.5);
    let w = SignedMeasure::density(vec![DensityPart::Cosine { amp: 0.8, freq: 1.0, phase: 0.0, a: -l, b: l }]);
    let base = BaseKernel::new(model.clone(), &[0.125, 0.25, t], l, 0.02, &SpectralOptions { mass_tol: 0.02, ..Default::default() })?;
    let row = density_row(&base, &w, 0.0, &SolveOptions::default())?;
    let f = |y: f64| (-y * y / 2.0).exp();
    let p = row.p_a(row.times.len() - 1);
    let quad = row.nodes.iter().zip(&p).map(|(y, v)| f(*y) * v).sum::<f64>() * row.spacing();
    let cfg = PathConfig { dt: 1e-3, t, m: 100_000, eps: None, seed: 2024, antithetic: false };
    let v = potential_of(&w)?;
    let est = fk_expectation(&model, &v, |p| f(p[0]), &[0.0; 2], &cfg)?;
    let z = (est.value - quad).abs() / est.stderr;
    Ok(verdict_of(z <= 3.0, format!("MC {:.5} +- {:.5} vs quadrature {quad:.5}: {z:.2} SE <= 3", est.value, est.stderr)))
}

fn kato_matrix() -> feynkac::Result<Outcome> {
    let t = geomspace(1e-6, 1e-1, 6);
    let opts = KatoOptions::default();
    let mut wrong = Vec::new();
    let mut n_cases = 0;
    for alpha in [0.5, 0.8, 1.0, 1.2, 1.5, 1.9] {
        for (name, w, expect_in) in [("delta0", delta0(1.0), alpha > 1.0), ("lebesgue", SignedMeasure::lebesgue(1, 1.0), true)] {
            n_cases += 1;
            let r = kato_k_n_alpha(&w, 1, alpha, &t, &opts);
            let expected = if expect_in { Verdict::InClass } else { Verdict::NotInClass };
            if r.verdict != expected {
                wrong.push(format!("{name} alpha={alpha}: {}", r.verdict.name()));
            }
        }
    }
    Ok(verdict_of(wrong.is_empty(), format!("{} of {n_cases} verdicts correct {wrong:?}", n_cases - wrong.len())))
}

fn test_measures() -> Vec<(&'static str, SignedMeasure)> {
    vec![
        ("delta0", delta0(1.0)),
        ("two atoms", SignedMeasure { dim: 1, atoms: vec![([-0.5, 0.0], 0.7), ([0.4, 0.0], -0.3)], uniform: 0.0, parts: vec![] }),
        ("indicator", SignedMeasure::density(vec![DensityPart::Indicator { a: -1.0, b: 1.0, c: 1.0 }])),
        ("power 0.4", SignedMeasure::density(vec![DensityPart::PowerSingular { center: 0.0, gamma: 0.4, c: 1.0, radius: 1.0 }])),
        ("power 0.9", SignedMeasure::density(vec![DensityPart::PowerSingular { center: 0.0, gamma: 0.9, c: 1.0, radius: 1.0 }])),
        ("log", SignedMeasure::density(vec![DensityPart::LogSingular { center: 0.0, c: 1.0, radius: 0.5 }])),
    ]
}

fn kernel_kato_equivalence() -> feynkac::Result<Outcome> {
    let t = geomspace(1e-6, 1e-1, 6);
    let opts = KatoOptions::default();
    let mut bad = Vec::new();
    let mut tally = BTreeMap::new();
    for (name, w) in test_measures() {
        for alpha in [0.8, 1.5] {
            let k = kato_k_n_alpha(&w, 1, alpha, &t, &opts);
            for d in [0.5, 1.0] {
                let s = kato_sk(&ReferenceKernel { n: 1, alpha, d }, &w, &t, &opts);
                *tally.entry(k.verdict.name()).or_insert(0) += 1;
                if s.verdict != k.verdict || k.verdict == Verdict::Inconclusive {
                    bad.push(format!("{name} alpha={alpha} d={d}: S_K {} vs K {}", s.verdict.name(), k.verdict.name()));
                }
            }
        }
    }
    Ok(verdict_of(bad.is_empty(), format!("24 cases, verdicts {tally:?}, disagreements {bad:?}")))
}

fn ball_mass_identity() -> feynkac::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let measures = test_measures();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (_, w) = &measures[rng.gen_range(0..measures.len())];
        let alpha = rng.gen_range(0.6..1.9);
        let d = 1.0 - alpha + rng.gen_range(0.1..1.5);
        let x = [rng.gen_range(-1.0..1.0), 0.0];
        let t = rng.gen_range(0.01..1.0);
        worst = worst.max(ka2_identity_check(w, &x, 1, alpha, d, t)?.rel_err);
    }
    Ok(verdict_of(worst < 1e-3, format!("max rel err {worst:.2e} < 1e-3 over 10 probes")))
}

fn scale_law() -> feynkac::Result<Outcome> {
    let scale = ScaleFunction::for_model(&discretized(1.0, 1.0));
    let ts = geomspace(1e-3, 1.0, 13);
    let ln_rho = ts.iter().map(|&t| scale.rho(t).map(f64::ln)).collect::<feynkac::Result<Vec<_>>>()?;
    let ln_t: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let slope = linear_fit(&ln_t, &ln_rho).1;
    let model = discretized(1.2, 1.0);
    let times = geomspace(0.05, 1.0, 5);
    let spectral = SpectralOptions { mass_tol: 0.05, ..Default::default() };
    let coarse = BaseKernel::new(model.clone(), &times, 40.0, 0.04, &spectral)?;
    let fine = BaseKernel::new(model, &times, 40.0, 0.02, &spectral)?;
    let (pre, _) = check_single_kernel_upper(&[&coarse.grid, &fine.grid], &[&coarse.grid, &fine.grid], 1, 1.2, 0.0, (0.05, 1.0))?;
    let c = pre.c.unwrap_or(f64::NAN);
    let ok = (slope + 1.0).abs() <= 0.05 && pre.verdict == BoundVerdict::Pass && c.is_finite();
    Ok(verdict_of(ok, format!("rho slope {slope:.4} in -1 +- 0.05; gamma=1.2 upper fit {} with C {c:.4} ({})", pre.verdict.name(), pre.note)))
}

fn series_contraction() -> feynkac::Result<Outcome> {
    let model = stable(1.0);
    let w = delta0(0.5);
    let horizon = contraction_horizon(&ScaleFunction::for_model(&model), &w, 1.0, 1.0);
    let base = BaseKernel::new(model, &[0.05, 0.1], 20.0, 0.05, &SpectralOptions { mass_tol: 0.05, ..Default::default() })?;
    match solve(&base, &w, &SolveOptions::default()) {
        Ok(sol) => {
            let ti = sol.times().len() - 1;
            let (c, _) = sol.term_envelope(ti, 1, 1.0, 1.0);
            let ratios_ok = sol.ratios.iter().skip(1).all(|&r| r < 1.0);
            Ok(verdict_of(ratios_ok && c < 1.0, format!("ratios from k=3 {:?}, c {c:.3}", &sol.ratios[1.min(sol.ratios.len())..])))
        }
        Err(FkError::Divergent(msg)) => {
            let h = match horizon {
                Err(FkError::Divergent(_)) => "contraction horizon undefined (F diverges)".to_string(),
                other => format!("contraction horizon {other:?}"),
            };
            Ok(Outcome::KnownFail(format!(
                "the series diverges: {msg}; delta_0 is not in K_{{1,1}} since int_0 p_s(0) ds = int_0 ds/(pi s) = inf, \
                 so every term from k=2 is infinite; {h}"
            )))
        }
        Err(e) => Err(e),
    }
}

fn two_sided_envelope() -> feynkac::Result<Outcome> {
    let model = stable(1.5);
    let w = delta0(0.5);
    let scale = ScaleFunction::for_model(&model);
    let t0 = contraction_horizon(&scale, &w, 1.0, 1.0)?;
    let times = geomspace(0.05, t0, 3);
    let spectral = SpectralOptions::default();
    let opts = SolveOptions { out_stride: 2, ..Default::default() };
    let base = BaseKernel::new(model.clone(), &times, 10.0, 0.05, &spectral)?;
    let sol = solve(&base, &w, &opts)?;
    let lower = fit_lower_envelope(&sol.p_a, &scale, (0.05, t0))?;
    let fine = BaseKernel::new(model, &times, 10.0, 0.025, &spectral)?;
    let fine_opts = SolveOptions { out_stride: 4, mesh_per_decade: 64, max_step_fraction: opts.max_step_fraction / 2.0, ..opts };
    let fine_sol = solve(&fine, &w, &fine_opts)?;
    let (pre, upper) = check_single_kernel_upper(&[&sol.p_a, &fine_sol.p_a], &[&base.grid, &fine.grid], 1, 1.5, 1.0, (0.05, t0))?;
    let ok = lower.verdict == BoundVerdict::Pass && lower.violations == 0 && upper.verdict == BoundVerdict::Pass;
    Ok(verdict_of(
        ok,
        format!(
            "t in [0.05, {t0:.4}]: lower {} ({} violations, a1 {:.3}, a2 {:.3}); upper {} C {:.3} ({}); base prerequisite {}",
            lower.verdict.name(),
            lower.violations,
            lower.a1.unwrap_or(f64::NAN),
            lower.a2.unwrap_or(f64::NAN),
            upper.verdict.name(),
            upper.c.unwrap_or(f64::NAN),
            upper.note,
            pre.verdict.name()
        ),
    ))
}

fn uniqueness() -> feynkac::Result<Outcome> {
    let opts = SolveOptions { out_stride: 2, ..Default::default() };
    let r = uniqueness_probe(&stable(1.5), &delta0(0.5), &[0.02, 0.04, 0.08], 10.0, 0.05, &SpectralOptions::default(), &opts, &[1, 2, 4], 1e-3)?;
    let order = r.order.unwrap_or(f64::NAN);
    let last = *r.differences.last().unwrap();
    Ok(verdict_of(r.pass && order >= 1.0 && last < 1e-3, format!("differences {:.2e} {:.2e}, order {order:.2}", r.differences[0], last)))
}

fn khasminski() -> feynkac::Result<Outcome> {
    let w = SignedMeasure::density(vec![DensityPart::Cosine { amp: 0.5, freq: 1.0, phase: 0.0, a: -20.0, b: 20.0 }]);
    let v = potential_of(&w)?;
    let cfg = PathConfig { dt: 1e-3, t: 1.0, m: 20_000, eps: None, seed: 99, antithetic: false };
    let probes = [[-1.0, 0.0], [0.0, 0.0], [1.5, 0.0]];
    let r = khasminski_check(&stable(1.5), &v, &probes, &geomspace(1.0 / 64.0, 1.0, 7), &cfg)?;
    let ok = r.dominates && r.monotone && r.b <= 0.55;
    Ok(verdict_of(ok, format!("C {:.4} b {:.4} <= 0.55, dominates {}, sup E|A_t| monotone {} ({:.2e} at t={:.4})", r.c, r.b, r.dominates, r.monotone, r.sup_abs_a[0], r.times[0])))
}

fn csv_bodies(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn determinism() -> feynkac::Result<Outcome> {
    let root = std::env::temp_dir().join(format!("feynkac-acceptance-{}", std::process::id()));
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut mismatches = Vec::new();
    let mut files = 0;
    for name in ["brownian_constant_potential", "stable15_delta0"] {
        let mut reference: Option<BTreeMap<String, Vec<u8>>> = None;
        for threads in [1, 4, 8] {
            let dir = root.join(format!("{name}-{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_feynkac"))
                .args(["--threads", &threads.to_string(), "run"])
                .arg(configs.join(format!("{name}.toml")))
                .arg("--output-dir")
                .arg(&dir)
                .output()?
                .status;
            if !status.success() {
                mismatches.push(format!("{name} with {threads} threads exited {status}"));
                continue;
            }
            let bodies = csv_bodies(&dir);
            match &reference {
                None => {
                    files += bodies.len();
                    reference = Some(bodies);
                }
                Some(r) if *r != bodies => mismatches.push(format!("{name}: {threads} threads differ from 1 thread")),
                Some(_) => {}
            }
        }
    }
    let _ = fs::remove_dir_all(&root);
    Ok(verdict_of(mismatches.is_empty() && files > 0, format!("{files} CSV files compared across 1/4/8 threads {mismatches:?}")))
}

fn main() {
    let criteria: [(&str, fn() -> feynkac::Result<Outcome>); 11] = [
        ("exponential tilt", exp_tilt),
        ("Monte Carlo cross-oracle", cross_oracle),
        ("Kato classification matrix", kato_matrix),
        ("S_K(g_t) and K_n_alpha equivalence", kernel_kato_equivalence),
        ("ball-mass identity", ball_mass_identity),
        ("scale law", scale_law),
        ("series contraction", series_contraction),
        ("two-sided envelope", two_sided_envelope),
        ("uniqueness", uniqueness),
        ("Khasminski", khasminski),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(Outcome::Pass(d)) => println!("criterion {id:>2} {name}: PASS [{secs:.1}s] {d}"),
            Ok(Outcome::KnownFail(d)) => println!("criterion {id:>2} {name}: FAIL (expected) [{secs:.1}s] {d}"),
            Ok(Outcome::Fail(d)) => {
                unexpected += 1;
                println!("criterion {id:>2} {name}: FAIL [{secs:.1}s] {d}");
            }
            Err(e) => {
                unexpected += 1;
                println!("criterion {id:>2} {name}: FAIL [{secs:.1}s] error: {e}");
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
