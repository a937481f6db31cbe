//! Experiment configuration (TOML) and its validation.
//!
//! ```toml
//! name = "stable15_delta0"
//! seed = 7
//! claims = ["kato_sk", "volterra_oracle"]
//!
//! [model]
//! kind = "stable"        # "brownian" | "stable" | "discretized_stable"
//! dim = 1
//! alpha = 1.5
//!
//! [measure]
//! uniform = 0.0
//! atoms = [{ at = [0.0], q = 0.5 }]
//! parts = [{ kind = "indicator", a = -1.0, b = 1.0, c = 0.5 }]
//!
//! [grid]
//! half_width = 10.0
//! dx = 0.05
//! times = [0.05, 0.1, 0.2]
//!
//! [solver]               # optional
//! [mc]                   # required by the Monte Carlo claims
//! [analysis]             # optional
//! ```

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use feynkac::kernels::SpectralOptions;
use feynkac::levy_models::{LevyMeasure, LevyModel, Point};
use feynkac::measures::{DensityPart, SignedMeasure};
use feynkac::duhamel::SolveOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claims::{find_claim, Needs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub claims: Vec<String>,
    pub model: ModelSpec,
    #[serde(default)]
    pub measure: MeasureSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub mc: Option<McSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Brownian {
        dim: usize,
        #[serde(default = "one")]
        variance: f64,
    },
    Stable {
        dim: usize,
        alpha: f64,
    },
    DiscretizedStable {
        dim: usize,
        gamma: f64,
        upsilon: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Brownian { dim, .. } | ModelSpec::Stable { dim, .. } | ModelSpec::DiscretizedStable { dim, .. } => *dim,
        }
    }

    /// Index of the reference kernel: 2 for Brownian motion, the stability
    /// index otherwise.
    pub fn alpha(&self) -> f64 {
        match self {
            ModelSpec::Brownian { .. } => 2.0,
            ModelSpec::Stable { alpha, .. } => *alpha,
            ModelSpec::DiscretizedStable { gamma, upsilon, .. } => gamma / upsilon,
        }
    }

    pub fn build(&self) -> feynkac::Result<LevyModel> {
        match self {
            ModelSpec::Brownian { dim, variance } => LevyModel::brownian(*dim, *variance),
            ModelSpec::Stable { dim, alpha } => LevyModel::pure_jump(LevyMeasure::stable_unit(*alpha, *dim)?),
            ModelSpec::DiscretizedStable { dim, gamma, upsilon } => LevyModel::pure_jump(LevyMeasure::discretized_stable(*gamma, *upsilon, *dim, None)?),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    #[serde(default)]
    pub uniform: f64,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    #[serde(default)]
    pub parts: Vec<PartSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub at: Vec<f64>,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartSpec {
    Indicator { a: f64, b: f64, c: f64 },
    PowerSingular { center: f64, gamma: f64, c: f64, radius: f64 },
    LogSingular { center: f64, c: f64, radius: f64 },
    GaussianBump { center: f64, width: f64, c: f64 },
    Cosine {
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
        #[serde(default)]
        phase: f64,
        a: f64,
        b: f64,
    },
}

impl MeasureSpec {
    pub fn build(&self, dim: usize) -> Result<SignedMeasure> {
        let mut atoms = Vec::new();
        for a in &self.atoms {
            ensure!(a.at.len() == dim, "atom position {:?} does not have dimension {dim}", a.at);
            let mut p: Point = [0.0; 2];
            p[..dim].copy_from_slice(&a.at);
            atoms.push((p, a.q));
        }
        let parts = self
            .parts
            .iter()
            .map(|p| match *p {
                PartSpec::Indicator { a, b, c } => DensityPart::Indicator { a, b, c },
                PartSpec::PowerSingular { center, gamma, c, radius } => DensityPart::PowerSingular { center, gamma, c, radius },
                PartSpec::LogSingular { center, c, radius } => DensityPart::LogSingular { center, c, radius },
                PartSpec::GaussianBump { center, width, c } => DensityPart::GaussianBump { center, width, c },
                PartSpec::Cosine { amp, freq, phase, a, b } => DensityPart::Cosine { amp, freq, phase, a, b },
            })
            .collect();
        let w = SignedMeasure { dim, atoms, uniform: self.uniform, parts };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub half_width: f64,
    pub dx: f64,
    pub times: Vec<f64>,
    #[serde(default = "default_mass_tol")]
    pub mass_tol: f64,
}

fn default_mass_tol() -> f64 {
    SpectralOptions::default().mass_tol
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub k_max: usize,
    pub out_half_width: f64,
    pub out_stride: usize,
    pub mesh_per_decade: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let o = SolveOptions::default();
        SolverSpec { tol: o.tol, k_max: o.k_max, out_half_width: o.out_half_width, out_stride: o.out_stride, mesh_per_decade: o.mesh_per_decade }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSpec {
    pub paths: usize,
    pub dt: f64,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub antithetic: bool,
    /// Starting point.
    #[serde(default)]
    pub x: f64,
    /// Width of the Gaussian test function `f(y) = exp(-y^2 / (2 w^2))`.
    #[serde(default = "one")]
    pub bump_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Tail exponent `d` of the reference kernel; defaults to the dimension.
    #[serde(default)]
    pub d: Option<f64>,
    pub kappa: f64,
    /// Single-step constant for the contraction horizon.
    pub c1: f64,
    pub kato_times: Vec<f64>,
    pub oracle_steps: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec { d: None, kappa: 1.0, c1: 1.0, kato_times: feynkac::measures::default_kato_times(), oracle_steps: 4000 }
    }
}

/// Everything a run needs, built and checked before any output is written.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub hash: String,
    pub model: LevyModel,
    pub measure: SignedMeasure,
    pub spectral: SpectralOptions,
    pub solve: SolveOptions,
    pub d: f64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("config does not match the schema")
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn prepare(self) -> Result<Prepared> {
        let dim = self.model.dim();
        ensure!(dim == 1 || dim == 2, "model dimension must be 1 or 2");
        let model = self.model.build().context("invalid model")?;
        let measure = self.measure.build(dim).context("invalid measure")?;
        let g = &self.grid;
        ensure!(g.half_width > 0.0 && g.dx > 0.0 && g.dx < g.half_width, "grid needs 0 < dx < half_width");
        ensure!(!g.times.is_empty(), "grid.times is empty");
        ensure!(g.times.iter().all(|&t| t > 0.0) && g.times.windows(2).all(|w| w[1] > w[0]), "grid.times must be positive and increasing");
        let s = &self.solver;
        ensure!(s.tol > 0.0 && s.k_max >= 1 && s.out_stride >= 1 && s.mesh_per_decade >= 1, "solver settings must be positive");
        ensure!(s.out_half_width > 0.0 && s.out_half_width <= g.half_width, "solver.out_half_width must lie in (0, grid.half_width]");
        let a = &self.analysis;
        ensure!(a.kappa > 0.0 && a.c1 > 0.0, "analysis.kappa and analysis.c1 must be positive");
        ensure!(a.kato_times.len() >= 3 && a.kato_times.iter().all(|&t| t > 0.0), "analysis.kato_times needs at least three positive times");
        ensure!(a.oracle_steps >= 2, "analysis.oracle_steps must be at least 2");
        let d = a.d.unwrap_or(dim as f64);
        ensure!(d >= 0.0, "analysis.d must be non-negative");
        if let Some(mc) = &self.mc {
            ensure!(mc.paths >= 1000, "mc.paths must be at least 1000");
            ensure!(mc.dt > 0.0 && mc.dt <= *g.times.last().unwrap(), "mc.dt must lie in (0, final time]");
            ensure!(mc.bump_width > 0.0, "mc.bump_width must be positive");
            ensure!(!mc.antithetic || mc.paths % 2 == 0, "antithetic sampling needs an even path count");
        }
        ensure!(!self.claims.is_empty(), "no claims requested");
        for id in &self.claims {
            let Some(claim) = find_claim(id) else { bail!("unknown claim id {id:?}; see list-claims") };
            check_needs(id, claim.needs, &self, &measure, d)?;
        }
        let spectral = SpectralOptions { mass_tol: g.mass_tol, ..Default::default() };
        let solve = SolveOptions {
            tol: s.tol,
            k_max: s.k_max,
            out_half_width: s.out_half_width,
            out_stride: s.out_stride,
            mesh_per_decade: s.mesh_per_decade,
            seed: self.seed,
            ..Default::default()
        };
        let hash = self.hash();
        Ok(Prepared { config: self, hash, model, measure, spectral, solve, d })
    }
}

fn check_needs(id: &str, needs: &[Needs], cfg: &ExperimentConfig, w: &SignedMeasure, d: f64) -> Result<()> {
    let dim = cfg.model.dim();
    let alpha = cfg.model.alpha();
    for n in needs {
        match n {
            Needs::UniformOnly => ensure!(w.atoms.is_empty() && w.parts.is_empty(), "claim {id} needs a measure that is a multiple of Lebesgue measure"),
            Needs::SingleAtom => ensure!(w.atoms.len() == 1 && w.parts.is_empty() && w.uniform == 0.0, "claim {id} needs a single point mass"),
            Needs::NoAtoms => ensure!(w.atoms.is_empty(), "claim {id} cannot use point masses"),
            Needs::OneDim => ensure!(dim == 1, "claim {id} is one-dimensional"),
            Needs::Mc => ensure!(cfg.mc.is_some(), "claim {id} needs an [mc] section"),
            Needs::TwoTimes => ensure!(cfg.grid.times.len() >= 2, "claim {id} needs at least two output times"),
            Needs::StableIndex => ensure!(alpha > 0.0 && alpha < 2.0, "claim {id} needs a stability index in (0, 2)"),
            Needs::DAboveNMinusAlpha => ensure!(d > dim as f64 - alpha, "claim {id} needs d > n - alpha"),
        }
    }
    Ok(())
}
