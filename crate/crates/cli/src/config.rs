use serde::{Deserialize, Serialize};

use prcalc::energies::EnergyConfig;
use prcalc::grid::{GridDomain, Point};
use prcalc::minimize::{AnnealConfig, Solver};
use prcalc::rigid::{MatrixKind, PsiFn, Vec3};
use prcalc::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub dim: usize,
    pub extent: Vec<usize>,
    pub cell_size: f64,
    /// Defaults to the origin-centred box.
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
}

impl DomainConfig {
    pub fn build(&self) -> Result<GridDomain> {
        let origin = match &self.origin {
            Some(o) => o.clone(),
            None => self
                .extent
                .iter()
                .map(|&n| -0.5 * n as f64 * self.cell_size)
                .collect(),
        };
        GridDomain::new(self.dim, &self.extent, self.cell_size, &origin)
    }
}

pub fn point(v: &[f64]) -> Result<Point> {
    if v.is_empty() || v.len() > 3 {
        return Err(Error::Format(format!("point needs 1 to 3 entries, got {}", v.len())));
    }
    let mut p = Point::zeros();
    for (k, x) in v.iter().enumerate() {
        p[k] = *x;
    }
    Ok(p)
}

pub fn vector(v: &[f64]) -> Result<Vec3> {
    point(v)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub t_start: Option<f64>,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub step: Option<f64>,
}

fn default_method() -> String {
    "auto".into()
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: default_method(),
            budget: None,
            replicas: None,
            t_start: None,
            t_end: None,
            step: None,
        }
    }
}

impl SolverConfig {
    pub fn build(&self, seed: u64) -> Result<Solver> {
        let d = AnnealConfig::default();
        let cfg = AnnealConfig {
            budget: self.budget.unwrap_or(d.budget),
            replicas: self.replicas.unwrap_or(d.replicas),
            seed,
            t_start: self.t_start,
            t_end: self.t_end,
            step: self.step.unwrap_or(d.step),
        };
        match self.method.as_str() {
            "auto" => Ok(Solver::Auto(cfg)),
            "mincut" => Ok(Solver::Mincut),
            "anneal" => Ok(Solver::Anneal(cfg)),
            m => Err(Error::Format(format!("unknown solver method {m}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default)]
    pub function: Option<String>,
    #[serde(default)]
    pub sets: Vec<String>,
    #[serde(default)]
    pub energy: Option<EnergyConfig>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    2000
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JoinConfig {
    pub u: String,
    pub v: String,
    pub a: String,
    pub b: String,
    pub a_prime: String,
    pub eta: f64,
    #[serde(default = "default_psi")]
    pub psi: PsiFn,
    pub energy: EnergyConfig,
    /// Cell-size scale of the inputs; 1 joins directly.
    #[serde(default)]
    pub rho: Option<f64>,
}

fn default_psi() -> PsiFn {
    PsiFn::Power { p: 1.0 }
}

/// Datum of a cell problem: a function file or the jump function
/// `xi` on `<x - x0, nu> > 0`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumConfig {
    File {
        path: String,
    },
    Jump {
        domain: DomainConfig,
        kind: MatrixKind,
        x0: Vec<f64>,
        xi: Vec<f64>,
        nu: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionConfig {
    File { path: String },
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MinimizeConfig {
    pub datum: DatumConfig,
    pub region: RegionConfig,
    pub energy: EnergyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_ring")]
    pub ring_width: usize,
}

fn default_ring() -> usize {
    prcalc::minimize::DEFAULT_RING
}

/// Radii in length units or in cells (exactly one of the two).
pub fn resolve_radii(radii: &Option<Vec<f64>>, cells: &Option<Vec<f64>>, h: f64) -> Result<Vec<f64>> {
    match (radii, cells) {
        (Some(r), None) => Ok(r.clone()),
        (None, Some(c)) => Ok(c.iter().map(|k| k * h).collect()),
        _ => Err(Error::Format("give exactly one of radii and radii_cells".into())),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub domain: DomainConfig,
    pub kind: MatrixKind,
    pub x0: Vec<f64>,
    pub xi: Vec<f64>,
    pub nu: Vec<f64>,
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    #[serde(default)]
    pub radii_cells: Option<Vec<f64>>,
    pub energy: EnergyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_ring")]
    pub ring_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GammaConfig {
    pub domain: DomainConfig,
    pub kind: MatrixKind,
    pub x0: Vec<f64>,
    pub xi: Vec<f64>,
    pub nu: Vec<f64>,
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    #[serde(default)]
    pub radii_cells: Option<Vec<f64>>,
    pub ns: Vec<f64>,
    /// Member template; oscillating families take `n` from `ns`.
    pub energy: EnergyConfig,
    #[serde(default)]
    pub limit: Option<EnergyConfig>,
    #[serde(default = "default_refine")]
    pub refine: usize,
    #[serde(default = "default_true")]
    pub check_lower: bool,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_ring")]
    pub ring_width: usize,
}

fn default_refine() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_tolerance() -> f64 {
    0.03
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TruncateConfig {
    pub function: String,
    pub energy: EnergyConfig,
    pub lambda: f64,
    /// Defaults to the largest admissible value.
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub theta0: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub set: String,
    pub theta: f64,
    /// `x0` in 2D, a point on the axis line in 3D.
    pub point: Vec<f64>,
    /// Coordinate axis of the line (3D only).
    #[serde(default)]
    pub axis: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default)]
    pub function: Option<String>,
    #[serde(default)]
    pub set: Option<String>,
    #[serde(default)]
    pub overlay: Option<String>,
    #[serde(default = "default_render_name")]
    pub output: String,
}

fn default_render_name() -> String {
    "render.svg".into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub kind: MatrixKind,
    #[serde(default = "default_chart_samples")]
    pub samples: usize,
}

fn default_chart_samples() -> usize {
    10_000
}
