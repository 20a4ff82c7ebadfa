use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use prcalc::constructions::{decompose_2d, decompose_3d};
use prcalc::energies::{DensitySamples, EnergyConfig, EnergySequence, Hypothesis, HypothesisReport};
use prcalc::grid::VoxelSet;
use prcalc::io::{read_function, read_json, read_voxel_set};
use prcalc::joining::{join, join_scaled, join_with_boundary};
use prcalc::minimize::{
    anneal_m, density_estimate, gamma_experiment, jump_datum, mincut_m, DirichletProblem,
    GammaScenario, Solver,
};
use prcalc::pr::PiecewiseRigidFunction;
use prcalc::rigid::{certify_chart, MatrixKind};
use prcalc::truncation::{theta_limit, truncate_with_limit, DEFAULT_THETA0};
use prcalc::{Error, Result};

use crate::config::*;
use crate::output::{num, Outputs};
use crate::svg;

/// State shared by every subcommand.
pub struct Ctx {
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub out: Outputs,
    /// Config after defaults are filled in, echoed to the manifest.
    pub resolved: Value,
    /// Set when the run completes but a checked property fails.
    pub failed: Option<String>,
}

impl Ctx {
    fn load<T: DeserializeOwned + Serialize>(&mut self) -> Result<T> {
        let path = self
            .config
            .clone()
            .ok_or_else(|| Error::Format("this command needs --config".into()))?;
        let cfg: T = read_json(&path)?;
        self.resolved = serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }

    /// Resolves `p` against the directory of the config file.
    fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        match self.config.as_ref().and_then(|c| c.parent()) {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn function(&self, p: &str) -> Result<PiecewiseRigidFunction> {
        read_function(&self.path(p))
    }

    fn set(&self, p: &str) -> Result<VoxelSet> {
        read_voxel_set(&self.path(p))
    }

    fn fail(&mut self, why: String) {
        log::warn!("{why}");
        self.failed.get_or_insert(why);
    }
}

pub fn validate(ctx: &mut Ctx) -> Result<()> {
    let cfg: ValidateConfig = ctx.load()?;
    let mut report = serde_json::Map::new();
    let mut dim = 2;
    let mut extent = 1.0;
    if let Some(p) = &cfg.function {
        let u = ctx.function(p)?;
        dim = u.domain().dim;
        extent = 0.5 * u.domain().diameter();
        report.insert(
            "function".into(),
            json!({
                "path": p,
                "kind": u.kind,
                "dim": dim,
                "labels": u.motions.len(),
                "jump_area": u.jump_area(None),
                "sup_norm": u.sup_norm(None),
            }),
        );
    }
    let mut sets = Vec::new();
    for p in &cfg.sets {
        let s = ctx.set(p)?;
        sets.push(json!({
            "path": p,
            "cells": s.count(),
            "volume": s.volume(),
            "perimeter": s.perimeter(None)?,
            "components": s.connected_components().len(),
        }));
    }
    report.insert("sets".into(), Value::Array(sets));
    if let Some(ec) = &cfg.energy {
        let e = ec.build()?;
        let samples = DensitySamples::generate(dim, cfg.samples, extent, 10.0, ctx.seed);
        let mut hyps: Vec<HypothesisReport> = Vec::new();
        for h in [Hypothesis::H4, Hypothesis::H5, Hypothesis::H6] {
            if !e.has(h) {
                continue;
            }
            let r = match h {
                Hypothesis::H4 => e.check_h4(&samples),
                Hypothesis::H5 => e.check_h5(&samples),
                _ => e.check_h6(&samples),
            };
            if !r.passed() {
                ctx.fail(format!(
                    "declared {} fails on {} of {} samples",
                    r.hypothesis, r.violations, r.samples
                ));
            }
            hyps.push(r);
        }
        report.insert("declared".into(), json!(e.flags));
        report.insert("hypotheses".into(), json!(hyps));
    }
    report.insert("passed".into(), json!(ctx.failed.is_none()));
    ctx.out.json("validate.json", &report)
}

fn run_join(ctx: &mut Ctx, boundary: bool) -> Result<()> {
    let cfg: JoinConfig = ctx.load()?;
    let u = ctx.function(&cfg.u)?;
    let v = ctx.function(&cfg.v)?;
    let a = ctx.set(&cfg.a)?;
    let b = ctx.set(&cfg.b)?;
    let a_prime = ctx.set(&cfg.a_prime)?;
    let energy = cfg.energy.build()?;
    let result = match (boundary, cfg.rho) {
        (true, Some(_)) => {
            return Err(Error::Format("rho applies to join only".into()));
        }
        (true, None) => join_with_boundary(&u, &a, &v, &b, &a_prime, cfg.eta, cfg.psi, &energy),
        (false, Some(rho)) => join_scaled(rho, &u, &a, &v, &b, &a_prime, cfg.eta, &energy),
        (false, None) => join(&u, &a, &v, &b, &a_prime, cfg.eta, cfg.psi, &energy),
    };
    let j = match result {
        Ok(j) => j,
        Err(Error::Rejected(why)) => {
            ctx.out.json("rejection.json", &json!({ "rejected": why }))?;
            return Err(Error::Rejected(why));
        }
        Err(e) => return Err(e),
    };
    ctx.out.function("w.json", &j.w)?;
    ctx.out.set("region.json", &j.region)?;
    ctx.out.json("certificate.json", &j.certificate)
}

pub fn join_cmd(ctx: &mut Ctx) -> Result<()> {
    run_join(ctx, false)
}

pub fn join_boundary(ctx: &mut Ctx) -> Result<()> {
    run_join(ctx, true)
}

pub fn minimize(ctx: &mut Ctx) -> Result<()> {
    let cfg: MinimizeConfig = ctx.load()?;
    let datum = match &cfg.datum {
        DatumConfig::File { path } => ctx.function(path)?,
        DatumConfig::Jump { domain, kind, x0, xi, nu } => {
            jump_datum(&domain.build()?, *kind, &point(x0)?, &vector(xi)?, &vector(nu)?)?
        }
    };
    let region = match &cfg.region {
        RegionConfig::File { path } => ctx.set(path)?,
        RegionConfig::Ball { center, radius } => VoxelSet::ball(datum.domain(), &point(center)?, *radius),
    };
    let energy = cfg.energy.build()?;
    let problem = DirichletProblem::new(energy, datum, region, cfg.ring_width)?;
    let solver = cfg.solver.build(ctx.seed)?;
    let anneal = match &solver {
        Solver::Mincut => None,
        Solver::Anneal(a) => Some(a.clone()),
        Solver::Auto(a) => (!problem.energy.jump_independent()).then(|| a.clone()),
    };
    let w = match anneal {
        None => {
            let m = mincut_m(&problem)?;
            ctx.out.json(
                "minimize.json",
                &json!({
                    "method": "mincut",
                    "value": m.value,
                    "lower_bound": m.lower_bound,
                    "exact": m.exact,
                    "boundary_labels": m.boundary_labels,
                }),
            )?;
            m.w
        }
        Some(a) => {
            let r = anneal_m(&problem, &a)?;
            ctx.out.json(
                "minimize.json",
                &json!({
                    "method": "anneal",
                    "value": r.value,
                    "exact": false,
                    "replica": r.replica,
                    "accepted": r.accepted,
                    "anneal": a,
                }),
            )?;
            let rows: Vec<Vec<String>> = r
                .trace
                .iter()
                .map(|t| vec![t.moves.to_string(), num(t.energy), num(t.best)])
                .collect();
            ctx.out.csv("trace.csv", &["moves", "energy", "best"], &rows)?;
            r.w
        }
    };
    ctx.out.function("w.json", &w)?;
    if w.domain().dim == 2 {
        let s = svg::render(w.domain(), &w.partition.labels, Some(&problem.region.members))?;
        ctx.out.text("w.svg", &s)?;
    }
    Ok(())
}

pub fn density(ctx: &mut Ctx) -> Result<()> {
    let cfg: DensityConfig = ctx.load()?;
    let dom = cfg.domain.build()?;
    let radii = resolve_radii(&cfg.radii, &cfg.radii_cells, dom.cell_size)?;
    let energy = cfg.energy.build()?;
    let est = density_estimate(
        &energy,
        &dom,
        cfg.kind,
        &point(&cfg.x0)?,
        &vector(&cfg.xi)?,
        &vector(&cfg.nu)?,
        &radii,
        cfg.ring_width,
        &cfg.solver.build(ctx.seed)?,
    )?;
    let rows: Vec<Vec<String>> = (0..est.radii.len())
        .map(|k| {
            vec![
                num(est.radii[k]),
                num(est.values[k]),
                num(est.normalized[k]),
                num(est.tail_max[k]),
            ]
        })
        .collect();
    ctx.out.csv("density.csv", &["radius", "value", "normalized", "tail_max"], &rows)?;
    ctx.out.json("density.json", &est)
}

/// Member `n` of the sequence generated by `template`.
pub fn member(template: &EnergyConfig, n: f64) -> Result<prcalc::energies::SurfaceEnergy> {
    let mut c = template.clone();
    if c.family == "oscillating" {
        c.params.insert("n".into(), json!(n));
        if !c.params.contains_key("axis") {
            c.params.insert("axis".into(), json!(0));
        }
    }
    c.build()
}

pub fn gamma(ctx: &mut Ctx) -> Result<()> {
    let cfg: GammaConfig = ctx.load()?;
    let dom = cfg.domain.build()?;
    let radii = resolve_radii(&cfg.radii, &cfg.radii_cells, dom.cell_size)?;
    let seq = EnergySequence::generate(&cfg.ns, |n| member(&cfg.energy, n))?;
    let scenario = GammaScenario {
        domain: dom,
        kind: cfg.kind,
        x0: point(&cfg.x0)?,
        xi: vector(&cfg.xi)?,
        nu: vector(&cfg.nu)?,
        radii,
        ring_width: cfg.ring_width,
        refine: cfg.refine,
        limit: cfg.limit.as_ref().map(|l| l.build()).transpose()?,
        check_lower: cfg.check_lower,
        tolerance: cfg.tolerance,
        solver: cfg.solver.build(ctx.seed)?,
    };
    let r = gamma_experiment(&seq, &scenario)?;
    let mut rows = Vec::new();
    for (k, &eps) in r.radii.iter().enumerate() {
        for (j, &n) in r.ns.iter().enumerate() {
            rows.push(vec![num(eps), num(n), num(r.table[k][j]), num(r.inner_table[k][j])]);
        }
        rows.push(vec![num(eps), "limit".into(), num(r.limit[k]), String::new()]);
    }
    ctx.out.csv("gamma.csv", &["radius", "n", "value", "inner_value"], &rows)?;
    ctx.out.json("gamma.json", &r)
}

pub fn truncate(ctx: &mut Ctx) -> Result<()> {
    let cfg: TruncateConfig = ctx.load()?;
    let u = ctx.function(&cfg.function)?;
    let energy = cfg.energy.build()?;
    let theta0 = cfg.theta0.unwrap_or(DEFAULT_THETA0);
    let theta = cfg.theta.unwrap_or_else(|| theta_limit(&u, &energy, theta0));
    let t = truncate_with_limit(&u, &energy, cfg.lambda, theta, theta0)?;
    ctx.out.function("v.json", &t.v)?;
    ctx.out.set("rest.json", &t.rest)?;
    ctx.out.json("truncation.json", &t.report)
}

pub fn decompose(ctx: &mut Ctx) -> Result<()> {
    let cfg: DecomposeConfig = ctx.load()?;
    let e = ctx.set(&cfg.set)?;
    let p = point(&cfg.point)?;
    let dom = e.domain.clone();
    let mut labels = vec![0u32; dom.len()];
    let summary = match dom.dim {
        2 => {
            if cfg.axis.is_some() {
                return Err(Error::Format("axis applies to 3D sets only".into()));
            }
            let d = decompose_2d(&e, &p, cfg.theta)?;
            for i in e.cells() {
                labels[i] = if d.rest.contains(i) { 1 } else { 2 };
            }
            json!({
                "dim": 2,
                "theta": cfg.theta,
                "radius": d.radius,
                "ratio": d.ratio,
                "certificate": d.certificate,
            })
        }
        _ => {
            let axis = cfg
                .axis
                .ok_or_else(|| Error::Format("3D decomposition needs axis".into()))?;
            let d = decompose_3d(&e, &p, axis, cfg.theta)?;
            for i in d.rest.cells() {
                labels[i] = 1;
            }
            for (k, piece) in d.pieces.iter().enumerate() {
                for i in piece.cells() {
                    labels[i] = 2 + k as u32;
                }
            }
            json!({
                "dim": 3,
                "theta": d.theta,
                "axis": d.axis,
                "point": [d.point[0], d.point[1], d.point[2]],
                "pieces": d.pieces.len(),
                "cuts": d.cuts,
                "skipped_cutting": d.skipped_cutting,
                "max_ratio": d.max_ratio,
                "certificate": d.certificate,
            })
        }
    };
    ctx.out.grid("pieces.json", &dom, &labels)?;
    ctx.out.json("decompose.json", &summary)
}

pub fn render(ctx: &mut Ctx) -> Result<()> {
    let cfg: RenderConfig = ctx.load()?;
    if Path::new(&cfg.output).components().count() != 1 {
        return Err(Error::Format("output must be a plain file name".into()));
    }
    let (dom, labels) = match (&cfg.function, &cfg.set) {
        (Some(f), None) => {
            let u = ctx.function(f)?;
            (u.domain().clone(), u.partition.labels.clone())
        }
        (None, Some(s)) => {
            let s = ctx.set(s)?;
            let l = s.members.iter().map(|&m| m as u32).collect();
            (s.domain, l)
        }
        _ => return Err(Error::Format("give exactly one of function and set".into())),
    };
    let overlay = cfg.overlay.as_ref().map(|o| ctx.set(o)).transpose()?;
    if let Some(o) = &overlay {
        if o.domain != dom {
            return Err(Error::DomainMismatch);
        }
    }
    let s = svg::render(&dom, &labels, overlay.as_ref().map(|o| o.members.as_slice()))?;
    ctx.out.text(&cfg.output, &s)
}

pub fn certify(ctx: &mut Ctx, kind: Option<String>, samples: Option<usize>) -> Result<()> {
    let cfg = match (&ctx.config, kind) {
        (Some(_), None) => {
            let mut c: CertifyConfig = ctx.load()?;
            if let Some(n) = samples {
                c.samples = n;
            }
            c
        }
        (None, Some(k)) => CertifyConfig {
            kind: MatrixKind::parse(&k)?,
            samples: samples.unwrap_or(10_000),
        },
        (Some(_), Some(_)) => {
            return Err(Error::Format("give --kind or --config, not both".into()));
        }
        (None, None) => return Err(Error::Format("certify needs --kind or --config".into())),
    };
    ctx.resolved = serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    let report = certify_chart(cfg.kind, cfg.samples, ctx.seed)?;
    ctx.out.json("certify.json", &report)?;
    if !report.certificate.all_hold() {
        ctx.fail(format!(
            "chart certificate fails: {}",
            report.certificate.failures().join(", ")
        ));
    }
    Ok(())
}
