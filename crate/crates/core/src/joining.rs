//! Joining a function on `A` with a function on `B` across their overlap:
//! the plain join, the variant that keeps the values of `v` on `B \ A`, and
//! the rescaled variant.
//!
//! Functions are passed on the full grid; only their values on the stated
//! region (`A` for `u`, `B` for `v`) are read. The joined function lives on
//! `U = A' ∪ B`; cells outside `U` carry a neutral motion.

use std::collections::HashMap;

use serde::Serialize;

use crate::certificate::Certificate;
use crate::constructions::{cover_points, piecewise_poincare};
use crate::energies::{Hypothesis, SurfaceEnergy};
use crate::grid::{
    best_slice, coarea_slab_select, distance_field, isoperimetric_constant, Face, GridDomain,
    LabelPartition, VoxelSet,
};
use crate::pr::{measure_distance, Parametrization, PiecewiseRigidFunction};
use crate::rigid::{
    corner_radius, tau_psi, transfer_constant, Mat, MatrixKind, PsiFn, RigidMotion, Vec3,
    ANCHOR_RADIUS,
};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct JoinCertificate {
    pub lambda: f64,
    /// `(M1/2 + 1) Lambda`, boundary-data variants only.
    pub theta: Option<f64>,
    pub phi: Option<f64>,
    pub eta: f64,
    pub delta: f64,
    pub m: f64,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub lhs_energy: f64,
    pub rhs_bound: f64,
    pub linf_min_dev: f64,
    /// The distance between `u` and `v` was too large for the cut-off
    /// construction and `w = u` on `A`, `w = v` on `B \ A` was returned.
    pub fallback: bool,
    pub checks: Certificate,
}

#[derive(Clone, Debug)]
pub struct Join {
    pub w: PiecewiseRigidFunction,
    /// `A' ∪ B`.
    pub region: VoxelSet,
    pub certificate: JoinCertificate,
}

/// Smallest sup-distance over `U` between two distinct motions of `v` whose
/// labels cover at least `delta` of `U \ A'`. Infinite with fewer than two
/// such labels.
pub fn compute_phi(
    a_prime: &VoxelSet,
    u_set: &VoxelSet,
    v: &PiecewiseRigidFunction,
    delta: f64,
) -> Result<f64> {
    if a_prime.domain != u_set.domain || v.domain() != &u_set.domain {
        return Err(Error::DomainMismatch);
    }
    let vp = v.make_pairwise_distinct();
    let dom = vp.domain();
    let cv = dom.cell_volume();
    let mut vol = vec![0.0; vp.motions.len()];
    for i in u_set.cells().filter(|&i| !a_prime.contains(i)) {
        vol[vp.label(i) as usize] += cv;
    }
    let large: Vec<usize> = (0..vol.len()).filter(|&j| vol[j] >= delta).collect();
    let mut phi = f64::INFINITY;
    for (n, &j1) in large.iter().enumerate() {
        for &j2 in &large[n + 1..] {
            phi = phi.min(motion_gap(&vp.motions[j1], &vp.motions[j2], u_set));
        }
    }
    Ok(phi)
}

/// Plain join: `w` on `A' ∪ B` close to `u` near `A'` and to `v` away from it.
#[allow(clippy::too_many_arguments)]
pub fn join(
    u: &PiecewiseRigidFunction,
    a: &VoxelSet,
    v: &PiecewiseRigidFunction,
    b: &VoxelSet,
    a_prime: &VoxelSet,
    eta: f64,
    psi: PsiFn,
    energy: &SurfaceEnergy,
) -> Result<Join> {
    let s = Setup::new(u, a, v, b, a_prime, eta, psi, energy, 1.0)?;
    let (w, checks) = s.construct()?;
    let checks = checks.into_result()?;
    Ok(s.finish(w, checks, None))
}

/// Join with `w = v` on `B \ A`, under the precondition `M1 Lambda <= Phi`.
#[allow(clippy::too_many_arguments)]
pub fn join_with_boundary(
    u: &PiecewiseRigidFunction,
    a: &VoxelSet,
    v: &PiecewiseRigidFunction,
    b: &VoxelSet,
    a_prime: &VoxelSet,
    eta: f64,
    psi: PsiFn,
    energy: &SurfaceEnergy,
) -> Result<Join> {
    let s = Setup::new(u, a, v, b, a_prime, eta, psi, energy, 1.0)?;
    s.boundary_join()
}

/// Join on `rho`-scaled sets. `u_rho`, `v_rho` and the sets live on one grid;
/// the problem is mapped to the grid with cell size divided by `rho`, joined
/// there with `psi(t) = t`, and mapped back.
#[allow(clippy::too_many_arguments)]
pub fn join_scaled(
    rho: f64,
    u_rho: &PiecewiseRigidFunction,
    a: &VoxelSet,
    v_rho: &PiecewiseRigidFunction,
    b: &VoxelSet,
    a_prime: &VoxelSet,
    eta: f64,
    energy: &SurfaceEnergy,
) -> Result<Join> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "rho must be positive, got {rho}"
        )));
    }
    if u_rho.kind.is_rotation() && rho != 1.0 {
        return Err(Error::Unsupported(
            "rescaling multiplies matrices by rho; rotation kinds admit rho = 1 only".into(),
        ));
    }
    let dom_rho = u_rho.domain().clone();
    let dom = scaled_domain(&dom_rho, 1.0 / rho);
    let u = rescale(u_rho, &dom, rho);
    let v = rescale(v_rho, &dom, rho);
    let (a1, b1, ap1) = (moved(a, &dom), moved(b, &dom), moved(a_prime, &dom));
    let psi = PsiFn::Power { p: 1.0 };
    let s = Setup::new(&u, &a1, &v, &b1, &ap1, eta, psi, energy, rho)?;

    // Precondition in the scaled frame.
    let d = dom.dim as i32;
    let bc = s.boundary_constants();
    let u_set_rho = a_prime.union(b)?;
    let overlap_rho = a.difference(a_prime)?.intersection(b)?;
    let l1_rho = measure_distance(u_rho, v_rho, &overlap_rho, psi)?;
    let scaled_l1 = rho.powi(-d) * l1_rho;
    let coef = s.lambda_coef.unwrap_or(f64::INFINITY);
    let phi_rho = compute_phi(a_prime, &u_set_rho, v_rho, rho.powi(d) * bc.delta)?;
    let pre_lhs = if scaled_l1 == 0.0 {
        0.0
    } else {
        coef * bc.m1 * scaled_l1
    };
    if !(pre_lhs <= phi_rho) {
        return Err(Error::Rejected(format!(
            "rho^-d M M1 |u - v|_L1 = {pre_lhs} exceeds Phi = {phi_rho}"
        )));
    }

    let inner = s.boundary_join()?;
    let w_rho = rescale(&inner.w, &dom_rho, 1.0 / rho);

    // Conclusions in the scaled frame.
    let mut cert = Certificate::new("join_scaled");
    cert.merge("unscaled", &inner.certificate.checks);
    cert.constant("rho", rho);
    cert.check("precondition", pre_lhs, phi_rho);
    let m2 = bc.m2.max((0.5 * bc.m1 + 1.0) * coef);
    cert.constant("M2", m2);
    let budget_arg = if scaled_l1 == 0.0 {
        0.0
    } else {
        m2 * scaled_l1
    };
    let c_rho = boundary_area(&[a, a_prime, b]);
    let f_u = energy_where(energy, 1.0, u_rho, |f| a.contains(f.lo) && a.contains(f.hi));
    let f_v = energy_where(energy, 1.0, v_rho, |f| b.contains(f.lo) && b.contains(f.hi));
    let lhs = energy_where(energy, 1.0, &w_rho, |f| {
        u_set_rho.contains(f.lo) && u_set_rho.contains(f.hi)
    });
    let rhs = f_u + f_v + (c_rho + f_u + f_v) * (2.0 * eta + m2 * energy.sigma.eval(budget_arg));
    cert.check("energy", lhs, rhs);
    let dev = min_deviation(&w_rho, u_rho, a, v_rho, b, &u_set_rho);
    cert.check("min_deviation", dev, budget_arg);
    let mismatch = b
        .cells()
        .filter(|&i| !a.contains(i) && w_rho.motion_of(i) != v_rho.motion_of(i))
        .count();
    cert.check("boundary_values", mismatch as f64, 0.0);
    let cert = cert.into_result()?;
    Ok(Join {
        w: w_rho,
        region: u_set_rho,
        certificate: JoinCertificate {
            lambda: inner.certificate.lambda,
            theta: Some(budget_arg),
            phi: Some(phi_rho),
            lhs_energy: lhs,
            rhs_bound: rhs,
            linf_min_dev: dev,
            m2: Some(m2),
            checks: cert,
            ..inner.certificate
        },
    })
}

// ----------------------------------------------------------------------------
// Shared setup

struct Setup<'a> {
    u: &'a PiecewiseRigidFunction,
    v: &'a PiecewiseRigidFunction,
    a: &'a VoxelSet,
    b: &'a VoxelSet,
    a_prime: &'a VoxelSet,
    energy: &'a SurfaceEnergy,
    scale: f64,
    eta: f64,
    kind: MatrixKind,
    dom: GridDomain,
    region: VoxelSet,
    overlap: VoxelSet,
    dist: Vec<f64>,
    gap: f64,
    slab_lambda: f64,
    m_lambda: f64,
    delta: f64,
    radius: f64,
    boundary: f64,
    up: PiecewiseRigidFunction,
    vp: PiecewiseRigidFunction,
    f_u: f64,
    f_v: f64,
    m: f64,
    fallback: bool,
    chart: Option<Chart>,
    lambda_star: f64,
    c_eta: f64,
    lambda: f64,
    lambda_coef: Option<f64>,
    theta_poincare: f64,
    constants: Certificate,
}

struct Chart {
    u_par: Parametrization,
    v_par: Parametrization,
}

struct BoundaryConstants {
    c_t: f64,
    delta: f64,
    c0: f64,
    m1: f64,
    m2: f64,
}

impl<'a> Setup<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        u: &'a PiecewiseRigidFunction,
        a: &'a VoxelSet,
        v: &'a PiecewiseRigidFunction,
        b: &'a VoxelSet,
        a_prime: &'a VoxelSet,
        eta: f64,
        psi: PsiFn,
        energy: &'a SurfaceEnergy,
        scale: f64,
    ) -> Result<Self> {
        let dom = u.domain().clone();
        if v.domain() != &dom || a.domain != dom || b.domain != dom || a_prime.domain != dom {
            return Err(Error::DomainMismatch);
        }
        if u.kind != v.kind {
            return Err(Error::OutOfRange(
                "u and v use different matrix sets".into(),
            ));
        }
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::OutOfRange(format!(
                "eta must lie in (0, 1), got {eta}"
            )));
        }
        energy.require(&[
            Hypothesis::H1,
            Hypothesis::H3,
            Hypothesis::H4,
            Hypothesis::H5Prime,
        ])?;
        if a_prime.is_empty() {
            return Err(Error::EmptySet("A'"));
        }
        if !a_prime.is_subset(a) {
            return Err(Error::OutOfRange("A' is not contained in A".into()));
        }
        let kind = u.kind;
        let dim = dom.dim;
        let h = dom.cell_size;
        let (alpha, beta) = (energy.alpha, energy.beta);
        let region = a_prime.union(b)?;
        let overlap = a.difference(a_prime)?.intersection(b)?;
        if overlap.is_empty() {
            return Err(Error::EmptyOverlap);
        }
        let dist = distance_field(a_prime)?;
        let gap = (0..dom.len())
            .filter(|&i| !a.contains(i))
            .map(|i| dist[i])
            .fold(f64::INFINITY, f64::min);
        if !gap.is_finite() {
            return Err(Error::EmptySet("complement of A"));
        }
        let slab_lambda = eta * alpha / (8.0 * beta);
        let k = (1.0 / slab_lambda).ceil();
        if gap < 4.0 * k * h {
            return Err(Error::SlabTooThin {
                gap,
                required: 4.0 * k * h,
            });
        }
        let m_lambda = 16.0 * dim as f64 * k / gap;
        let c_pi = isoperimetric_constant(dim);
        let delta = (alpha * eta / (8.0 * beta * c_pi * m_lambda)).powi(dim as i32);
        let radius = corner_radius(&a.union(b)?);
        let boundary = boundary_area(&[a, a_prime, b]);
        let up = u.make_pairwise_distinct();
        let vp = v.make_pairwise_distinct();
        let f_u = energy_where(energy, scale, &up, |f| a.contains(f.lo) && a.contains(f.hi));
        let f_v = energy_where(energy, scale, &vp, |f| b.contains(f.lo) && b.contains(f.hi));
        let sigma_inf = energy.sigma.sup();
        let mut m = 2.0 / alpha;
        if sigma_inf > 0.0 {
            m = m.max(beta / sigma_inf);
        }

        let mut constants = Certificate::new("join");
        constants.constant("eta", eta);
        constants.constant("alpha", alpha);
        constants.constant("beta", beta);
        constants.constant("d_AprimeA", gap);
        constants.constant("lambda_slab", slab_lambda);
        constants.constant("annuli", k);
        constants.constant("M_lambda", m_lambda);
        constants.constant("c_pi", c_pi);
        constants.constant("delta", delta);
        constants.constant("R", radius);
        constants.constant("boundary_area", boundary);
        constants.constant("M", m);

        let integral = measure_distance(u, v, &overlap, psi)?;
        let t = integral / delta;
        constants.constant("overlap_distance", integral);
        let mut s = Setup {
            u,
            v,
            a,
            b,
            a_prime,
            energy,
            scale,
            eta,
            kind,
            region,
            overlap,
            dist,
            gap,
            slab_lambda,
            m_lambda,
            delta,
            radius,
            boundary,
            up,
            vp,
            f_u,
            f_v,
            m,
            fallback: false,
            chart: None,
            lambda_star: f64::INFINITY,
            c_eta: f64::INFINITY,
            lambda: f64::INFINITY,
            lambda_coef: None,
            theta_poincare: eta / (2.0 * beta) * boundary,
            constants,
            dom,
        };
        if t >= psi.sup() {
            s.fallback = true;
            return Ok(s);
        }

        // Chart coordinates with a common anchor per ball of the cover.
        let cv = s.dom.cell_volume();
        let mut vol_u = vec![0.0; s.up.motions.len()];
        for i in a.cells() {
            vol_u[s.up.label(i) as usize] += cv;
        }
        let mut vol_v = vec![0.0; s.vp.motions.len()];
        for i in b.cells() {
            vol_v[s.vp.label(i) as usize] += cv;
        }
        let u_large: Vec<bool> = vol_u.iter().map(|&x| x >= delta).collect();
        let v_large: Vec<bool> = vol_v.iter().map(|&x| x >= delta).collect();
        let mut anchors_u: Vec<Mat> = s.up.motions.iter().map(|m| m.q).collect();
        let mut anchors_v: Vec<Mat> = s.vp.motions.iter().map(|m| m.q).collect();
        let c_l = kind.lipschitz();
        let c_delta = if kind.is_rotation() {
            let mut points = Vec::new();
            let mut owners = Vec::new();
            for (k, m) in s.up.motions.iter().enumerate().filter(|(k, _)| u_large[*k]) {
                points.push(m.q.as_slice().to_vec());
                owners.push((true, k));
            }
            for (k, m) in s.vp.motions.iter().enumerate().filter(|(k, _)| v_large[*k]) {
                points.push(m.q.as_slice().to_vec());
                owners.push((false, k));
            }
            let cover = cover_points(&points, ANCHOR_RADIUS)?;
            s.constants.merge("cover", &cover.certify(&points));
            for (p, &(is_u, k)) in points.iter().zip(&owners) {
                let ball = cover
                    .ball_of(p)
                    .ok_or_else(|| Error::OutOfRange("cover misses a matrix".into()))?;
                let anchor = Mat::from_column_slice(&cover.centers[ball]);
                if is_u {
                    anchors_u[k] = anchor;
                } else {
                    anchors_v[k] = anchor;
                }
            }
            let n = points.len() as i32;
            let c_frac = kind.inner_fraction();
            c_l.max(2.0 * (kind.param_dim() as f64).sqrt() * 8f64.powi(n) / c_frac)
        } else {
            c_l
        };
        let u_par = Parametrization::of(&s.up, Some(&anchors_u))?;
        let v_par = Parametrization::of(&s.vp, Some(&anchors_v))?;
        s.constants.constant("C_delta", c_delta);

        // Chart comparison between large labels of u and v.
        let mut worst: f64 = f64::NEG_INFINITY;
        for (i, mu) in s.up.motions.iter().enumerate().filter(|(i, _)| u_large[*i]) {
            for (j, mv) in s.vp.motions.iter().enumerate().filter(|(j, _)| v_large[*j]) {
                let dg: f64 = u_par.gamma[i]
                    .iter()
                    .zip(&v_par.gamma[j])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(dg - c_delta * (mu.q - mv.q).norm());
            }
        }
        if worst.is_finite() {
            s.constants.check("chart_comparison", worst, 0.0);
        }

        let dim_f = dim as f64;
        let tau = tau_psi(t, dim, radius, delta, psi);
        s.lambda_star = c_delta * dim_f.sqrt() * tau;
        let m_par = (kind.param_dim() + dim) as f64;
        s.c_eta = m_par * dim_f * s.region.volume() / s.theta_poincare;
        let factor = 2.0 * (1.0 + c_l * radius) * (1.0 + s.c_eta * m_lambda);
        s.lambda = if s.lambda_star == 0.0 {
            0.0
        } else {
            factor * s.lambda_star
        };
        if let PsiFn::Power { p } = psi {
            let c_p = tau_psi(1.0, dim, radius, delta, psi);
            s.lambda_coef = Some(factor * c_delta * dim_f.sqrt() * c_p * delta.powf(-1.0 / p));
        }
        s.constants.constant("Lambda_star", s.lambda_star);
        s.constants.constant("C_eta", s.c_eta);
        s.constants.constant("theta_poincare", s.theta_poincare);
        s.constants.constant("Lambda", s.lambda);
        if let Some(c) = s.lambda_coef {
            s.constants.constant("Lambda_coefficient", c);
        }
        s.chart = Some(Chart { u_par, v_par });
        Ok(s)
    }

    fn budget(&self) -> f64 {
        self.boundary + self.f_u + self.f_v
    }

    fn in_u(&self, f: &Face) -> bool {
        self.region.contains(f.lo) && self.region.contains(f.hi)
    }

    /// `w = u` on `A ∩ U`, `w = v` on `U \ A`.
    fn fallback_function(&self) -> Result<PiecewiseRigidFunction> {
        let nu = self.up.motions.len() as u32;
        let nv = self.vp.motions.len() as u32;
        let labels = (0..self.dom.len())
            .map(|i| {
                if !self.region.contains(i) {
                    nu + nv
                } else if self.a.contains(i) {
                    self.up.label(i)
                } else {
                    nu + self.vp.label(i)
                }
            })
            .collect();
        let mut motions = self.up.motions.clone();
        motions.extend(self.vp.motions.iter().copied());
        motions.push(RigidMotion::constant(self.kind, Vec3::zeros()));
        Ok(PiecewiseRigidFunction::new(
            LabelPartition::new(&self.dom, labels)?,
            motions,
            self.kind,
        )?
        .compact())
    }

    /// Runs the cut-off construction and records its inequalities; the
    /// returned certificate may contain failures.
    fn construct(&self) -> Result<(PiecewiseRigidFunction, Certificate)> {
        let mut cert = self.constants.clone();
        let beta = self.energy.beta;
        let alpha = self.energy.alpha;
        let eta = self.eta;
        if self.fallback {
            let w = self.fallback_function()?;
            self.conclude(&w, &mut cert);
            return Ok((w, cert));
        }
        let chart = self.chart.as_ref().unwrap();
        let dom = &self.dom;
        let dim = dom.dim;
        let cv = dom.cell_volume();
        let area = dom.face_area();

        // Overlap classes P_i^u ∩ P_j^v and the small ones.
        let class = |i: usize| (self.up.label(i), self.vp.label(i));
        let mut class_vol: HashMap<(u32, u32), f64> = HashMap::new();
        for i in self.overlap.cells() {
            *class_vol.entry(class(i)).or_insert(0.0) += cv;
        }
        let is_small = |i: usize| class_vol[&class(i)] < self.delta;
        let d_small = VoxelSet::from_fn(dom, |i| self.overlap.contains(i) && is_small(i));
        let mut class_faces = 0usize;
        let mut small_faces = 0usize;
        for i in self.overlap.cells() {
            for ax in 0..dim {
                for fwd in [false, true] {
                    let open = match dom.neighbor(i, ax, fwd) {
                        Some(j) => !self.overlap.contains(j) || class(j) != class(i),
                        None => true,
                    };
                    if open {
                        class_faces += 1;
                        if is_small(i) {
                            small_faces += 1;
                        }
                    }
                }
            }
        }
        let j_u = self.up.jump_area(Some(self.a));
        let j_v = self.vp.jump_area(Some(self.b));
        let c_pi = isoperimetric_constant(dim);
        cert.check(
            "class_perimeters",
            class_faces as f64 * area,
            self.boundary + 2.0 * j_u + 2.0 * j_v,
        );
        cert.check(
            "small_volume_isoperimetric",
            d_small.volume(),
            c_pi * self.delta.powf(1.0 / dim as f64) * small_faces as f64 * area,
        );
        cert.check(
            "small_volume",
            d_small.volume(),
            2.0 * c_pi * self.delta.powf(1.0 / dim as f64) / alpha * self.budget(),
        );

        // Cut-off and bad set.
        let slab = coarea_slab_select(self.a_prime, self.a, &d_small, self.slab_lambda)?;
        cert.merge("slab", &slab.certificate);
        cert.check("slab_m_lambda", slab.m_lambda, self.m_lambda);
        let (t1, t2) = (slab.t1, slab.t2);
        let phi = &slab.phi;
        let d_bad = slab.slab.clone();
        let d_good = self.region.difference(&d_bad)?;
        cert.constant("T1", t1);
        cert.constant("T2", t2);
        cert.check(
            "bad_perimeter",
            d_bad.perimeter(None)?,
            eta / (2.0 * beta) * self.budget(),
        );

        // Blend of the parametrizations on the good set.
        let dl = self.kind.param_dim();
        let par = |p: &Parametrization, k: u32| -> Vec<f64> {
            let mut out = p.gamma[k as usize].clone();
            out.extend((0..dim).map(|c| p.b[k as usize][c]));
            out
        };
        let z: Vec<Vec<f64>> = (0..dom.len())
            .map(|i| {
                if !d_good.contains(i) {
                    return Vec::new();
                }
                let f = phi[i];
                if f == 1.0 {
                    return par(&chart.u_par, self.up.label(i));
                }
                let pv = par(&chart.v_par, self.vp.label(i));
                if f == 0.0 {
                    return pv;
                }
                let pu = par(&chart.u_par, self.up.label(i));
                if pu == pv {
                    return pu;
                }
                pu.iter()
                    .zip(&pv)
                    .map(|(x, y)| f * x + (1.0 - f) * y)
                    .collect()
            })
            .collect();
        let is_jump = |f: &Face| {
            let (i, j) = (f.lo, f.hi);
            let u_on = phi[i] > 0.0 || phi[j] > 0.0;
            let v_on = phi[i] < 1.0 || phi[j] < 1.0;
            (u_on && self.up.label(i) != self.up.label(j))
                || (v_on && self.vp.label(i) != self.vp.label(j))
        };

        let mut gap_large: f64 = 0.0;
        for i in self.overlap.cells().filter(|&i| !is_small(i)) {
            let (lu, lv) = class(i);
            gap_large = gap_large.max(chart.u_par.distance(lu as usize, &chart.v_par, lv as usize));
        }
        cert.check("parametrization_gap", gap_large, self.lambda_star);

        let pc = piecewise_poincare(&z, &d_good, self.theta_poincare, None, &is_jump)?;
        cert.merge("poincare", &pc.certificate);
        let m_par = (dl + dim) as f64;
        cert.check(
            "poincare_gradient",
            pc.grad_l1,
            dim as f64 * m_par.sqrt() * self.region.volume() * self.m_lambda * self.lambda_star,
        );

        // Motions of the pieces; parameters equal to an input label's map back
        // to that label's motion exactly.
        let mut exact: HashMap<Vec<u64>, RigidMotion> = HashMap::new();
        for (k, m) in self.vp.motions.iter().enumerate() {
            exact.insert(bits(&par(&chart.v_par, k as u32)), *m);
        }
        for (k, m) in self.up.motions.iter().enumerate() {
            exact.insert(bits(&par(&chart.u_par, k as u32)), *m);
        }
        let mut motions = Vec::with_capacity(pc.values.len() + self.up.motions.len() + 1);
        for val in &pc.values {
            let m = match exact.get(&bits(val)) {
                Some(m) => *m,
                None => {
                    let q = self.kind.psi(&val[..dl])?;
                    let mut b = Vec3::zeros();
                    for c in 0..dim {
                        b[c] = val[dl + c];
                    }
                    RigidMotion::new(q, b)
                }
            };
            motions.push(m);
        }
        let n_pieces = motions.len() as u32;
        motions.extend(self.up.motions.iter().copied());
        motions.push(RigidMotion::constant(self.kind, Vec3::zeros()));
        let outside = motions.len() as u32 - 1;
        let labels = (0..dom.len())
            .map(|i| {
                if d_good.contains(i) {
                    pc.pieces[i]
                } else if d_bad.contains(i) {
                    n_pieces + self.up.label(i)
                } else {
                    outside
                }
            })
            .collect();
        let w = PiecewiseRigidFunction::new(LabelPartition::new(dom, labels)?, motions, self.kind)?
            .compact();

        // Distances to u and v on the parts of the good set.
        let half = 0.5 * self.lambda;
        let (mut near_u, mut near_v, mut both): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for i in d_good.cells() {
            let du = self
                .a
                .contains(i)
                .then(|| (w.value(i) - self.u.value(i)).norm());
            let dv = self
                .b
                .contains(i)
                .then(|| (w.value(i) - self.v.value(i)).norm());
            if self.dist[i] < t2 {
                near_u = near_u.max(du.unwrap_or(f64::INFINITY));
            }
            if self.dist[i] > t1 {
                near_v = near_v.max(dv.unwrap_or(f64::INFINITY));
            }
            if self.overlap.contains(i) && !is_small(i) {
                both = both.max(du.unwrap().max(dv.unwrap()));
            }
        }
        cert.check("near_u", near_u, half);
        cert.check("near_v", near_v, half);
        cert.check("large_both", both, half);
        let added = dom
            .faces()
            .filter(|f| {
                d_good.contains(f.lo) && d_good.contains(f.hi) && !is_jump(f) && w.jumps_across(f)
            })
            .count() as f64
            * area;
        cert.check("new_interface", added, self.theta_poincare);
        self.conclude(&w, &mut cert);
        Ok((w, cert))
    }

    /// Inequalities on the final `w` shared by the cut-off and fallback paths.
    fn conclude(&self, w: &PiecewiseRigidFunction, cert: &mut Certificate) {
        let alpha = self.energy.alpha;
        let lhs = energy_where(self.energy, self.scale, w, |f| self.in_u(f));
        let on_a = |f: &Face| self.a.contains(f.lo) && self.a.contains(f.hi);
        let on_b = |f: &Face| self.b.contains(f.lo) && self.b.contains(f.hi);
        let f_u_jw = energy_where(self.energy, self.scale, &self.up, |f| {
            on_a(f) && self.in_u(f) && w.jumps_across(f)
        });
        let f_v_jw = energy_where(self.energy, self.scale, &self.vp, |f| {
            on_b(f) && self.in_u(f) && w.jumps_across(f)
        });
        let rhs = f_u_jw
            + f_v_jw
            + self.budget() * (self.eta + self.m * self.energy.sigma.eval(self.lambda));
        cert.constant("lhs_energy", lhs);
        cert.constant("rhs_bound", rhs);
        cert.check("energy", lhs, rhs);
        let dev = min_deviation(w, self.u, self.a, self.v, self.b, &self.region);
        cert.constant("linf_min_dev", dev);
        cert.check("min_deviation", dev, self.lambda);
        if !self.fallback {
            cert.check(
                "jump_budget",
                w.jump_area(Some(&self.region)),
                (1.0 + self.eta) / alpha * self.budget(),
            );
            let far = self
                .b
                .cells()
                .filter(|&i| self.dist[i] >= 0.75 * self.gap)
                .map(|i| (w.value(i) - self.v.value(i)).norm())
                .fold(0.0, f64::max);
            cert.check("far_field", far, 0.5 * self.lambda);
        }
    }

    fn finish(
        &self,
        w: PiecewiseRigidFunction,
        checks: Certificate,
        extra: Option<(f64, f64, f64, f64)>,
    ) -> Join {
        let (theta, phi, m1, m2) = match extra {
            Some((t, p, a, b)) => (Some(t), Some(p), Some(a), Some(b)),
            None => (None, None, None, None),
        };
        Join {
            region: self.region.clone(),
            certificate: JoinCertificate {
                lambda: self.lambda,
                theta,
                phi,
                eta: self.eta,
                delta: self.delta,
                m: self.m,
                m1,
                m2,
                lhs_energy: checks.get("lhs_energy").unwrap_or(f64::NAN),
                rhs_bound: checks.get("rhs_bound").unwrap_or(f64::NAN),
                linf_min_dev: checks.get("linf_min_dev").unwrap_or(f64::NAN),
                fallback: self.fallback,
                checks,
            },
            w,
        }
    }

    fn boundary_constants(&self) -> BoundaryConstants {
        let dim = self.dom.dim;
        let h = self.dom.cell_size;
        let (alpha, beta) = (self.energy.alpha, self.energy.beta);
        let c_t = dim as f64 / (0.25 * self.gap - h);
        let c_pi = isoperimetric_constant(dim);
        let delta = (self.eta * alpha / (6.0 * beta * c_pi * c_t)).powi(dim as i32);
        let c0 = transfer_constant(dim, self.radius, delta);
        BoundaryConstants {
            c_t,
            delta,
            c0,
            m1: 2.0 * c0,
            m2: self.m + 3.0 / alpha,
        }
    }

    fn boundary_join(&self) -> Result<Join> {
        let bc = self.boundary_constants();
        let theta = if self.lambda == 0.0 {
            0.0
        } else {
            (0.5 * bc.m1 + 1.0) * self.lambda
        };
        let phi = compute_phi(self.a_prime, &self.region, self.v, bc.delta)?;
        let pre_lhs = if self.lambda == 0.0 {
            0.0
        } else {
            bc.m1 * self.lambda
        };
        if !(pre_lhs <= phi) {
            return Err(Error::Rejected(format!(
                "M1 * Lambda = {pre_lhs} exceeds Phi = {phi}"
            )));
        }
        let (z, z_cert) = self.construct()?;
        let z_cert = z_cert.into_result()?;
        let mut cert = Certificate::new("join_with_boundary");
        cert.merge("join", &z_cert);
        cert.constant("c_T", bc.c_t);
        cert.constant("delta_boundary", bc.delta);
        cert.constant("c0", bc.c0);
        cert.constant("M1", bc.m1);
        cert.constant("M2", bc.m2);
        cert.constant("Theta", theta);
        cert.constant("Phi", phi);
        cert.check("precondition", pre_lhs, phi);
        if let Some(c) = self.lambda_coef {
            cert.constant("Theta_coefficient", (0.5 * bc.m1 + 1.0) * c);
        }

        let w = if self.fallback {
            z.clone()
        } else {
            self.replace_near_boundary(&z, &bc, &mut cert)?
        };

        let lhs = energy_where(self.energy, self.scale, &w, |f| self.in_u(f));
        let rhs = self.f_u
            + self.f_v
            + self.budget() * (2.0 * self.eta + bc.m2 * self.energy.sigma.eval(theta));
        cert.constant("lhs_energy", lhs);
        cert.constant("rhs_bound", rhs);
        cert.check("energy", lhs, rhs);
        let dev = min_deviation(&w, self.u, self.a, self.v, self.b, &self.region);
        cert.constant("linf_min_dev", dev);
        cert.check("min_deviation", dev, theta);
        let mismatch = self
            .b
            .cells()
            .filter(|&i| !self.a.contains(i) && w.motion_of(i) != self.v.motion_of(i))
            .count();
        cert.check("boundary_values", mismatch as f64, 0.0);
        let cert = cert.into_result()?;
        Ok(self.finish(w, cert, Some((theta, phi, bc.m1, bc.m2))))
    }

    /// Replaces `z` by the unique large partner of `v` inside `E_T` and by `v`
    /// outside.
    fn replace_near_boundary(
        &self,
        z: &PiecewiseRigidFunction,
        bc: &BoundaryConstants,
        cert: &mut Certificate,
    ) -> Result<PiecewiseRigidFunction> {
        let dom = &self.dom;
        let dim = dom.dim;
        let h = dom.cell_size;
        let cv = dom.cell_volume();
        let area = dom.face_area();
        let zp = z.make_pairwise_distinct();
        let vp = &self.vp;
        let in_k = |i: usize| self.dist[i] >= 0.75 * self.gap;
        let class = |i: usize| (zp.label(i), vp.label(i));

        let mut vol_k: HashMap<(u32, u32), f64> = HashMap::new();
        for i in self.b.cells() {
            let e = vol_k.entry(class(i)).or_insert(0.0);
            if in_k(i) {
                *e += cv;
            }
        }
        let is_small = |i: usize| vol_k[&class(i)] < bc.delta;
        let f_small_k = self.b.cells().filter(|&i| is_small(i) && in_k(i)).count() as f64 * cv;
        let mut small_faces = 0usize;
        for i in self.b.cells().filter(|&i| is_small(i)) {
            for ax in 0..dim {
                for fwd in [false, true] {
                    let open = match dom.neighbor(i, ax, fwd) {
                        Some(j) => !self.b.contains(j) || class(j) != class(i),
                        None => true,
                    };
                    small_faces += open as usize;
                }
            }
        }
        let j_v = vp.jump_area(Some(self.b));
        let j_z = zp.jump_area(Some(&self.region));
        let per_b = self.b.perimeter(None)?;
        let c_pi = isoperimetric_constant(dim);
        let root = bc.delta.powf(1.0 / dim as f64);
        cert.check(
            "small_volume_isoperimetric",
            f_small_k,
            root * c_pi * small_faces as f64 * area,
        );
        cert.check(
            "small_perimeters",
            small_faces as f64 * area,
            2.0 * (j_v + j_z + per_b),
        );
        cert.check("jz_budget", j_z, 2.0 / self.energy.alpha * self.budget());
        let z_far = self
            .b
            .cells()
            .filter(|&i| in_k(i))
            .map(|i| (z.value(i) - self.v.value(i)).norm())
            .fold(0.0, f64::max);
        cert.check("z_far_field", z_far, 0.5 * self.lambda);

        // Cut radius in the outer quarter of the gap.
        let pairs: Vec<(f64, f64)> = dom
            .faces()
            .filter(|f| self.b.contains(f.lo) && self.b.contains(f.hi))
            .filter(|f| class(f.lo) == class(f.hi) && is_small(f.lo))
            .map(|f| {
                let (x, y) = (self.dist[f.lo], self.dist[f.hi]);
                (x.min(y), x.max(y))
            })
            .collect();
        let slice = |t: f64| pairs.iter().filter(|&&(x, y)| x < t && t <= y).count();
        let (lo, hi) = (0.75 * self.gap + h, self.gap);
        let t = best_slice(lo, hi, &self.dist, &slice);
        cert.constant("T", t);
        cert.check("T_window_lo", lo, t);
        cert.check("T_window_hi", t, hi);
        let cut = slice(t) as f64 * area;
        cert.check("cut_area", cut, bc.c_t * f_small_k);

        // Unique large partner per component of z.
        let mut partners: Vec<Vec<u32>> = vec![Vec::new(); zp.motions.len()];
        let mut keys: Vec<(u32, u32)> = vol_k
            .keys()
            .copied()
            .filter(|k| vol_k[k] >= bc.delta)
            .collect();
        keys.sort_unstable();
        let quarter = 0.25 * bc.m1 * self.lambda;
        let mut partner_gap: f64 = 0.0;
        let mut transfer: f64 = f64::NEG_INFINITY;
        for &(i, j) in &keys {
            partners[i as usize].push(j);
            let (qz, qv) = (&zp.motions[i as usize], &vp.motions[j as usize]);
            let on_u = motion_gap(qz, qv, &self.region);
            partner_gap = partner_gap.max(on_u);
            let on_k = self
                .b
                .cells()
                .filter(|&c| in_k(c) && class(c) == (i, j))
                .map(|c| {
                    let x = dom.center(c);
                    (qz.eval(&x) - qv.eval(&x)).norm()
                })
                .fold(0.0, f64::max);
            transfer = transfer.max(on_u - bc.c0 * on_k);
        }
        let most = partners.iter().map(|p| p.len()).max().unwrap_or(0);
        cert.check("unique_partner", most as f64, 1.0);
        cert.check(
            "partner_gap",
            partner_gap,
            if self.lambda == 0.0 { 0.0 } else { quarter },
        );
        if transfer.is_finite() {
            cert.check("transfer", transfer, 0.0);
        }

        let nv = vp.motions.len() as u32;
        let nz = zp.motions.len() as u32;
        let mut motions = vp.motions.clone();
        motions.extend(zp.motions.iter().copied());
        motions.push(RigidMotion::constant(self.kind, Vec3::zeros()));
        let labels = (0..dom.len())
            .map(|c| {
                if !self.region.contains(c) {
                    nv + nz
                } else if self.dist[c] < t {
                    let i = zp.label(c);
                    match partners[i as usize].first() {
                        Some(&j) => j,
                        None => nv + i,
                    }
                } else {
                    vp.label(c)
                }
            })
            .collect();
        let w = PiecewiseRigidFunction::new(LabelPartition::new(dom, labels)?, motions, self.kind)?
            .compact();

        let w_z = (0..dom.len())
            .filter(|&c| self.region.contains(c))
            .map(|c| (w.value(c) - z.value(c)).norm())
            .fold(0.0, f64::max);
        cert.check(
            "w_minus_z",
            w_z,
            if self.lambda == 0.0 { 0.0 } else { quarter },
        );
        let new_faces = dom
            .faces()
            .filter(|f| self.in_u(f) && w.jumps_across(f) && !zp.jumps_across(f))
            .filter(|f| !(self.b.contains(f.lo) && self.b.contains(f.hi) && vp.jumps_across(f)))
            .count() as f64
            * area;
        cert.check("new_jumps", new_faces, cut);
        cert.check(
            "new_jump_energy",
            self.energy.beta * new_faces,
            self.eta * self.budget(),
        );
        Ok(w)
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Sup over cell centres of `set` of `|q1 - q2|`.
fn motion_gap(q1: &RigidMotion, q2: &RigidMotion, set: &VoxelSet) -> f64 {
    let dom = &set.domain;
    set.cells()
        .map(|i| {
            let x = dom.center(i);
            (q1.eval(&x) - q2.eval(&x)).norm()
        })
        .fold(0.0, f64::max)
}

/// `max_U min{|w - u|, |w - v|}` at cell centres, each comparison taken where
/// the function is defined.
fn min_deviation(
    w: &PiecewiseRigidFunction,
    u: &PiecewiseRigidFunction,
    a: &VoxelSet,
    v: &PiecewiseRigidFunction,
    b: &VoxelSet,
    region: &VoxelSet,
) -> f64 {
    region
        .cells()
        .map(|i| {
            let wi = w.value(i);
            let du = if a.contains(i) {
                (wi - u.value(i)).norm()
            } else {
                f64::INFINITY
            };
            let dv = if b.contains(i) {
                (wi - v.value(i)).norm()
            } else {
                f64::INFINITY
            };
            du.min(dv)
        })
        .fold(0.0, f64::max)
}

/// Area of the union of the boundaries of `sets`, exterior faces included.
pub fn boundary_area(sets: &[&VoxelSet]) -> f64 {
    let dom = &sets[0].domain;
    let mut n = dom
        .faces()
        .filter(|f| sets.iter().any(|s| s.contains(f.lo) != s.contains(f.hi)))
        .count();
    for i in 0..dom.len() {
        let e = dom.exterior_faces(i);
        if e > 0 && sets.iter().any(|s| s.contains(i)) {
            n += e;
        }
    }
    n as f64 * dom.face_area()
}

/// Surface energy of `u` over its jump faces accepted by `keep`, with the
/// density evaluated at `scale` times the face centre.
pub(crate) fn energy_where(
    energy: &SurfaceEnergy,
    scale: f64,
    u: &PiecewiseRigidFunction,
    keep: impl Fn(&Face) -> bool,
) -> f64 {
    let dom = u.domain();
    let area = dom.face_area();
    dom.faces()
        .filter(|f| keep(f) && u.jumps_across(f))
        .map(|f| {
            let x = dom.face_center(&f);
            let xi = u.motion_of(f.hi).eval(&x) - u.motion_of(f.lo).eval(&x);
            let mut nu = Vec3::zeros();
            nu[f.axis] = 1.0;
            energy.density(&(x * scale), &xi, &nu) * area
        })
        .sum()
}

fn scaled_domain(dom: &GridDomain, factor: f64) -> GridDomain {
    GridDomain {
        cell_size: dom.cell_size * factor,
        origin: [
            dom.origin[0] * factor,
            dom.origin[1] * factor,
            dom.origin[2] * factor,
        ],
        ..dom.clone()
    }
}

/// `x -> u(factor x)` on `dom`, which must be the grid of `u` scaled by `1/factor`.
fn rescale(u: &PiecewiseRigidFunction, dom: &GridDomain, factor: f64) -> PiecewiseRigidFunction {
    PiecewiseRigidFunction {
        partition: LabelPartition {
            domain: dom.clone(),
            labels: u.partition.labels.clone(),
        },
        motions: u
            .motions
            .iter()
            .map(|m| {
                if factor == 1.0 {
                    *m
                } else {
                    RigidMotion::new(m.q * factor, m.b)
                }
            })
            .collect(),
        kind: u.kind,
    }
}

fn moved(s: &VoxelSet, dom: &GridDomain) -> VoxelSet {
    VoxelSet {
        domain: dom.clone(),
        members: s.members.clone(),
    }
}
