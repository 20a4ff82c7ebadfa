//! Truncation of piecewise rigid functions: components with very large
//! values are replaced by a single far motion, at the cost of a rest set of
//! small perimeter.

use serde::Serialize;

use crate::certificate::Certificate;
use crate::constructions::{decompose_2d_unchecked, decompose_3d_unchecked, DECOMPOSE_3D_CONSTANT};
use crate::energies::{Hypothesis, SurfaceEnergy};
use crate::grid::{LabelPartition, VoxelSet};
use crate::pr::PiecewiseRigidFunction;
use crate::rigid::{kernel_set, RigidMotion, Vec3};
use crate::{Error, Result};

pub const DEFAULT_THETA0: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Truncation {
    pub v: PiecewiseRigidFunction,
    pub rest: VoxelSet,
    pub report: TruncationReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationReport {
    pub lambda: f64,
    pub theta: f64,
    pub theta0: f64,
    /// Index `K` of the shell that becomes the rest set.
    pub shell: usize,
    /// Modulus `lambda theta^(-6K-1)` of the replacement value.
    pub replacement: f64,
    pub c_theta: f64,
    pub replaced_pieces: usize,
    pub modified_faces: usize,
    pub checks: Certificate,
    /// Per-component set decompositions behind the auxiliary rest set; not
    /// part of `checks`, which bound the rest set as a whole.
    pub decompositions: Certificate,
}

/// Largest admissible `theta` for `u` and `energy`: at most `theta0`, with
/// `1/theta >= c0` and, for rotations, `theta^-6 >= 2 diam(Omega)`.
pub fn theta_limit(u: &PiecewiseRigidFunction, energy: &SurfaceEnergy, theta0: f64) -> f64 {
    let mut t = theta0.min(0.5);
    if let Some(c0) = energy.c0 {
        t = t.min(1.0 / c0);
    }
    if u.kind.is_rotation() {
        t = t.min((2.0 * u.domain().diameter()).powf(-1.0 / 6.0));
    }
    t
}

pub fn truncate(
    u: &PiecewiseRigidFunction,
    energy: &SurfaceEnergy,
    lambda: f64,
    theta: f64,
) -> Result<Truncation> {
    truncate_with_limit(u, energy, lambda, theta, DEFAULT_THETA0)
}

struct Piece {
    cells: VoxelSet,
    sup: f64,
    inf: f64,
}

pub fn truncate_with_limit(
    u: &PiecewiseRigidFunction,
    energy: &SurfaceEnergy,
    lambda: f64,
    theta: f64,
    theta0: f64,
) -> Result<Truncation> {
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "lambda must be at least 1, got {lambda}"
        )));
    }
    energy.require(&[
        Hypothesis::H1,
        Hypothesis::H3,
        Hypothesis::H4,
        Hypothesis::H6,
    ])?;
    let limit = theta_limit(u, energy, theta0);
    if !(theta > 0.0 && theta <= limit) {
        return Err(Error::OutOfRange(format!(
            "theta must lie in (0, {limit}], got {theta}"
        )));
    }
    let dom = u.domain().clone();
    let dim = dom.dim;
    let cut = lambda * theta.powi(-6);
    let extremes = |set: &VoxelSet, m: &RigidMotion| {
        set.cells()
            .map(|i| m.eval(&dom.center(i)).norm())
            .fold((0.0f64, f64::INFINITY), |(hi, lo), x| {
                (hi.max(x), lo.min(x))
            })
    };

    let mut cert = Certificate::new("truncate");
    let mut aux = Certificate::new("decompositions");
    let ui = u.make_indecomposable();
    let mut rest_aux = VoxelSet::empty(&dom);
    let mut raw: Vec<(VoxelSet, RigidMotion)> = Vec::new();
    for (k, cells) in ui.label_cells().into_iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let m = ui.motions[k];
        let mut e = VoxelSet::empty(&dom);
        for &i in &cells {
            e.members[i] = true;
        }
        let (sup, _) = extremes(&e, &m);
        let kernel = if u.kind.is_rotation() || sup <= cut {
            None
        } else {
            kernel_set(&m, dim)
        };
        match kernel {
            None => raw.push((e, m)),
            Some(ks) if dim == 2 => {
                let d = decompose_2d_unchecked(&e, &ks.point, theta)?;
                aux.merge(&format!("component{k}"), &d.certificate);
                rest_aux = rest_aux.union(&d.rest)?;
                raw.push((e, m));
            }
            Some(ks) => {
                let n = ks.direction.unwrap();
                let axis = (0..3)
                    .max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs()))
                    .unwrap();
                let d = decompose_3d_unchecked(&e, &ks.point, axis, theta, DECOMPOSE_3D_CONSTANT)?;
                aux.merge(&format!("component{k}"), &d.certificate);
                rest_aux = rest_aux.union(&d.rest)?;
                raw.extend(d.pieces.into_iter().map(|p| (p, m)));
            }
        }
    }
    let pieces: Vec<Piece> = raw
        .into_iter()
        .filter_map(|(p, m)| {
            let cells = p.difference(&rest_aux).ok()?;
            if cells.is_empty() {
                return None;
            }
            let (sup, inf) = extremes(&cells, &m);
            Some(Piece { cells, sup, inf })
        })
        .collect();

    // Shell of each piece: lambda theta^-6k < sup <= lambda theta^-6(k+1).
    let shell_of = |sup: f64| -> usize {
        if sup <= cut {
            return 0;
        }
        let mut k = 1;
        while sup > lambda * theta.powi(-6 * (k as i32 + 1)) {
            k += 1;
        }
        k
    };
    let shells: Vec<usize> = pieces.iter().map(|p| shell_of(p.sup)).collect();
    let window = (1.0 / theta).floor() as usize;
    let mut s = vec![0.0; window + 1];
    for (p, &k) in pieces.iter().zip(&shells) {
        if (1..=window).contains(&k) {
            s[k] += p.cells.perimeter(None)?;
        }
    }
    let big = shells.iter().any(|&k| k > 0);
    let shell = (1..=window)
        .min_by(|&a, &b| s[a].total_cmp(&s[b]))
        .unwrap_or(1);
    let replacement = lambda * theta.powi(-6 * shell as i32 - 1);
    let c_theta = theta.powf(-6.0 / theta - 1.0);

    let (rest, replaced) = if big {
        let mut rest = rest_aux.clone();
        let mut replaced = VoxelSet::empty(&dom);
        for (p, &k) in pieces.iter().zip(&shells) {
            if k == shell {
                rest = rest.union(&p.cells)?;
            } else if k > shell {
                replaced = replaced.union(&p.cells)?;
            }
        }
        (rest, replaced)
    } else {
        // Nothing exceeds the cut: the identity already satisfies every bound.
        (VoxelSet::empty(&dom), VoxelSet::empty(&dom))
    };
    let region = rest.union(&replaced)?;

    let far = if u.kind.is_rotation() {
        let centre = Vec3::from_fn(|a, _| {
            if a < dim {
                dom.origin[a] + 0.5 * dom.extent[a] as f64 * dom.cell_size
            } else {
                0.0
            }
        });
        let reach = 0.5 * dom.diameter();
        RigidMotion::new(u.kind.neutral(), Vec3::x() * (replacement - reach) - centre)
    } else {
        RigidMotion::constant(u.kind, Vec3::x() * replacement)
    };
    let n_old = u.motions.len() as u32;
    let labels = (0..dom.len())
        .map(|i| {
            if region.contains(i) {
                n_old
            } else {
                u.label(i)
            }
        })
        .collect();
    let mut motions = u.motions.clone();
    motions.push(far);
    let v =
        PiecewiseRigidFunction::new(LabelPartition::new(&dom, labels)?, motions, u.kind)?.compact();

    // Bounds on the rest set.
    let budget = u.jump_area(None) + dom.boundary_area();
    let per_r = rest.perimeter(None)?;
    cert.constant("lambda", lambda);
    cert.constant("theta", theta);
    cert.constant("shell", shell as f64);
    cert.constant("replacement", replacement);
    cert.constant("C_theta", c_theta);
    cert.constant("jump_and_boundary", budget);
    let exponent = dim as f64 / (dim as f64 - 1.0);
    cert.check("rest_volume", rest.volume(), theta * budget.powf(exponent));
    cert.check("rest_perimeter", per_r, theta * budget);
    let total: f64 = s[1..].iter().sum();
    cert.check("shell_perimeter", s[shell], total / window as f64);

    // (i) changes only on the rest set or where |u| > lambda.
    let stray = (0..dom.len())
        .filter(|&i| v.value(i) != u.value(i) && !rest.contains(i) && u.value(i).norm() <= lambda)
        .count();
    cert.check("changed_outside", stray as f64, 0.0);
    // (ii) sup bound.
    cert.check("sup_norm", v.sup_norm(None), c_theta * lambda);
    // (iii) energy.
    let f_u = energy.evaluate(u, None);
    let f_v = energy.evaluate(&v, None);
    // both sides are sums over faces in different orders
    let rhs = f_u + energy.beta * per_r;
    cert.check("energy", f_v, rhs + 1e-12 * rhs.abs());

    // Replaced pieces: values comparable to their minimum.
    let lower = 3.0 * lambda * theta.powi(-6 * shell as i32 - 2);
    let mut n_replaced = 0;
    for (p, &k) in pieces.iter().zip(&shells) {
        if !big || k <= shell {
            continue;
        }
        n_replaced += 1;
        cert.check("max_min_ratio", p.sup, p.inf / (3.0 * theta.powi(4)));
        if u.kind.is_rotation() {
            cert.check("isometry_ratio", p.sup, 2.0 * p.inf);
        }
        cert.check("replaced_lower", lower, p.inf);
    }
    let kept_sup = (0..dom.len())
        .filter(|&i| !region.contains(i))
        .map(|i| u.value(i).norm())
        .fold(0.0, f64::max);
    if big {
        cert.check(
            "kept_upper",
            kept_sup,
            lambda * theta.powi(-6 * shell as i32),
        );
    }

    // Jump heights on the new interface away from the rest set.
    let mut modified = 0;
    let (mut min_jump, mut max_ratio) = (f64::INFINITY, 0.0f64);
    for f in dom.faces() {
        let (a, b) = (replaced.contains(f.lo), replaced.contains(f.hi));
        if a == b || rest.contains(f.lo) || rest.contains(f.hi) {
            continue;
        }
        modified += 1;
        let x = dom.face_center(&f);
        let jv = (v.motion_of(f.hi).eval(&x) - v.motion_of(f.lo).eval(&x)).norm();
        let ju = (u.motion_of(f.hi).eval(&x) - u.motion_of(f.lo).eval(&x)).norm();
        min_jump = min_jump.min(jv);
        max_ratio = max_ratio.max(jv / ju);
    }
    if modified > 0 {
        cert.check("new_jump_lower", 1.0 / theta, min_jump);
        cert.check("new_jump_ratio", max_ratio, theta);
    }
    let checks = cert.into_result()?;
    Ok(Truncation {
        v,
        rest,
        report: TruncationReport {
            lambda,
            theta,
            theta0,
            shell,
            replacement,
            c_theta,
            replaced_pieces: n_replaced,
            modified_faces: modified,
            checks,
            decompositions: aux,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridDomain, Point};
    use crate::rigid::{hat, rodrigues, rotation2, MatrixKind};

    fn planted(
        dom: &GridDomain,
        kind: MatrixKind,
        background: RigidMotion,
        blobs: &[(Point, f64, RigidMotion)],
    ) -> PiecewiseRigidFunction {
        let labels = (0..dom.len())
            .map(|i| {
                let x = dom.center(i);
                blobs
                    .iter()
                    .position(|(c, r, _)| (x - c).norm() < *r)
                    .map_or(0, |k| k as u32 + 1)
            })
            .collect();
        let mut motions = vec![background];
        motions.extend(blobs.iter().map(|b| b.2));
        PiecewiseRigidFunction::new(LabelPartition::new(dom, labels).unwrap(), motions, kind)
            .unwrap()
    }

    fn energy() -> SurfaceEnergy {
        SurfaceEnergy::constant(0.5, 1.0).unwrap()
    }

    #[test]
    fn bounded_function_is_kept() {
        let dom = GridDomain::centered(2, 32, 1.0 / 16.0).unwrap();
        let k = MatrixKind::Skew2;
        let u = planted(
            &dom,
            k,
            RigidMotion::new(hat(&Vec3::new(0.0, 0.0, 0.5)), Vec3::zeros()),
            &[(
                Point::new(0.3, 0.2, 0.0),
                0.4,
                RigidMotion::constant(k, Vec3::new(0.5, 0.0, 0.0)),
            )],
        );
        let t = truncate(&u, &energy(), 1.0, 0.1).unwrap();
        assert!(t.rest.is_empty());
        assert_eq!(t.v.partition.labels, u.compact().partition.labels);
        assert_eq!(t.report.replaced_pieces, 0);
    }

    #[test]
    fn far_translation_is_replaced_with_jump_relation() {
        let dom = GridDomain::centered(2, 48, 1.0 / 24.0).unwrap();
        let k = MatrixKind::Skew2;
        let u = planted(
            &dom,
            k,
            RigidMotion::constant(k, Vec3::new(0.2, 0.0, 0.0)),
            &[
                (
                    Point::new(0.4, 0.4, 0.0),
                    0.3,
                    RigidMotion::constant(k, Vec3::new(0.0, 3e20, 0.0)),
                ),
                (
                    Point::new(-0.4, -0.3, 0.0),
                    0.25,
                    RigidMotion::constant(k, Vec3::new(-2.0, 1.0, 0.0)),
                ),
            ],
        );
        let t = truncate(&u, &energy(), 1.0, 0.1).unwrap();
        let r = &t.report;
        assert_eq!(r.replaced_pieces, 1);
        assert!(t.rest.is_empty());
        assert!(r.modified_faces > 0);
        // Face-by-face oracle for the jump relation.
        let theta = 0.1;
        let mut seen = 0;
        for f in dom.faces() {
            let moved = |i: usize| t.v.value(i) != u.value(i);
            if moved(f.lo) == moved(f.hi) {
                continue;
            }
            seen += 1;
            let x = dom.face_center(&f);
            let jv = (t.v.motion_of(f.hi).eval(&x) - t.v.motion_of(f.lo).eval(&x)).norm();
            let ju = (u.motion_of(f.hi).eval(&x) - u.motion_of(f.lo).eval(&x)).norm();
            assert!(1.0 / theta <= jv && jv <= theta * ju);
        }
        assert_eq!(seen, r.modified_faces);
        // Outside the planted blob nothing changes; on it the value is b e1.
        for i in 0..dom.len() {
            if u.value(i).norm() < 1e3 {
                assert_eq!(t.v.value(i), u.value(i));
            } else {
                assert_eq!(t.v.value(i), Vec3::x() * r.replacement);
            }
        }
        assert!(t.v.sup_norm(None) <= r.c_theta);
        let e = energy();
        assert!(e.evaluate(&t.v, None) <= e.evaluate(&u, None));
    }

    #[test]
    fn rotation_component_far_away() {
        let dom = GridDomain::centered(2, 40, 0.05).unwrap();
        let k = MatrixKind::So2;
        let u = planted(
            &dom,
            k,
            RigidMotion::new(rotation2(0.3), Vec3::zeros()),
            &[(
                Point::new(0.0, 0.3, 0.0),
                0.35,
                RigidMotion::new(rotation2(2.0), Vec3::new(1e15, -4e14, 0.0)),
            )],
        );
        let t = truncate(&u, &energy(), 2.0, 0.1).unwrap();
        assert_eq!(t.report.replaced_pieces, 1);
        let ineq = t.report.checks.inequality("isometry_ratio").unwrap();
        assert!(ineq.holds);
        // Oracle: sup and inf of |q| on the blob from cell centres.
        let blob = u.motions[1];
        let vals: Vec<f64> = (0..dom.len())
            .filter(|&i| u.label(i) == 1)
            .map(|i| blob.eval(&dom.center(i)).norm())
            .collect();
        let sup = vals.iter().copied().fold(0.0, f64::max);
        let inf = vals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(ineq.lhs, sup);
        assert_eq!(ineq.rhs, 2.0 * inf);
        for i in 0..dom.len() {
            assert!(t.v.motion_of(i).q == u.kind.neutral() || t.v.motion_of(i) == u.motion_of(i));
        }
    }

    #[test]
    fn large_infinitesimal_rotation_uses_decomposition() {
        let dom = GridDomain::centered(2, 64, 1.0 / 32.0).unwrap();
        let k = MatrixKind::Skew2;
        // Kernel point inside the blob: a rest ball is cut out around it.
        let z = Vec3::new(0.2, 0.1, 0.0);
        let q = hat(&Vec3::new(0.0, 0.0, 1e9));
        let blob = RigidMotion::new(q, -(q * z));
        let u = planted(
            &dom,
            k,
            RigidMotion::constant(k, Vec3::zeros()),
            &[(Point::new(0.2, 0.1, 0.0), 0.5, blob)],
        );
        let t = truncate(&u, &energy(), 1.0, 0.1).unwrap();
        assert!(!t.rest.is_empty());
        assert!(t.rest.contains(dom.locate(&z).unwrap()));
        assert!(t.report.checks.all_hold());
    }

    #[test]
    fn three_dimensional_kinds() {
        let dom = GridDomain::centered(3, 20, 0.1).unwrap();
        let c = Point::new(0.2, -0.1, 0.1);
        for (k, m) in [
            (
                MatrixKind::So3,
                RigidMotion::new(
                    rodrigues(&Vec3::new(0.3, -1.0, 0.2)),
                    Vec3::new(0.0, 0.0, 1e12),
                ),
            ),
            (
                MatrixKind::Skew3,
                RigidMotion::constant(MatrixKind::Skew3, Vec3::new(5e11, 0.0, 0.0)),
            ),
            (MatrixKind::Skew3, {
                let q = hat(&Vec3::new(1e8, 2e7, -3e7));
                RigidMotion::new(q, Vec3::new(1e9, 0.0, 0.0))
            }),
        ] {
            let bg = RigidMotion::constant(k, Vec3::zeros());
            let u = planted(&dom, k, bg, &[(c, 0.6, m)]);
            let t = truncate(&u, &energy(), 1.0, 0.1).unwrap();
            assert!(t.report.checks.all_hold());
            assert!(t.v.sup_norm(None) <= t.report.c_theta);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let dom = GridDomain::centered(2, 8, 0.25).unwrap();
        let u = PiecewiseRigidFunction::uniform(
            &dom,
            RigidMotion::constant(MatrixKind::Skew2, Vec3::zeros()),
            MatrixKind::Skew2,
        )
        .unwrap();
        assert!(matches!(
            truncate(&u, &energy(), 0.5, 0.1),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            truncate(&u, &energy(), 1.0, 0.2),
            Err(Error::OutOfRange(_))
        ));
        let mut weak = energy();
        weak.flags.retain(|h| *h != Hypothesis::H6);
        assert!(truncate(&u, &weak, 1.0, 0.1).is_err());
    }
}
