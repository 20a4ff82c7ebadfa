//! Piecewise rigid functions: representations, jump sets, distances and the
//! blow-up modification at jump points.

use crate::certificate::Certificate;
use crate::grid::{labels_by, Face, GridDomain, LabelPartition, Point, VoxelSet};
use crate::rigid::{MatrixKind, PsiFn, RigidMotion, Vec3};
use crate::{Error, Result};

/// Motions closer than this (entrywise) are treated as equal.
pub const MOTION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseRigidFunction {
    pub partition: LabelPartition,
    /// Motion of label `k` at index `k`.
    pub motions: Vec<RigidMotion>,
    pub kind: MatrixKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpFace {
    pub face: Face,
    pub x: Point,
    /// Normal axis; the normal is `+e_axis`.
    pub axis: usize,
    /// Trace from the `+e_axis` side minus trace from the other side.
    pub xi: Vec3,
    pub area: f64,
    pub plus_label: u32,
    pub minus_label: u32,
    /// The jump vanishes at the face centre although the motions differ.
    pub degenerate: bool,
}

impl PiecewiseRigidFunction {
    pub fn new(
        partition: LabelPartition,
        motions: Vec<RigidMotion>,
        kind: MatrixKind,
    ) -> Result<Self> {
        if partition.domain.dim != kind.dim() {
            return Err(Error::InvalidDomain(format!(
                "{} needs a {}-dimensional domain",
                kind.name(),
                kind.dim()
            )));
        }
        if partition.max_label() as usize >= motions.len() {
            return Err(Error::OutOfRange(format!(
                "label {} has no motion",
                partition.max_label()
            )));
        }
        for (k, m) in motions.iter().enumerate() {
            if !kind.contains(&m.q) {
                return Err(Error::NotInMatrixSet(format!("motion of label {k}")));
            }
        }
        Ok(PiecewiseRigidFunction {
            partition,
            motions,
            kind,
        })
    }

    /// A single rigid motion on the whole domain.
    pub fn uniform(domain: &GridDomain, motion: RigidMotion, kind: MatrixKind) -> Result<Self> {
        Self::new(LabelPartition::uniform(domain, 0), vec![motion], kind)
    }

    pub fn domain(&self) -> &GridDomain {
        &self.partition.domain
    }

    pub fn label(&self, cell: usize) -> u32 {
        self.partition.labels[cell]
    }

    pub fn motion_of(&self, cell: usize) -> &RigidMotion {
        &self.motions[self.label(cell) as usize]
    }

    /// Value at the centre of `cell`.
    pub fn value(&self, cell: usize) -> Vec3 {
        self.motion_of(cell).eval(&self.domain().center(cell))
    }

    /// Labels differ across `f` and carry different motions.
    pub fn jumps_across(&self, f: &Face) -> bool {
        let (a, b) = (self.label(f.lo), self.label(f.hi));
        a != b && !self.motions[a as usize].approx_eq(&self.motions[b as usize], MOTION_TOL)
    }

    /// Jump faces with both cells in `region` (all interior faces if `None`).
    pub fn jump_set(&self, region: Option<&VoxelSet>) -> Vec<JumpFace> {
        let dom = self.domain();
        let area = dom.face_area();
        dom.faces()
            .filter(|f| region.map_or(true, |r| r.members[f.lo] && r.members[f.hi]))
            .filter(|f| self.jumps_across(f))
            .map(|f| {
                let x = dom.face_center(&f);
                let plus = self.motion_of(f.hi);
                let minus = self.motion_of(f.lo);
                let xi = plus.eval(&x) - minus.eval(&x);
                JumpFace {
                    face: f,
                    x,
                    axis: f.axis,
                    xi,
                    area,
                    plus_label: self.label(f.hi),
                    minus_label: self.label(f.lo),
                    degenerate: xi.amax() == 0.0,
                }
            })
            .collect()
    }

    pub fn jump_area(&self, region: Option<&VoxelSet>) -> f64 {
        let dom = self.domain();
        dom.faces()
            .filter(|f| region.map_or(true, |r| r.members[f.lo] && r.members[f.hi]))
            .filter(|f| self.jumps_across(f))
            .count() as f64
            * dom.face_area()
    }

    /// Drops unused labels and renumbers in order of first appearance.
    pub fn compact(&self) -> Self {
        let mut map = vec![u32::MAX; self.motions.len()];
        let mut motions = Vec::new();
        let labels = self
            .partition
            .labels
            .iter()
            .map(|&l| {
                if map[l as usize] == u32::MAX {
                    map[l as usize] = motions.len() as u32;
                    motions.push(self.motions[l as usize]);
                }
                map[l as usize]
            })
            .collect();
        PiecewiseRigidFunction {
            partition: LabelPartition {
                domain: self.domain().clone(),
                labels,
            },
            motions,
            kind: self.kind,
        }
    }

    /// Merges labels carrying equal motions.
    pub fn make_pairwise_distinct(&self) -> Self {
        let c = self.compact();
        let mut reps: Vec<RigidMotion> = Vec::new();
        let mut map = Vec::with_capacity(c.motions.len());
        for m in &c.motions {
            match reps.iter().position(|r| r.approx_eq(m, MOTION_TOL)) {
                Some(k) => map.push(k as u32),
                None => {
                    map.push(reps.len() as u32);
                    reps.push(*m);
                }
            }
        }
        let labels = c
            .partition
            .labels
            .iter()
            .map(|&l| map[l as usize])
            .collect();
        PiecewiseRigidFunction {
            partition: LabelPartition {
                domain: c.partition.domain,
                labels,
            },
            motions: reps,
            kind: self.kind,
        }
    }

    /// Pairwise distinct representation with every label face-connected.
    pub fn make_indecomposable(&self) -> Self {
        let p = self.make_pairwise_distinct();
        let dom = p.domain();
        let (comp, _) = labels_by(dom, |_| true, |a, b| p.label(a) == p.label(b));
        let mut motions = Vec::new();
        let mut seen = vec![u32::MAX; dom.len()];
        let labels = comp
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if seen[c as usize] == u32::MAX {
                    seen[c as usize] = motions.len() as u32;
                    motions.push(*p.motion_of(i));
                }
                seen[c as usize]
            })
            .collect();
        PiecewiseRigidFunction {
            partition: LabelPartition {
                domain: dom.clone(),
                labels,
            },
            motions,
            kind: self.kind,
        }
    }

    /// Cells carrying each label.
    pub fn label_cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.motions.len()];
        for (i, &l) in self.partition.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// Maximum of `|u|` over cell centres of `region` (whole domain if `None`).
    pub fn sup_norm(&self, region: Option<&VoxelSet>) -> f64 {
        (0..self.domain().len())
            .filter(|&i| region.map_or(true, |r| r.members[i]))
            .map(|i| self.value(i).norm())
            .fold(0.0, f64::max)
    }
}

/// Midpoint quadrature of `psi(|u - v|)` over `region`.
pub fn measure_distance(
    u: &PiecewiseRigidFunction,
    v: &PiecewiseRigidFunction,
    region: &VoxelSet,
    psi: PsiFn,
) -> Result<f64> {
    if u.domain() != v.domain() || u.domain() != &region.domain {
        return Err(Error::DomainMismatch);
    }
    let vol = u.domain().cell_volume();
    Ok(region
        .cells()
        .map(|i| psi.eval((u.value(i) - v.value(i)).norm()) * vol)
        .sum())
}

/// Face of the grid through `x0`, if `x0` lies on an interior face.
pub fn face_at(domain: &GridDomain, x0: &Point) -> Option<Face> {
    let h = domain.cell_size;
    for axis in 0..domain.dim {
        let t = (x0[axis] - domain.origin[axis]) / h;
        let k = t.round();
        if (t - k).abs() > 1e-9 || k < 1.0 || k >= domain.extent[axis] as f64 {
            continue;
        }
        let mut lo_pt = *x0;
        lo_pt[axis] -= 0.5 * h;
        let lo = domain.locate(&lo_pt)?;
        let hi = domain.neighbor(lo, axis, true)?;
        return Some(Face { lo, hi, axis });
    }
    None
}

#[derive(Clone, Debug)]
pub struct BlowUp {
    /// Equals `u` outside the selected ball.
    pub function: PiecewiseRigidFunction,
    pub ball: VoxelSet,
    pub radius: f64,
    pub slice_area: f64,
    pub labels: (u32, u32),
    pub certificate: Certificate,
}

/// Replaces `u` inside a ball around the jump point `x0` by the two motions
/// meeting at `x0` and zero elsewhere, choosing the ball radius in
/// `((1-theta) eps, eps)` with the smallest added boundary.
pub fn blow_up_modify(
    u: &PiecewiseRigidFunction,
    x0: &Point,
    eps: f64,
    theta: f64,
) -> Result<BlowUp> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::OutOfRange(format!(
            "theta must lie in (0,1), got {theta}"
        )));
    }
    let dom = u.domain();
    let face =
        face_at(dom, x0).ok_or_else(|| Error::NotJumpPoint(format!("{x0:?} is not on a face")))?;
    let (li, lj) = (u.label(face.lo), u.label(face.hi));
    if li == lj || u.motions[li as usize].approx_eq(&u.motions[lj as usize], MOTION_TOL) {
        return Err(Error::NotJumpPoint(
            "face does not separate distinct motions".into(),
        ));
    }
    for a in 0..dom.dim {
        let lo = dom.origin[a];
        let hi = lo + dom.extent[a] as f64 * dom.cell_size;
        if x0[a] - eps < lo || x0[a] + eps > hi {
            return Err(Error::OutOfRange(format!(
                "ball of radius {eps} leaves the domain"
            )));
        }
    }
    let dist: Vec<f64> = (0..dom.len())
        .map(|i| (dom.center(i) - x0).norm())
        .collect();
    let outer = VoxelSet::from_fn(dom, |i| dist[i] < eps);
    let ring_min = outer
        .cells()
        .filter(|&i| {
            (0..dom.dim).any(|a| {
                [false, true].iter().any(|&f| match dom.neighbor(i, a, f) {
                    Some(j) => !outer.members[j],
                    None => true,
                })
            })
        })
        .map(|i| dist[i])
        .fold(f64::INFINITY, f64::min);
    let inner = (1.0 - theta) * eps;
    let mut candidates: Vec<f64> = dist
        .iter()
        .copied()
        .filter(|&r| r > inner && r <= ring_min)
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::OutOfRange(
            "no admissible radius between (1-theta)eps and the boundary ring".into(),
        ));
    }
    let keep = |i: usize| u.label(i) == li || u.label(i) == lj;
    let slice = |gamma: f64| -> usize {
        let mut n = 0;
        for i in 0..dom.len() {
            if dist[i] >= gamma || keep(i) {
                continue;
            }
            for a in 0..dom.dim {
                for f in [false, true] {
                    if let Some(j) = dom.neighbor(i, a, f) {
                        if dist[j] >= gamma {
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    };
    let (gamma, best) = candidates
        .iter()
        .map(|&g| (g, slice(g)))
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.partial_cmp(&b.0).unwrap()))
        .unwrap();
    let ball = VoxelSet::from_fn(dom, |i| dist[i] < gamma);
    let zero = u.motions.len() as u32;
    let mut motions = u.motions.clone();
    motions.push(RigidMotion::constant(u.kind, Vec3::zeros()));
    let labels = (0..dom.len())
        .map(|i| {
            if ball.members[i] && !keep(i) {
                zero
            } else {
                u.label(i)
            }
        })
        .collect();
    let w = PiecewiseRigidFunction {
        partition: LabelPartition {
            domain: dom.clone(),
            labels,
        },
        motions,
        kind: u.kind,
    };
    let slice_area = best as f64 * dom.face_area();
    let mut cert = Certificate::new("blow_up_modify");
    cert.constant("radius", gamma);
    cert.check(
        "jump_area",
        w.jump_area(None),
        u.jump_area(None) + slice_area,
    );
    let inner_bad = (0..dom.len())
        .filter(|&i| dist[i] < inner && !keep(i) && w.label(i) != zero)
        .count();
    cert.check("two_motions_inside", inner_bad as f64, 0.0);
    let ring_changed = outer
        .cells()
        .filter(|&i| dist[i] >= ring_min && w.label(i) != u.label(i))
        .count();
    cert.check("equal_on_boundary_ring", ring_changed as f64, 0.0);
    let certificate = cert.into_result()?;
    Ok(BlowUp {
        function: w,
        ball,
        radius: gamma,
        slice_area,
        labels: (li, lj),
        certificate,
    })
}

/// Chart coordinates `(gamma, b)` per label.
#[derive(Clone, Debug, PartialEq)]
pub struct Parametrization {
    pub gamma: Vec<Vec<f64>>,
    pub b: Vec<Vec3>,
}

impl Parametrization {
    /// Parametrizes every motion, using `anchors[k]` as chart centre for label `k`.
    pub fn of(u: &PiecewiseRigidFunction, anchors: Option<&[crate::rigid::Mat]>) -> Result<Self> {
        let mut gamma = Vec::with_capacity(u.motions.len());
        for (k, m) in u.motions.iter().enumerate() {
            gamma.push(u.kind.xi(&m.q, anchors.map(|a| &a[k]))?);
        }
        Ok(Parametrization {
            gamma,
            b: u.motions.iter().map(|m| m.b).collect(),
        })
    }

    /// Euclidean norm of the stacked difference `(gamma, b)` of two labels'
    /// parameters, possibly from different parametrizations.
    pub fn distance(&self, k: usize, other: &Parametrization, l: usize) -> f64 {
        let g: f64 = self.gamma[k]
            .iter()
            .zip(&other.gamma[l])
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        (g + (self.b[k] - other.b[l]).norm_squared()).sqrt()
    }
}
