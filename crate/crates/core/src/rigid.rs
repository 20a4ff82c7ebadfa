//! Admissible matrix sets, their chart maps, and rigid-motion estimates.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid::{Point, VoxelSet};
use crate::{Error, Result};

pub type Mat = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Equivalence constant between the Frobenius and spectral norms used to
/// clip the angle chart.
pub const C2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Radius of the anchor balls for rotation charts.
pub const ANCHOR_RADIUS: f64 = 0.125;

const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Skew2,
    Skew3,
    So2,
    So3,
}

impl MatrixKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "skew2" => Ok(MatrixKind::Skew2),
            "skew3" => Ok(MatrixKind::Skew3),
            "so2" => Ok(MatrixKind::So2),
            "so3" => Ok(MatrixKind::So3),
            other => Err(Error::OutOfRange(format!("unknown matrix kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Skew2 => "skew2",
            MatrixKind::Skew3 => "skew3",
            MatrixKind::So2 => "so2",
            MatrixKind::So3 => "so3",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            MatrixKind::Skew2 | MatrixKind::So2 => 2,
            _ => 3,
        }
    }

    /// Number of chart parameters.
    pub fn param_dim(self) -> usize {
        match self {
            MatrixKind::Skew2 | MatrixKind::So2 => 1,
            _ => 3,
        }
    }

    /// Half-width of the parameter box.
    pub fn param_radius(self) -> f64 {
        if self.is_rotation() {
            2.0 * PI
        } else {
            f64::INFINITY
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, MatrixKind::So2 | MatrixKind::So3)
    }

    /// Inner-ball fraction: chart balls have radius `c_L * r_L`.
    pub fn inner_fraction(self) -> f64 {
        if self.is_rotation() {
            ANCHOR_RADIUS / (2.0 * PI)
        } else {
            0.5
        }
    }

    pub fn chart_radius(self) -> f64 {
        if self.is_rotation() {
            ANCHOR_RADIUS
        } else {
            f64::INFINITY
        }
    }

    /// Lipschitz constant shared by `psi` and `xi` (Frobenius norm on matrices).
    pub fn lipschitz(self) -> f64 {
        match self {
            MatrixKind::Skew2 | MatrixKind::Skew3 => std::f64::consts::SQRT_2,
            MatrixKind::So2 | MatrixKind::So3 => 2.0,
        }
    }

    /// The element used as the motion matrix of constant maps.
    pub fn neutral(self) -> Mat {
        match self {
            MatrixKind::Skew2 | MatrixKind::Skew3 => Mat::zeros(),
            MatrixKind::So2 => embed2(Mat::identity()),
            MatrixKind::So3 => Mat::identity(),
        }
    }

    /// Distance of `q` from the set, measured by the defining residual.
    pub fn residual(self, q: &Mat) -> f64 {
        let d = self.dim();
        let mut outside = 0.0f64;
        if d == 2 {
            for i in 0..3 {
                for j in 0..3 {
                    if i == 2 || j == 2 {
                        outside = outside.max(q[(i, j)].abs());
                    }
                }
            }
        }
        match self {
            MatrixKind::Skew2 | MatrixKind::Skew3 => outside.max((q + q.transpose()).norm()),
            MatrixKind::So2 => {
                let b = q.fixed_view::<2, 2>(0, 0).into_owned();
                let r = (b.transpose() * b - nalgebra::Matrix2::identity()).norm();
                outside.max(r).max((b.determinant() - 1.0).abs())
            }
            MatrixKind::So3 => {
                let r = (q.transpose() * q - Mat::identity()).norm();
                r.max((q.determinant() - 1.0).abs())
            }
        }
    }

    pub fn contains(self, q: &Mat) -> bool {
        self.residual(q) <= MEMBERSHIP_TOL * (1.0 + q.norm())
    }

    /// Chart map from parameters to matrices.
    pub fn psi(self, gamma: &[f64]) -> Result<Mat> {
        if gamma.len() != self.param_dim() {
            return Err(Error::OutOfRange(format!(
                "{} expects {} parameters, got {}",
                self.name(),
                self.param_dim(),
                gamma.len()
            )));
        }
        let r = self.param_radius();
        if gamma.iter().any(|g| !g.is_finite() || g.abs() >= r) {
            return Err(Error::OutOfRange(format!("parameter outside (-{r}, {r})")));
        }
        Ok(match self {
            MatrixKind::Skew2 => embed2(Mat::new(
                0.0, -gamma[0], 0.0, gamma[0], 0.0, 0.0, 0.0, 0.0, 0.0,
            )),
            MatrixKind::Skew3 => hat(&Vec3::new(gamma[0], gamma[1], gamma[2])),
            MatrixKind::So2 => rotation2(gamma[0]),
            MatrixKind::So3 => rodrigues(&Vec3::new(gamma[0], gamma[1], gamma[2])),
        })
    }

    /// Right inverse of `psi`. Rotation kinds use the chart centred at
    /// `anchor` (default: `q` itself) and require `|q - anchor| < chart_radius`.
    pub fn xi(self, q: &Mat, anchor: Option<&Mat>) -> Result<Vec<f64>> {
        if !self.contains(q) {
            return Err(Error::NotInMatrixSet(format!(
                "{} residual {:e}",
                self.name(),
                self.residual(q)
            )));
        }
        match self {
            MatrixKind::Skew2 => Ok(vec![q[(1, 0)]]),
            MatrixKind::Skew3 => Ok(vee(q).iter().copied().collect()),
            MatrixKind::So2 | MatrixKind::So3 => {
                let a = anchor.unwrap_or(q);
                if !self.contains(a) {
                    return Err(Error::NotInMatrixSet("anchor".into()));
                }
                let dist = (q - a).norm();
                if dist >= self.chart_radius() {
                    return Err(Error::OutsideChart {
                        distance: dist,
                        radius: self.chart_radius(),
                    });
                }
                if self == MatrixKind::So2 {
                    let base = q[(1, 0)].atan2(q[(0, 0)]);
                    let center = a[(1, 0)].atan2(a[(0, 0)]);
                    Ok(vec![center + wrap_angle(base - center)])
                } else {
                    so3_log_anchored(q, a).map(|w| w.iter().copied().collect())
                }
            }
        }
    }
}

pub fn embed2(m: Mat) -> Mat {
    let mut out = Mat::zeros();
    out.fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&m.fixed_view::<2, 2>(0, 0));
    out
}

pub fn rotation2(theta: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 0.0)
}

/// `hat(w) u = w x u`.
pub fn hat(w: &Vec3) -> Mat {
    Mat::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Mat) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `I + sin(t) N + (1 - cos t) N^2` with `N = hat(w/|w|)`, `t = |w|`.
pub fn rodrigues(w: &Vec3) -> Mat {
    let t = w.norm();
    if t == 0.0 {
        return Mat::identity();
    }
    let n = hat(&(w / t));
    Mat::identity() + n * t.sin() + n * n * (1.0 - t.cos())
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    } else if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

fn cos_angle(r: &Mat) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)
}

/// Unit axis of a rotation with `cos(angle) = c`, read off the symmetric part.
fn axis_from_symmetric(r: &Mat, c: f64) -> Vec3 {
    let b = (r + r.transpose()) * 0.5 - Mat::identity() * c;
    let j = (0..3)
        .max_by(|&i, &k| b[(i, i)].partial_cmp(&b[(k, k)]).unwrap())
        .unwrap();
    let col = b.column(j).into_owned();
    let n = col / col.norm();
    let s = vee(&(r - r.transpose()));
    if n.dot(&s) < 0.0 {
        -n
    } else {
        n
    }
}

/// Series logarithm, valid for angles in `[0, pi)`.
fn so3_log_series(r: &Mat) -> Vec3 {
    let c = cos_angle(r);
    let theta = c.acos();
    let s = vee(&(r - r.transpose())) * 0.5;
    let factor = if theta < 1e-4 {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    };
    s * factor
}

/// Chart of rotations centred at `anchor`: series logarithm near the
/// identity, otherwise axis oriented along the anchor axis and angle in
/// `[eta, 2pi - eta]`.
fn so3_log_anchored(r: &Mat, anchor: &Mat) -> Result<Vec3> {
    if (anchor - Mat::identity()).norm() <= 0.5 {
        return Ok(so3_log_series(r));
    }
    let ca = cos_angle(anchor);
    let anchor_axis = axis_from_symmetric(anchor, ca);
    let c = cos_angle(r);
    let mut n = axis_from_symmetric(r, c);
    if n.dot(&anchor_axis) < 0.0 {
        n = -n;
    }
    let sin = 0.5 * vee(&(r - r.transpose())).dot(&n);
    let mut theta = sin.atan2(c);
    if theta < 0.0 {
        theta += 2.0 * PI;
    }
    let eta = 2.0 * (C2 / 8.0).asin();
    if theta < eta || theta > 2.0 * PI - eta {
        return Err(Error::OutsideChart {
            distance: theta,
            radius: eta,
        });
    }
    Ok(n * theta)
}

/// Second singular value of `q1 - q2`; positive iff the rank is at least two.
pub fn rank_gap(q1: &Mat, q2: &Mat) -> f64 {
    let mut s: Vec<f64> = (q1 - q2).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[1]
}

/// Spectral norm.
pub fn spectral_norm(m: &Mat) -> f64 {
    m.singular_values().max()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidMotion {
    pub q: Mat,
    pub b: Vec3,
}

impl RigidMotion {
    pub fn new(q: Mat, b: Vec3) -> Self {
        RigidMotion { q, b }
    }

    pub fn constant(kind: MatrixKind, b: Vec3) -> Self {
        RigidMotion {
            q: kind.neutral(),
            b,
        }
    }

    pub fn eval(&self, x: &Point) -> Vec3 {
        self.q * x + self.b
    }

    pub fn sub(&self, other: &RigidMotion) -> (Mat, Vec3) {
        (self.q - other.q, self.b - other.b)
    }

    /// Equality up to an absolute tolerance on matrix and translation.
    pub fn approx_eq(&self, other: &RigidMotion, tol: f64) -> bool {
        (self.q - other.q).amax() <= tol && (self.b - other.b).amax() <= tol
    }
}

/// Scalar profile used to measure distances between functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PsiFn {
    /// `t^p`, `p >= 1`.
    Power { p: f64 },
    /// `t / (1 + t)`.
    Bounded,
}

impl PsiFn {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            PsiFn::Power { p } => t.powf(p),
            PsiFn::Bounded => t / (1.0 + t),
        }
    }

    pub fn inverse(&self, s: f64) -> f64 {
        match *self {
            PsiFn::Power { p } => s.powf(1.0 / p),
            PsiFn::Bounded => {
                if s >= 1.0 {
                    f64::INFINITY
                } else {
                    s / (1.0 - s)
                }
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            PsiFn::Power { .. } => f64::INFINITY,
            PsiFn::Bounded => 1.0,
        }
    }
}

/// Volume of the unit ball in dimension `k`.
pub fn unit_ball_volume(k: usize) -> f64 {
    match k {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(k - 2) * 2.0 * PI / k as f64,
    }
}

/// Constructive `tau_psi(t)` for sets of volume `>= delta` inside `B_R`.
pub fn tau_psi(t: f64, dim: usize, radius: f64, delta: f64, psi: PsiFn) -> f64 {
    let m = psi.sup();
    if t >= m {
        return f64::INFINITY;
    }
    if t <= 0.0 {
        return 0.0;
    }
    let m_t = (4.0 * t).min(m);
    let ratio = (m_t.sqrt() - t.sqrt()) / (m_t.sqrt() + t.sqrt());
    let r = delta * ratio / (2.0 * unit_ball_volume(dim - 1) * radius.powi(dim as i32 - 1));
    let tau_hat = psi.inverse(t.sqrt() * (m_t.sqrt() + t.sqrt()) / 2.0) / r;
    (2.0 * radius + 1.0) * tau_hat + 2.0 * psi.inverse(t)
}

/// Linear constant `c` with `tau(t) = c t` for `psi(t) = t`.
pub fn linear_tau_constant(dim: usize, radius: f64, delta: f64) -> f64 {
    let r = delta / (3.0 * 2.0 * unit_ball_volume(dim - 1) * radius.powi(dim as i32 - 1));
    (2.0 * radius + 1.0) * 1.5 / r + 2.0
}

/// Transfer constant `c0` with `sup_{B_R} |q| <= c0 sup_E |q|`.
pub fn transfer_constant(dim: usize, radius: f64, delta: f64) -> f64 {
    unit_ball_volume(dim)
        * radius.powi(dim as i32)
        * radius.max(1.0)
        * linear_tau_constant(dim, radius, delta)
        / delta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBound {
    /// Mean of `psi(|Gx+b|)` over `E` (cell-centre quadrature).
    pub mean: f64,
    /// `tau_psi(mean)`.
    pub tau: f64,
    /// `|G| + |b|` with the spectral norm.
    pub norm: f64,
}

/// Largest distance from the origin to a corner of a member cell.
pub fn corner_radius(e: &VoxelSet) -> f64 {
    let dom = &e.domain;
    let half = 0.5 * dom.cell_size;
    e.cells()
        .map(|i| {
            let c = dom.center(i);
            (0..dom.dim)
                .map(|a| (c[a].abs() + half).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Bound on `|G| + |b|` from the psi-mean of `|Gx + b|` over `E`.
pub fn rigid_bound(
    g: &Mat,
    b: &Vec3,
    e: &VoxelSet,
    radius: f64,
    delta: f64,
    psi: PsiFn,
) -> Result<RigidBound> {
    let vol = e.volume();
    if vol < delta {
        return Err(Error::VolumeBelowDelta { volume: vol, delta });
    }
    let cr = corner_radius(e);
    if cr > radius {
        return Err(Error::OutOfRange(format!(
            "set reaches radius {cr}, outside B_R with R = {radius}"
        )));
    }
    let dom = &e.domain;
    let n = e.count() as f64;
    let mean = e
        .cells()
        .map(|i| psi.eval((g * dom.center(i) + b).norm()))
        .sum::<f64>()
        / n;
    Ok(RigidBound {
        mean,
        tau: tau_psi(mean, dom.dim, radius, delta, psi),
        norm: spectral_norm(g) + b.norm(),
    })
}

/// Kernel set of a skew motion: a point (2D) or a line through `point`
/// along `direction` (3D) where `q` equals the kernel projection of `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSet {
    pub point: Vec3,
    pub direction: Option<Vec3>,
}

impl KernelSet {
    pub fn distance(&self, x: &Point) -> f64 {
        let d = x - self.point;
        match self.direction {
            None => d.norm(),
            Some(n) => (d - n * n.dot(&d)).norm(),
        }
    }
}

/// Kernel set of `x -> Qx + b` for nonzero skew `Q`.
pub fn kernel_set(q: &RigidMotion, dim: usize) -> Option<KernelSet> {
    if q.q.amax() == 0.0 {
        return None;
    }
    if dim == 2 {
        let a = q.q[(1, 0)];
        // Q = a J with J^{-1} = -J.
        let p = Vec3::new(-q.b.y / a, q.b.x / a, 0.0);
        Some(KernelSet {
            point: p,
            direction: None,
        })
    } else {
        let w = vee(&q.q);
        let n2 = w.norm_squared();
        Some(KernelSet {
            point: w.cross(&q.b) / n2,
            direction: Some(w / n2.sqrt()),
        })
    }
}

/// Checks the distance-ratio hypothesis and the min/max conclusion for a
/// skew motion on the cell centres of `e`.
pub fn rigid_extremes_check(q: &RigidMotion, e: &VoxelSet, c0: f64) -> bool {
    let dom = &e.domain;
    let Some(k) = kernel_set(q, dom.dim) else {
        return true;
    };
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    let mut qmin = f64::INFINITY;
    let mut qmax: f64 = 0.0;
    for i in e.cells() {
        let x = dom.center(i);
        let dd = k.distance(&x);
        let qq = q.eval(&x).norm();
        dmin = dmin.min(dd);
        dmax = dmax.max(dd);
        qmin = qmin.min(qq);
        qmax = qmax.max(qq);
    }
    if dmin == f64::INFINITY {
        return true;
    }
    let tol = 1e-12 * (1.0 + qmax);
    dmax <= c0 * dmin && qmax <= c0 * qmin + tol
}

/// Sampled certification of a chart and of the rank condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartReport {
    pub kind: MatrixKind,
    pub samples: usize,
    pub seed: u64,
    /// Largest `|psi(xi(Q)) - Q|` (Frobenius).
    pub max_round_trip: f64,
    /// Largest `|xi(Q1) - xi(Q2)| / |Q1 - Q2|` within one anchor ball.
    pub max_lipschitz_ratio: f64,
    pub lipschitz: f64,
    /// Smallest second singular value of `Q1 - Q2` over distinct pairs.
    pub min_rank_gap: f64,
    /// Smallest `sigma_2 / sigma_1` over the same pairs.
    pub min_rank_ratio: f64,
    /// Largest `|sigma_1 - sigma_2| / sigma_1` (Skew2 only).
    pub max_sigma_split: Option<f64>,
    pub certificate: crate::Certificate,
}

fn random_unit(rng: &mut impl rand::Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// A matrix of the set: uniform parameters in `[-5, 5]` for skew kinds,
/// uniform angle in `[0, pi)` about a random axis for rotations.
pub fn random_matrix(kind: MatrixKind, rng: &mut impl rand::Rng) -> Mat {
    match kind {
        MatrixKind::Skew2 => embed2(Mat::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)) * rng.gen_range(-5.0..5.0),
        MatrixKind::Skew3 => hat(&Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))),
        MatrixKind::So2 => rotation2(rng.gen_range(-PI..PI)),
        MatrixKind::So3 => rodrigues(&(random_unit(rng) * rng.gen_range(0.0..PI))),
    }
}

/// A matrix of the set within the anchor ball of `anchor` (rotation kinds)
/// or within distance 1 (skew kinds).
pub fn random_near(kind: MatrixKind, anchor: &Mat, rng: &mut impl rand::Rng) -> Mat {
    let max = 2.0 * (ANCHOR_RADIUS / (2.0 * 2f64.sqrt())).asin() * 0.999;
    match kind {
        MatrixKind::So2 => rotation2(rng.gen_range(-max..max)) * anchor,
        MatrixKind::So3 => rodrigues(&(random_unit(rng) * rng.gen_range(0.0..max))) * anchor,
        MatrixKind::Skew2 => anchor + embed2(Mat::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)) * rng.gen_range(-0.5..0.5),
        MatrixKind::Skew3 => anchor + hat(&(random_unit(rng) * rng.gen_range(0.0..0.5))),
    }
}

/// Round trip, Lipschitz ratio within anchor balls, and rank gap of
/// differences over `samples` seeded draws.
pub fn certify_chart(kind: MatrixKind, samples: usize, seed: u64) -> Result<ChartReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut round: f64 = 0.0;
    let mut lip: f64 = 0.0;
    let mut gap = f64::INFINITY;
    let mut ratio = f64::INFINITY;
    let mut split: f64 = 0.0;
    for _ in 0..samples {
        let anchor = random_matrix(kind, &mut rng);
        let q1 = random_near(kind, &anchor, &mut rng);
        let q2 = random_near(kind, &anchor, &mut rng);
        let g1 = kind.xi(&q1, Some(&anchor))?;
        let g2 = kind.xi(&q2, Some(&anchor))?;
        round = round.max((kind.psi(&g1)? - q1).norm());
        let dq = (q1 - q2).norm();
        if dq > 0.0 {
            let dg = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            lip = lip.max(dg / dq);
        }
        let p1 = random_matrix(kind, &mut rng);
        let p2 = random_matrix(kind, &mut rng);
        if (p1 - p2).amax() == 0.0 {
            continue;
        }
        let sv = (p1 - p2).singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        gap = gap.min(s[1]);
        ratio = ratio.min(s[1] / s[0]);
        split = split.max((s[0] - s[1]) / s[0]);
    }
    let mut cert = crate::Certificate::new("chart");
    cert.check("round_trip", round, 1e-10);
    cert.check("lipschitz", lip, kind.lipschitz());
    cert.check("rank_gap_positive", f64::MIN_POSITIVE, gap);
    let max_sigma_split = (kind == MatrixKind::Skew2).then_some(split);
    if let Some(sp) = max_sigma_split {
        cert.check("skew2_sigma_identity", sp, 1e-12);
    }
    cert.constant("lipschitz", kind.lipschitz());
    cert.constant("anchor_radius", kind.chart_radius());
    Ok(ChartReport {
        kind,
        samples,
        seed,
        max_round_trip: round,
        max_lipschitz_ratio: lip,
        lipschitz: kind.lipschitz(),
        min_rank_gap: gap,
        min_rank_ratio: ratio,
        max_sigma_split,
        certificate: cert,
    })
}
