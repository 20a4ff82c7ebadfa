//! Ball covers, the piecewise Poincaré approximation, and set decompositions
//! with controlled distance ratios to a point (2D) or an axis line (3D).

use crate::certificate::Certificate;
use crate::grid::{best_slice, labels_by, Face, Point, VoxelSet};
use crate::{Error, Result};

// ----------------------------------------------------------------------------
// Ball cover

#[derive(Clone, Debug, PartialEq)]
pub struct BallCover {
    pub centers: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    pub n_points: usize,
    pub r0: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Covers the points by disjoint balls with radii in `[8^-N r0, r0]` whose
/// mutual distances exceed twice the largest radius.
///
/// Starts from balls of radius `8^-N r0` at every point and, while some pair
/// is too close, absorbs one ball into the other and multiplies all radii by 8.
pub fn cover_points(points: &[Vec<f64>], r0: f64) -> Result<BallCover> {
    if points.is_empty() {
        return Err(Error::EmptySet("point set"));
    }
    if !(r0 > 0.0) {
        return Err(Error::OutOfRange("r0 must be positive".into()));
    }
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = points.to_vec();
    let mut rho = r0 * 8f64.powi(-(n as i32));
    'outer: loop {
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                if dist(&centers[i], &centers[j]) <= 4.0 * rho {
                    centers.remove(j);
                    rho *= 8.0;
                    continue 'outer;
                }
            }
        }
        break;
    }
    let radii = vec![rho; centers.len()];
    Ok(BallCover {
        centers,
        radii,
        n_points: n,
        r0,
    })
}

impl BallCover {
    pub fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the ball containing `p`.
    pub fn ball_of(&self, p: &[f64]) -> Option<usize> {
        (0..self.centers.len()).find(|&k| dist(&self.centers[k], p) < self.radii[k])
    }

    pub fn certify(&self, points: &[Vec<f64>]) -> Certificate {
        let mut c = Certificate::new("cover_points");
        let lo = self.r0 * 8f64.powi(-(self.n_points as i32));
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        c.check("radius_lower", lo, rmin);
        c.check("radius_upper", self.max_radius(), self.r0);
        c.check(
            "ball_count",
            self.centers.len() as f64,
            self.n_points as f64,
        );
        let mut sep = f64::INFINITY;
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                let d = dist(&self.centers[i], &self.centers[j]) - self.radii[i] - self.radii[j];
                sep = sep.min(d);
            }
        }
        if sep.is_finite() {
            // strict separation, recorded as 2 max r < sep
            let holds = 2.0 * self.max_radius() < sep;
            c.check("separation", 2.0 * self.max_radius(), sep);
            if !holds {
                c.checks.last_mut().unwrap().holds = false;
            }
        }
        let uncovered = points.iter().filter(|p| self.ball_of(p).is_none()).count();
        c.check("coverage", uncovered as f64, 0.0);
        c
    }
}

// ----------------------------------------------------------------------------
// Piecewise Poincaré

#[derive(Clone, Debug)]
pub struct PoincareResult {
    /// Piece index per cell, `u32::MAX` outside `D`.
    pub pieces: Vec<u32>,
    /// Constant value per piece.
    pub values: Vec<Vec<f64>>,
    pub step: f64,
    pub offsets: Vec<f64>,
    pub grad_l1: f64,
    pub added_boundary: f64,
    pub sup_error: f64,
    pub certificate: Certificate,
}

/// Offset in `[0, s)` minimising the number of faces whose value range
/// `(zmin, zmax]` contains a point of `offset + s Z`.
fn best_offset(ranges: &[(f64, f64)], s: f64) -> f64 {
    let mut ends: Vec<f64> = Vec::with_capacity(2 * ranges.len());
    let mut arcs = Vec::new();
    for &(a, b) in ranges {
        let d = b - a;
        if d <= 0.0 || d >= s {
            continue;
        }
        let p = a.rem_euclid(s);
        let q = (p + d).rem_euclid(s);
        ends.push(p);
        ends.push(q);
        arcs.push((p, q));
    }
    if arcs.is_empty() {
        return 0.0;
    }
    ends.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ends.dedup();
    let n = ends.len();
    let pos = |x: f64| {
        ends.binary_search_by(|e| e.partial_cmp(&x).unwrap())
            .unwrap()
    };
    // gap k is (ends[k], ends[k+1]) with wrap-around
    let mut diff = vec![0i64; n + 1];
    for (p, q) in arcs {
        let (ip, iq) = (pos(p), pos(q));
        if ip < iq {
            diff[ip] += 1;
            diff[iq] -= 1;
        } else {
            diff[ip] += 1;
            diff[n] -= 1;
            diff[0] += 1;
            diff[iq] -= 1;
        }
    }
    let mut best = (i64::MAX, 0usize);
    let mut run = 0;
    for k in 0..n {
        run += diff[k];
        if run < best.0 {
            best = (run, k);
        }
    }
    let k = best.1;
    let (a, b) = if k + 1 < n {
        (ends[k], ends[k + 1])
    } else {
        (ends[n - 1], ends[0] + s)
    };
    (0.5 * (a + b)).rem_euclid(s)
}

/// Approximates the cell field `z` on `D` by a piecewise constant function.
/// Faces accepted by `is_jump` belong to the jump set of `z` and carry no
/// gradient. Each component is quantized with step `|grad z|_{L1} / theta`
/// at the offset cutting the fewest faces, and pieces are the connected
/// components of the joint quantization level.
pub fn piecewise_poincare(
    z: &[Vec<f64>],
    d_set: &VoxelSet,
    theta: f64,
    caps: Option<&[Option<f64>]>,
    is_jump: &dyn Fn(&Face) -> bool,
) -> Result<PoincareResult> {
    if !(theta > 0.0) {
        return Err(Error::OutOfRange(format!(
            "theta must be positive, got {theta}"
        )));
    }
    let dom = &d_set.domain;
    if z.len() != dom.len() {
        return Err(Error::DomainMismatch);
    }
    let m = d_set.cells().next().map_or(0, |i| z[i].len());
    let area = dom.face_area();
    let grad_faces: Vec<Face> = dom
        .faces()
        .filter(|f| d_set.members[f.lo] && d_set.members[f.hi] && !is_jump(f))
        .collect();
    let grad_l1: f64 = grad_faces
        .iter()
        .map(|f| area * (0..m).map(|c| (z[f.lo][c] - z[f.hi][c]).abs()).sum::<f64>())
        .sum();
    let step = grad_l1 / theta;

    let (pieces, n_pieces, offsets) = if step == 0.0 {
        let (l, n) = labels_by(dom, |i| d_set.members[i], |a, b| z[a] == z[b]);
        (l, n, vec![0.0; m])
    } else {
        let offsets: Vec<f64> = (0..m)
            .map(|c| {
                let ranges: Vec<(f64, f64)> = grad_faces
                    .iter()
                    .map(|f| {
                        let (x, y) = (z[f.lo][c], z[f.hi][c]);
                        (x.min(y), x.max(y))
                    })
                    .collect();
                best_offset(&ranges, step)
            })
            .collect();
        let level: Vec<Vec<i64>> = (0..dom.len())
            .map(|i| {
                if !d_set.members[i] {
                    return Vec::new();
                }
                (0..m)
                    .map(|c| ((z[i][c] - offsets[c]) / step).floor() as i64)
                    .collect()
            })
            .collect();
        let (l, n) = labels_by(dom, |i| d_set.members[i], |a, b| level[a] == level[b]);
        (l, n, offsets)
    };

    let mut values: Vec<Option<Vec<f64>>> = vec![None; n_pieces];
    for i in d_set.cells() {
        let p = pieces[i] as usize;
        if values[p].is_none() {
            values[p] = Some(z[i].clone());
        }
    }
    let values: Vec<Vec<f64>> = values.into_iter().map(|v| v.unwrap()).collect();

    let added = grad_faces
        .iter()
        .filter(|f| pieces[f.lo] != pieces[f.hi])
        .count() as f64
        * area;
    let sup_error = d_set
        .cells()
        .map(|i| {
            let v = &values[pieces[i] as usize];
            (0..m).map(|c| (z[i][c] - v[c]).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);

    let mut cert = Certificate::new("piecewise_poincare");
    cert.constant("theta", theta);
    cert.constant("step", step);
    cert.constant("grad_l1", grad_l1);
    cert.check("added_boundary", added, theta);
    cert.check("sup_error", sup_error, (m as f64).sqrt() * step);
    if let Some(caps) = caps {
        for (c, cap) in caps.iter().enumerate() {
            if let Some(cap) = cap {
                let z_max = d_set.cells().map(|i| z[i][c].abs()).fold(0.0, f64::max);
                if z_max <= *cap {
                    let v_max = values.iter().map(|v| v[c].abs()).fold(0.0, f64::max);
                    cert.check(&format!("cap[{c}]"), v_max, *cap);
                }
            }
        }
    }
    let certificate = cert.into_result()?;
    Ok(PoincareResult {
        pieces,
        values,
        step,
        offsets,
        grad_l1,
        added_boundary: added,
        sup_error,
        certificate,
    })
}

// ----------------------------------------------------------------------------
// Decompositions

#[derive(Clone, Debug)]
pub struct Decomposition2D {
    pub rest: VoxelSet,
    pub radius: f64,
    pub ratio: f64,
    pub certificate: Certificate,
}

/// Removes the ball of radius `theta diam(E) / (2 pi)` around `x0`, so that
/// distances to `x0` on the remainder of `E` are comparable.
pub fn decompose_2d(e: &VoxelSet, x0: &Point, theta: f64) -> Result<Decomposition2D> {
    let d = decompose_2d_unchecked(e, x0, theta)?;
    d.certificate.clone().into_result()?;
    Ok(d)
}

/// As [`decompose_2d`], with the certificate returned whether or not it holds.
pub(crate) fn decompose_2d_unchecked(
    e: &VoxelSet,
    x0: &Point,
    theta: f64,
) -> Result<Decomposition2D> {
    let dom = &e.domain;
    if dom.dim != 2 {
        return Err(Error::InvalidDomain(
            "decompose_2d needs a 2D domain".into(),
        ));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::OutOfRange(format!(
            "theta must lie in (0,1), got {theta}"
        )));
    }
    if e.is_empty() {
        return Err(Error::EmptySet("E"));
    }
    if !e.is_connected() {
        return Err(Error::Disconnected);
    }
    let diam = e.center_diameter();
    let r = theta * diam / (2.0 * std::f64::consts::PI);
    let rest = VoxelSet::from_fn(dom, |i| (dom.center(i) - x0).norm() < r);
    let touched = dom
        .faces()
        .filter(|f| rest.members[f.lo] != rest.members[f.hi])
        .filter(|f| e.members[f.lo] || e.members[f.hi])
        .count()
        + rest
            .cells()
            .filter(|&i| e.members[i])
            .map(|i| dom.exterior_faces(i))
            .sum::<usize>();
    let per_e = e.perimeter(None)?;
    let (lo, hi) = e
        .cells()
        .filter(|&i| !rest.members[i])
        .map(|i| (dom.center(i) - x0).norm())
        .fold((f64::INFINITY, 0.0f64), |(a, b), d| (a.min(d), b.max(d)));
    let ratio = if lo.is_infinite() { 1.0 } else { hi / lo };
    let mut cert = Certificate::new("decompose_2d");
    cert.constant("radius", r);
    cert.constant("diameter", diam);
    cert.check("diameter_perimeter", diam, per_e);
    cert.check(
        "rest_perimeter",
        touched as f64 * dom.face_area(),
        theta * per_e,
    );
    cert.check("ratio", ratio, 1.0 + 2.0 * std::f64::consts::PI / theta);
    Ok(Decomposition2D {
        rest,
        radius: r,
        ratio,
        certificate: cert,
    })
}

/// Constant in the perimeter bounds and in the ratio bound `c theta^-3`.
pub const DECOMPOSE_3D_CONSTANT: f64 = 16.0;

#[derive(Clone, Debug)]
pub struct Decomposition3D {
    pub rest: VoxelSet,
    pub pieces: Vec<VoxelSet>,
    pub theta: f64,
    pub axis: usize,
    pub point: Point,
    /// Layer boundaries `t_0 < ... < t_I` of the slabs, in layer indices.
    pub cuts: Vec<usize>,
    pub skipped_cutting: bool,
    pub max_ratio: f64,
    pub certificate: Certificate,
}

/// Per-layer boundary statistics of `E` along `axis`.
struct Layers {
    /// Lateral boundary faces of `E` in layer `k`.
    lateral: Vec<usize>,
    /// Boundary faces of `E` normal to `axis` at layer boundary `k`.
    normal: Vec<usize>,
    /// Columns occupied on both sides of layer boundary `k`.
    slice: Vec<usize>,
}

impl Layers {
    fn new(e: &VoxelSet, axis: usize) -> Self {
        let dom = &e.domain;
        let n = dom.extent[axis];
        let mut lateral = vec![0; n];
        let mut normal = vec![0; n + 1];
        let mut slice = vec![0; n + 1];
        for i in e.cells() {
            let k = dom.coords(i)[axis];
            for a in 0..dom.dim {
                for fwd in [false, true] {
                    let open = match dom.neighbor(i, a, fwd) {
                        Some(j) => !e.members[j],
                        None => true,
                    };
                    if a == axis {
                        if fwd {
                            if open {
                                normal[k + 1] += 1;
                            } else {
                                slice[k + 1] += 1;
                            }
                        } else if open {
                            normal[k] += 1;
                        }
                    } else if open {
                        lateral[k] += 1;
                    }
                }
            }
        }
        Layers {
            lateral,
            normal,
            slice,
        }
    }

    /// Boundary faces of `E` strictly between layer boundaries `a < b`.
    fn between(&self, a: usize, b: usize) -> usize {
        self.lateral[a..b].iter().sum::<usize>() + self.normal[a + 1..b].iter().sum::<usize>()
    }
}

/// Left-to-right cutting of `[a, b)`; returns interior cut positions.
fn cut_forward(
    l: &Layers,
    a: usize,
    b: usize,
    r: f64,
    theta: f64,
    area: f64,
    h: f64,
) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut start = a;
    while (b - start) as f64 * h > r {
        let next = (start + 1..b).find(|&t| {
            (t - start) as f64 * h > r
                && l.slice[t] as f64 * area <= 2.0 * theta * l.between(start, t) as f64 * area
        });
        match next {
            Some(t) => {
                cuts.push(t);
                start = t;
            }
            None => break,
        }
    }
    cuts
}

/// Right-to-left cutting of `[a, b)`.
fn cut_backward(
    l: &Layers,
    a: usize,
    b: usize,
    r: f64,
    theta: f64,
    area: f64,
    h: f64,
) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut end = b;
    while (end - a) as f64 * h > r {
        let next = (a + 1..end).rev().find(|&t| {
            (end - t) as f64 * h > r
                && l.slice[t] as f64 * area <= 2.0 * theta * l.between(t, end) as f64 * area
        });
        match next {
            Some(t) => {
                cuts.push(t);
                end = t;
            }
            None => break,
        }
    }
    cuts
}

/// Splits a connected `E` into a thin cylinder `R` around the axis line and
/// pieces on which the distance to the line varies by a bounded factor.
/// The line passes through `point` along coordinate axis `axis`.
pub fn decompose_3d(
    e: &VoxelSet,
    point: &Point,
    axis: usize,
    theta: f64,
) -> Result<Decomposition3D> {
    decompose_3d_with(e, point, axis, theta, DECOMPOSE_3D_CONSTANT)
}

pub fn decompose_3d_with(
    e: &VoxelSet,
    point: &Point,
    axis: usize,
    theta: f64,
    c: f64,
) -> Result<Decomposition3D> {
    let d = decompose_3d_unchecked(e, point, axis, theta, c)?;
    d.certificate.clone().into_result()?;
    Ok(d)
}

/// As [`decompose_3d_with`], with the certificate returned whether or not it holds.
pub(crate) fn decompose_3d_unchecked(
    e: &VoxelSet,
    point: &Point,
    axis: usize,
    theta: f64,
    c: f64,
) -> Result<Decomposition3D> {
    let dom = &e.domain;
    if dom.dim != 3 {
        return Err(Error::InvalidDomain(
            "decompose_3d needs a 3D domain".into(),
        ));
    }
    if axis > 2 {
        return Err(Error::Unsupported(
            "the line must be parallel to a coordinate axis".into(),
        ));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::OutOfRange(format!(
            "theta must lie in (0,1), got {theta}"
        )));
    }
    if e.is_empty() {
        return Err(Error::EmptySet("E"));
    }
    if !e.is_connected() {
        return Err(Error::Disconnected);
    }
    let h = dom.cell_size;
    let area = dom.face_area();
    let per_e = e.perimeter(None)?;
    let layer_of = |i: usize| dom.coords(i)[axis];
    let k_lo = e.cells().map(layer_of).min().unwrap();
    let k_hi = e.cells().map(layer_of).max().unwrap() + 1;
    let diam1 = (k_hi - k_lo) as f64 * h;
    let layers = Layers::new(e, axis);
    let r = per_e / diam1;
    let skipped = diam1 <= 2.0 * per_e.sqrt();

    let mut cuts = vec![k_lo];
    if !skipped {
        let mut s = vec![k_lo];
        s.extend(cut_forward(&layers, k_lo, k_hi, r, theta, area, h));
        s.push(k_hi);
        for w in s.windows(2) {
            let mut back = cut_backward(&layers, w[0], w[1], r, theta, area, h);
            back.reverse();
            cuts.extend(back);
            cuts.push(w[1]);
        }
    } else {
        cuts.push(k_hi);
    }

    let radial = |i: usize| {
        let c = dom.center(i);
        let mut s = 0.0;
        for a in 0..3 {
            if a != axis {
                s += (c[a] - point[a]).powi(2);
            }
        }
        s.sqrt()
    };
    let f: Vec<f64> = (0..dom.len()).map(radial).collect();

    let mut cert = Certificate::new("decompose_3d");
    cert.constant("theta", theta);
    cert.constant("r", r);
    cert.constant("diam1", diam1);
    cert.constant("slabs", (cuts.len() - 1) as f64);
    cert.constant("c", c);

    let mut rest = VoxelSet::empty(dom);
    let mut pieces = Vec::new();
    let mut slab_boundary = 0usize;
    let c_area = crate::grid::isoperimetric_constant(2).powi(2);
    let mut max_ratio: f64 = 1.0;
    for (idx, w) in cuts.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let t = VoxelSet::from_fn(dom, |i| e.members[i] && (a..b).contains(&layer_of(i)));
        let per_t = t.perimeter(None)?;
        slab_boundary += (if a > k_lo { layers.slice[a] } else { 0 })
            + (if b < k_hi { layers.slice[b] } else { 0 });
        let sigma = layers.between(a, b) as f64 * area
            + if a == k_lo {
                layers.normal[a] as f64 * area
            } else {
                0.0
            }
            + if b == k_hi {
                layers.normal[b] as f64 * area
            } else {
                0.0
            };
        let d1 = (b - a) as f64 * h;
        if !skipped {
            let long = 2.0 * (c_area * sigma / theta).sqrt();
            if d1 >= 4.0 * r + 2.0 * h {
                cert.check(&format!("slab_diameter_long[{idx}]"), d1, long);
            }
            cert.check(
                &format!("slab_diameter[{idx}]"),
                d1,
                long + 2.0 * (r * d1).sqrt(),
            );
        }
        let root = per_t.sqrt();
        let z0 = theta * theta * root;
        let w_at = |j: usize| j as f64 * root / theta;
        for i in 0..dom.len() {
            if (a..b).contains(&layer_of(i)) && f[i] <= z0 {
                rest.members[i] = true;
            }
        }
        let f_max = t.cells().map(|i| f[i]).fold(0.0, f64::max);
        let pairs: Vec<(f64, f64)> = dom
            .faces()
            .filter(|fc| t.members[fc.lo] && t.members[fc.hi])
            .map(|fc| (f[fc.lo].min(f[fc.hi]), f[fc.lo].max(f[fc.hi])))
            .filter(|p| p.0 < p.1)
            .collect();
        let level = |s: f64| pairs.iter().filter(|&&(x, y)| x <= s && s < y).count();
        let tf: Vec<f64> = t.cells().map(|i| f[i]).collect();
        let mut prev = z0;
        let mut j = 1;
        while prev < f_max {
            let zj = best_slice(w_at(j), w_at(j + 1), &tf, &level);
            let piece = VoxelSet::from_fn(dom, |i| t.members[i] && f[i] > prev && f[i] <= zj);
            if !piece.is_empty() {
                let (lo, hi) = piece
                    .cells()
                    .map(|i| f[i])
                    .fold((f64::INFINITY, 0.0f64), |(p, q), x| (p.min(x), q.max(x)));
                max_ratio = max_ratio.max(hi / lo);
                pieces.push(piece);
            }
            prev = zj;
            j += 1;
        }
    }

    let covered = |i: usize| rest.members[i] || pieces.iter().any(|p| p.members[i]);
    let uncovered = e.cells().filter(|&i| !covered(i)).count();
    let mut owner = vec![u32::MAX; dom.len()];
    let mut overlap = 0usize;
    for (k, p) in pieces.iter().enumerate() {
        for i in p.cells() {
            if owner[i] != u32::MAX || rest.members[i] {
                overlap += 1;
            }
            owner[i] = k as u32;
        }
    }
    let outside = pieces
        .iter()
        .map(|p| p.cells().filter(|&i| !e.members[i]).count())
        .sum::<usize>();
    // faces of piece boundaries that are not boundary faces of E
    let piece_faces = dom
        .faces()
        .filter(|fc| e.members[fc.lo] && e.members[fc.hi])
        .map(|fc| {
            let (p, q) = (owner[fc.lo], owner[fc.hi]);
            if p == q {
                0
            } else {
                (p != u32::MAX) as usize + (q != u32::MAX) as usize
            }
        })
        .sum::<usize>();
    cert.check(
        "slab_cuts",
        slab_boundary as f64 * area,
        (12.0 * theta + 32.0 * theta * theta) * per_e,
    );
    cert.check("rest_perimeter", rest.perimeter(None)?, c * theta * per_e);
    cert.check(
        "piece_boundary",
        piece_faces as f64 * area,
        c * theta * per_e,
    );
    cert.check("ratio", max_ratio, c * theta.powi(-3));
    cert.check("uncovered", uncovered as f64, 0.0);
    cert.check("overlap", overlap as f64, 0.0);
    cert.check("pieces_inside", outside as f64, 0.0);
    let certificate = cert;
    Ok(Decomposition3D {
        rest,
        pieces,
        theta,
        axis,
        point: *point,
        cuts,
        skipped_cutting: skipped,
        max_ratio,
        certificate,
    })
}
