//! Voxel domains, voxel sets and label partitions with exact face accounting.

use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::certificate::Certificate;
use crate::{Error, Result};

pub type Point = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub dim: usize,
    pub extent: [usize; 3],
    pub cell_size: f64,
    pub origin: [f64; 3],
}

/// An interior face between cell `lo` and its `+axis` neighbour `hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Face {
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
}

impl GridDomain {
    pub fn new(dim: usize, extent: &[usize], cell_size: f64, origin: &[f64]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidDomain(format!(
                "dim must be 2 or 3, got {dim}"
            )));
        }
        if extent.len() != dim || origin.len() != dim {
            return Err(Error::InvalidDomain(
                "extent/origin length must equal dim".into(),
            ));
        }
        if extent.iter().any(|&e| e == 0) {
            return Err(Error::InvalidDomain(
                "extent must be at least 1 per axis".into(),
            ));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidDomain("cell_size must be positive".into()));
        }
        let mut ext = [1usize; 3];
        let mut org = [0.0; 3];
        ext[..dim].copy_from_slice(extent);
        org[..dim].copy_from_slice(origin);
        Ok(GridDomain {
            dim,
            extent: ext,
            cell_size,
            origin: org,
        })
    }

    /// Cube of `n` cells per axis centred at the origin.
    pub fn centered(dim: usize, n: usize, cell_size: f64) -> Result<Self> {
        let half = -(n as f64) * cell_size / 2.0;
        GridDomain::new(dim, &vec![n; dim], cell_size, &vec![half; dim])
    }

    pub fn len(&self) -> usize {
        self.extent[0] * self.extent[1] * self.extent[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.extent[0],
            _ => self.extent[0] * self.extent[1],
        }
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.extent[0];
        let y = (i / self.extent[0]) % self.extent[1];
        let z = i / (self.extent[0] * self.extent[1]);
        [x, y, z]
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.extent[0] * (c[1] + self.extent[1] * c[2])
    }

    pub fn center(&self, i: usize) -> Point {
        let c = self.coords(i);
        let h = self.cell_size;
        let mut p = Point::zeros();
        for a in 0..self.dim {
            p[a] = self.origin[a] + (c[a] as f64 + 0.5) * h;
        }
        p
    }

    /// Cell containing `p`, if inside the domain.
    pub fn locate(&self, p: &Point) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..self.dim {
            let t = (p[a] - self.origin[a]) / self.cell_size;
            if t < 0.0 || t >= self.extent[a] as f64 {
                return None;
            }
            c[a] = t.floor() as usize;
        }
        Some(self.index(c))
    }

    pub fn neighbor(&self, i: usize, axis: usize, forward: bool) -> Option<usize> {
        let c = self.coords(i)[axis];
        if forward {
            (c + 1 < self.extent[axis]).then(|| i + self.stride(axis))
        } else {
            (c > 0).then(|| i - self.stride(axis))
        }
    }

    pub fn face_area(&self) -> f64 {
        self.cell_size.powi(self.dim as i32 - 1)
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_size.powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.cell_volume() * self.len() as f64
    }

    pub fn face_center(&self, f: &Face) -> Point {
        let mut p = self.center(f.lo);
        p[f.axis] += 0.5 * self.cell_size;
        p
    }

    /// Number of faces of cell `i` lying on the domain boundary.
    pub fn exterior_faces(&self, i: usize) -> usize {
        let c = self.coords(i);
        (0..self.dim)
            .map(|a| (c[a] == 0) as usize + (c[a] + 1 == self.extent[a]) as usize)
            .sum()
    }

    /// All interior faces in a fixed order (cell-major, axis-minor).
    pub fn faces(&self) -> impl Iterator<Item = Face> + '_ {
        (0..self.len()).flat_map(move |lo| {
            (0..self.dim).filter_map(move |axis| {
                self.neighbor(lo, axis, true)
                    .map(|hi| Face { lo, hi, axis })
            })
        })
    }

    /// Corner radius: largest distance from the origin to a corner of the box.
    pub fn corner_radius(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..self.dim {
            let lo = self.origin[a];
            let hi = lo + self.extent[a] as f64 * self.cell_size;
            s += lo.abs().max(hi.abs()).powi(2);
        }
        s.sqrt()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim)
            .map(|a| (self.extent[a] as f64 * self.cell_size).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Perimeter of the whole domain box.
    pub fn boundary_area(&self) -> f64 {
        let mut faces = 0usize;
        for a in 0..self.dim {
            let mut p = 1usize;
            for b in 0..self.dim {
                if b != a {
                    p *= self.extent[b];
                }
            }
            faces += 2 * p;
        }
        faces as f64 * self.face_area()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSet {
    pub domain: GridDomain,
    pub members: Vec<bool>,
}

impl VoxelSet {
    pub fn empty(domain: &GridDomain) -> Self {
        VoxelSet {
            members: vec![false; domain.len()],
            domain: domain.clone(),
        }
    }

    pub fn full(domain: &GridDomain) -> Self {
        VoxelSet {
            members: vec![true; domain.len()],
            domain: domain.clone(),
        }
    }

    pub fn from_fn(domain: &GridDomain, mut f: impl FnMut(usize) -> bool) -> Self {
        VoxelSet {
            members: (0..domain.len()).map(&mut f).collect(),
            domain: domain.clone(),
        }
    }

    /// Cells whose centre satisfies the predicate.
    pub fn from_centers(domain: &GridDomain, f: impl Fn(&Point) -> bool) -> Self {
        Self::from_fn(domain, |i| f(&domain.center(i)))
    }

    pub fn ball(domain: &GridDomain, center: &Point, radius: f64) -> Self {
        Self::from_centers(domain, |p| (p - center).norm() < radius)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members[i]
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&m| m)
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.domain.cell_volume()
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    fn same_domain(&self, other: &VoxelSet) -> Result<()> {
        if self.domain != other.domain {
            Err(Error::DomainMismatch)
        } else {
            Ok(())
        }
    }

    fn zip(&self, other: &VoxelSet, f: impl Fn(bool, bool) -> bool) -> Result<VoxelSet> {
        self.same_domain(other)?;
        Ok(VoxelSet {
            domain: self.domain.clone(),
            members: self
                .members
                .iter()
                .zip(&other.members)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &VoxelSet) -> Result<VoxelSet> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &VoxelSet) -> Result<VoxelSet> {
        self.zip(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &VoxelSet) -> Result<VoxelSet> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> VoxelSet {
        VoxelSet {
            domain: self.domain.clone(),
            members: self.members.iter().map(|&m| !m).collect(),
        }
    }

    pub fn is_subset(&self, other: &VoxelSet) -> bool {
        self.members
            .iter()
            .zip(&other.members)
            .all(|(&a, &b)| !a || b)
    }

    /// Number of boundary faces (member against non-member or exterior).
    pub fn boundary_faces(&self, within: Option<&VoxelSet>) -> Result<usize> {
        let d = &self.domain;
        match within {
            None => {
                let mut n = 0;
                for i in self.cells() {
                    for a in 0..d.dim {
                        for fwd in [false, true] {
                            match d.neighbor(i, a, fwd) {
                                Some(j) if self.members[j] => {}
                                _ => n += 1,
                            }
                        }
                    }
                }
                Ok(n)
            }
            Some(w) => {
                self.same_domain(w)?;
                Ok(d.faces()
                    .filter(|f| {
                        w.members[f.lo]
                            && w.members[f.hi]
                            && self.members[f.lo] != self.members[f.hi]
                    })
                    .count())
            }
        }
    }

    /// Exact `H^{d-1}` of the essential boundary; with `within`, only faces
    /// whose two cells both lie in `within` are counted.
    pub fn perimeter(&self, within: Option<&VoxelSet>) -> Result<f64> {
        Ok(self.boundary_faces(within)? as f64 * self.domain.face_area())
    }

    pub fn connected_components(&self) -> Vec<VoxelSet> {
        let (labels, n) = component_labels(self);
        let mut out: Vec<VoxelSet> = (0..n).map(|_| VoxelSet::empty(&self.domain)).collect();
        for (i, &l) in labels.iter().enumerate() {
            if l != u32::MAX {
                out[l as usize].members[i] = true;
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        component_labels(self).1 <= 1
    }

    /// Euclidean diameter over member cell centres.
    pub fn center_diameter(&self) -> f64 {
        let pts: Vec<Point> = self.cells().map(|i| self.domain.center(i)).collect();
        let mut best: f64 = 0.0;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                best = best.max((pts[a] - pts[b]).norm());
            }
        }
        best
    }

    /// Extent along `axis` of the union of member cells.
    pub fn axis_extent(&self, axis: usize) -> f64 {
        let mut lo = usize::MAX;
        let mut hi = 0usize;
        for i in self.cells() {
            let c = self.domain.coords(i)[axis];
            lo = lo.min(c);
            hi = hi.max(c);
        }
        if lo == usize::MAX {
            0.0
        } else {
            (hi - lo + 1) as f64 * self.domain.cell_size
        }
    }
}

/// Face-connected component index per cell (`u32::MAX` outside the set).
pub fn component_labels(set: &VoxelSet) -> (Vec<u32>, usize) {
    labels_by(
        &set.domain,
        |i| set.members[i],
        |a, b| set.members[a] && set.members[b],
    )
}

/// Components of the graph whose vertices satisfy `active` and whose
/// edges are faces accepted by `joined`.
pub fn labels_by(
    domain: &GridDomain,
    active: impl Fn(usize) -> bool,
    joined: impl Fn(usize, usize) -> bool,
) -> (Vec<u32>, usize) {
    let mut labels = vec![u32::MAX; domain.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for s in 0..domain.len() {
        if labels[s] != u32::MAX || !active(s) {
            continue;
        }
        labels[s] = next;
        queue.push_back(s);
        while let Some(i) = queue.pop_front() {
            for a in 0..domain.dim {
                for fwd in [false, true] {
                    if let Some(j) = domain.neighbor(i, a, fwd) {
                        if labels[j] == u32::MAX && active(j) && joined(i, j) {
                            labels[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    (labels, next as usize)
}

/// Exact Euclidean distance from every cell centre to the nearest member
/// centre of `a_prime`.
pub fn distance_field(a_prime: &VoxelSet) -> Result<Vec<f64>> {
    if a_prime.is_empty() {
        return Err(Error::EmptySet("distance_field requires a nonempty set"));
    }
    let d = &a_prime.domain;
    let mut f: Vec<f64> = a_prime
        .members
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..d.dim {
        let n = d.extent[axis];
        let stride = d.stride(axis);
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..d.len() {
            if d.coords(start)[axis] != 0 {
                continue;
            }
            for k in 0..n {
                line[k] = f[start + k * stride];
            }
            edt_1d(&line, &mut out);
            for k in 0..n {
                f[start + k * stride] = out[k];
            }
        }
    }
    let h = d.cell_size;
    Ok(f.into_iter().map(|s| s.sqrt() * h).collect())
}

/// Lower envelope of parabolas: out[q] = min_p (q-p)^2 + f[p].
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

#[derive(Clone, Debug)]
pub struct SlabSelection {
    pub t1: f64,
    pub t2: f64,
    /// Cut-off field, one value per cell.
    pub phi: Vec<f64>,
    pub slab: VoxelSet,
    pub m_lambda: f64,
    /// Separation of `A'` from the complement of `A`.
    pub gap: f64,
    pub annuli: usize,
    pub chosen_annulus: usize,
    pub grad_phi: f64,
    pub distance: Vec<f64>,
    pub certificate: Certificate,
}

/// Chooses radii `T1 < T2` in the middle half of the gap between `A'` and
/// the complement of `A`, a cut-off `phi`, and the slab `F = D ∩ {T1 < dist < T2}`
/// such that `Per(F) <= lambda Per(D) + M_lambda vol(D)`.
pub fn coarea_slab_select(
    a_prime: &VoxelSet,
    a: &VoxelSet,
    d_set: &VoxelSet,
    lambda: f64,
) -> Result<SlabSelection> {
    a_prime.same_domain(a)?;
    a_prime.same_domain(d_set)?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::OutOfRange(format!(
            "lambda must lie in (0,1), got {lambda}"
        )));
    }
    let dom = &a_prime.domain;
    let h = dom.cell_size;
    let dist = distance_field(a_prime)?;
    let gap = (0..dom.len())
        .filter(|&i| !a.members[i])
        .map(|i| dist[i])
        .fold(f64::INFINITY, f64::min);
    if !gap.is_finite() {
        return Err(Error::EmptySet("complement of A is empty"));
    }
    if gap < 4.0 * h {
        return Err(Error::SlabTooThin {
            gap,
            required: 4.0 * h,
        });
    }
    let k = (1.0 / lambda).ceil() as usize;
    let t = |i: usize| (0.25 + i as f64 / (2.0 * k as f64)) * gap;

    // Boundary mass of D per open annulus (t_{i-1}, t_i).
    let per_d = d_set.perimeter(None)?;
    let mut mass = vec![0usize; k + 1];
    for c in d_set.cells() {
        let dc = dist[c];
        let mut open = 0usize;
        for ax in 0..dom.dim {
            for fwd in [false, true] {
                match dom.neighbor(c, ax, fwd) {
                    Some(j) if d_set.members[j] => {}
                    _ => open += 1,
                }
            }
        }
        if open == 0 {
            continue;
        }
        for i in 1..=k {
            if dc > t(i - 1) && dc < t(i) {
                mass[i] += open;
                break;
            }
        }
    }
    let area = dom.face_area();
    let chosen = (1..=k)
        .find(|&i| mass[i] as f64 * area <= lambda * per_d)
        .ok_or_else(|| Error::OutOfRange("no annulus meets the pigeonhole bound".into()))?;

    // D-internal faces as (smaller, larger) distance pairs.
    let pairs: Vec<(f64, f64)> = dom
        .faces()
        .filter(|f| d_set.members[f.lo] && d_set.members[f.hi])
        .map(|f| {
            let (x, y) = (dist[f.lo], dist[f.hi]);
            (x.min(y), x.max(y))
        })
        .collect();
    let w = gap / (8.0 * k as f64);
    let lower_slice = |s: f64| pairs.iter().filter(|&&(x, y)| x <= s && s < y).count();
    let upper_slice = |s: f64| pairs.iter().filter(|&&(x, y)| x < s && s <= y).count();
    let t1 = best_slice(t(chosen - 1), t(chosen - 1) + w, &dist, &lower_slice);
    let t2 = best_slice(t(chosen) - w, t(chosen), &dist, &upper_slice);

    let phi: Vec<f64> = dist
        .iter()
        .map(|&x| {
            if x <= t1 {
                1.0
            } else if x >= t2 {
                0.0
            } else {
                (t2 - x) / (t2 - t1)
            }
        })
        .collect();
    let grad_phi = dom
        .faces()
        .map(|f| (phi[f.lo] - phi[f.hi]).abs() / h)
        .fold(0.0, f64::max);
    let slab = VoxelSet::from_fn(dom, |i| d_set.members[i] && dist[i] > t1 && dist[i] < t2);
    let m_lambda = (16.0 * dom.dim as f64 * k as f64 / gap).max(grad_phi);

    let mut cert = Certificate::new("coarea_slab_select");
    cert.constant("lambda", lambda);
    cert.constant("annuli", k as f64);
    cert.constant("gap", gap);
    cert.constant("T1", t1);
    cert.constant("T2", t2);
    cert.constant("M_lambda", m_lambda);
    let per_f = slab.perimeter(None)?;
    cert.check(
        "slab_perimeter",
        per_f,
        lambda * per_d + m_lambda * d_set.volume(),
    );
    cert.check("gradient_bound", grad_phi, m_lambda);
    cert.check("T1_window", 0.25 * gap, t1);
    cert.check("T2_window", t2, 0.75 * gap);
    cert.check("T_order", t1, t2);
    let certificate = cert.into_result()?;
    Ok(SlabSelection {
        t1,
        t2,
        phi,
        slab,
        m_lambda,
        gap,
        annuli: k,
        chosen_annulus: chosen,
        grad_phi,
        distance: dist,
        certificate,
    })
}

/// First open sub-interval of `(lo, hi)` (split at distance values) whose
/// slice count does not exceed the window average; returns its midpoint.
pub(crate) fn best_slice(lo: f64, hi: f64, dist: &[f64], slice: &dyn Fn(f64) -> usize) -> f64 {
    let mut cuts: Vec<f64> = dist.iter().copied().filter(|&x| x > lo && x < hi).collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let pieces: Vec<(f64, f64, usize)> = cuts
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            (w[0], w[1], slice(mid))
        })
        .collect();
    let total: f64 = pieces.iter().map(|&(a, b, n)| (b - a) * n as f64).sum();
    let avg = total / (hi - lo);
    pieces
        .iter()
        .find(|&&(_, _, n)| n as f64 <= avg)
        .map(|&(a, b, _)| 0.5 * (a + b))
        .unwrap_or(0.5 * (lo + hi))
}

/// Isoperimetric constant for voxel sets: `vol^{(d-1)/d} <= c * Per`, attained by cubes.
pub fn isoperimetric_constant(dim: usize) -> f64 {
    1.0 / (2.0 * dim as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelPartition {
    pub domain: GridDomain,
    pub labels: Vec<u32>,
}

impl LabelPartition {
    pub fn new(domain: &GridDomain, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != domain.len() {
            return Err(Error::InvalidDomain(format!(
                "label array has {} entries, domain has {} cells",
                labels.len(),
                domain.len()
            )));
        }
        Ok(LabelPartition {
            domain: domain.clone(),
            labels,
        })
    }

    pub fn uniform(domain: &GridDomain, label: u32) -> Self {
        LabelPartition {
            domain: domain.clone(),
            labels: vec![label; domain.len()],
        }
    }

    /// Number of distinct labels present.
    pub fn label_count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn cells_of(&self, label: u32) -> VoxelSet {
        VoxelSet::from_fn(&self.domain, |i| self.labels[i] == label)
    }

    /// Total interface area counted once per interior face with differing labels.
    pub fn interface_faces(&self) -> usize {
        self.domain
            .faces()
            .filter(|f| self.labels[f.lo] != self.labels[f.hi])
            .count()
    }

    pub fn interface_area(&self) -> f64 {
        self.interface_faces() as f64 * self.domain.face_area()
    }
}
