//! Dirichlet cell problems `m_F(u, A)`: an exact max-flow solver for
//! densities independent of the jump, a seeded annealer for general
//! densities, and the density-recovery and sequence experiments built on them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::energies::{Density, EnergySequence, Hypothesis, SurfaceEnergy};
use crate::grid::{Face, GridDomain, LabelPartition, Point, VoxelSet};
use crate::pr::{face_at, PiecewiseRigidFunction, MOTION_TOL};
use crate::rigid::{unit_ball_volume, MatrixKind, RigidMotion, Vec3};
use crate::{Error, Result};

pub const DEFAULT_RING: usize = 1;

/// Volume of the unit ball in dimension `k`.
pub fn omega(k: usize) -> f64 {
    match k {
        1 => 2.0,
        2 => PI,
        _ => unit_ball_volume(k),
    }
}

/// `omega_{d-1} / (2 d omega_d)`.
pub fn c_d(d: usize) -> f64 {
    0.5 * omega(d - 1) / (d as f64 * omega(d))
}

#[derive(Clone, Debug)]
pub struct DirichletProblem {
    pub energy: SurfaceEnergy,
    pub datum: PiecewiseRigidFunction,
    pub region: VoxelSet,
    pub ring_width: usize,
}

impl DirichletProblem {
    pub fn new(
        energy: SurfaceEnergy,
        datum: PiecewiseRigidFunction,
        region: VoxelSet,
        ring_width: usize,
    ) -> Result<Self> {
        if datum.domain() != &region.domain {
            return Err(Error::DomainMismatch);
        }
        if region.is_empty() {
            return Err(Error::EmptySet("cell-problem region"));
        }
        if ring_width == 0 {
            return Err(Error::OutOfRange(
                "ring width must be at least one cell".into(),
            ));
        }
        let p = DirichletProblem {
            energy,
            datum,
            region,
            ring_width,
        };
        if p.ring().count() == p.region.count() {
            return Err(Error::Rejected(format!(
                "boundary ring of width {} covers the whole region",
                ring_width
            )));
        }
        Ok(p)
    }

    /// Cells of the region within `ring_width` face steps of its complement
    /// (the domain boundary counts as complement).
    pub fn ring(&self) -> VoxelSet {
        let dom = &self.region.domain;
        let mut depth = vec![usize::MAX; dom.len()];
        let mut frontier = Vec::new();
        for i in self.region.cells() {
            let outer = dom.exterior_faces(i) > 0
                || neighbors(dom, i).any(|(n, _)| !self.region.members[n]);
            if outer {
                depth[i] = 1;
                frontier.push(i);
            }
        }
        let mut d = 1;
        while d < self.ring_width && !frontier.is_empty() {
            let mut next = Vec::new();
            for &i in &frontier {
                for (n, _) in neighbors(dom, i) {
                    if self.region.members[n] && depth[n] == usize::MAX {
                        depth[n] = d + 1;
                        next.push(n);
                    }
                }
            }
            frontier = next;
            d += 1;
        }
        VoxelSet::from_fn(dom, |i| depth[i] != usize::MAX)
    }

    /// `w` has the datum's motion on the ring and outside the region.
    pub fn is_feasible(&self, w: &PiecewiseRigidFunction) -> bool {
        if w.domain() != self.datum.domain() {
            return false;
        }
        let ring = self.ring();
        (0..w.domain().len())
            .filter(|&i| ring.members[i] || !self.region.members[i])
            .all(|i| {
                w.motion_of(i)
                    .approx_eq(self.datum.motion_of(i), MOTION_TOL)
            })
    }

    /// `F(w, A)`.
    pub fn value(&self, w: &PiecewiseRigidFunction) -> f64 {
        self.energy.evaluate(w, Some(&self.region))
    }
}

fn neighbors(dom: &GridDomain, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..dom.dim).flat_map(move |ax| {
        [false, true]
            .into_iter()
            .filter_map(move |fwd| dom.neighbor(i, ax, fwd).map(|n| (n, ax)))
    })
}

fn face_between(a: usize, b: usize, axis: usize) -> Face {
    Face {
        lo: a.min(b),
        hi: a.max(b),
        axis,
    }
}

fn unit(axis: usize) -> Vec3 {
    let mut v = Vec3::zeros();
    v[axis] = 1.0;
    v
}

// ----------------------------------------------------------------------------
// Max-flow.

struct FlowGraph {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
}

impl FlowGraph {
    fn new(n: usize) -> Self {
        FlowGraph {
            adj: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: f64) {
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(c);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0.0);
    }

    /// Dinic; returns the flow value and the source side of a minimum cut.
    fn max_flow(&mut self, s: usize, t: usize) -> (f64, Vec<bool>) {
        let n = self.adj.len();
        let eps = 1e-13 * self.cap.iter().fold(0.0f64, |a, &c| a.max(c)).max(1e-300);
        let mut flow = 0.0;
        let mut level = vec![usize::MAX; n];
        let mut it = vec![0usize; n];
        loop {
            level.iter_mut().for_each(|l| *l = usize::MAX);
            level[s] = 0;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &e in &self.adj[u] {
                    let v = self.to[e];
                    if self.cap[e] > eps && level[v] == usize::MAX {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            if level[t] == usize::MAX {
                let side = level.iter().map(|&l| l != usize::MAX).collect();
                return (flow, side);
            }
            it.iter_mut().for_each(|x| *x = 0);
            loop {
                let f = self.augment(s, t, &mut level, &mut it, eps);
                if f <= 0.0 {
                    break;
                }
                flow += f;
            }
        }
    }

    fn augment(
        &mut self,
        s: usize,
        t: usize,
        level: &mut [usize],
        it: &mut [usize],
        eps: f64,
    ) -> f64 {
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let f = path
                    .iter()
                    .map(|&e| self.cap[e])
                    .fold(f64::INFINITY, f64::min);
                for &e in &path {
                    self.cap[e] -= f;
                    self.cap[e ^ 1] += f;
                }
                return f;
            }
            let mut advanced = false;
            while it[u] < self.adj[u].len() {
                let e = self.adj[u][it[u]];
                let v = self.to[e];
                if self.cap[e] > eps && level[v] == level[u].wrapping_add(1) {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                it[u] += 1;
            }
            if !advanced {
                if u == s {
                    return 0.0;
                }
                level[u] = usize::MAX;
                let e = path
                    .pop()
                    .expect("non-source node has an incoming path edge");
                u = self.to[e ^ 1];
                it[u] += 1;
            }
        }
    }
}

// ----------------------------------------------------------------------------
// Potts labelling of the free cells with fixed ring cells.

const OTHER: u32 = u32::MAX - 1;

struct Potts {
    region: Vec<bool>,
    fixed: Vec<Option<u32>>,
    free: Vec<usize>,
    slot: Vec<usize>,
    /// Faces with both cells in the region, with weights.
    faces: Vec<(usize, usize, f64)>,
}

impl Potts {
    fn new(problem: &DirichletProblem, classes: &PiecewiseRigidFunction) -> Self {
        let dom = &problem.region.domain;
        let ring = problem.ring();
        let area = dom.face_area();
        let zero = Vec3::zeros();
        let mut faces = Vec::new();
        for i in problem.region.cells() {
            for ax in 0..dom.dim {
                if let Some(n) = dom.neighbor(i, ax, true) {
                    if problem.region.members[n] {
                        let f = face_between(i, n, ax);
                        let x = dom.face_center(&f);
                        faces.push((i, n, problem.energy.density(&x, &zero, &unit(ax)) * area));
                    }
                }
            }
        }
        let fixed: Vec<Option<u32>> = (0..dom.len())
            .map(|i| ring.members[i].then(|| classes.label(i)))
            .collect();
        let free: Vec<usize> = problem
            .region
            .cells()
            .filter(|&i| !ring.members[i])
            .collect();
        let mut slot = vec![usize::MAX; dom.len()];
        for (k, &i) in free.iter().enumerate() {
            slot[i] = k;
        }
        Potts {
            region: problem.region.members.clone(),
            fixed,
            free,
            slot,
            faces,
        }
    }

    fn energy(&self, labels: &[u32]) -> f64 {
        self.faces
            .iter()
            .filter(|&&(a, b, _)| labels[a] != labels[b])
            .map(|f| f.2)
            .sum()
    }

    /// Exact minimizer over the free cells of the binary choice
    /// `cand[k].0` / `cand[k].1`, with fixed labels mapped by `fixed_map`.
    fn fusion(&self, cand: &[(u32, u32)], fixed_map: &dyn Fn(u32) -> u32) -> Vec<u32> {
        let n = self.free.len();
        let (s, t) = (n, n + 1);
        let mut unary = vec![[0.0f64; 2]; n];
        let mut pairs = Vec::new();
        for &(a, b, w) in &self.faces {
            match (self.fixed[a], self.fixed[b]) {
                (Some(_), Some(_)) => {}
                (Some(la), None) | (None, Some(la)) => {
                    let p = if self.fixed[a].is_some() {
                        self.slot[b]
                    } else {
                        self.slot[a]
                    };
                    let la = fixed_map(la);
                    unary[p][0] += if cand[p].0 != la { w } else { 0.0 };
                    unary[p][1] += if cand[p].1 != la { w } else { 0.0 };
                }
                (None, None) => {
                    let (p, q) = (self.slot[a], self.slot[b]);
                    let e = |x: bool, y: bool| {
                        let lp = if x { cand[p].1 } else { cand[p].0 };
                        let lq = if y { cand[q].1 } else { cand[q].0 };
                        if lp != lq {
                            w
                        } else {
                            0.0
                        }
                    };
                    let (e00, e01, e10, e11) = (
                        e(false, false),
                        e(false, true),
                        e(true, false),
                        e(true, true),
                    );
                    unary[p][1] += e10 - e00;
                    unary[q][1] += e11 - e10;
                    pairs.push((p, q, (e01 + e10 - e00 - e11).max(0.0)));
                }
            }
        }
        let mut g = FlowGraph::new(n + 2);
        for (p, c) in unary.iter().enumerate() {
            let m = c[0].min(c[1]);
            if c[1] - m > 0.0 {
                g.add_edge(s, p, c[1] - m);
            }
            if c[0] - m > 0.0 {
                g.add_edge(p, t, c[0] - m);
            }
        }
        for (p, q, l) in pairs {
            if l > 0.0 {
                g.add_edge(p, q, l);
            }
        }
        let (_, source_side) = g.max_flow(s, t);
        (0..n)
            .map(|p| if source_side[p] { cand[p].0 } else { cand[p].1 })
            .collect()
    }

    fn full_labels(&self, base: &PiecewiseRigidFunction, free_labels: &[u32]) -> Vec<u32> {
        let mut labels = base.partition.labels.clone();
        for (k, &i) in self.free.iter().enumerate() {
            labels[i] = free_labels[k];
        }
        labels
    }

    /// Free cells labelled by the nearest ring cell (breadth first).
    fn nearest_fixed(&self, dom: &GridDomain) -> Vec<u32> {
        let mut lab: Vec<Option<u32>> = self.fixed.clone();
        let mut frontier: Vec<usize> = (0..dom.len()).filter(|&i| lab[i].is_some()).collect();
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &i in &frontier {
                for (n, _) in neighbors(dom, i) {
                    if self.region[n] && lab[n].is_none() {
                        lab[n] = lab[i];
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        self.free
            .iter()
            .map(|&i| lab[i].expect("free cells are reachable from the ring"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Minimizer {
    /// `F(w, A)`.
    pub value: f64,
    pub w: PiecewiseRigidFunction,
    /// Certified lower bound on the minimum; equals `value` when exact.
    pub lower_bound: f64,
    pub exact: bool,
    /// Distinct motions on the boundary ring.
    pub boundary_labels: usize,
}

/// Minimum of `F(., A)` over piecewise rigid competitors equal to the datum on
/// the ring, for densities independent of the jump. Exact for up to two ring
/// motions; above that, expansion moves give `value` and isolating cuts give
/// `lower_bound`.
pub fn mincut_m(problem: &DirichletProblem) -> Result<Minimizer> {
    if !problem.energy.jump_independent() {
        return Err(Error::Unsupported(
            "cut solver needs a density independent of the jump".into(),
        ));
    }
    let dom = problem.region.domain.clone();
    let classes = problem.datum.make_pairwise_distinct();
    let potts = Potts::new(problem, &classes);
    let mut ring_labels: Vec<u32> = potts.fixed.iter().flatten().copied().collect();
    ring_labels.sort_unstable();
    ring_labels.dedup();
    let k = ring_labels.len();
    let free_labels: Vec<u32> = match k {
        0 => unreachable!("ring is non-empty"),
        1 => vec![ring_labels[0]; potts.free.len()],
        2 => potts.fusion(
            &vec![(ring_labels[0], ring_labels[1]); potts.free.len()],
            &|l| l,
        ),
        _ => {
            let mut cur = potts.nearest_fixed(&dom);
            let mut best = potts.energy(&potts.full_labels(&classes, &cur));
            loop {
                let mut improved = false;
                for &alpha in &ring_labels {
                    let cand: Vec<(u32, u32)> = cur.iter().map(|&l| (l, alpha)).collect();
                    let next = potts.fusion(&cand, &|l| l);
                    let e = potts.energy(&potts.full_labels(&classes, &next));
                    if e < best * (1.0 - 1e-12) {
                        best = e;
                        cur = next;
                        improved = true;
                    }
                }
                if !improved {
                    break;
                }
            }
            cur
        }
    };
    let labels = potts.full_labels(&classes, &free_labels);
    let w = PiecewiseRigidFunction::new(
        LabelPartition::new(&dom, labels.clone())?,
        classes.motions.clone(),
        classes.kind,
    )?
    .compact();
    let value = problem.value(&w);
    let lower_bound = if k <= 2 {
        value
    } else {
        let isolating: f64 = ring_labels
            .iter()
            .map(|&i| {
                let map = move |l: u32| if l == i { i } else { OTHER };
                let sol = potts.fusion(&vec![(i, OTHER); potts.free.len()], &map);
                let mut lab = potts.full_labels(&classes, &sol);
                for (c, l) in lab.iter_mut().enumerate() {
                    if potts.fixed[c].is_some() {
                        *l = map(*l);
                    }
                }
                potts.energy(&lab)
            })
            .sum();
        (0.5 * isolating).min(value)
    };
    Ok(Minimizer {
        value,
        w,
        lower_bound,
        exact: value - lower_bound <= 1e-9 * value.max(1e-300),
        boundary_labels: k,
    })
}

// ----------------------------------------------------------------------------
// Annealing.

#[derive(Clone, Debug, Serialize)]
pub struct AnnealConfig {
    /// Move evaluations per replica.
    pub budget: usize,
    pub replicas: usize,
    pub seed: u64,
    /// Initial and final temperatures; `None` scales by the face weight.
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    /// Half-width of motion perturbations in chart coordinates.
    pub step: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            budget: 200_000,
            replicas: 4,
            seed: 0,
            t_start: None,
            t_end: None,
            step: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct TracePoint {
    pub moves: usize,
    pub energy: f64,
    pub best: f64,
}

#[derive(Clone, Debug)]
pub struct AnnealResult {
    pub value: f64,
    pub w: PiecewiseRigidFunction,
    pub replica: usize,
    pub trace: Vec<TracePoint>,
    pub accepted: usize,
}

struct State<'a> {
    problem: &'a DirichletProblem,
    dom: &'a GridDomain,
    free: Vec<usize>,
    labels: Vec<u32>,
    motions: Vec<RigidMotion>,
    fixed: Vec<bool>,
    count: Vec<usize>,
    stamp: Vec<u32>,
    tick: u32,
    area: f64,
}

impl<'a> State<'a> {
    fn new(problem: &'a DirichletProblem) -> Self {
        let dom = &problem.region.domain;
        let p = problem.datum.make_pairwise_distinct();
        let ring = problem.ring();
        let free: Vec<usize> = problem
            .region
            .cells()
            .filter(|&i| !ring.members[i])
            .collect();
        let mut fixed = vec![false; p.motions.len()];
        let mut count = vec![0; p.motions.len()];
        for i in 0..dom.len() {
            if problem.region.members[i] && !ring.members[i] {
                count[p.label(i) as usize] += 1;
            } else {
                fixed[p.label(i) as usize] = true;
            }
        }
        State {
            problem,
            dom,
            free,
            labels: p.partition.labels,
            motions: p.motions,
            fixed,
            count,
            stamp: vec![0; dom.len()],
            tick: 0,
            area: dom.face_area(),
        }
    }

    fn face_energy(&self, a: usize, b: usize, axis: usize) -> f64 {
        let f = face_between(a, b, axis);
        let (la, lb) = (self.labels[f.lo] as usize, self.labels[f.hi] as usize);
        if la == lb || self.motions[la].approx_eq(&self.motions[lb], MOTION_TOL) {
            return 0.0;
        }
        let x = self.dom.face_center(&f);
        let xi = self.motions[lb].eval(&x) - self.motions[la].eval(&x);
        self.problem.energy.density(&x, &xi, &unit(axis)) * self.area
    }

    fn total(&self) -> f64 {
        let mut e = 0.0;
        for i in self.problem.region.cells() {
            for ax in 0..self.dom.dim {
                if let Some(n) = self.dom.neighbor(i, ax, true) {
                    if self.problem.region.members[n] {
                        e += self.face_energy(i, n, ax);
                    }
                }
            }
        }
        e
    }

    /// Energy of the region faces touching `cells`, each counted once.
    fn local(&mut self, cells: &[usize]) -> f64 {
        self.tick = self.tick.wrapping_add(1);
        if self.tick == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.tick = 1;
        }
        for &c in cells {
            self.stamp[c] = self.tick;
        }
        let mut e = 0.0;
        for &c in cells {
            for (n, ax) in neighbors(self.dom, c) {
                if !self.problem.region.members[n] || (self.stamp[n] == self.tick && n < c) {
                    continue;
                }
                e += self.face_energy(c, n, ax);
            }
        }
        e
    }

    fn set(&mut self, c: usize, l: u32) {
        self.count[self.labels[c] as usize] -= 1;
        self.count[l as usize] += 1;
        self.labels[c] = l;
    }

    fn free_cells_of(&self, l: u32) -> Vec<usize> {
        self.free
            .iter()
            .copied()
            .filter(|&i| self.labels[i] == l)
            .collect()
    }

    fn perturbed(&self, m: &RigidMotion, step: f64, rng: &mut ChaCha8Rng) -> RigidMotion {
        let kind = self.problem.datum.kind;
        let gamma: Vec<f64> = (0..kind.param_dim())
            .map(|_| rng.gen_range(-step..=step))
            .collect();
        let dq = kind.psi(&gamma).expect("small chart step");
        let q = if kind.is_rotation() {
            m.q * dq
        } else {
            m.q + dq
        };
        let mut b = m.b;
        for k in 0..self.dom.dim {
            b[k] += rng.gen_range(-step..=step);
        }
        RigidMotion::new(q, b)
    }

    fn new_label(&mut self, m: RigidMotion) -> u32 {
        if let Some(l) = (0..self.motions.len()).find(|&l| self.count[l] == 0 && !self.fixed[l]) {
            self.motions[l] = m;
            return l as u32;
        }
        self.motions.push(m);
        self.fixed.push(false);
        self.count.push(0);
        (self.motions.len() - 1) as u32
    }

    fn function(&self) -> Result<PiecewiseRigidFunction> {
        Ok(PiecewiseRigidFunction::new(
            LabelPartition::new(self.dom, self.labels.clone())?,
            self.motions.clone(),
            self.problem.datum.kind,
        )?
        .compact())
    }
}

fn replica(problem: &DirichletProblem, cfg: &AnnealConfig, index: usize) -> Result<AnnealResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut st = State::new(problem);
    let weight = problem.region.domain.face_area();
    let t0 = cfg.t_start.unwrap_or(0.5 * problem.energy.beta * weight);
    let t1 = cfg.t_end.unwrap_or(0.01 * problem.energy.alpha * weight);
    let checkpoints = 200.min(cfg.budget.max(1));
    let every = (cfg.budget / checkpoints).max(1);
    let energy = st.total();
    let mut best = energy;
    let mut best_state = (st.labels.clone(), st.motions.clone());
    let mut trace = vec![TracePoint {
        moves: 0,
        energy,
        best,
    }];
    let mut accepted = 0;
    let nfree = st.free.len();
    for k in 0..cfg.budget {
        let temp = t0 * (t1 / t0).powf(k as f64 / cfg.budget as f64);
        let c = st.free[rng.gen_range(0..nfree)];
        let l = st.labels[c];
        let roll: f64 = rng.gen();
        let accept = |delta: f64, rng: &mut ChaCha8Rng| {
            delta <= 0.0 || rng.gen::<f64>() < (-delta / temp).exp()
        };
        if roll < 0.7 {
            let nb: Vec<usize> = neighbors(st.dom, c)
                .map(|(n, _)| n)
                .filter(|&n| problem.region.members[n] && st.labels[n] != l)
                .collect();
            if nb.is_empty() {
                continue;
            }
            let target = st.labels[nb[rng.gen_range(0..nb.len())]];
            let before = st.local(&[c]);
            st.set(c, target);
            let delta = st.local(&[c]) - before;
            if accept(delta, &mut rng) {
                accepted += 1;
            } else {
                st.set(c, l);
            }
        } else if roll < 0.8 {
            if st.fixed[l as usize] {
                continue;
            }
            let cells = st.free_cells_of(l);
            let old = st.motions[l as usize];
            let before = st.local(&cells);
            st.motions[l as usize] = st.perturbed(&old, cfg.step, &mut rng);
            let delta = st.local(&cells) - before;
            if accept(delta, &mut rng) {
                accepted += 1;
            } else {
                st.motions[l as usize] = old;
            }
        } else if roll < 0.9 {
            let dir: Vec3 = {
                let mut v = Vec3::zeros();
                for a in 0..st.dom.dim {
                    v[a] = rng.gen_range(-1.0..=1.0);
                }
                v
            };
            let xc = st.dom.center(c);
            let cells: Vec<usize> = st
                .free_cells_of(l)
                .into_iter()
                .filter(|&i| (st.dom.center(i) - xc).dot(&dir) >= 0.0)
                .collect();
            let m = st.perturbed(&st.motions[l as usize], cfg.step, &mut rng);
            let nl = st.new_label(m);
            let before = st.local(&cells);
            for &i in &cells {
                st.set(i, nl);
            }
            let delta = st.local(&cells) - before;
            if accept(delta, &mut rng) {
                accepted += 1;
            } else {
                for &i in &cells {
                    st.set(i, l);
                }
            }
        } else {
            let nb: Vec<usize> = neighbors(st.dom, c)
                .map(|(n, _)| n)
                .filter(|&n| problem.region.members[n] && st.labels[n] != l)
                .collect();
            if nb.is_empty() {
                continue;
            }
            let target = st.labels[nb[rng.gen_range(0..nb.len())]];
            let cells = st.free_cells_of(l);
            let before = st.local(&cells);
            for &i in &cells {
                st.set(i, target);
            }
            let delta = st.local(&cells) - before;
            if accept(delta, &mut rng) {
                accepted += 1;
            } else {
                for &i in &cells {
                    st.set(i, l);
                }
            }
        }
        if (k + 1) % every == 0 || k + 1 == cfg.budget {
            let energy = st.total();
            if energy < best {
                best = energy;
                best_state = (st.labels.clone(), st.motions.clone());
            }
            trace.push(TracePoint {
                moves: k + 1,
                energy,
                best,
            });
        }
    }
    st.labels = best_state.0;
    st.motions = best_state.1;
    let w = st.function()?;
    Ok(AnnealResult {
        value: problem.value(&w),
        w,
        replica: index,
        trace,
        accepted,
    })
}

/// Best of independent seeded annealing replicas; an upper bound on the
/// minimum. Replica `r` draws from stream `r` of the seeded generator.
pub fn anneal_m(problem: &DirichletProblem, cfg: &AnnealConfig) -> Result<AnnealResult> {
    problem
        .energy
        .require(&[Hypothesis::H1, Hypothesis::H3, Hypothesis::H4])?;
    if cfg.replicas == 0 {
        return Err(Error::OutOfRange("need at least one replica".into()));
    }
    let results: Vec<AnnealResult> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| replica(problem, cfg, r))
        .collect::<Result<_>>()?;
    Ok(results
        .into_iter()
        .reduce(|a, b| if b.value < a.value { b } else { a })
        .expect("at least one replica"))
}

// ----------------------------------------------------------------------------
// Experiments.

#[derive(Clone, Debug)]
pub enum Solver {
    /// Cut solver when the density ignores the jump, annealing otherwise.
    Auto(AnnealConfig),
    Mincut,
    Anneal(AnnealConfig),
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Auto(AnnealConfig::default())
    }
}

/// Value of `m_F(u, A)` and whether it is exact.
pub fn solve(problem: &DirichletProblem, solver: &Solver) -> Result<(f64, bool)> {
    match solver {
        Solver::Mincut => mincut_m(problem).map(|m| (m.value, m.exact)),
        Solver::Anneal(cfg) => anneal_m(problem, cfg).map(|r| (r.value, false)),
        Solver::Auto(cfg) => {
            if problem.energy.jump_independent() {
                mincut_m(problem).map(|m| (m.value, m.exact))
            } else {
                anneal_m(problem, cfg).map(|r| (r.value, false))
            }
        }
    }
}

/// `u_{x0,xi,nu}`: translation by `xi` where `<x - x0, nu> > 0`, zero elsewhere.
pub fn jump_datum(
    domain: &GridDomain,
    kind: MatrixKind,
    x0: &Point,
    xi: &Vec3,
    nu: &Vec3,
) -> Result<PiecewiseRigidFunction> {
    if domain.dim != kind.dim() {
        return Err(Error::InvalidDomain(format!(
            "{} needs dimension {}",
            kind.name(),
            kind.dim()
        )));
    }
    let labels = (0..domain.len())
        .map(|i| ((domain.center(i) - x0).dot(nu) > 0.0) as u32)
        .collect();
    PiecewiseRigidFunction::new(
        LabelPartition::new(domain, labels)?,
        vec![
            RigidMotion::constant(kind, Vec3::zeros()),
            RigidMotion::constant(kind, *xi),
        ],
        kind,
    )
}

fn check_normal(nu: &Vec3, dim: usize) -> Result<()> {
    let comps: Vec<f64> = (0..dim)
        .map(|k| nu[k].abs())
        .filter(|&c| c > 1e-12)
        .collect();
    let ok = (nu.norm() - 1.0).abs() < 1e-9
        && (dim..3).all(|k| nu[k] == 0.0)
        && comps.iter().all(|c| (c - comps[0]).abs() < 1e-9);
    if ok {
        Ok(())
    } else {
        Err(Error::OutOfRange(
            "normal must be a unit axis or diagonal direction".into(),
        ))
    }
}

fn check_radii(radii: &[f64], h: f64) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::EmptySet("radii"));
    }
    if radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::OutOfRange(
            "radii must be strictly decreasing".into(),
        ));
    }
    if radii.iter().any(|&r| r < 8.0 * h * (1.0 - 1e-9)) {
        return Err(Error::OutOfRange("radii must span at least 8 cells".into()));
    }
    Ok(())
}

fn check_ball(domain: &GridDomain, x0: &Point, r: f64) -> Result<()> {
    for a in 0..domain.dim {
        let lo = domain.origin[a];
        let hi = lo + domain.extent[a] as f64 * domain.cell_size;
        if x0[a] - r < lo || x0[a] + r > hi {
            return Err(Error::OutOfRange(format!(
                "ball of radius {r} exits the domain"
            )));
        }
    }
    Ok(())
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityEstimate {
    pub x0: [f64; 3],
    pub xi: [f64; 3],
    pub nu: [f64; 3],
    pub radii: Vec<f64>,
    /// `m_F(u_{x0,xi,nu}, B_eps)` per radius.
    pub values: Vec<f64>,
    /// `values / (omega_{d-1} eps^{d-1})`.
    pub normalized: Vec<f64>,
    /// Maximum of `normalized` over radii at or below each radius.
    pub tail_max: Vec<f64>,
    /// Maximum over the three smallest radii.
    pub limsup: f64,
    pub exact: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn density_estimate(
    energy: &SurfaceEnergy,
    domain: &GridDomain,
    kind: MatrixKind,
    x0: &Point,
    xi: &Vec3,
    nu: &Vec3,
    radii: &[f64],
    ring_width: usize,
    solver: &Solver,
) -> Result<DensityEstimate> {
    let d = domain.dim;
    check_normal(nu, d)?;
    check_radii(radii, domain.cell_size)?;
    for &r in radii {
        check_ball(domain, x0, r)?;
    }
    let u = jump_datum(domain, kind, x0, xi, nu)?;
    let mut values = Vec::new();
    let mut exact = true;
    for &r in radii {
        let p = DirichletProblem::new(
            energy.clone(),
            u.clone(),
            VoxelSet::ball(domain, x0, r),
            ring_width,
        )?;
        let (v, ex) = solve(&p, solver)?;
        values.push(v);
        exact &= ex;
    }
    let normalized: Vec<f64> = values
        .iter()
        .zip(radii)
        .map(|(v, r)| v / (omega(d - 1) * r.powi(d as i32 - 1)))
        .collect();
    let mut tail_max = normalized.clone();
    for k in (0..tail_max.len().saturating_sub(1)).rev() {
        tail_max[k] = tail_max[k].max(tail_max[k + 1]);
    }
    let limsup = normalized
        .iter()
        .rev()
        .take(3)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    Ok(DensityEstimate {
        x0: arr(x0),
        xi: arr(xi),
        nu: arr(nu),
        radii: radii.to_vec(),
        values,
        normalized,
        tail_max,
        limsup,
        exact,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceRow {
    pub radius: f64,
    /// `H^{d-1}(J_u ∩ B_eps)`.
    pub mu: f64,
    /// `F(u, B_eps) / mu`.
    pub energy_ratio: f64,
    /// `m_F(u, B_eps) / mu`.
    pub m_ratio: f64,
    /// `m_F(blow-up, B_eps) / mu`.
    pub blowup_ratio: f64,
    /// `(max - min) / max` of the three ratios.
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PointEquivalence {
    pub point: [f64; 3],
    pub rows: Vec<EquivalenceRow>,
    pub gap_at_smallest: f64,
    /// Gaps are non-increasing as the radius decreases.
    pub shrinking: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub points: Vec<PointEquivalence>,
    /// Points where no radius meets the jump set.
    pub excluded: Vec<[f64; 3]>,
}

/// The two-motion function with the motions on either side of the face
/// through `x0`, split by the plane through `x0` normal to the face.
pub fn blow_up_limit(u: &PiecewiseRigidFunction, x0: &Point) -> Result<PiecewiseRigidFunction> {
    let dom = u.domain();
    let f = face_at(dom, x0)
        .ok_or_else(|| Error::NotJumpPoint(format!("{:?} is not on a face", arr(x0))))?;
    let labels = (0..dom.len())
        .map(|i| (dom.center(i)[f.axis] > x0[f.axis]) as u32)
        .collect();
    PiecewiseRigidFunction::new(
        LabelPartition::new(dom, labels)?,
        vec![*u.motion_of(f.lo), *u.motion_of(f.hi)],
        u.kind,
    )
}

pub fn check_m_equivalences(
    energy: &SurfaceEnergy,
    u: &PiecewiseRigidFunction,
    points: &[Point],
    radii: &[f64],
    ring_width: usize,
    solver: &Solver,
) -> Result<EquivalenceReport> {
    let dom = u.domain();
    check_radii(radii, dom.cell_size)?;
    let mut out = Vec::new();
    let mut excluded = Vec::new();
    for x0 in points {
        let f = face_at(dom, x0)
            .ok_or_else(|| Error::NotJumpPoint(format!("{:?} is not on a face", arr(x0))))?;
        let balls: Vec<VoxelSet> = radii.iter().map(|&r| VoxelSet::ball(dom, x0, r)).collect();
        let mus: Vec<f64> = balls.iter().map(|b| u.jump_area(Some(b))).collect();
        if !u.jumps_across(&f) {
            if mus.iter().all(|&m| m == 0.0) {
                excluded.push(arr(x0));
                continue;
            }
            return Err(Error::NotJumpPoint(format!(
                "u does not jump at {:?}",
                arr(x0)
            )));
        }
        let ubar = blow_up_limit(u, x0)?;
        let mut rows = Vec::new();
        for ((&r, ball), &mu) in radii.iter().zip(&balls).zip(&mus) {
            check_ball(dom, x0, r)?;
            let pu = DirichletProblem::new(energy.clone(), u.clone(), ball.clone(), ring_width)?;
            let pb = DirichletProblem::new(energy.clone(), ubar.clone(), ball.clone(), ring_width)?;
            let ratios = [
                energy.evaluate(u, Some(ball)) / mu,
                solve(&pu, solver)?.0 / mu,
                solve(&pb, solver)?.0 / mu,
            ];
            let hi = ratios.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lo = ratios.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            rows.push(EquivalenceRow {
                radius: r,
                mu,
                energy_ratio: ratios[0],
                m_ratio: ratios[1],
                blowup_ratio: ratios[2],
                gap: if hi > 0.0 { (hi - lo) / hi } else { 0.0 },
            });
        }
        let shrinking = rows.windows(2).all(|w| w[1].gap <= w[0].gap + 1e-12);
        out.push(PointEquivalence {
            point: arr(x0),
            gap_at_smallest: rows.last().map_or(0.0, |r| r.gap),
            rows,
            shrinking,
        });
    }
    Ok(EquivalenceReport {
        points: out,
        excluded,
    })
}

#[derive(Clone, Debug)]
pub struct GammaScenario {
    pub domain: GridDomain,
    pub kind: MatrixKind,
    pub x0: Point,
    pub xi: Vec3,
    pub nu: Vec3,
    pub radii: Vec<f64>,
    pub ring_width: usize,
    /// Refinement factor of the grid used for the limit values.
    pub refine: usize,
    /// Limit energy; defaults to the last member with oscillations refined
    /// by the same factor as the grid.
    pub limit: Option<SurfaceEnergy>,
    pub check_lower: bool,
    /// Relative slack for both inequalities.
    pub tolerance: f64,
    pub solver: Solver,
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaReport {
    pub ns: Vec<f64>,
    pub radii: Vec<f64>,
    /// `table[k][j] = m_{F_{n_j}}(u, B_{eps_k})`.
    pub table: Vec<Vec<f64>>,
    /// Same at the radius `eps (1 - 1e-6)`, standing in for `eps' < eps`.
    pub inner_table: Vec<Vec<f64>>,
    /// Limit values per radius.
    pub limit: Vec<f64>,
    /// Upper tail value over `n` minus the limit, relative to the limit.
    pub upper_excess: Vec<f64>,
    /// Limit minus the lower tail value over `n` at the inner radius, relative.
    pub lower_excess: Vec<f64>,
    pub upper_ok: bool,
    pub lower_ok: Option<bool>,
    /// `|m_n - m_limit|` is non-increasing in `n` at every radius.
    pub monotone: Vec<bool>,
    pub h6_required: bool,
    pub h6_declared: bool,
    pub exact: bool,
}

const INNER: f64 = 1.0 - 1e-6;

pub fn gamma_experiment(seq: &EnergySequence, scenario: &GammaScenario) -> Result<GammaReport> {
    let seq = EnergySequence::new(seq.members.clone())?;
    let dom = &scenario.domain;
    check_normal(&scenario.nu, dom.dim)?;
    check_radii(&scenario.radii, dom.cell_size)?;
    if scenario.refine == 0 {
        return Err(Error::OutOfRange(
            "refinement factor must be positive".into(),
        ));
    }
    for &r in &scenario.radii {
        check_ball(dom, &scenario.x0, r)?;
    }
    let u = jump_datum(dom, scenario.kind, &scenario.x0, &scenario.xi, &scenario.nu)?;
    let mut exact = true;
    let mut m = |e: &SurfaceEnergy, u: &PiecewiseRigidFunction, r: f64| -> Result<f64> {
        let p = DirichletProblem::new(
            e.clone(),
            u.clone(),
            VoxelSet::ball(u.domain(), &scenario.x0, r),
            scenario.ring_width,
        )?;
        let (v, ex) = solve(&p, &scenario.solver)?;
        exact &= ex;
        Ok(v)
    };
    let ns: Vec<f64> = seq.members.iter().map(|(n, _)| *n).collect();
    let mut table = Vec::new();
    let mut inner_table = Vec::new();
    for &r in &scenario.radii {
        table.push(
            seq.members
                .iter()
                .map(|(_, e)| m(e, &u, r))
                .collect::<Result<Vec<_>>>()?,
        );
        if scenario.check_lower {
            inner_table.push(
                seq.members
                    .iter()
                    .map(|(_, e)| m(e, &u, r * INNER))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    let rf = scenario.refine;
    let fine = GridDomain::new(
        dom.dim,
        &[
            dom.extent[0] * rf,
            dom.extent[1] * rf,
            dom.extent[2] * if dom.dim == 3 { rf } else { 1 },
        ][..dom.dim],
        dom.cell_size / rf as f64,
        &dom.origin[..dom.dim],
    )?;
    let limit_energy = match &scenario.limit {
        Some(e) => e.clone(),
        None => {
            let mut e = seq.members.last().expect("non-empty sequence").1.clone();
            if let Density::Oscillating { n, axis } = e.density {
                e.density = Density::Oscillating {
                    n: n * rf as f64,
                    axis,
                };
            }
            e
        }
    };
    let u_fine = jump_datum(
        &fine,
        scenario.kind,
        &scenario.x0,
        &scenario.xi,
        &scenario.nu,
    )?;
    let limit: Vec<f64> = scenario
        .radii
        .iter()
        .map(|&r| m(&limit_energy, &u_fine, r))
        .collect::<Result<_>>()?;
    let tail = ns.len().min(2);
    let tail_of = |row: &[f64]| row[row.len() - tail..].to_vec();
    let rel = |x: f64, l: f64| if l > 0.0 { x / l } else { x };
    let upper_excess: Vec<f64> = table
        .iter()
        .zip(&limit)
        .map(|(row, &l)| {
            let sup = tail_of(row).into_iter().fold(f64::NEG_INFINITY, f64::max);
            rel(sup - l, l)
        })
        .collect();
    let lower_excess: Vec<f64> = inner_table
        .iter()
        .zip(&limit)
        .map(|(row, &l)| {
            let inf = tail_of(row).into_iter().fold(f64::INFINITY, f64::min);
            rel(l - inf, l)
        })
        .collect();
    let monotone = table
        .iter()
        .zip(&limit)
        .map(|(row, &l)| {
            row.windows(2)
                .all(|w| (w[1] - l).abs() <= (w[0] - l).abs() + 1e-9 * l.abs().max(1e-300))
        })
        .collect();
    let h6_declared = seq.members.iter().all(|(_, e)| e.has(Hypothesis::H6));
    Ok(GammaReport {
        ns,
        radii: scenario.radii.clone(),
        upper_ok: upper_excess.iter().all(|&x| x <= scenario.tolerance),
        lower_ok: scenario
            .check_lower
            .then(|| lower_excess.iter().all(|&x| x <= scenario.tolerance)),
        table,
        inner_table,
        limit,
        upper_excess,
        lower_excess,
        monotone,
        h6_required: scenario.check_lower,
        h6_declared,
        exact,
    })
}
