//! Acceptance suite: ten criteria, one PASS/FAIL line each. Every bound is
//! checked against values recomputed here from first principles.

use std::f64::consts::{PI, SQRT_2};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prcalc::constructions::{decompose_2d, decompose_3d, DECOMPOSE_3D_CONSTANT};
use prcalc::energies::{EnergySequence, SurfaceEnergy};
use prcalc::grid::{Face, GridDomain, LabelPartition, Point, VoxelSet};
use prcalc::joining::{join, join_scaled, join_with_boundary, Join};
use prcalc::minimize::{
    anneal_m, check_m_equivalences, density_estimate, gamma_experiment, mincut_m, AnnealConfig,
    DirichletProblem, GammaScenario, Solver,
};
use prcalc::pr::PiecewiseRigidFunction;
use prcalc::rigid::{
    certify_chart, rigid_bound, transfer_constant, Mat, MatrixKind, PsiFn, RigidMotion, Vec3,
};
use prcalc::truncation::{theta_limit, truncate};
use prcalc::Error;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("chart round trip and Lipschitz bound", c1_charts),
        ("rank condition", c2_rank),
        ("rigid motion bound and transfer", c3_rigid_bound),
        ("set decompositions", c4_decompositions),
        ("fundamental estimates", c5_joins),
        ("truncation", c6_truncation),
        ("density recovery", c7_density),
        ("cell-problem equivalences", c8_equivalences),
        ("sequence experiment", c9_gamma),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {:>2} PASS [{secs:6.2}s] {name}: {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL [{secs:6.2}s] {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Oracles.

fn so2(angle: f64) -> Mat {
    let (s, c) = angle.sin_cos();
    Mat::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 0.0)
}

fn skew2(a: f64) -> Mat {
    Mat::new(0.0, -a, 0.0, a, 0.0, 0.0, 0.0, 0.0, 0.0)
}

fn skew3(w: &Vec3) -> Mat {
    Mat::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation of a unit quaternion `(w, x, y, z)`.
fn quat(w: f64, x: f64, y: f64, z: f64) -> Mat {
    Mat::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Uniform rotation by the subgroup algorithm on unit quaternions.
fn uniform_so3(rng: &mut ChaCha8Rng) -> Mat {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    quat(
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    )
}

/// Rotation by `angle` about a random axis.
fn small_so3(rng: &mut ChaCha8Rng, angle: f64) -> Mat {
    let axis = unit(rng, 3);
    let (s, c) = (0.5 * angle).sin_cos();
    quat(c, s * axis.x, s * axis.y, s * axis.z)
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec3 {
    loop {
        let mut v = Vec3::zeros();
        for a in 0..dim {
            v[a] = rng.gen_range(-1.0..1.0);
        }
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Singular values, largest first, from the eigenvalues of `m^T m`.
fn singular_values(m: &Mat) -> [f64; 3] {
    let e = (m.transpose() * m).symmetric_eigen();
    let mut s: Vec<f64> = e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    [s[0], s[1], s[2]]
}

/// Each interior face once, as `(lo, hi, axis)`.
fn faces(dom: &GridDomain) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..dom.len() {
        let c = dom.coords(i);
        for a in 0..dom.dim {
            if c[a] + 1 < dom.extent[a] {
                let mut d = c;
                d[a] += 1;
                out.push((i, dom.index(d), a));
            }
        }
    }
    out
}

fn boundary_faces_of_cell(dom: &GridDomain, i: usize) -> usize {
    let c = dom.coords(i);
    (0..dom.dim)
        .map(|a| (c[a] == 0) as usize + (c[a] + 1 == dom.extent[a]) as usize)
        .sum()
}

/// Perimeter including faces on the domain boundary.
fn perimeter(s: &VoxelSet) -> f64 {
    let dom = &s.domain;
    let inner = faces(dom)
        .iter()
        .filter(|(a, b, _)| s.members[*a] != s.members[*b])
        .count();
    let outer: usize = (0..dom.len())
        .filter(|&i| s.members[i])
        .map(|i| boundary_faces_of_cell(dom, i))
        .sum();
    (inner + outer) as f64 * dom.cell_size.powi(dom.dim as i32 - 1)
}

fn face_area(dom: &GridDomain) -> f64 {
    dom.cell_size.powi(dom.dim as i32 - 1)
}

fn same_motion(u: &PiecewiseRigidFunction, i: usize, j: usize) -> bool {
    u.motions[u.partition.labels[i] as usize] == u.motions[u.partition.labels[j] as usize]
}

/// `H^{d-1}` of the jump faces with both cells in `region`.
fn jump_area(u: &PiecewiseRigidFunction, region: Option<&VoxelSet>) -> f64 {
    let dom = u.domain();
    let inside = |i: usize| region.map_or(true, |r| r.members[i]);
    faces(dom)
        .iter()
        .filter(|(a, b, _)| inside(*a) && inside(*b) && !same_motion(u, *a, *b))
        .count() as f64
        * face_area(dom)
}

fn value(u: &PiecewiseRigidFunction, i: usize) -> Vec3 {
    let m = &u.motions[u.partition.labels[i] as usize];
    m.q * u.domain().center(i) + m.b
}

fn ball(dom: &GridDomain, c: &Point, r: f64) -> VoxelSet {
    VoxelSet::from_fn(dom, |i| (dom.center(i) - c).norm() < r)
}

fn function(dom: &GridDomain, kind: MatrixKind, labels: Vec<u32>, motions: Vec<RigidMotion>) -> PiecewiseRigidFunction {
    PiecewiseRigidFunction::new(LabelPartition::new(dom, labels).unwrap(), motions, kind).unwrap()
}

fn random_connected(dom: &GridDomain, cells: usize, rng: &mut ChaCha8Rng) -> VoxelSet {
    let mut set = VoxelSet::empty(dom);
    let start = dom.index([dom.extent[0] / 2, dom.extent[1] / 2, dom.extent[2] / 2]);
    set.members[start] = true;
    let mut frontier = vec![start];
    let mut count = 1;
    while count < cells {
        let i = frontier[rng.gen_range(0..frontier.len())];
        let mut c = dom.coords(i);
        let a = rng.gen_range(0..dom.dim);
        if rng.gen_bool(0.5) {
            c[a] += 1;
        } else if c[a] > 0 {
            c[a] -= 1;
        } else {
            continue;
        }
        if (0..dom.dim).any(|k| c[k] == 0 || c[k] + 1 >= dom.extent[k]) {
            continue;
        }
        let j = dom.index(c);
        if !set.members[j] {
            set.members[j] = true;
            frontier.push(j);
            count += 1;
        }
    }
    set
}

// ---------------------------------------------------------------------------
// 1. Charts.

fn c1_charts() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 10_000;
    let mut detail = Vec::new();
    for kind in [MatrixKind::So2, MatrixKind::So3] {
        let rep = certify_chart(kind, n, 7).map_err(|e| e.to_string())?;
        ensure!(rep.certificate.all_hold(), "{kind:?} certificate fails: {:?}", rep.certificate.failures());
        // Independent sampling: uniform rotations and anchor-ball pairs.
        let c_l = kind.lipschitz();
        let max_angle = 2.0 * (1.0 / (16.0 * SQRT_2)).asin() * 0.999;
        let (mut round, mut lip) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let (anchor, q1, q2) = match kind {
                MatrixKind::So2 => {
                    let a = rng.gen_range(-PI..PI);
                    (
                        so2(a),
                        so2(a + rng.gen_range(-max_angle..max_angle)),
                        so2(a + rng.gen_range(-max_angle..max_angle)),
                    )
                }
                _ => {
                    let a = uniform_so3(&mut rng);
                    let (t1, t2) = (rng.gen_range(0.0..max_angle), rng.gen_range(0.0..max_angle));
                    let r1 = small_so3(&mut rng, t1);
                    let r2 = small_so3(&mut rng, t2);
                    (a, a * r1, r2 * a)
                }
            };
            ensure!((q1 - anchor).norm() < 0.125 && (q2 - anchor).norm() < 0.125, "sample left the anchor ball");
            let g = kind.xi(&anchor, None).map_err(|e| e.to_string())?;
            round = round.max((kind.psi(&g).map_err(|e| e.to_string())? - anchor).norm());
            let g1 = kind.xi(&q1, Some(&anchor)).map_err(|e| e.to_string())?;
            let g2 = kind.xi(&q2, Some(&anchor)).map_err(|e| e.to_string())?;
            round = round.max((kind.psi(&g1).map_err(|e| e.to_string())? - q1).norm());
            let dq = (q1 - q2).norm();
            if dq > 0.0 {
                let dg = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                ensure!(dg.is_finite(), "non-finite chart difference");
                lip = lip.max(dg / dq);
            }
        }
        ensure!(round <= 1e-10, "{kind:?} round trip {round:e} > 1e-10");
        ensure!(lip <= c_l, "{kind:?} Lipschitz ratio {lip} > C_L = {c_l}");
        detail.push(format!(
            "{}: round trip {:.1e}/{:.1e}, ratio {:.3}/{:.3} <= {c_l}",
            kind.name(),
            rep.max_round_trip,
            round,
            rep.max_lipschitz_ratio,
            lip
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs <= 5.0, "took {secs:.2}s > 5s");
    Ok(detail.join("; "))
}

// ---------------------------------------------------------------------------
// 2. Rank condition.

fn c2_rank() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut detail = Vec::new();
    for kind in [MatrixKind::Skew2, MatrixKind::Skew3, MatrixKind::So2, MatrixKind::So3] {
        let rep = certify_chart(kind, 10_000, 8).map_err(|e| e.to_string())?;
        ensure!(rep.min_rank_gap > 0.0, "{kind:?} library rank gap {}", rep.min_rank_gap);
        let draw = |rng: &mut ChaCha8Rng| match kind {
            MatrixKind::Skew2 => skew2(rng.gen_range(-5.0..5.0)),
            MatrixKind::Skew3 => skew3(&Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))),
            MatrixKind::So2 => so2(rng.gen_range(-PI..PI)),
            MatrixKind::So3 => uniform_so3(rng),
        };
        let (mut min_s2, mut split) = (f64::INFINITY, 0.0f64);
        let mut pairs = 0;
        while pairs < 10_000 {
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            if a == b {
                continue;
            }
            pairs += 1;
            let s = singular_values(&(a - b));
            min_s2 = min_s2.min(s[1]);
            split = split.max((s[0] - s[1]) / s[0]);
        }
        ensure!(min_s2 > 0.0, "{kind:?} second singular value vanishes");
        if kind == MatrixKind::Skew2 {
            ensure!(split <= 1e-12, "skew2 sigma_1 != sigma_2 (split {split:e})");
            ensure!(rep.max_sigma_split.unwrap_or(1.0) <= 1e-12, "library skew2 split");
        }
        detail.push(format!("{}: min sigma_2 {:.2e}/{:.2e}", kind.name(), rep.min_rank_gap, min_s2));
    }
    Ok(detail.join("; ") + "; skew2 sigma_1 = sigma_2")
}

// ---------------------------------------------------------------------------
// 3. Rigid motion bound.

fn c3_rigid_bound() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dom2 = GridDomain::centered(2, 24, 1.0 / 12.0).unwrap();
    let dom3 = GridDomain::centered(3, 12, 1.0 / 6.0).unwrap();
    let mut worst_tau: f64 = 0.0;
    let mut worst_transfer: f64 = 0.0;
    let mut count = 0;
    for psi in [PsiFn::Power { p: 1.0 }, PsiFn::Power { p: 2.0 }] {
        for k in 0..1000 {
            let dom = if k % 2 == 0 { &dom2 } else { &dom3 };
            let d = dom.dim;
            let cells = rng.gen_range(4..dom.len() / 3);
            let e = random_connected(dom, cells, &mut rng);
            let half = 0.5 * dom.cell_size;
            let radius = e
                .cells()
                .map(|i| {
                    let c = dom.center(i);
                    (0..d).map(|a| (c[a].abs() + half).powi(2)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max)
                * (1.0 + 1e-9);
            let vol = e.count() as f64 * dom.cell_size.powi(d as i32);
            let delta = vol * rng.gen_range(0.2..1.0);
            let g = match (d, rng.gen_range(0..5)) {
                (_, 0) => Mat::zeros(),
                (2, _) => skew2(log_uniform(&mut rng, 1e-3, 10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }),
                _ => skew3(&(unit(&mut rng, 3) * log_uniform(&mut rng, 1e-3, 10.0))),
            };
            let b = if rng.gen_range(0..5) == 0 {
                Vec3::zeros()
            } else {
                unit(&mut rng, d) * log_uniform(&mut rng, 1e-3, 10.0)
            };
            let rb = rigid_bound(&g, &b, &e, radius, delta, psi).map_err(|e| e.to_string())?;
            let vals: Vec<f64> = e.cells().map(|i| (g * dom.center(i) + b).norm()).collect();
            let mean = vals.iter().map(|&s| psi.eval(s)).sum::<f64>() / vals.len() as f64;
            ensure!((mean - rb.mean).abs() <= 1e-12 * (1.0 + mean), "mean {} vs oracle {mean}", rb.mean);
            let norm = singular_values(&g)[0] + b.norm();
            ensure!(norm <= rb.tau, "|G|+|b| = {norm} > tau = {}", rb.tau);
            if norm > 0.0 {
                worst_tau = worst_tau.max(norm / rb.tau);
            }
            let sup_e = vals.iter().copied().fold(0.0, f64::max);
            let sup_ball = singular_values(&g)[0] * radius + b.norm();
            let c0 = transfer_constant(d, radius, delta);
            ensure!(sup_ball <= c0 * sup_e, "transfer: {sup_ball} > {c0} * {sup_e}");
            if sup_e > 0.0 {
                worst_transfer = worst_transfer.max(sup_ball / (c0 * sup_e));
            }
            count += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs <= 30.0, "took {secs:.2}s > 30s");
    Ok(format!(
        "{count} instances, max (|G|+|b|)/tau = {worst_tau:.3e}, max transfer ratio = {worst_transfer:.3e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. Decompositions.

fn radial(p: &Point, x: &Point, axis: Option<usize>) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        if Some(a) != axis {
            s += (x[a] - p[a]).powi(2);
        }
    }
    s.sqrt()
}

fn c4_decompositions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let dom2 = GridDomain::centered(2, 48, 1.0).unwrap();
    let dom3 = GridDomain::centered(3, 20, 1.0).unwrap();
    let c = DECOMPOSE_3D_CONSTANT;
    let (mut runs, mut worst2, mut worst3) = (0, 0.0f64, 0.0f64);
    let mut slab_checks = 0;
    for _ in 0..100 {
        // Two dimensions.
        let e = random_connected(&dom2, rng.gen_range(50..900), &mut rng);
        let x0 = Point::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.0);
        let per_e = perimeter(&e);
        let centres: Vec<Point> = e.cells().map(|i| dom2.center(i)).collect();
        let mut diam: f64 = 0.0;
        for (k, p) in centres.iter().enumerate() {
            for q in &centres[k + 1..] {
                diam = diam.max((p - q).norm());
            }
        }
        ensure!(diam <= per_e, "diameter {diam} > perimeter {per_e}");
        for theta in [0.1, 0.2] {
            let d = decompose_2d(&e, &x0, theta).map_err(|e| format!("2D: {e}"))?;
            let r = theta * diam / (2.0 * PI);
            ensure!((d.radius - r).abs() <= 1e-9 * (1.0 + r), "2D radius {} vs {r}", d.radius);
            // Boundary of R where it meets E.
            let rest = &d.rest;
            let touched = faces(&dom2)
                .iter()
                .filter(|(a, b, _)| rest.members[*a] != rest.members[*b] && (e.members[*a] || e.members[*b]))
                .count()
                + (0..dom2.len())
                    .filter(|&i| rest.members[i] && e.members[i])
                    .map(|i| boundary_faces_of_cell(&dom2, i))
                    .sum::<usize>();
            ensure!(touched as f64 <= theta * per_e, "2D boundary of R {touched} > theta Per(E)");
            let dist: Vec<f64> = e
                .cells()
                .filter(|&i| !rest.members[i])
                .map(|i| radial(&x0, &dom2.center(i), None))
                .collect();
            if !dist.is_empty() {
                let lo = dist.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = dist.iter().copied().fold(0.0, f64::max);
                let bound = 1.0 + 2.0 * PI / theta;
                ensure!(hi <= bound * lo, "2D ratio {} > {bound}", hi / lo);
                worst2 = worst2.max(hi / lo / bound);
            }
            runs += 1;
        }
        // Three dimensions.
        let e = random_connected(&dom3, rng.gen_range(100..1500), &mut rng);
        let p = Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let axis = rng.gen_range(0..3);
        let per_e = perimeter(&e);
        for theta in [0.1, 0.2] {
            let d = decompose_3d(&e, &p, axis, theta).map_err(|e| format!("3D: {e}"))?;
            ensure!(d.certificate.all_hold(), "3D certificate: {:?}", d.certificate.failures());
            let mut owner = vec![usize::MAX; dom3.len()];
            for (k, piece) in d.pieces.iter().enumerate() {
                for i in piece.cells() {
                    ensure!(e.members[i], "piece leaves E");
                    ensure!(owner[i] == usize::MAX && !d.rest.members[i], "pieces overlap");
                    owner[i] = k;
                }
                let rs: Vec<f64> = piece.cells().map(|i| radial(&p, &dom3.center(i), Some(axis))).collect();
                let lo = rs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = rs.iter().copied().fold(0.0, f64::max);
                ensure!(hi <= c * theta.powi(-3) * lo, "3D piece ratio {} > c theta^-3", hi / lo);
                worst3 = worst3.max(hi / lo / (c * theta.powi(-3)));
            }
            for i in e.cells() {
                ensure!(owner[i] != usize::MAX || d.rest.members[i], "cell of E not covered");
            }
            ensure!(perimeter(&d.rest) <= c * theta * per_e, "3D Per(R) > c theta Per(E)");
            let piece_faces: usize = faces(&dom3)
                .iter()
                .filter(|(a, b, _)| e.members[*a] && e.members[*b] && owner[*a] != owner[*b])
                .map(|(a, b, _)| (owner[*a] != usize::MAX) as usize + (owner[*b] != usize::MAX) as usize)
                .sum();
            ensure!(piece_faces as f64 <= c * theta * per_e, "3D piece boundaries exceed c theta Per(E)");
            // Slab lengths from the cuts against the certified diameter bounds.
            for (idx, w) in d.cuts.windows(2).enumerate() {
                let len = (w[1] - w[0]) as f64 * dom3.cell_size;
                for name in [format!("slab_diameter[{idx}]"), format!("slab_diameter_long[{idx}]")] {
                    if let Some(q) = d.certificate.inequality(&name) {
                        ensure!(q.lhs == len, "{name} records {} for a slab of length {len}", q.lhs);
                        ensure!(len <= q.rhs, "{name}: {len} > {}", q.rhs);
                        slab_checks += 1;
                    }
                }
            }
            runs += 1;
        }
    }
    // Long tubes along the first axis, so that the slab cuts are exercised.
    let bar = GridDomain::new(3, &[96, 10, 10], 1.0, &[0.0, -5.0, -5.0]).unwrap();
    let mut cut_runs = 0;
    for _ in 0..100 {
        let start = rng.gen_range(1..20);
        let len = rng.gen_range(45..95 - start);
        let rad = rng.gen_range(0.8..3.5);
        let wobble = rng.gen_range(0.0..1.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let e = VoxelSet::from_fn(&bar, |i| {
            let c = bar.coords(i);
            let x = bar.center(i);
            let y0 = wobble * (0.2 * x.x + phase).sin();
            (start..start + len).contains(&c[0]) && ((x.y - y0).powi(2) + x.z * x.z).sqrt() < rad
        });
        if e.is_empty() {
            continue;
        }
        let p = Point::new(0.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let per_e = perimeter(&e);
        for theta in [0.1, 0.2] {
            let d = decompose_3d(&e, &p, 0, theta).map_err(|e| format!("tube: {e}"))?;
            ensure!(d.certificate.all_hold(), "tube certificate: {:?}", d.certificate.failures());
            ensure!(perimeter(&d.rest) <= c * theta * per_e, "tube Per(R) > c theta Per(E)");
            let mut covered = d.rest.clone();
            for piece in &d.pieces {
                for i in piece.cells() {
                    ensure!(e.members[i] && !covered.members[i], "tube pieces overlap or leave E");
                    covered.members[i] = true;
                }
                let rs: Vec<f64> = piece.cells().map(|i| radial(&p, &bar.center(i), Some(0))).collect();
                let lo = rs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = rs.iter().copied().fold(0.0, f64::max);
                ensure!(hi <= c * theta.powi(-3) * lo, "tube piece ratio {} > c theta^-3", hi / lo);
            }
            ensure!(e.cells().all(|i| covered.members[i]), "tube cell not covered");
            if !d.skipped_cutting {
                cut_runs += 1;
                for (idx, w) in d.cuts.windows(2).enumerate() {
                    let len = (w[1] - w[0]) as f64 * bar.cell_size;
                    for name in [format!("slab_diameter[{idx}]"), format!("slab_diameter_long[{idx}]")] {
                        if let Some(q) = d.certificate.inequality(&name) {
                            ensure!(q.lhs == len, "{name} records {} for a slab of length {len}", q.lhs);
                            ensure!(len <= q.rhs, "{name}: {len} > {}", q.rhs);
                            slab_checks += 1;
                        }
                    }
                }
            }
            runs += 1;
        }
    }
    ensure!(cut_runs > 0 && slab_checks > 0, "no decomposition reached the slab cuts");
    Ok(format!(
        "{runs} decompositions ({cut_runs} cut into slabs), worst ratio/bound 2D {worst2:.3}, 3D {worst3:.3}; {slab_checks} slab diameter bounds"
    ))
}

// ---------------------------------------------------------------------------
// 5. Fundamental estimates.

struct JoinCase {
    dom: GridDomain,
    a: VoxelSet,
    b: VoxelSet,
    a_prime: VoxelSet,
    u: PiecewiseRigidFunction,
    v: PiecewiseRigidFunction,
    eta: f64,
    energy: SurfaceEnergy,
}

fn half_plane_function(dom: &GridDomain, rng: &mut ChaCha8Rng, lines: usize, scale: f64) -> PiecewiseRigidFunction {
    let cuts: Vec<(Point, Vec3)> = (0..lines)
        .map(|_| {
            (
                Point::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0),
                unit(rng, 2),
            )
        })
        .collect();
    let labels = (0..dom.len())
        .map(|i| {
            let x = dom.center(i);
            cuts.iter()
                .enumerate()
                .map(|(k, (p, n))| (((x - p).dot(n) > 0.0) as u32) << k)
                .sum()
        })
        .collect();
    let motions = (0..1u32 << lines)
        .map(|_| {
            RigidMotion::new(
                skew2(rng.gen_range(-scale..scale)),
                Vec3::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), 0.0),
            )
        })
        .collect();
    function(dom, MatrixKind::Skew2, labels, motions)
}

fn perturb(u: &PiecewiseRigidFunction, rng: &mut ChaCha8Rng, size: f64) -> PiecewiseRigidFunction {
    let motions = u
        .motions
        .iter()
        .map(|m| {
            RigidMotion::new(
                m.q + skew2(rng.gen_range(-size..size)),
                m.b + Vec3::new(rng.gen_range(-size..size), rng.gen_range(-size..size), 0.0),
            )
        })
        .collect();
    function(u.domain(), u.kind, u.partition.labels.clone(), motions)
}

fn join_case(rng: &mut ChaCha8Rng, k: usize) -> JoinCase {
    let n = 160;
    let dom = GridDomain::centered(2, n, 2.0 / n as f64).unwrap();
    let h = dom.cell_size;
    let eta = rng.gen_range(0.85..0.95);
    let alpha = rng.gen_range(0.85..0.95);
    let beta = rng.gen_range(1.0..1.1);
    let energy = if k % 2 == 0 {
        SurfaceEnergy::constant(alpha, beta).unwrap()
    } else {
        SurfaceEnergy::jump_modulated(alpha, beta, rng.gen_range(0.5..2.0)).unwrap()
    };
    let slabs = (8.0 * beta / (eta * alpha)).ceil();
    let gap = 4.0 * slabs * h + 3.0 * h;
    let r1 = rng.gen_range(0.12..0.2);
    let r0 = r1 * rng.gen_range(0.3..0.8);
    let o = Point::zeros();
    let a_prime = ball(&dom, &o, r1);
    let a = ball(&dom, &o, r1 + gap);
    let b = ball(&dom, &o, 0.98).difference(&ball(&dom, &o, r0)).unwrap();
    let lines = rng.gen_range(0..3);
    let u = half_plane_function(&dom, rng, lines, 0.5);
    let v = match k % 5 {
        0 | 1 => {
            let size = 10f64.powf(rng.gen_range(-4.0..-1.0));
            perturb(&u, rng, size)
        }
        2 => u.clone(),
        3 => function(
            &dom,
            MatrixKind::Skew2,
            vec![0; dom.len()],
            vec![RigidMotion::new(skew2(rng.gen_range(-0.1..0.1)), Vec3::new(rng.gen_range(-0.1..0.1), 0.0, 0.0))],
        ),
        _ => {
            let lines = rng.gen_range(0..3);
            half_plane_function(&dom, rng, lines, 5.0)
        }
    };
    JoinCase { dom, a, b, a_prime, u, v, eta, energy }
}

/// Recomputes the certificate's energy and deviation from `w`.
fn check_join(c: &JoinCase, j: &Join, boundary: bool) -> Result<(), String> {
    let cert = &j.certificate;
    ensure!(cert.checks.all_hold(), "certificate fails: {:?}", cert.checks.failures());
    let region = c.a_prime.union(&c.b).unwrap();
    ensure!(j.region == region, "region differs from A' u B");
    let lhs = c.energy.evaluate(&j.w, Some(&region));
    ensure!((lhs - cert.lhs_energy).abs() <= 1e-9 * (1.0 + lhs), "energy {} vs recomputed {lhs}", cert.lhs_energy);
    ensure!(lhs <= cert.rhs_bound, "energy {lhs} > bound {}", cert.rhs_bound);
    let mut dev: f64 = 0.0;
    for i in region.cells() {
        let wi = value(&j.w, i);
        let du = if c.a.members[i] { (wi - value(&c.u, i)).norm() } else { f64::INFINITY };
        let dv = if c.b.members[i] { (wi - value(&c.v, i)).norm() } else { f64::INFINITY };
        dev = dev.max(du.min(dv));
    }
    let allowed = if boundary { cert.theta.unwrap() } else { cert.lambda };
    ensure!(dev <= allowed, "deviation {dev} > {allowed}");
    if boundary {
        for i in c.b.cells().filter(|&i| !c.a.members[i]) {
            ensure!(value(&j.w, i) == value(&c.v, i), "w differs from v on B \\ A");
        }
        let phi = cert.phi.unwrap();
        let m1 = cert.m1.unwrap();
        ensure!(m1 * cert.lambda <= phi, "precondition M1 Lambda <= Phi violated");
    }
    if !cert.fallback && !boundary {
        let jumps = jump_area(&j.w, Some(&region));
        let budget = c.energy.evaluate(&c.u, Some(&c.a.intersection(&region).unwrap()))
            + c.energy.evaluate(&c.v, Some(&c.b))
            + prcalc::joining::boundary_area(&[&c.a_prime, &c.a, &c.b]);
        ensure!(
            jumps <= (1.0 + c.eta) / c.energy.alpha * budget * (1.0 + 1e-9),
            "jump area {jumps} exceeds the budget"
        );
    }
    Ok(())
}

/// Fewest jump faces of any `w` on an 8x8 grid that equals `eps` on the
/// lower and `0` on the upper half of the outer frame. Row-by-row transfer
/// matrix over interior labels {0, eps, other}; more labels only add jumps.
fn min_frame_jumps() -> usize {
    const N: usize = 8;
    const M: usize = N - 2;
    let states = 3usize.pow(M as u32);
    let decode = |s: usize| {
        let mut v = [0u8; M];
        let mut s = s;
        for x in v.iter_mut() {
            *x = (s % 3) as u8;
            s /= 3;
        }
        v
    };
    // Frame value: 1 (eps) below the middle, 0 above.
    let frame = |row: usize| if row < N / 2 { 1u8 } else { 0u8 };
    let full_row = |row: usize, inner: &[u8; M]| {
        let mut r = [frame(row); N];
        r[1..N - 1].copy_from_slice(inner);
        r
    };
    let horizontal = |r: &[u8; N]| r.windows(2).filter(|w| w[0] != w[1]).count();
    let vertical = |a: &[u8; N], b: &[u8; N]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    let bottom = [frame(0); N];
    let top = [frame(N - 1); N];
    let decoded: Vec<[u8; M]> = (0..states).map(decode).collect();
    let mut cost: Vec<usize> = decoded
        .iter()
        .map(|s| {
            let r = full_row(1, s);
            horizontal(&bottom) + vertical(&bottom, &r) + horizontal(&r)
        })
        .collect();
    for row in 2..N - 1 {
        let mut next = vec![usize::MAX; states];
        for (t, s) in decoded.iter().enumerate() {
            let r = full_row(row, s);
            let own = horizontal(&r);
            for (p, q) in decoded.iter().enumerate() {
                let c = cost[p] + vertical(&full_row(row - 1, q), &r) + own;
                next[t] = next[t].min(c);
            }
        }
        cost = next;
    }
    decoded
        .iter()
        .enumerate()
        .map(|(p, q)| cost[p] + vertical(&full_row(N - 2, q), &top) + horizontal(&top))
        .min()
        .unwrap()
}

fn c5_joins() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut plain, mut bnd, mut rejected, mut scaled, mut fallback) = (0, 0, 0, 0, 0);
    let psi = PsiFn::Power { p: 1.0 };
    for k in 0..200 {
        let c = join_case(&mut rng, k);
        let j = join(&c.u, &c.a, &c.v, &c.b, &c.a_prime, c.eta, psi, &c.energy)
            .map_err(|e| format!("scenario {k}: join: {e}"))?;
        check_join(&c, &j, false).map_err(|e| format!("scenario {k}: join: {e}"))?;
        plain += 1;
        fallback += j.certificate.fallback as usize;
        match join_with_boundary(&c.u, &c.a, &c.v, &c.b, &c.a_prime, c.eta, psi, &c.energy) {
            Ok(j) => {
                check_join(&c, &j, true).map_err(|e| format!("scenario {k}: boundary join: {e}"))?;
                bnd += 1;
            }
            Err(Error::Rejected(_)) => rejected += 1,
            Err(e) => return Err(format!("scenario {k}: boundary join: {e}")),
        }
        if k % 4 == 0 {
            match join_scaled(0.5, &c.u, &c.a, &c.v, &c.b, &c.a_prime, c.eta, &c.energy) {
                Ok(j) => {
                    let cert = &j.certificate;
                    ensure!(cert.checks.all_hold(), "scenario {k}: scaled join certificate fails");
                    for i in c.b.cells().filter(|&i| !c.a.members[i]) {
                        ensure!(j.w.motion_of(i) == c.v.motion_of(i), "scenario {k}: scaled join changes v on B \\ A");
                    }
                    scaled += 1;
                }
                Err(Error::Rejected(_)) => rejected += 1,
                Err(e) => return Err(format!("scenario {k}: scaled join: {e}")),
            }
        }
    }
    ensure!(bnd > 0 && scaled > 0, "no boundary join was admitted");

    // Split ring: plain join succeeds, boundary data are rejected.
    let dom = GridDomain::centered(2, 200, 0.01).unwrap();
    let o = Point::zeros();
    let a_prime = ball(&dom, &o, 0.25);
    let a = ball(&dom, &o, 0.75);
    let b = ball(&dom, &o, 0.98).difference(&ball(&dom, &o, 0.15)).unwrap();
    let k2 = MatrixKind::Skew2;
    let energy = SurfaceEnergy::constant(0.9, 1.0).unwrap();
    let u = function(&dom, k2, vec![0; dom.len()], vec![RigidMotion::constant(k2, Vec3::zeros())]);
    let mut ring = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3, 1e-6] {
        let labels = (0..dom.len()).map(|i| (dom.center(i).y >= 0.0) as u32).collect();
        let v = function(
            &dom,
            k2,
            labels,
            vec![RigidMotion::constant(k2, Vec3::new(eps, 0.0, 0.0)), RigidMotion::constant(k2, Vec3::zeros())],
        );
        let j = join(&u, &a, &v, &b, &a_prime, 0.9, psi, &energy).map_err(|e| format!("ring eps={eps}: {e}"))?;
        ensure!(j.certificate.checks.all_hold(), "ring eps={eps}: plain join certificate");
        match join_with_boundary(&u, &a, &v, &b, &a_prime, 0.9, psi, &energy) {
            Err(Error::Rejected(msg)) => ring.push(format!("{eps:e}: {msg}")),
            other => return Err(format!("ring eps={eps}: boundary join not rejected: {:?}", other.map(|j| j.certificate.lambda))),
        }
    }
    let min_faces = min_frame_jumps();
    let h = 2.0 / 8.0;
    let h1 = min_faces as f64 * h;
    ensure!(h1 >= 2.0, "exhaustive search found H1(J_w) = {h1} < 2");
    // The cut solver on the same frame problem agrees.
    let d8 = GridDomain::centered(2, 8, h).unwrap();
    let frame = VoxelSet::full(&d8);
    let labels = (0..d8.len()).map(|i| (d8.center(i).y >= 0.0) as u32).collect();
    let v8 = function(
        &d8,
        k2,
        labels,
        vec![RigidMotion::constant(k2, Vec3::new(1e-3, 0.0, 0.0)), RigidMotion::constant(k2, Vec3::zeros())],
    );
    let p = DirichletProblem::new(SurfaceEnergy::constant(0.5, 1.0).unwrap(), v8, frame, 1).map_err(|e| e.to_string())?;
    let m = mincut_m(&p).map_err(|e| e.to_string())?;
    ensure!((m.value - h1).abs() <= 1e-12, "cut value {} vs exhaustive {h1}", m.value);
    Ok(format!(
        "{plain} joins ({fallback} fallback), {bnd} boundary joins, {scaled} scaled joins, {rejected} rejected by the precondition; \
         ring rejected for eps in {{1e-1..1e-6}}; 8x8 exhaustive min H1(J_w) = {h1}"
    ))
}

// ---------------------------------------------------------------------------
// 6. Truncation.

fn planted(rng: &mut ChaCha8Rng, k: usize) -> (PiecewiseRigidFunction, usize) {
    let (dom, kind) = match k % 4 {
        0 | 1 => (GridDomain::centered(2, 48, 1.0 / 24.0).unwrap(), MatrixKind::Skew2),
        2 => (GridDomain::centered(3, 16, 1.0 / 8.0).unwrap(), MatrixKind::Skew3),
        _ => (GridDomain::centered(2, 48, 1.0 / 24.0).unwrap(), MatrixKind::So2),
    };
    let d = dom.dim;
    let small = |rng: &mut ChaCha8Rng| {
        let b = unit(rng, d) * rng.gen_range(0.0..0.5);
        match kind {
            MatrixKind::Skew2 => RigidMotion::new(skew2(rng.gen_range(-0.3..0.3)), b),
            MatrixKind::Skew3 => RigidMotion::new(skew3(&(unit(rng, 3) * rng.gen_range(0.0..0.3))), b),
            _ => RigidMotion::new(so2(rng.gen_range(-PI..PI)), b),
        }
    };
    let blobs = rng.gen_range(1..4);
    let mut centres = Vec::new();
    let mut motions = vec![small(rng)];
    for _ in 0..blobs {
        let mut c = Point::zeros();
        for a in 0..d {
            c[a] = rng.gen_range(-0.6..0.6);
        }
        let r = rng.gen_range(0.15..0.35);
        let far = 10f64.powf(rng.gen_range(1.0..25.0));
        let m = match (kind, rng.gen_range(0..2)) {
            (MatrixKind::Skew2, 1) => {
                let q = skew2(far);
                RigidMotion::new(q, -(q * c))
            }
            (MatrixKind::Skew3, 1) => {
                let q = skew3(&(unit(rng, 3) * far));
                RigidMotion::new(q, -(q * c))
            }
            (MatrixKind::So2, _) => RigidMotion::new(so2(rng.gen_range(-PI..PI)), unit(rng, 2) * far),
            _ => RigidMotion::new(Mat::zeros(), unit(rng, d) * far),
        };
        centres.push((c, r));
        motions.push(m);
    }
    let labels = (0..dom.len())
        .map(|i| {
            let x = dom.center(i);
            centres.iter().position(|(c, r)| (x - c).norm() < *r).map_or(0, |k| k as u32 + 1)
        })
        .collect();
    (function(&dom, kind, labels, motions), blobs)
}

fn c6_truncation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let energy = SurfaceEnergy::constant(0.5, 1.0).unwrap();
    let (mut replaced, mut rest_runs, mut faces_seen, mut coarse) = (0, 0, 0, 0);
    for k in 0..100 {
        let (u, _) = planted(&mut rng, k);
        let dom = u.domain().clone();
        let d = dom.dim as f64;
        let lambda = rng.gen_range(1.0..3.0);
        let theta = theta_limit(&u, &energy, 0.1).min([0.1, 0.08, 0.05][k % 3]);
        let t = truncate(&u, &energy, lambda, theta).map_err(|e| format!("case {k}: {e}"))?;
        let r = &t.report;
        ensure!(r.checks.all_hold(), "case {k}: {:?}", r.checks.failures());
        let c_theta = theta.powf(-6.0 / theta - 1.0);
        ensure!((r.c_theta - c_theta).abs() <= 1e-12 * c_theta, "case {k}: C_theta {} vs {c_theta}", r.c_theta);
        let sup_v = (0..dom.len()).map(|i| value(&t.v, i).norm()).fold(0.0, f64::max);
        ensure!(sup_v <= c_theta * lambda, "case {k}: sup |v| = {sup_v:e} > C_theta lambda");
        let budget = jump_area(&u, None) + perimeter(&VoxelSet::full(&dom));
        let per_r = perimeter(&t.rest);
        ensure!(per_r <= theta * budget, "case {k}: Per(R) {per_r} > theta budget");
        let vol_r = t.rest.count() as f64 * dom.cell_size.powi(dom.dim as i32);
        ensure!(vol_r <= theta * budget.powf(d / (d - 1.0)), "case {k}: |R| too large");
        for i in 0..dom.len() {
            let (ui, vi) = (value(&u, i), value(&t.v, i));
            ensure!(vi == ui || t.rest.members[i] || ui.norm() > lambda, "case {k}: v changed where |u| <= lambda");
        }
        let f_u = energy.beta * jump_area(&u, None);
        let f_v = energy.beta * jump_area(&t.v, None);
        ensure!(f_v <= f_u + energy.beta * per_r + 1e-9 * f_u, "case {k}: F(v) {f_v} > F(u) + beta Per(R)");
        // New interface: one side moved, neither side in R.
        for (a, b, _) in faces(&dom) {
            let moved = |i: usize| value(&t.v, i) != value(&u, i);
            if moved(a) == moved(b) || t.rest.members[a] || t.rest.members[b] {
                continue;
            }
            let f = Face { lo: a, hi: b, axis: 0 };
            let x = (dom.center(f.lo) + dom.center(f.hi)) * 0.5;
            let jv = (t.v.motion_of(b).eval(&x) - t.v.motion_of(a).eval(&x)).norm();
            let ju = (u.motion_of(b).eval(&x) - u.motion_of(a).eval(&x)).norm();
            ensure!(jv >= 1.0 / theta, "case {k}: new jump {jv} < 1/theta");
            ensure!(jv <= theta * ju, "case {k}: new jump {jv} > theta old jump {ju}");
            faces_seen += 1;
        }
        replaced += (r.replaced_pieces > 0) as usize;
        rest_runs += (!t.rest.is_empty()) as usize;
        coarse += (!r.decompositions.all_hold()) as usize;
    }
    Ok(format!(
        "100 functions: {replaced} with replaced pieces, {rest_runs} with a rest set, {faces_seen} modified faces checked; \
         {coarse} with a component decomposition below grid resolution"
    ))
}

// ---------------------------------------------------------------------------
// 7. Density recovery.

fn chord_faces(dom: &GridDomain, x0: &Point, r: f64, axis: usize) -> usize {
    faces(dom)
        .iter()
        .filter(|(a, b, ax)| {
            *ax == axis
                && dom.center(*a)[axis] < x0[axis]
                && dom.center(*b)[axis] > x0[axis]
                && (dom.center(*a) - x0).norm() < r
                && (dom.center(*b) - x0).norm() < r
        })
        .count()
}

fn c7_density() -> Outcome {
    let t = Instant::now();
    let n = 128;
    let dom = GridDomain::centered(2, n, 2.0 / n as f64).unwrap();
    let h = dom.cell_size;
    let radii = [32.0 * h, 16.0 * h, 8.0 * h];
    let energy = SurfaceEnergy::constant(0.5, 1.0).unwrap();
    let k = MatrixKind::Skew2;
    let x0 = Point::zeros();
    let e1 = Vec3::new(1.0, 0.0, 0.0);
    let est = density_estimate(&energy, &dom, k, &x0, &e1, &Vec3::new(0.0, 1.0, 0.0), &radii, 1, &Solver::Mincut)
        .map_err(|e| e.to_string())?;
    for (j, &r) in radii.iter().enumerate() {
        let oracle = chord_faces(&dom, &x0, r, 1) as f64 * h;
        ensure!((est.values[j] - oracle).abs() <= 1e-9, "eps={r}: m = {} vs chord {oracle}", est.values[j]);
        ensure!((est.normalized[j] - 1.0).abs() <= 0.05, "eps={r}: f = {}", est.normalized[j]);
    }
    let nu = Vec3::new(1.0, 1.0, 0.0) / SQRT_2;
    let diag = density_estimate(&energy, &dom, k, &x0, &e1, &nu, &radii, 1, &Solver::Mincut).map_err(|e| e.to_string())?;
    for (j, &v) in diag.normalized.iter().enumerate() {
        ensure!((v - SQRT_2).abs() <= 0.07, "diagonal eps={}: f = {v}", radii[j]);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs <= 60.0, "took {secs:.2}s > 60s");
    Ok(format!(
        "axis f = {:?}, diagonal f = {:?} (l1-relaxed sqrt 2)",
        est.normalized.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        diag.normalized.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------------------
// 8. Equivalences.

fn c8_equivalences() -> Outcome {
    let n = 128;
    let dom = GridDomain::centered(2, n, 2.0 / n as f64).unwrap();
    let h = dom.cell_size;
    let k = MatrixKind::Skew2;
    let beta = 2.0;
    let energy = SurfaceEnergy::constant(0.5, beta).unwrap();
    let labels = (0..dom.len()).map(|i| (dom.center(i).y > 0.0) as u32).collect();
    let u = function(
        &dom,
        k,
        labels,
        vec![RigidMotion::constant(k, Vec3::zeros()), RigidMotion::new(skew2(0.3), Vec3::new(1.0, 0.5, 0.0))],
    );
    let points = [Point::new(0.5 * h, 0.0, 0.0), Point::new(0.25 + 0.5 * h, 0.0, 0.0)];
    let radii = [32.0 * h, 16.0 * h, 8.0 * h];
    let rep = check_m_equivalences(&energy, &u, &points, &radii, 1, &Solver::Mincut).map_err(|e| e.to_string())?;
    ensure!(rep.excluded.is_empty(), "points excluded: {:?}", rep.excluded);
    let mut smallest = Vec::new();
    for (p, pe) in points.iter().zip(&rep.points) {
        let mut prev = f64::INFINITY;
        for (row, &r) in pe.rows.iter().zip(&radii) {
            let mu = chord_faces(&dom, p, r, 1) as f64 * h;
            ensure!((row.mu - mu).abs() <= 1e-12, "mu {} vs chord {mu}", row.mu);
            for (name, q) in [("F", row.energy_ratio), ("m", row.m_ratio), ("blow-up", row.blowup_ratio)] {
                ensure!((q - beta).abs() <= 1e-9, "{name} ratio {q} vs beta at eps={r}");
            }
            let ratios = [row.energy_ratio, row.m_ratio, row.blowup_ratio];
            let hi = ratios.iter().copied().fold(0.0, f64::max);
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let gap = (hi - lo) / hi;
            ensure!(gap <= prev, "gap grows at eps={r}");
            prev = gap;
        }
        ensure!(prev <= 0.10, "gap {prev} > 10% at eps=8h");
        ensure!(pe.shrinking, "library reports growing gaps");
        smallest.push(format!("{prev:.2e}"));
    }
    Ok(format!("three ratios equal beta = 2; gaps at 8h: {}", smallest.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. Sequence experiment.

fn c9_gamma() -> Outcome {
    let ns = [2.0, 4.0, 8.0];
    // Constant sequence.
    let dom = GridDomain::centered(2, 128, 2.0 / 128.0).unwrap();
    let h = dom.cell_size;
    let radii = vec![32.0 * h, 16.0 * h, 8.0 * h];
    // A vertex of both the coarse and the refined grid.
    let x0 = Point::zeros();
    let seq = EnergySequence::generate(&ns, |_| SurfaceEnergy::constant(0.5, 1.0)).map_err(|e| e.to_string())?;
    let scenario = GammaScenario {
        domain: dom.clone(),
        kind: MatrixKind::Skew2,
        x0,
        xi: Vec3::new(1.0, 0.0, 0.0),
        nu: Vec3::new(0.0, 1.0, 0.0),
        radii: radii.clone(),
        ring_width: 1,
        refine: 2,
        limit: Some(SurfaceEnergy::constant(0.5, 1.0).unwrap()),
        check_lower: true,
        tolerance: 0.03,
        solver: Solver::Mincut,
    };
    let r = gamma_experiment(&seq, &scenario).map_err(|e| e.to_string())?;
    for (k, &eps) in radii.iter().enumerate() {
        let chord = chord_faces(&dom, &x0, eps, 1) as f64 * h;
        for &v in &r.table[k] {
            ensure!((v - chord).abs() <= 1e-9, "constant member {v} vs chord {chord}");
        }
    }
    ensure!(r.upper_ok && r.lower_ok == Some(true), "constant: upper {:?} lower {:?}", r.upper_excess, r.lower_excess);
    let const_excess = r
        .upper_excess
        .iter()
        .chain(&r.lower_excess)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    // Stripes a(n x1) against the refined-grid limit.
    let dom = GridDomain::centered(2, 256, 2.0 / 256.0).unwrap();
    let h = dom.cell_size;
    let seq = EnergySequence::generate(&ns, |n| SurfaceEnergy::oscillating(0.5, 1.0, n, 0)).map_err(|e| e.to_string())?;
    let scenario = GammaScenario {
        domain: dom,
        kind: MatrixKind::Skew2,
        x0: Point::new(-0.05, 0.0, 0.0),
        xi: Vec3::new(0.0, 1.0, 0.0),
        nu: Vec3::new(1.0, 0.0, 0.0),
        radii: vec![32.0 * h, 16.0 * h, 8.0 * h],
        ring_width: 1,
        refine: 2,
        limit: None,
        check_lower: true,
        tolerance: 0.03,
        solver: Solver::Mincut,
    };
    let s = gamma_experiment(&seq, &scenario).map_err(|e| e.to_string())?;
    for (k, row) in s.table.iter().enumerate() {
        let dist: Vec<f64> = row.iter().map(|v| (v - s.limit[k]).abs()).collect();
        let ok = dist.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        ensure!(ok == s.monotone[k], "monotone flag disagrees at eps index {k}");
        ensure!(ok, "stripes: |m_n - m_limit| = {dist:?} not non-increasing at eps index {k}");
    }
    Ok(format!(
        "constant: max relative excess {const_excess:.2e} (tolerance 3%); stripes monotone at all radii, upper excess {:?}",
        s.upper_excess.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------------------
// 10. Determinism.

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

fn prcalc(dir: &Path, out: &Path, args: &[&str], threads: &str) -> Result<(i32, String), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_prcalc"))
        .args(args)
        .args(["--threads", threads, "--out-dir"])
        .arg(out)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    Ok((o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned()))
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let io = |e: Error| e.to_string();
    // Inputs.
    let (u, _) = planted(&mut rng, 0);
    prcalc::io::write_function(&dir.join("u.json"), &u).map_err(io)?;
    prcalc::io::write_voxel_set(&dir.join("ov.json"), &ball(u.domain(), &Point::zeros(), 0.5)).map_err(io)?;
    let d48 = GridDomain::centered(2, 48, 1.0).unwrap();
    prcalc::io::write_voxel_set(&dir.join("e.json"), &random_connected(&d48, 600, &mut rng)).map_err(io)?;
    let c = join_case(&mut rng, 2);
    prcalc::io::write_function(&dir.join("ju.json"), &c.u).map_err(io)?;
    prcalc::io::write_function(&dir.join("jv.json"), &c.v).map_err(io)?;
    prcalc::io::write_voxel_set(&dir.join("a.json"), &c.a).map_err(io)?;
    prcalc::io::write_voxel_set(&dir.join("b.json"), &c.b).map_err(io)?;
    prcalc::io::write_voxel_set(&dir.join("ap.json"), &c.a_prime).map_err(io)?;
    let _ = c.dom;
    let constant = r#"{"family":"constant","alpha":0.5,"beta":1}"#;
    write(&dir.join("density.json"), &format!(
        r#"{{"domain":{{"dim":2,"extent":[64,64],"cell_size":0.03125}},"kind":"skew2","x0":[0,0],"xi":[1,0],"nu":[0,1],"radii_cells":[16,8],"energy":{constant}}}"#
    ));
    write(&dir.join("minimize.json"), r#"{"datum":{"type":"jump","domain":{"dim":2,"extent":[32,32],"cell_size":0.0625},"kind":"skew2","x0":[0,0],"xi":[0.5,0],"nu":[0,1]},"region":{"type":"ball","center":[0,0],"radius":0.7},"energy":{"family":"jump_modulated","alpha":0.5,"beta":1,"params":{"s0":1}},"solver":{"method":"auto","budget":20000,"replicas":3}}"#);
    write(&dir.join("gamma.json"), &format!(
        r#"{{"domain":{{"dim":2,"extent":[64,64],"cell_size":0.03125}},"kind":"skew2","x0":[0.015625,0],"xi":[1,0],"nu":[0,1],"radii_cells":[16,8],"ns":[1,2],"energy":{{"family":"oscillating","alpha":0.5,"beta":1,"params":{{"axis":0}}}}}}"#
    ));
    write(&dir.join("truncate.json"), &format!(r#"{{"function":"u.json","energy":{constant},"lambda":1}}"#));
    write(&dir.join("decompose.json"), r#"{"set":"e.json","theta":0.2,"point":[3,-2]}"#);
    write(&dir.join("join.json"), r#"{"u":"ju.json","v":"jv.json","a":"a.json","b":"b.json","a_prime":"ap.json","eta":0.9,"energy":{"family":"constant","alpha":0.9,"beta":1}}"#);
    write(&dir.join("validate.json"), &format!(r#"{{"function":"u.json","sets":["e.json"],"energy":{constant},"samples":500}}"#));
    write(&dir.join("render.json"), r#"{"function":"u.json","overlay":"ov.json"}"#);
    let runs: [(&str, Vec<&str>); 10] = [
        ("certify", vec!["certify", "--kind", "so3", "--samples", "2000", "--seed", "7"]),
        ("density", vec!["density", "--config", "density.json"]),
        ("minimize", vec!["minimize", "--config", "minimize.json", "--seed", "3"]),
        ("gamma", vec!["gamma", "--config", "gamma.json"]),
        ("truncate", vec!["truncate", "--config", "truncate.json"]),
        ("decompose", vec!["decompose", "--config", "decompose.json"]),
        ("join", vec!["join", "--config", "join.json"]),
        ("join-boundary", vec!["join-boundary", "--config", "join.json"]),
        ("validate", vec!["validate", "--config", "validate.json", "--seed", "4"]),
        ("render", vec!["render", "--config", "render.json"]),
    ];
    let mut compared = 0;
    for (name, args) in &runs {
        let out1 = dir.join("run1").join(name);
        let out2 = dir.join("run2").join(name);
        let (c1, e1) = prcalc(dir, &out1, args, "1")?;
        let (c2, _) = prcalc(dir, &out2, args, "4")?;
        ensure!(c1 == 0 && c2 == 0, "{name} exited with {c1} and {c2}: {}", e1.trim());
        let mut files: Vec<_> = std::fs::read_dir(&out1)
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().file_name())
            .collect();
        files.sort();
        for f in files {
            let (a, b) = (std::fs::read(out1.join(&f)).unwrap(), std::fs::read(out2.join(&f)).map_err(|e| format!("{name}: {e}"))?);
            let fname = f.to_string_lossy();
            if fname.ends_with(".svg") {
                let paths = |s: &[u8]| String::from_utf8_lossy(s).matches("<path").count();
                ensure!(paths(&a) == paths(&b), "{name}/{fname}: SVG structure differs");
            } else {
                ensure!(a == b, "{name}/{fname} differs between runs");
            }
            compared += 1;
        }
    }
    // Library-level replicas are reproducible too.
    let dom = GridDomain::centered(2, 24, 1.0 / 12.0).unwrap();
    let k = MatrixKind::Skew2;
    let datum = prcalc::minimize::jump_datum(&dom, k, &Point::zeros(), &Vec3::new(0.4, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0)).map_err(io)?;
    let p = DirichletProblem::new(
        SurfaceEnergy::jump_modulated(0.5, 1.0, 1.0).unwrap(),
        datum,
        ball(&dom, &Point::zeros(), 0.8),
        1,
    )
    .map_err(io)?;
    let cfg = AnnealConfig { budget: 20_000, seed: 9, ..AnnealConfig::default() };
    let (r1, r2) = (anneal_m(&p, &cfg).map_err(io)?, anneal_m(&p, &cfg).map_err(io)?);
    ensure!(r1.value.to_bits() == r2.value.to_bits() && r1.trace == r2.trace, "annealing differs between runs");
    Ok(format!("{} commands, {compared} output files identical across runs with 1 and 4 threads", runs.len()))
}
