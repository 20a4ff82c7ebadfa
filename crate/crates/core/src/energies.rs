//! Surface energies `F(u, B)` given by a face density `f(x, xi, nu)`, with
//! sampled validators for the structural hypotheses.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Point, VoxelSet};
use crate::pr::PiecewiseRigidFunction;
use crate::rigid::Vec3;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
    H5,
    H5Prime,
    H6,
}

impl Hypothesis {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "H1" => Hypothesis::H1,
            "H2" => Hypothesis::H2,
            "H3" => Hypothesis::H3,
            "H4" => Hypothesis::H4,
            "H5" => Hypothesis::H5,
            "H5'" | "H5Prime" => Hypothesis::H5Prime,
            "H6" => Hypothesis::H6,
            _ => return Err(Error::Format(format!("unknown hypothesis {s}"))),
        })
    }
}

/// Modulus of continuity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sigma {
    Zero,
    /// `scale * min(1, t / s0)`.
    CappedLinear {
        scale: f64,
        s0: f64,
    },
    /// Piecewise linear through `(t[k], v[k])`, constant past the last node.
    Table {
        t: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Sigma {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Sigma::Zero => 0.0,
            Sigma::CappedLinear { scale, s0 } => scale * (t / s0).min(1.0),
            Sigma::Table { t: ts, v } => {
                if t <= ts[0] {
                    return v[0];
                }
                for k in 1..ts.len() {
                    if t <= ts[k] {
                        let s = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
                        return v[k - 1] + s * (v[k] - v[k - 1]);
                    }
                }
                *v.last().unwrap()
            }
        }
    }

    /// `lim_{t -> inf} sigma(t)`.
    pub fn sup(&self) -> f64 {
        match self {
            Sigma::Zero => 0.0,
            Sigma::CappedLinear { scale, .. } => *scale,
            Sigma::Table { v, .. } => *v.last().unwrap(),
        }
    }

    fn validate(&self, beta: f64) -> Result<()> {
        match self {
            Sigma::Zero => Ok(()),
            Sigma::CappedLinear { scale, s0 } => {
                if *scale < 0.0 || *scale > beta || *s0 <= 0.0 {
                    return Err(Error::OutOfRange(format!(
                        "sigma needs 0 <= scale <= beta and s0 > 0"
                    )));
                }
                Ok(())
            }
            Sigma::Table { t, v } => {
                if t.len() != v.len() || t.is_empty() || t[0] != 0.0 || v[0] != 0.0 {
                    return Err(Error::Format("sigma table must start at (0, 0)".into()));
                }
                if t.windows(2).any(|w| w[1] <= w[0]) || v.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::Format("sigma table must be increasing".into()));
                }
                if *v.last().unwrap() > beta {
                    return Err(Error::OutOfRange("sigma exceeds beta".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Density {
    Constant {
        value: f64,
    },
    /// `alpha + (beta - alpha) * min(1, |xi| / s0)`.
    JumpModulated {
        s0: f64,
    },
    /// `alpha` where `frac(n * x[axis]) < 1/2`, `beta` elsewhere.
    Oscillating {
        n: f64,
        axis: usize,
    },
    Expression(Expr),
}

/// A surface energy with its structural constants.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceEnergy {
    pub density: Density,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: Sigma,
    pub c0: Option<f64>,
    pub flags: Vec<Hypothesis>,
}

const ALL_FLAGS: [Hypothesis; 7] = [
    Hypothesis::H1,
    Hypothesis::H2,
    Hypothesis::H3,
    Hypothesis::H4,
    Hypothesis::H5,
    Hypothesis::H5Prime,
    Hypothesis::H6,
];

fn check_constants(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0 && beta >= 1.0) {
        return Err(Error::OutOfRange(format!(
            "need 0 < alpha < 1 <= beta, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

impl SurfaceEnergy {
    pub fn constant(alpha: f64, beta: f64) -> Result<Self> {
        check_constants(alpha, beta)?;
        Ok(SurfaceEnergy {
            density: Density::Constant { value: beta },
            alpha,
            beta,
            sigma: Sigma::Zero,
            c0: Some(1.0),
            flags: ALL_FLAGS.to_vec(),
        })
    }

    pub fn jump_modulated(alpha: f64, beta: f64, s0: f64) -> Result<Self> {
        check_constants(alpha, beta)?;
        if s0 <= 0.0 {
            return Err(Error::OutOfRange("s0 must be positive".into()));
        }
        Ok(SurfaceEnergy {
            density: Density::JumpModulated { s0 },
            alpha,
            beta,
            sigma: Sigma::CappedLinear {
                scale: beta - alpha,
                s0,
            },
            c0: Some(s0.max(1.0)),
            flags: ALL_FLAGS.to_vec(),
        })
    }

    pub fn oscillating(alpha: f64, beta: f64, n: f64, axis: usize) -> Result<Self> {
        check_constants(alpha, beta)?;
        if n <= 0.0 || axis > 2 {
            return Err(Error::OutOfRange(
                "oscillation needs n > 0 and axis < 3".into(),
            ));
        }
        Ok(SurfaceEnergy {
            density: Density::Oscillating { n, axis },
            alpha,
            beta,
            sigma: Sigma::Zero,
            c0: Some(1.0),
            flags: vec![
                Hypothesis::H1,
                Hypothesis::H3,
                Hypothesis::H4,
                Hypothesis::H5,
                Hypothesis::H5Prime,
                Hypothesis::H6,
            ],
        })
    }

    pub fn expression(
        source: &str,
        alpha: f64,
        beta: f64,
        sigma: Sigma,
        c0: Option<f64>,
        flags: Vec<Hypothesis>,
    ) -> Result<Self> {
        check_constants(alpha, beta)?;
        sigma.validate(beta)?;
        Ok(SurfaceEnergy {
            density: Density::Expression(Expr::parse(source)?),
            alpha,
            beta,
            sigma,
            c0,
            flags,
        })
    }

    pub fn has(&self, h: Hypothesis) -> bool {
        self.flags.contains(&h)
    }

    pub fn require(&self, hs: &[Hypothesis]) -> Result<()> {
        for h in hs {
            if !self.has(*h) {
                return Err(Error::Unsupported(format!("energy does not declare {h:?}")));
            }
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.density, Density::Constant { .. })
    }

    /// The density does not depend on the jump `xi`.
    pub fn jump_independent(&self) -> bool {
        match &self.density {
            Density::Constant { .. } | Density::Oscillating { .. } => true,
            Density::JumpModulated { .. } => false,
            Density::Expression(e) => !e.uses_xi(),
        }
    }

    pub fn density(&self, x: &Point, xi: &Vec3, nu: &Vec3) -> f64 {
        match &self.density {
            Density::Constant { value } => *value,
            Density::JumpModulated { s0 } => {
                self.alpha + (self.beta - self.alpha) * (xi.norm() / s0).min(1.0)
            }
            Density::Oscillating { n, axis } => {
                let t = n * x[*axis];
                if t - t.floor() < 0.5 {
                    self.alpha
                } else {
                    self.beta
                }
            }
            Density::Expression(e) => e.eval(x, xi, nu),
        }
    }

    /// Face sum of the density over jump faces with both cells in `region`.
    pub fn evaluate(&self, u: &PiecewiseRigidFunction, region: Option<&VoxelSet>) -> f64 {
        u.jump_set(region)
            .iter()
            .map(|f| {
                let mut nu = Vec3::zeros();
                nu[f.axis] = 1.0;
                self.density(&f.x, &f.xi, &nu) * f.area
            })
            .sum()
    }

    pub fn check_h4(&self, samples: &DensitySamples) -> HypothesisReport {
        let mut r = HypothesisReport::new("H4");
        for s in &samples.points {
            let f = self.density(&s.x, &s.xi, &s.nu);
            r.record((f - self.alpha).min(self.beta - f), || {
                format!("f={f} at xi={:?}", s.xi.as_slice())
            });
        }
        r
    }

    /// `|f(x, xi1, nu) - f(x, xi2, nu)| <= sigma(|xi1 - xi2|)`, plus the
    /// reflection symmetry `f(x, -xi, -nu) = f(x, xi, nu)`.
    pub fn check_h5(&self, samples: &DensitySamples) -> HypothesisReport {
        let mut r = HypothesisReport::new("H5");
        for (s, t) in samples.points.iter().zip(samples.points.iter().skip(1)) {
            for xi2 in [t.xi, s.xi + t.xi * 1e-3, s.xi * 0.5] {
                let a = self.density(&s.x, &s.xi, &s.nu);
                let b = self.density(&s.x, &xi2, &s.nu);
                let bound = self.sigma.eval((s.xi - xi2).norm());
                r.record(bound - (a - b).abs(), || {
                    format!("|{a} - {b}| > sigma = {bound}")
                });
            }
            let a = self.density(&s.x, &s.xi, &s.nu);
            let b = self.density(&s.x, &(-s.xi), &(-s.nu));
            r.record(-(a - b).abs(), || format!("asymmetric: {a} vs {b}"));
        }
        r
    }

    /// `f(x, xi_v, nu) <= f(x, xi_u, nu)` whenever `c0 <= |xi_v| <= |xi_u| / c0`.
    pub fn check_h6(&self, samples: &DensitySamples) -> HypothesisReport {
        let mut r = HypothesisReport::new("H6");
        let Some(c0) = self.c0 else {
            r.violations += 1;
            r.worst_case = Some("no c0 declared".into());
            r.worst_slack = f64::NEG_INFINITY;
            return r;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(samples.seed ^ 0x6);
        for s in &samples.points {
            let nu_len = s.xi.norm();
            if nu_len < c0 * c0 {
                continue;
            }
            let scale = rng.gen_range(c0..=nu_len / c0);
            let mut dir = s.xi;
            for a in 0..samples.dim {
                dir[a] = rng.gen_range(-1.0..1.0);
            }
            if dir.norm() == 0.0 {
                continue;
            }
            let xi_v = dir.normalize() * scale;
            let fu = self.density(&s.x, &s.xi, &s.nu);
            let fv = self.density(&s.x, &xi_v, &s.nu);
            r.record(fu - fv, || {
                format!("f(|xi_v|={scale}) = {fv} > f(|xi_u|={nu_len}) = {fu}")
            });
        }
        r
    }

    /// Function-level check `|F(u,S) - F(v,S)| <= sum sigma(|u+ - v+| + |u- - v-|)`
    /// over the common jump faces `S`.
    pub fn check_h5_prime(
        &self,
        pairs: &[(PiecewiseRigidFunction, PiecewiseRigidFunction)],
    ) -> HypothesisReport {
        let mut r = HypothesisReport::new("H5'");
        for (u, v) in pairs {
            let jv = v.jump_set(None);
            let mut lhs_u = 0.0;
            let mut lhs_v = 0.0;
            let mut rhs = 0.0;
            for fu in u.jump_set(None) {
                let Some(fv) = jv.iter().find(|f| f.face == fu.face) else {
                    continue;
                };
                let mut nu = Vec3::zeros();
                nu[fu.axis] = 1.0;
                lhs_u += self.density(&fu.x, &fu.xi, &nu) * fu.area;
                lhs_v += self.density(&fv.x, &fv.xi, &nu) * fv.area;
                let plus = (u.motion_of(fu.face.hi).eval(&fu.x)
                    - v.motion_of(fu.face.hi).eval(&fu.x))
                .norm();
                let minus = (u.motion_of(fu.face.lo).eval(&fu.x)
                    - v.motion_of(fu.face.lo).eval(&fu.x))
                .norm();
                rhs += self.sigma.eval(plus + minus) * fu.area;
            }
            let gap = (lhs_u - lhs_v).abs();
            r.record(rhs - gap, || format!("|F(u,S) - F(v,S)| = {gap} > {rhs}"));
        }
        r
    }
}

/// Sampled `(x, xi, nu)` triples with axis normals.
#[derive(Clone, Debug)]
pub struct DensitySamples {
    pub dim: usize,
    pub seed: u64,
    pub points: Vec<Sample>,
}

#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub x: Point,
    pub xi: Vec3,
    pub nu: Vec3,
}

impl DensitySamples {
    /// `count` samples with `x` in `[-extent, extent]^dim` and `|xi|`
    /// log-uniform in `[1e-3, max_jump]`.
    pub fn generate(dim: usize, count: usize, extent: f64, max_jump: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..count)
            .map(|_| {
                let mut x = Point::zeros();
                let mut dir = Vec3::zeros();
                for a in 0..dim {
                    x[a] = rng.gen_range(-extent..=extent);
                    dir[a] = rng.gen_range(-1.0..1.0);
                }
                let len = (rng.gen_range(1e-3f64.ln()..=max_jump.ln())).exp();
                let xi = if dir.norm() > 0.0 {
                    dir.normalize() * len
                } else {
                    dir
                };
                let mut nu = Vec3::zeros();
                nu[rng.gen_range(0..dim)] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                Sample { x, xi, nu }
            })
            .collect();
        DensitySamples { dim, seed, points }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HypothesisReport {
    pub hypothesis: String,
    pub samples: usize,
    pub violations: usize,
    /// Smallest `bound - value` seen; negative on violation.
    pub worst_slack: f64,
    pub worst_case: Option<String>,
}

impl HypothesisReport {
    fn new(h: &str) -> Self {
        HypothesisReport {
            hypothesis: h.to_string(),
            samples: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
            worst_case: None,
        }
    }

    fn record(&mut self, slack: f64, describe: impl FnOnce() -> String) {
        self.samples += 1;
        let tol = 1e-12;
        if slack < -tol || slack.is_nan() {
            self.violations += 1;
        }
        if slack < self.worst_slack || slack.is_nan() {
            self.worst_slack = slack;
            self.worst_case = Some(describe());
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Energies `F_n` indexed by `n`, sharing `alpha`, `beta` and `sigma`.
#[derive(Clone, Debug)]
pub struct EnergySequence {
    pub members: Vec<(f64, SurfaceEnergy)>,
}

impl EnergySequence {
    pub fn new(members: Vec<(f64, SurfaceEnergy)>) -> Result<Self> {
        let Some((_, first)) = members.first() else {
            return Err(Error::EmptySet("energy sequence"));
        };
        for (n, e) in &members {
            if e.alpha != first.alpha || e.beta != first.beta || e.sigma != first.sigma {
                return Err(Error::OutOfRange(format!(
                    "member {n} does not share alpha, beta and sigma"
                )));
            }
        }
        Ok(EnergySequence { members })
    }

    pub fn generate(ns: &[f64], f: impl Fn(f64) -> Result<SurfaceEnergy>) -> Result<Self> {
        Self::new(ns.iter().map(|&n| Ok((n, f(n)?))).collect::<Result<_>>()?)
    }
}

/// JSON form `{family, alpha, beta, sigma, c0, params, flags}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub family: String,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub sigma: Option<Sigma>,
    #[serde(default)]
    pub c0: Option<f64>,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub flags: Option<Vec<String>>,
}

fn param(p: &serde_json::Map<String, serde_json::Value>, key: &str) -> Result<f64> {
    p.get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format(format!("missing numeric parameter {key}")))
}

impl EnergyConfig {
    pub fn build(&self) -> Result<SurfaceEnergy> {
        let allowed: &[&str] = match self.family.as_str() {
            "constant" => &[],
            "jump_modulated" => &["s0"],
            "oscillating" => &["n", "axis"],
            "expression" => &["expr"],
            f => return Err(Error::Format(format!("unknown density family {f}"))),
        };
        if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Format(format!(
                "unknown parameter {k} for {}",
                self.family
            )));
        }
        let mut e = match self.family.as_str() {
            "constant" => SurfaceEnergy::constant(self.alpha, self.beta)?,
            "jump_modulated" => {
                SurfaceEnergy::jump_modulated(self.alpha, self.beta, param(&self.params, "s0")?)?
            }
            "oscillating" => SurfaceEnergy::oscillating(
                self.alpha,
                self.beta,
                param(&self.params, "n")?,
                param(&self.params, "axis")? as usize,
            )?,
            _ => {
                let src = self
                    .params
                    .get("expr")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| Error::Format("missing parameter expr".into()))?;
                let sigma = self.sigma.clone().ok_or_else(|| {
                    Error::Format("expression densities need an explicit sigma".into())
                })?;
                SurfaceEnergy::expression(
                    src,
                    self.alpha,
                    self.beta,
                    sigma,
                    self.c0,
                    vec![Hypothesis::H1, Hypothesis::H3],
                )?
            }
        };
        if let Some(s) = &self.sigma {
            s.validate(self.beta)?;
            e.sigma = s.clone();
        }
        if self.c0.is_some() {
            e.c0 = self.c0;
        }
        if let Some(c0) = e.c0 {
            if c0 < 1.0 {
                return Err(Error::OutOfRange("c0 must be at least 1".into()));
            }
        }
        if let Some(fl) = &self.flags {
            e.flags = fl
                .iter()
                .map(|s| Hypothesis::parse(s))
                .collect::<Result<_>>()?;
        }
        Ok(e)
    }
}

// ----------------------------------------------------------------------------
// Expression mini-language over `x`, `xi`, `nu`.

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    Call(String, Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Var {
    X,
    Xi,
    Nu,
    XComp(usize),
    XiComp(usize),
    NuComp(usize),
}

#[derive(Clone, Copy, Debug)]
enum Value {
    S(f64),
    V(Vec3),
}

impl Value {
    fn scalar(self) -> f64 {
        match self {
            Value::S(s) => s,
            Value::V(v) => v.norm(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Var(v) => write!(f, "{v:?}"),
            Expr::Neg(e) => write!(f, "-({e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {op} {b})"),
            Expr::Abs(e) => write!(f, "|{e}|"),
            Expr::Call(n, a) => {
                write!(f, "{n}(")?;
                for (i, e) in a.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, ")")
            }
        }
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format(format!("expression: {msg} at offset {}", self.pos))
    }

    fn skip(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip();
        self.s.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            lhs = Expr::Bin(c as char, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            lhs = Expr::Bin(c as char, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat(b'^') {
            return Ok(Expr::Bin('^', Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected )"));
                }
                Ok(e)
            }
            Some(b'|') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b'|') {
                    return Err(self.err("expected |"));
                }
                Ok(Expr::Abs(Box::new(e)))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && (self.s[self.pos].is_ascii_digit()
                        || self.s[self.pos] == b'.'
                        || self.s[self.pos] == b'e'
                        || ((self.s[self.pos] == b'-' || self.s[self.pos] == b'+')
                            && self.s[self.pos - 1] == b'e'))
                {
                    self.pos += 1;
                }
                let txt = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
                txt.parse()
                    .map(Expr::Num)
                    .map_err(|_| self.err("bad number"))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.s.len()
                    && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.s[start..self.pos])
                    .unwrap()
                    .to_string();
                if self.eat(b'(') {
                    let mut args = vec![self.expr()?];
                    while self.eat(b',') {
                        args.push(self.expr()?);
                    }
                    if !self.eat(b')') {
                        return Err(self.err("expected )"));
                    }
                    let arity_ok = match name.as_str() {
                        "dot" => args.len() == 2,
                        "min" | "max" => !args.is_empty(),
                        "abs" | "norm" | "sqrt" | "exp" | "ln" | "sin" | "cos" | "floor" => {
                            args.len() == 1
                        }
                        _ => return Err(self.err(&format!("unknown function {name}"))),
                    };
                    if !arity_ok {
                        return Err(self.err(&format!("wrong argument count for {name}")));
                    }
                    return Ok(Expr::Call(name, args));
                }
                let comp = |p: &str| -> Option<usize> {
                    name.strip_prefix(p)
                        .and_then(|r| r.parse::<usize>().ok())
                        .filter(|k| (1..=3).contains(k))
                        .map(|k| k - 1)
                };
                Ok(Expr::Var(match name.as_str() {
                    "x" => Var::X,
                    "xi" => Var::Xi,
                    "nu" => Var::Nu,
                    "pi" => return Ok(Expr::Num(std::f64::consts::PI)),
                    _ => {
                        if let Some(k) = comp("xi") {
                            Var::XiComp(k)
                        } else if let Some(k) = comp("nu") {
                            Var::NuComp(k)
                        } else if let Some(k) = comp("x") {
                            Var::XComp(k)
                        } else {
                            return Err(self.err(&format!("unknown variable {name}")));
                        }
                    }
                }))
            }
            _ => Err(self.err("unexpected token")),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser {
            s: src.as_bytes(),
            pos: 0,
        };
        let e = p.expr()?;
        if p.peek().is_some() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &Point, xi: &Vec3, nu: &Vec3) -> f64 {
        self.value(x, xi, nu).scalar()
    }

    pub fn uses_xi(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => matches!(v, Var::Xi | Var::XiComp(_)),
            Expr::Neg(e) | Expr::Abs(e) => e.uses_xi(),
            Expr::Bin(_, a, b) => a.uses_xi() || b.uses_xi(),
            Expr::Call(_, args) => args.iter().any(Expr::uses_xi),
        }
    }

    fn value(&self, x: &Point, xi: &Vec3, nu: &Vec3) -> Value {
        use Value::*;
        match self {
            Expr::Num(n) => S(*n),
            Expr::Var(v) => match v {
                Var::X => V(*x),
                Var::Xi => V(*xi),
                Var::Nu => V(*nu),
                Var::XComp(k) => S(x[*k]),
                Var::XiComp(k) => S(xi[*k]),
                Var::NuComp(k) => S(nu[*k]),
            },
            Expr::Neg(e) => match e.value(x, xi, nu) {
                S(s) => S(-s),
                V(v) => V(-v),
            },
            Expr::Abs(e) => match e.value(x, xi, nu) {
                S(s) => S(s.abs()),
                V(v) => S(v.norm()),
            },
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.value(x, xi, nu), b.value(x, xi, nu));
                match (op, a, b) {
                    ('+', V(p), V(q)) => V(p + q),
                    ('-', V(p), V(q)) => V(p - q),
                    ('*', S(s), V(v)) | ('*', V(v), S(s)) => V(v * s),
                    ('/', V(v), S(s)) => V(v / s),
                    (_, a, b) => {
                        let (p, q) = (a.scalar(), b.scalar());
                        S(match op {
                            '+' => p + q,
                            '-' => p - q,
                            '*' => p * q,
                            '/' => p / q,
                            _ => p.powf(q),
                        })
                    }
                }
            }
            Expr::Call(name, args) => {
                let vals: Vec<Value> = args.iter().map(|a| a.value(x, xi, nu)).collect();
                let s = |k: usize| vals[k].scalar();
                S(match name.as_str() {
                    "dot" => match (vals[0], vals[1]) {
                        (V(p), V(q)) => p.dot(&q),
                        (a, b) => a.scalar() * b.scalar(),
                    },
                    "min" => (0..vals.len()).map(s).fold(f64::INFINITY, f64::min),
                    "max" => (0..vals.len()).map(s).fold(f64::NEG_INFINITY, f64::max),
                    "abs" | "norm" => s(0).abs(),
                    "sqrt" => s(0).sqrt(),
                    "exp" => s(0).exp(),
                    "ln" => s(0).ln(),
                    "sin" => s(0).sin(),
                    "cos" => s(0).cos(),
                    _ => s(0).floor(),
                })
            }
        }
    }
}
