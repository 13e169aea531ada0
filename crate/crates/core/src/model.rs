//! Continuous problem description: coefficient oracles, regions, validation.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::exprlang::Expr;

/// Rates at or below this are treated as absent when building the regime graph.
pub const TOL_RATE: f64 = 1e-12;
/// Smallest admissible eigenvalue of a diffusion matrix.
pub const EPS_ELL: f64 = 1e-12;

pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A scalar coefficient of one regime (or one regime pair).
#[derive(Clone)]
pub enum Oracle {
    Const(f64),
    /// Resolved expression; evaluated with the 1-based regime index.
    Expr(Arc<Expr>),
    Func(PointFn),
    /// `base + scale * extra`, evaluated in that order.
    Affine { base: Box<Oracle>, scale: f64, extra: Box<Oracle> },
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Oracle::Const(v) => write!(f, "Const({v})"),
            Oracle::Expr(e) => write!(f, "Expr({e})"),
            Oracle::Func(_) => write!(f, "Func(..)"),
            Oracle::Affine { base, scale, extra } => write!(f, "({base:?} + {scale}*{extra:?})"),
        }
    }
}

impl Oracle {
    pub fn func(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Oracle {
        Oracle::Func(Arc::new(f))
    }

    pub fn expr(e: Expr) -> Oracle {
        Oracle::Expr(Arc::new(e))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Oracle::Const(v) if *v == 0.0)
    }

    /// Raw evaluation; `k` is the 0-based regime.
    pub fn try_eval(&self, x: &[f64], k: usize) -> Result<f64, String> {
        let v = match self {
            Oracle::Const(v) => *v,
            Oracle::Expr(e) => e.eval(x, k + 1).map_err(|e| e.to_string())?,
            Oracle::Func(f) => f(x),
            Oracle::Affine { base, scale, extra } => base.try_eval(x, k)? + scale * extra.try_eval(x, k)?,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite value {v}"))
        }
    }
}

/// Axis-aligned box or origin-centered ball bounding all numerical work.
#[derive(Debug, Clone, PartialEq)]
pub enum Window {
    Ball { radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Window {
    pub fn bbox(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            Window::Ball { radius } => (vec![-radius; dim], vec![*radius; dim]),
            Window::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Window::Ball { radius } => norm(x) <= radius * (1.0 + 1e-12),
            Window::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *v >= *l && *v <= *h),
        }
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Points of the first shape that are not in the closure of the second.
    Minus(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn ball(center: &[f64], radius: f64) -> Shape {
        Shape::Ball { center: center.to_vec(), radius }
    }

    pub fn centered_ball(dim: usize, radius: f64) -> Shape {
        Shape::Ball { center: vec![0.0; dim], radius }
    }

    pub fn interval(lo: f64, hi: f64) -> Shape {
        Shape::Box { lo: vec![lo], hi: vec![hi] }
    }

    /// Closed-set membership with a relative slack of `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            Shape::Ball { center, radius } => {
                let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() <= radius + tol
            }
            Shape::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *v >= l - tol && *v <= h + tol),
            Shape::Minus(a, b) => a.contains(x, tol) && !b.contains(x, tol),
        }
    }

    /// The shape whose boundary is the outer boundary.
    pub fn hull(&self) -> &Shape {
        match self {
            Shape::Minus(a, _) => a.hull(),
            s => s,
        }
    }

    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Shape::Ball { center, radius } => {
                (center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect())
            }
            Shape::Box { lo, hi } => (lo.clone(), hi.clone()),
            Shape::Minus(a, _) => a.bbox(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Shape::Ball { center, .. } => center.len(),
            Shape::Box { lo, .. } => lo.len(),
            Shape::Minus(a, _) => a.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionShape {
    Uniform(Shape),
    PerRegime(Vec<Shape>),
}

/// A set of the form `∪_{i∈S₁} D_i × {i}`; regimes outside `regime_set`
/// carry no unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub shape: RegionShape,
    /// 0-based regimes.
    pub regime_set: Vec<usize>,
}

impl RegionSpec {
    pub fn all(shape: Shape, regimes: usize) -> RegionSpec {
        RegionSpec { shape: RegionShape::Uniform(shape), regime_set: (0..regimes).collect() }
    }

    pub fn ball(dim: usize, radius: f64, regimes: usize) -> RegionSpec {
        RegionSpec::all(Shape::centered_ball(dim, radius), regimes)
    }

    pub fn shape_for(&self, k: usize) -> Option<&Shape> {
        if !self.regime_set.contains(&k) {
            return None;
        }
        match &self.shape {
            RegionShape::Uniform(s) => Some(s),
            RegionShape::PerRegime(v) => v.get(k),
        }
    }

    pub fn contains(&self, x: &[f64], k: usize, tol: f64) -> bool {
        self.shape_for(k).is_some_and(|s| s.contains(x, tol))
    }

    pub fn bbox(&self) -> (Vec<f64>, Vec<f64>) {
        let shapes: Vec<&Shape> = match &self.shape {
            RegionShape::Uniform(s) => vec![s],
            RegionShape::PerRegime(v) => self.regime_set.iter().filter_map(|&k| v.get(k)).collect(),
        };
        let d = shapes.first().map(|s| s.dim()).unwrap_or(0);
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for s in shapes {
            let (l, h) = s.bbox();
            for i in 0..d {
                lo[i] = lo[i].min(l[i]);
                hi[i] = hi[i].max(h[i]);
            }
        }
        (lo, hi)
    }

    /// Radius of the smallest origin-centered ball containing the region.
    pub fn outer_radius(&self) -> f64 {
        let (lo, hi) = self.bbox();
        let far: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| l.abs().max(h.abs())).collect();
        norm(&far)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("model::validate: oracle {what} failed at x={x:?}, regime {regime}: {detail}")]
    OracleFailure { what: String, x: Vec<f64>, regime: usize, detail: String },
    #[error("model::validate: negative rate m[{i}][{j}]={value} at x={x:?}")]
    CooperativityViolation { i: usize, j: usize, x: Vec<f64>, value: f64 },
    #[error("model::validate: diffusion of regime {regime} not symmetric positive definite at x={x:?} (smallest eigenvalue {min_eig})")]
    EllipticityViolation { regime: usize, x: Vec<f64>, min_eig: f64 },
    #[error("model: {0}")]
    Invalid(String),
}

/// Continuous model. Regimes are 0-based internally; expressions see `k`
/// as 1-based.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub dim: usize,
    pub regimes: usize,
    /// `diffusion[k]` holds the d×d matrix row-major.
    pub diffusion: Vec<Vec<Oracle>>,
    pub drift: Vec<Vec<Oracle>>,
    pub potential: Vec<Oracle>,
    /// `rates[i][j]`; the diagonal is never read.
    pub rates: Vec<Vec<Oracle>>,
    pub window: Window,
}

/// Coefficients frozen at one point and regime.
#[derive(Debug, Clone, Copy, Default)]
pub struct Local {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub c: f64,
}

impl ProblemSpec {
    /// `a = I`, `b = 0`, `c = 0`, no switching.
    pub fn new(dim: usize, regimes: usize, window: Window) -> ProblemSpec {
        let mut diffusion = vec![];
        for _ in 0..regimes {
            let mut a = vec![Oracle::Const(0.0); dim * dim];
            for i in 0..dim {
                a[i * dim + i] = Oracle::Const(1.0);
            }
            diffusion.push(a);
        }
        ProblemSpec {
            dim,
            regimes,
            diffusion,
            drift: vec![vec![Oracle::Const(0.0); dim]; regimes],
            potential: vec![Oracle::Const(0.0); regimes],
            rates: vec![vec![Oracle::Const(0.0); regimes]; regimes],
            window,
        }
    }

    pub fn with_diffusion(mut self, k: usize, a: Vec<Oracle>) -> Self {
        assert_eq!(a.len(), self.dim * self.dim);
        self.diffusion[k] = a;
        self
    }

    /// Scalar multiple of the identity.
    pub fn with_isotropic(mut self, k: usize, a: Oracle) -> Self {
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.diffusion[k][i * self.dim + j] = if i == j { a.clone() } else { Oracle::Const(0.0) };
            }
        }
        self
    }

    pub fn with_drift(mut self, k: usize, b: Vec<Oracle>) -> Self {
        assert_eq!(b.len(), self.dim);
        self.drift[k] = b;
        self
    }

    pub fn with_potential(mut self, k: usize, c: Oracle) -> Self {
        self.potential[k] = c;
        self
    }

    pub fn with_rate(mut self, i: usize, j: usize, m: Oracle) -> Self {
        assert_ne!(i, j);
        self.rates[i][j] = m;
        self
    }

    /// Same operator with potential `c + scale * extra`.
    pub fn with_added_potential(&self, scale: f64, extra: &[Oracle]) -> ProblemSpec {
        let mut out = self.clone();
        for k in 0..self.regimes {
            out.potential[k] = if scale == 0.0 {
                self.potential[k].clone()
            } else {
                Oracle::Affine { base: Box::new(self.potential[k].clone()), scale, extra: Box::new(extra[k].clone()) }
            };
        }
        out
    }

    /// Same operator with the potential replaced by zero.
    pub fn generator(&self) -> ProblemSpec {
        let mut out = self.clone();
        out.potential = vec![Oracle::Const(0.0); self.regimes];
        out
    }

    fn fail(what: String, x: &[f64], regime: usize, detail: String) -> ModelError {
        ModelError::OracleFailure { what, x: x.to_vec(), regime, detail }
    }

    pub fn local(&self, x: &[f64], k: usize) -> Result<Local, ModelError> {
        let d = self.dim;
        let mut out = Local::default();
        for i in 0..d {
            for j in 0..d {
                out.a[i][j] = self.diffusion[k][i * d + j]
                    .try_eval(x, k)
                    .map_err(|e| Self::fail(format!("a[{i}][{j}]"), x, k, e))?;
            }
            out.b[i] = self.drift[k][i].try_eval(x, k).map_err(|e| Self::fail(format!("b[{i}]"), x, k, e))?;
        }
        out.c = self.potential[k].try_eval(x, k).map_err(|e| Self::fail("c".into(), x, k, e))?;
        Ok(out)
    }

    pub fn rate(&self, x: &[f64], i: usize, j: usize) -> Result<f64, ModelError> {
        self.rates[i][j].try_eval(x, i).map_err(|e| Self::fail(format!("m[{i}][{j}]"), x, i, e))
    }

    pub fn potential_at(&self, x: &[f64], k: usize) -> Result<f64, ModelError> {
        self.potential[k].try_eval(x, k).map_err(|e| Self::fail("c".into(), x, k, e))
    }

    /// Reconstructed diagonal rate `m_ii = -Σ_{j≠i} m_ij`.
    pub fn diagonal_rate(&self, x: &[f64], i: usize) -> Result<f64, ModelError> {
        let mut s = 0.0;
        for j in 0..self.regimes {
            if j != i {
                s += self.rate(x, i, j)?;
            }
        }
        Ok(-s)
    }

    /// Lattice of `density` points per axis over the window bounding box;
    /// for ball windows only points inside the ball are kept.
    pub fn sample_points(&self, density: usize) -> Vec<Vec<f64>> {
        let (lo, hi) = self.window.bbox(self.dim);
        let n = density.max(2);
        let coord = |a: usize, i: usize| lo[a] + (hi[a] - lo[a]) * i as f64 / (n - 1) as f64;
        let mut pts = vec![];
        if self.dim == 1 {
            for i in 0..n {
                pts.push(vec![coord(0, i)]);
            }
        } else {
            for j in 0..n {
                for i in 0..n {
                    pts.push(vec![coord(0, i), coord(1, j)]);
                }
            }
        }
        pts.retain(|p| self.window.contains(p));
        pts
    }
}

fn min_eig_sym(a: &[[f64; 2]; 2], d: usize) -> f64 {
    if d == 1 {
        return a[0][0];
    }
    let m = 0.5 * (a[0][0] + a[1][1]);
    let r = (0.25 * (a[0][0] - a[1][1]).powi(2) + a[0][1] * a[0][1]).sqrt();
    m - r
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: Vec<ModelError>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// First violation as an error.
    pub fn check(&self) -> Result<(), ModelError> {
        match self.violations.first() {
            None => Ok(()),
            Some(e) => Err(e.clone()),
        }
    }
}

const MAX_REPORTED: usize = 64;

/// Samples every oracle on a lattice over the window and collects
/// cooperativity, symmetry and ellipticity violations.
pub fn validate(spec: &ProblemSpec, sample_density: usize) -> Result<ValidationReport, ModelError> {
    if sample_density < 2 {
        return Err(ModelError::Invalid("validate: sample_density must be at least 2".into()));
    }
    if spec.dim == 0 || spec.dim > 2 {
        return Err(ModelError::Invalid(format!("validate: dimension {} not in {{1, 2}}", spec.dim)));
    }
    if spec.regimes == 0 {
        return Err(ModelError::Invalid("validate: at least one regime required".into()));
    }
    let pts = spec.sample_points(sample_density);
    let mut violations = vec![];
    let d = spec.dim;
    for x in &pts {
        for k in 0..spec.regimes {
            let loc = match spec.local(x, k) {
                Ok(l) => l,
                Err(e) => {
                    violations.push(e);
                    continue;
                }
            };
            let asym = (loc.a[0][1] - loc.a[1][0]).abs();
            let min_eig = min_eig_sym(&loc.a, d);
            if (d == 2 && asym > 1e-12 * (1.0 + loc.a[0][1].abs())) || min_eig < EPS_ELL {
                violations.push(ModelError::EllipticityViolation { regime: k, x: x.clone(), min_eig });
            }
            for j in 0..spec.regimes {
                if j == k {
                    continue;
                }
                match spec.rate(x, k, j) {
                    Ok(m) if m < 0.0 => {
                        violations.push(ModelError::CooperativityViolation { i: k, j, x: x.clone(), value: m })
                    }
                    Ok(_) => {}
                    Err(e) => violations.push(e),
                }
            }
            if violations.len() >= MAX_REPORTED {
                return Ok(ValidationReport { samples: pts.len(), violations });
            }
        }
    }
    Ok(ValidationReport { samples: pts.len(), violations })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Irreducibility {
    Irreducible,
    /// No rate leads from `s1` into `s2`. Regimes are 0-based.
    Reducible { s1: Vec<usize>, s2: Vec<usize> },
}

/// Strong connectivity of the regime graph with edge `i→j` iff `m_ij`
/// exceeds [`TOL_RATE`] at some sampled point.
pub fn irreducibility_check(spec: &ProblemSpec, sample_density: usize) -> Result<Irreducibility, ModelError> {
    let n = spec.regimes;
    let mut edge = vec![vec![false; n]; n];
    for x in spec.sample_points(sample_density.max(2)) {
        for i in 0..n {
            for j in 0..n {
                if i != j && !edge[i][j] && spec.rate(&x, i, j)? > TOL_RATE {
                    edge[i][j] = true;
                }
            }
        }
    }
    Ok(regime_partition(&edge))
}

/// Finds a forward-closed proper subset if one exists.
pub fn regime_partition(edge: &[Vec<bool>]) -> Irreducibility {
    let n = edge.len();
    for start in 0..n {
        let mut seen = vec![false; n];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if edge[i][j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            let s1 = (0..n).filter(|&i| seen[i]).collect();
            let s2 = (0..n).filter(|&i| !seen[i]).collect();
            return Irreducibility::Reducible { s1, s2 };
        }
    }
    Irreducibility::Irreducible
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coupled() -> ProblemSpec {
        ProblemSpec::new(1, 2, Window::Ball { radius: 4.0 })
            .with_rate(0, 1, Oracle::Const(1.0))
            .with_rate(1, 0, Oracle::Const(1.0))
    }

    #[test]
    fn free_coupled_passes() {
        let r = validate(&coupled(), 9).unwrap();
        assert!(r.passed());
        assert_eq!(r.samples, 9);
        assert_eq!(irreducibility_check(&coupled(), 9).unwrap(), Irreducibility::Irreducible);
    }

    #[test]
    fn negative_rate_is_reported() {
        let s = coupled().with_rate(0, 1, Oracle::func(|x| if x[0] > 1.0 { -1.0 } else { 1.0 }));
        let r = validate(&s, 9).unwrap();
        assert!(matches!(r.check(), Err(ModelError::CooperativityViolation { i: 0, j: 1, .. })));
    }

    #[test]
    fn indefinite_diffusion_is_reported() {
        let s = ProblemSpec::new(2, 1, Window::Ball { radius: 1.0 }).with_diffusion(
            0,
            vec![Oracle::Const(1.0), Oracle::Const(0.0), Oracle::Const(0.0), Oracle::Const(-0.5)],
        );
        assert!(matches!(validate(&s, 3).unwrap().check(), Err(ModelError::EllipticityViolation { .. })));
    }

    #[test]
    fn non_finite_oracle_is_reported() {
        let s = coupled().with_potential(1, Oracle::func(|x| 1.0 / x[0]));
        assert!(matches!(validate(&s, 3).unwrap().check(), Err(ModelError::OracleFailure { regime: 1, .. })));
    }

    #[test]
    fn one_way_switching_is_reducible() {
        let s = ProblemSpec::new(1, 2, Window::Ball { radius: 4.0 })
            .with_rate(0, 1, Oracle::func(|x| if x[0].abs() > 2.0 { 1.0 } else { 0.0 }));
        assert_eq!(
            irreducibility_check(&s, 17).unwrap(),
            Irreducibility::Reducible { s1: vec![1], s2: vec![0] }
        );
    }

    #[test]
    fn ring_is_irreducible() {
        let s = ProblemSpec::new(1, 3, Window::Ball { radius: 1.0 })
            .with_rate(0, 1, Oracle::Const(1.0))
            .with_rate(1, 2, Oracle::Const(1.0))
            .with_rate(2, 0, Oracle::Const(1.0));
        assert_eq!(irreducibility_check(&s, 3).unwrap(), Irreducibility::Irreducible);
    }

    #[test]
    fn diagonal_rate_closes_rows() {
        let s = coupled().with_rate(0, 1, Oracle::Const(2.5));
        let x = [0.3];
        assert_eq!(s.diagonal_rate(&x, 0).unwrap() + s.rate(&x, 0, 1).unwrap(), 0.0);
    }
}
