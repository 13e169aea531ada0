//! JSON run configuration and its translation into library types.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::exprlang::compile;
use crate::model::{Oracle, ProblemSpec, RegionShape, RegionSpec, Shape, Window};
use crate::spectrum::PerturbationSpec;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemCfg,
    pub task: TaskCfg,
    #[serde(default)]
    pub numerics: NumericsCfg,
    #[serde(default)]
    pub output: OutputCfg,
}

/// A coefficient: a number or an expression string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ExprCfg {
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixCfg {
    /// Multiple of the identity.
    Scalar(ExprCfg),
    Full(Vec<Vec<ExprCfg>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCfg {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum WindowCfg {
    Ball(f64),
    Box(BoxCfg),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemCfg {
    pub dim: usize,
    pub regimes: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Per regime; defaults to the identity.
    pub diffusion: Option<Vec<MatrixCfg>>,
    /// Per regime, one entry per axis; defaults to zero.
    pub drift: Option<Vec<Vec<ExprCfg>>>,
    pub potential: Option<Vec<ExprCfg>>,
    /// `rates[i][j]` for `i ≠ j`; diagonal entries must be null or zero.
    pub rates: Option<Vec<Vec<Option<ExprCfg>>>>,
    pub window: WindowCfg,
}

/// A ball or box, optionally restricted to some regimes (1-based).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionCfg {
    pub ball: Option<f64>,
    pub center: Option<Vec<f64>>,
    #[serde(rename = "box")]
    pub bx: Option<BoxCfg>,
    pub regimes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartCfg {
    pub x: Vec<f64>,
    /// 1-based.
    pub regime: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpCfg {
    pub bump: Vec<ExprCfg>,
    pub support_radius: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistedDiagCfg {
    pub target: RegionCfg,
    /// Also test the twist at `λ* - below` built from the resolvent.
    pub below: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskCfg {
    Eig {
        region: RegionCfg,
        #[serde(default)]
        trials: usize,
    },
    LambdaStar {
        inner_radius: Option<f64>,
    },
    Twist {
        radius: f64,
        phi: Option<Vec<ExprCfg>>,
        inner_radius: Option<f64>,
    },
    Diagnose {
        #[serde(default = "one")]
        c: f64,
        #[serde(default)]
        targets: Vec<RegionCfg>,
        #[serde(default = "yes")]
        regularity: bool,
        exp_stability: Option<BumpCfg>,
        twisted: Option<TwistedDiagCfg>,
    },
    Perturb {
        bump: Vec<ExprCfg>,
        support_radius: f64,
        ts: Vec<f64>,
    },
    Simulate {
        start: StartCfg,
        horizon: Option<f64>,
        target: Option<RegionCfg>,
    },
    CheckFk {
        radius: f64,
        start: StartCfg,
        horizon: f64,
        g: Vec<ExprCfg>,
        #[serde(default = "yes")]
        halving: bool,
    },
    CheckHitting {
        ball: f64,
        starts: Vec<StartCfg>,
        risk_horizons: Option<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl TaskCfg {
    pub fn name(&self) -> &'static str {
        match self {
            TaskCfg::Eig { .. } => "eig",
            TaskCfg::LambdaStar { .. } => "lambda-star",
            TaskCfg::Twist { .. } => "twist",
            TaskCfg::Diagnose { .. } => "diagnose",
            TaskCfg::Perturb { .. } => "perturb",
            TaskCfg::Simulate { .. } => "simulate",
            TaskCfg::CheckFk { .. } => "check-fk",
            TaskCfg::CheckHitting { .. } => "check-hitting",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsCfg {
    pub h: f64,
    pub radii: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub dt: f64,
    pub n_paths: usize,
    pub t_max: f64,
    pub cap: f64,
    pub substeps: usize,
    pub reg_tol: f64,
    pub hit_tol: f64,
    pub sample_density: usize,
}

impl Default for NumericsCfg {
    fn default() -> Self {
        NumericsCfg {
            h: 0.05,
            radii: vec![4.0, 8.0, 16.0],
            tol: crate::eigen::DEFAULT_TOL,
            max_iter: crate::eigen::DEFAULT_MAX_ITER,
            seed: 0,
            dt: 1e-3,
            n_paths: 10_000,
            t_max: 50.0,
            cap: 1e3,
            substeps: 1,
            reg_tol: crate::stability::DEFAULT_REG_TOL,
            hit_tol: crate::stability::DEFAULT_HIT_TOL,
            sample_density: 41,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputCfg {
    pub dir: Option<String>,
    pub csv: bool,
    pub matrix_market: bool,
    pub dump_paths: usize,
}

impl Default for OutputCfg {
    fn default() -> Self {
        OutputCfg { dir: None, csv: true, matrix_market: false, dump_paths: 0 }
    }
}

fn oracle(e: &ExprCfg, dim: usize, params: &BTreeMap<String, f64>, what: &str) -> Result<Oracle, String> {
    match e {
        ExprCfg::Num(v) => Ok(Oracle::Const(*v)),
        ExprCfg::Text(t) => {
            let ex = compile(t, dim, params).map_err(|err| format!("{what}: \"{t}\": {err}"))?;
            if ex.is_constant() {
                let v = ex.eval(&vec![0.0; dim], 1).map_err(|err| format!("{what}: \"{t}\": {err}"))?;
                Ok(Oracle::Const(v))
            } else {
                Ok(Oracle::expr(ex))
            }
        }
    }
}

pub fn oracles(list: &[ExprCfg], n: usize, dim: usize, params: &BTreeMap<String, f64>, what: &str) -> Result<Vec<Oracle>, String> {
    if list.len() != n {
        return Err(format!("{what}: expected {n} entries, got {}", list.len()));
    }
    list.iter().enumerate().map(|(k, e)| oracle(e, dim, params, &format!("{what}[{}]", k + 1))).collect()
}

impl ProblemCfg {
    pub fn to_spec(&self) -> Result<ProblemSpec, String> {
        let (d, n, p) = (self.dim, self.regimes, &self.params);
        if !(1..=2).contains(&d) {
            return Err(format!("problem.dim must be 1 or 2, got {d}"));
        }
        if n == 0 {
            return Err("problem.regimes must be at least 1".into());
        }
        let window = match &self.window {
            WindowCfg::Ball(r) if *r > 0.0 => Window::Ball { radius: *r },
            WindowCfg::Box(b) if b.lo.len() == d && b.hi.len() == d && b.lo.iter().zip(&b.hi).all(|(l, h)| l < h) => {
                Window::Box { lo: b.lo.clone(), hi: b.hi.clone() }
            }
            _ => return Err("problem.window must be a positive ball radius or a box matching dim".into()),
        };
        let mut spec = ProblemSpec::new(d, n, window);
        if let Some(diff) = &self.diffusion {
            if diff.len() != n {
                return Err(format!("problem.diffusion: expected {n} entries, got {}", diff.len()));
            }
            for (k, m) in diff.iter().enumerate() {
                let what = format!("problem.diffusion[{}]", k + 1);
                spec = match m {
                    MatrixCfg::Scalar(e) => spec.with_isotropic(k, oracle(e, d, p, &what)?),
                    MatrixCfg::Full(rows) => {
                        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                            return Err(format!("{what}: expected a {d}x{d} matrix"));
                        }
                        let flat: Vec<ExprCfg> = rows.iter().flatten().cloned().collect();
                        spec.with_diffusion(k, oracles(&flat, d * d, d, p, &what)?)
                    }
                };
            }
        }
        if let Some(drift) = &self.drift {
            if drift.len() != n {
                return Err(format!("problem.drift: expected {n} entries, got {}", drift.len()));
            }
            for (k, b) in drift.iter().enumerate() {
                spec = spec.with_drift(k, oracles(b, d, d, p, &format!("problem.drift[{}]", k + 1))?);
            }
        }
        if let Some(c) = &self.potential {
            for (k, o) in oracles(c, n, d, p, "problem.potential")?.into_iter().enumerate() {
                spec = spec.with_potential(k, o);
            }
        }
        if let Some(rates) = &self.rates {
            if rates.len() != n || rates.iter().any(|r| r.len() != n) {
                return Err(format!("problem.rates: expected a {n}x{n} matrix"));
            }
            for (i, row) in rates.iter().enumerate() {
                for (j, e) in row.iter().enumerate() {
                    let what = format!("problem.rates[{}][{}]", i + 1, j + 1);
                    match e {
                        None => {}
                        Some(e) if i == j => {
                            if !oracle(e, d, p, &what)?.is_zero() {
                                return Err(format!("{what}: diagonal rates are implied by the row sums; use null"));
                            }
                        }
                        Some(e) => spec = spec.with_rate(i, j, oracle(e, d, p, &what)?),
                    }
                }
            }
        }
        Ok(spec)
    }
}

impl RegionCfg {
    pub fn to_region(&self, dim: usize, regimes: usize) -> Result<RegionSpec, String> {
        let shape = match (&self.ball, &self.bx) {
            (Some(r), None) if *r > 0.0 => {
                let c = self.center.clone().unwrap_or(vec![0.0; dim]);
                if c.len() != dim {
                    return Err("region center does not match dim".into());
                }
                Shape::Ball { center: c, radius: *r }
            }
            (None, Some(b)) if b.lo.len() == dim && b.hi.len() == dim && self.center.is_none() => {
                Shape::Box { lo: b.lo.clone(), hi: b.hi.clone() }
            }
            _ => return Err("region needs exactly one of a positive `ball` radius or a `box` matching dim".into()),
        };
        let regime_set = match &self.regimes {
            None => (0..regimes).collect(),
            Some(v) => {
                if v.is_empty() || v.iter().any(|k| *k == 0 || *k > regimes) {
                    return Err(format!("region regimes {v:?} must be 1-based and nonempty"));
                }
                let mut s: Vec<usize> = v.iter().map(|k| k - 1).collect();
                s.sort();
                s.dedup();
                s
            }
        };
        Ok(RegionSpec { shape: RegionShape::Uniform(shape), regime_set })
    }
}

impl BumpCfg {
    pub fn to_pert(&self, spec: &ProblemSpec, ts: Vec<f64>) -> Result<PerturbationSpec, String> {
        Ok(PerturbationSpec {
            bump: oracles(&self.bump, spec.regimes, spec.dim, &BTreeMap::new(), "bump")?,
            support_radius: self.support_radius,
            ts,
        })
    }
}

impl StartCfg {
    pub fn check(&self, spec: &ProblemSpec) -> Result<(Vec<f64>, usize), String> {
        if self.x.len() != spec.dim || self.regime == 0 || self.regime > spec.regimes {
            return Err(format!("start {:?} / regime {} does not match the problem", self.x, self.regime));
        }
        Ok((self.x.clone(), self.regime - 1))
    }
}

impl NumericsCfg {
    pub fn check(&self) -> Result<(), String> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err("numerics.h must be positive".into());
        }
        if self.radii.is_empty() || self.radii[0] <= 0.0 || self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err("numerics.radii must be positive and increasing".into());
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err("numerics.tol and numerics.max_iter must be positive".into());
        }
        if !(self.dt > 0.0 && self.t_max > 0.0 && self.cap > 0.0) || self.n_paths == 0 || self.substeps == 0 {
            return Err("numerics.dt, t_max, cap, n_paths and substeps must be positive".into());
        }
        if !(self.reg_tol > 0.0 && self.hit_tol > 0.0) || self.sample_density < 2 {
            return Err("numerics.reg_tol and hit_tol must be positive and sample_density at least 2".into());
        }
        Ok(())
    }
}
