//! Regularity, recurrence and exponential-stability classifiers, and
//! Lyapunov certificates built from ratios of principal eigenfunctions.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::discretize::{assemble_shared, build_grid, solve_dirichlet, DiscreteOperator, DiscretizeError, Grid};
use crate::eigen::{principal_eigenpair_lenient, EigenError};
use crate::model::{norm, ProblemSpec, RegionSpec};
use crate::spectrum::{lambda_star, PerturbationSpec, PrincipalLimit, SpectrumError};
use crate::twist::doob_transform;

pub const DEFAULT_REG_TOL: f64 = 1e-3;
pub const DEFAULT_HIT_TOL: f64 = 1e-2;
pub const RESID_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StabilityError {
    #[error("stability::{op}: eigenvalue gap {gap:e} does not exceed its tolerance {gap_tol:e}")]
    GapNonpositive { op: &'static str, gap: f64, gap_tol: f64 },
    #[error("stability::regularity_test: solution increased from radius {r0} to {r1} at x={x:?} by {excess:e}")]
    ComparisonViolated { r0: f64, r1: f64, x: Vec<f64>, excess: f64 },
    #[error("stability: {0}")]
    BadInput(String),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Regular,
    NotRegular,
    Recurrent,
    Transient,
    ExpStable,
    Inconclusive,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Regular => "regular",
            Classification::NotRegular => "not-regular",
            Classification::Recurrent => "recurrent",
            Classification::Transient => "transient",
            Classification::ExpStable => "exp-stable",
            Classification::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub classification: Classification,
    /// `(radius, diagnostic)` per radius.
    pub evidence: Vec<(f64, f64)>,
    pub thresholds: Vec<(&'static str, f64)>,
}

/// Where the generator comes from: assembled from a specification on balls,
/// or a fixed operator restricted to balls.
#[derive(Debug, Clone)]
pub enum GeneratorSource {
    Spec { spec: ProblemSpec, h: f64 },
    Operator(Arc<DiscreteOperator>),
}

impl GeneratorSource {
    /// Zero-potential generator on the ball of radius `r`.
    fn ball(&self, r: f64) -> Result<DiscreteOperator, StabilityError> {
        match self {
            GeneratorSource::Spec { spec, h } => {
                let grid = build_grid(spec, &RegionSpec::ball(spec.dim, r, spec.regimes), *h)?;
                Ok(assemble_shared(&spec.generator(), Arc::new(grid), false)?)
            }
            GeneratorSource::Operator(op) => {
                let g = &op.grid;
                let sub = op.restrict(|s| norm(&g.x(g.node_of_slot(s))) <= r + 1e-9 * g.h);
                if sub.n() == 0 {
                    return Err(StabilityError::BadInput(format!("no rows within radius {r}")));
                }
                Ok(sub.with_potential(vec![0.0; sub.n()]))
            }
        }
    }
}

fn check_radii(radii: &[f64]) -> Result<(), StabilityError> {
    if radii.len() < 2 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StabilityError::BadInput(format!("need at least two increasing radii, got {radii:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RegularityOptions {
    pub reg_tol: f64,
    pub inner_radius: Option<f64>,
}

impl Default for RegularityOptions {
    fn default() -> Self {
        RegularityOptions { reg_tol: DEFAULT_REG_TOL, inner_radius: None }
    }
}

/// Solves `L u = C u` on each ball with `u = 1` outside and reports the
/// largest value on the inner window.
pub fn regularity_test(
    src: &GeneratorSource,
    c: f64,
    radii: &[f64],
    opts: &RegularityOptions,
) -> Result<Verdict, StabilityError> {
    check_radii(radii)?;
    if !(c > 0.0) {
        return Err(StabilityError::BadInput("C must be positive".into()));
    }
    let inner = opts.inner_radius.unwrap_or((0.5 * radii[0]).min(2.0));
    let sols: Vec<(Arc<Grid>, Vec<f64>)> = radii
        .par_iter()
        .map(|&r| {
            let op = src.ball(r)?.shifted(-c);
            let g = op.grid.clone();
            let u = solve_dirichlet(&op, &vec![1.0; g.n_slots()], &vec![0.0; g.n_rows()])?;
            Ok((g, u))
        })
        .collect::<Result<_, StabilityError>>()?;
    for w in 0..sols.len() - 1 {
        let (g0, u0) = &sols[w];
        let (g1, u1) = &sols[w + 1];
        for r in 0..g1.n_rows() {
            let x = g1.row_x(r);
            let Some(node) = g0.node_near(&x) else { continue };
            if let Some(r0) = g0.row(node, g1.row_regime(r)) {
                let excess = u1[r] - u0[r0];
                if excess > 1e-12 {
                    return Err(StabilityError::ComparisonViolated { r0: radii[w], r1: radii[w + 1], x, excess });
                }
            }
        }
    }
    let evidence: Vec<(f64, f64)> = radii
        .iter()
        .zip(&sols)
        .map(|(&r, (g, u))| {
            let m = (0..g.n_rows()).filter(|&i| norm(&g.row_x(i)) <= inner + 1e-12).map(|i| u[i]).fold(0.0, f64::max);
            (r, m)
        })
        .collect();
    let n = evidence.len();
    let (last, prev) = (evidence[n - 1].1, evidence[n - 2].1);
    let t = opts.reg_tol;
    let classification = if last <= t {
        Classification::Regular
    } else if last > 10.0 * t && prev > 10.0 * t && (last - prev).abs() <= 0.1 * prev {
        Classification::NotRegular
    } else {
        Classification::Inconclusive
    };
    Ok(Verdict { classification, evidence, thresholds: vec![("reg_tol", t), ("C", c), ("inner_radius", inner)] })
}

#[derive(Debug, Clone)]
pub struct RecurrenceOptions {
    pub hit_tol: f64,
    pub inner_radius: Option<f64>,
}

impl Default for RecurrenceOptions {
    fn default() -> Self {
        RecurrenceOptions { hit_tol: DEFAULT_HIT_TOL, inner_radius: None }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrenceReport {
    pub verdict: Verdict,
    /// Sup over the window of the difference between the solutions with
    /// outer data 1 and 0, per radius.
    pub uniqueness_gap: Vec<(f64, f64)>,
}

/// Probability of hitting `target` before leaving each ball, minimized over
/// the inner window.
pub fn recurrence_test(
    src: &GeneratorSource,
    target: &RegionSpec,
    radii: &[f64],
    opts: &RecurrenceOptions,
) -> Result<RecurrenceReport, StabilityError> {
    check_radii(radii)?;
    let rd = target.outer_radius();
    if rd >= radii[0] {
        return Err(StabilityError::BadInput(format!("target radius {rd} not inside smallest radius {}", radii[0])));
    }
    let inner = opts.inner_radius.unwrap_or(2.0 * rd);
    let res: Vec<(f64, f64)> = radii
        .par_iter()
        .map(|&r| {
            let full = src.ball(r)?;
            let g = full.grid.clone();
            let tol = 1e-9 * g.h;
            let in_target = |s: usize| target.contains(&g.x(g.node_of_slot(s)), g.regime_of_slot(s), tol);
            let op = full.restrict(|s| !in_target(s));
            let sg = op.grid.clone();
            let data: Vec<f64> = (0..sg.n_slots()).map(|s| if in_target(s) { 1.0 } else { 0.0 }).collect();
            let u = solve_dirichlet(&op, &data, &vec![0.0; sg.n_rows()])?;
            let ones = vec![1.0; sg.n_slots()];
            let u1 = solve_dirichlet(&op, &ones, &vec![0.0; sg.n_rows()])?;
            let mut min = f64::INFINITY;
            let mut gap: f64 = 0.0;
            for i in 0..sg.n_rows() {
                if norm(&sg.row_x(i)) <= inner + 1e-12 {
                    min = min.min(u[i]);
                    gap = gap.max(u1[i] - u[i]);
                }
            }
            Ok((min, gap))
        })
        .collect::<Result<_, StabilityError>>()?;
    let evidence: Vec<(f64, f64)> = radii.iter().zip(&res).map(|(&r, v)| (r, v.0)).collect();
    let uniqueness_gap = radii.iter().zip(&res).map(|(&r, v)| (r, v.1)).collect();
    let n = evidence.len();
    let (last, prev) = (evidence[n - 1].1, evidence[n - 2].1);
    let t = opts.hit_tol;
    let classification = if last >= 1.0 - t {
        Classification::Recurrent
    } else if last < 1.0 - 10.0 * t && prev < 1.0 - 10.0 * t && (last - prev).abs() <= 10.0 * t {
        Classification::Transient
    } else {
        Classification::Inconclusive
    };
    Ok(RecurrenceReport {
        verdict: Verdict { classification, evidence, thresholds: vec![("hit_tol", t), ("inner_radius", inner)] },
        uniqueness_gap,
    })
}

#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub grid: Arc<Grid>,
    /// On rows of `grid`; at least 1.
    pub v: Vec<f64>,
    pub kappa0: f64,
    pub kappa1: f64,
    /// Largest positive part of `L̃V + κ₁V - κ₀ 1_K` over the checked rows.
    pub residual: f64,
    pub resid_tol: f64,
    pub valid: bool,
    pub lambda_d: f64,
    pub lambda_1: f64,
    pub rows_checked: usize,
}

fn scale_to_one(v: &mut [f64]) {
    let m = v.iter().fold(f64::INFINITY, |m, x| m.min(*x));
    v.iter_mut().for_each(|x| *x /= m);
}

/// Positive part of `(Ã V)_r + κ₁V_r - κ₀ 1_K(r)` maximized over the rows,
/// together with the magnitude of the terms (the scale for the tolerance).
fn certificate_residual(doob: &DiscreteOperator, v: &[f64], kappa1: f64, kappa0: f64, in_k: &[bool]) -> (f64, f64) {
    let av = doob.apply(v, None);
    let mut res: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for r in 0..doob.n() {
        let lhs = av[r] + kappa1 * v[r] - if in_k[r] { kappa0 } else { 0.0 };
        res = res.max(lhs);
        let mut mag = kappa1 * v[r] + kappa0;
        for i in doob.row_ptr[r]..doob.row_ptr[r + 1] {
            mag += doob.w[i] * (v[doob.cols[i]] + v[r]);
        }
        scale = scale.max(mag);
    }
    (res.max(0.0), scale)
}

/// Certificate from `V = Ψ₁/Ψ_D`, where `Ψ_D` is the principal
/// eigenfunction on `D` and `Ψ₁` the one on `D₁ ⊃ D` with potential
/// `c - 1_K`.
pub fn lyapunov_construct(
    spec: &ProblemSpec,
    d: &RegionSpec,
    d1: &RegionSpec,
    k: &RegionSpec,
    h: f64,
    tol: f64,
) -> Result<LyapunovCertificate, StabilityError> {
    let gd = Arc::new(build_grid(spec, d, h)?);
    let g1 = Arc::new(build_grid(spec, d1, h)?);
    let op_d = assemble_shared(spec, gd.clone(), true)?;
    let base1 = assemble_shared(spec, g1.clone(), true)?;
    let ktol = 1e-9 * h;
    let pot1: Vec<f64> = (0..g1.n_rows())
        .map(|r| base1.potential[r] - if k.contains(&g1.row_x(r), g1.row_regime(r), ktol) { 1.0 } else { 0.0 })
        .collect();
    let op_1 = base1.with_potential(pot1);
    let pd = principal_eigenpair_lenient(&op_d, tol)?;
    let p1 = principal_eigenpair_lenient(&op_1, tol)?;
    let delta1 = p1.lambda - pd.lambda;
    let gap_tol = pd.width() + p1.width();
    if !(delta1 > gap_tol) {
        return Err(StabilityError::GapNonpositive { op: "lyapunov_construct", gap: delta1, gap_tol });
    }
    let mut v = Vec::with_capacity(gd.n_rows());
    for r in 0..gd.n_rows() {
        let s = gd.slot_of_row[r];
        let node = g1.node_near(&gd.x(gd.node_of_slot(s))).zip(Some(gd.regime_of_slot(s)));
        let r1 = node.and_then(|(n, kk)| g1.row(n, kk)).ok_or_else(|| {
            StabilityError::BadInput(format!("D is not contained in D1 at x={:?}", gd.row_x(r)))
        })?;
        v.push(p1.psi[r1] / pd.psi[r]);
    }
    scale_to_one(&mut v);
    let in_k: Vec<bool> = (0..gd.n_rows()).map(|r| k.contains(&gd.row_x(r), gd.row_regime(r), ktol)).collect();
    let kappa0 = (0..gd.n_rows()).filter(|&r| in_k[r]).map(|r| v[r]).fold(0.0, f64::max);
    let doob = doob_transform(&op_d, &pd.psi);
    let (residual, scale) = certificate_residual(&doob, &v, delta1, kappa0, &in_k);
    let resid_tol = RESID_TOL * scale;
    Ok(LyapunovCertificate {
        grid: gd,
        rows_checked: v.len(),
        v,
        kappa0,
        kappa1: delta1,
        residual,
        resid_tol,
        valid: residual <= resid_tol,
        lambda_d: pd.lambda,
        lambda_1: p1.lambda,
    })
}

#[derive(Debug, Clone)]
pub struct ExpStabilityReport {
    pub verdict: Verdict,
    pub certificate: LyapunovCertificate,
    pub gap: f64,
    pub gap_tol: f64,
    pub regularity: Verdict,
}

/// Regularity radii for a twisted generator on a ball of radius `r`.
pub fn twisted_radii(r: f64, h: f64) -> Vec<f64> {
    vec![0.25 * r, 0.5 * r, r - 3.0 * h]
}

/// Exponential stability from the gap `λ*(c-h) - λ*(c)` and the certificate
/// `V = Ψ_h/Ψ*` for the twisted generator on the largest ball.
pub fn exp_stability_test(
    spec: &ProblemSpec,
    principal: &PrincipalLimit,
    pert: &PerturbationSpec,
) -> Result<ExpStabilityReport, StabilityError> {
    if pert.bump.len() != spec.regimes {
        return Err(StabilityError::BadInput("one bump oracle per regime required".into()));
    }
    let lowered = lambda_star(&spec.with_added_potential(-1.0, &pert.bump), &principal.radii, principal.h, principal.tol)?;
    let gaps: Vec<f64> = lowered.lambdas.iter().zip(&principal.lambdas).map(|(a, b)| a - b).collect();
    let gap = lowered.lambda_star - principal.lambda_star;
    let gap_tol = lowered.uncertainty + principal.uncertainty;
    let n = gaps.len();
    let stable = n < 2 || (gaps[n - 1] - gaps[n - 2]).abs() <= 0.1 * gaps[n - 1].abs() + gap_tol;
    if !(gap > gap_tol && gaps[n - 1] > gap_tol && stable) {
        return Err(StabilityError::GapNonpositive { op: "exp_stability_test", gap, gap_tol });
    }
    let op = &principal.op;
    let g = op.grid.clone();
    let psi = &principal.pair.psi;
    let psi_h = &lowered.pair.psi;
    let mut v: Vec<f64> = psi_h.iter().zip(psi).map(|(a, b)| a / b).collect();
    scale_to_one(&mut v);
    let gap_r = lowered.pair.lambda - principal.pair.lambda;
    let delta = gap_r - 2.0 * (lowered.pair.width() + principal.pair.width());
    let support = pert.support_radius;
    let in_b: Vec<bool> = (0..g.n_rows()).map(|r| norm(&g.row_x(r)) <= support + 1e-9 * g.h).collect();
    let doob = doob_transform(op, psi);
    let av = doob.apply(&v, None);
    let kappa0 = (0..g.n_rows()).filter(|&r| in_b[r]).map(|r| av[r] + delta * v[r]).fold(0.0, f64::max);
    let (residual, scale) = certificate_residual(&doob, &v, delta, kappa0, &in_b);
    let resid_tol = RESID_TOL * scale;
    let certificate = LyapunovCertificate {
        grid: g.clone(),
        rows_checked: v.len(),
        v,
        kappa0,
        kappa1: delta,
        residual,
        resid_tol,
        valid: residual <= resid_tol && delta > 0.0,
        lambda_d: principal.pair.lambda,
        lambda_1: lowered.pair.lambda,
    };
    let rmax = *principal.radii.last().expect("radii");
    let regularity = regularity_test(
        &GeneratorSource::Operator(Arc::new(doob)),
        1.0,
        &twisted_radii(rmax, principal.h),
        &RegularityOptions::default(),
    )?;
    let classification = if certificate.valid && regularity.classification == Classification::Regular {
        Classification::ExpStable
    } else {
        Classification::Inconclusive
    };
    Ok(ExpStabilityReport {
        verdict: Verdict {
            classification,
            evidence: principal.radii.iter().cloned().zip(gaps).collect(),
            thresholds: vec![("gap_tol", gap_tol), ("resid_tol", resid_tol)],
        },
        certificate,
        gap,
        gap_tol,
        regularity,
    })
}
