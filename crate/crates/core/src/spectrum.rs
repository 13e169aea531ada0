//! Generalized principal eigenvalue over growing balls, eigenfunctions below
//! it, and potential-perturbation experiments.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::discretize::{assemble_shared, build_grid, solve_dirichlet, DiscreteOperator, DiscretizeError, Grid};
use crate::eigen::{principal_eigenpair_lenient, EigenError, EigenPair};
use crate::model::{norm, Oracle, ProblemSpec, RegionSpec, Shape};

pub const DEFAULT_INNER_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpectrumError {
    #[error("spectrum::lambda_star: eigenvalue increased after radius {} ({lambdas:?})", radii[*index])]
    NotDecreasing { index: usize, radii: Vec<f64>, lambdas: Vec<f64> },
    #[error("spectrum::lambda_star: sequence not converged, last difference {last_difference:e}")]
    NonConvergent { last_difference: f64, lambdas: Vec<f64> },
    #[error("spectrum::eigenfunction_at: resolvent solution not positive at radius {radius}")]
    ResolventNotPositive { radius: f64 },
    #[error("spectrum: {0}")]
    BadInput(String),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

#[derive(Debug, Clone)]
pub struct ProfilePoint {
    pub x: Vec<f64>,
    pub regime: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PrincipalLimit {
    pub radii: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub brackets: Vec<(f64, f64)>,
    pub lambda_star: f64,
    pub uncertainty: f64,
    pub extrapolated: bool,
    pub converged: bool,
    pub tol: f64,
    pub h: f64,
    /// Eigenfunction on the largest ball, normalized at the origin.
    pub psi_star: Vec<f64>,
    pub pair: EigenPair,
    /// Operator (with potential) on the largest ball.
    pub op: DiscreteOperator,
    pub window_profile: Vec<ProfilePoint>,
}

impl PrincipalLimit {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.op.grid
    }

    pub fn require_converged(&self) -> Result<&Self, SpectrumError> {
        if self.converged {
            Ok(self)
        } else {
            let n = self.lambdas.len();
            let last_difference = if n > 1 { self.lambdas[n - 1] - self.lambdas[n - 2] } else { f64::NAN };
            Err(SpectrumError::NonConvergent { last_difference, lambdas: self.lambdas.clone() })
        }
    }
}

pub fn profile(grid: &Grid, u: &[f64], radius: f64) -> Vec<ProfilePoint> {
    (0..grid.n_rows())
        .filter_map(|r| {
            let x = grid.row_x(r);
            (norm(&x) <= radius + 1e-12).then(|| ProfilePoint { x, regime: grid.row_regime(r), value: u[r] })
        })
        .collect()
}

/// Operator with potential on the ball of radius `r` over all regimes.
pub fn ball_operator(spec: &ProblemSpec, r: f64, h: f64) -> Result<DiscreteOperator, SpectrumError> {
    let grid = build_grid(spec, &RegionSpec::ball(spec.dim, r, spec.regimes), h)?;
    Ok(assemble_shared(spec, Arc::new(grid), true)?)
}

fn check_radii(radii: &[f64]) -> Result<(), SpectrumError> {
    if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] <= 0.0 {
        return Err(SpectrumError::BadInput(format!("radii {radii:?} must be positive and increasing")));
    }
    Ok(())
}

/// Aitken Δ² on the last three values when the differences are decreasing
/// in magnitude at a stable ratio.
fn aitken(l: &[f64], tol: f64) -> Option<f64> {
    let n = l.len();
    if n < 3 {
        return None;
    }
    let d1 = l[n - 2] - l[n - 3];
    let d2 = l[n - 1] - l[n - 2];
    if d2.abs() <= 2.0 * tol * (1.0 + l[n - 1].abs()) {
        return None;
    }
    if !(d1 < 0.0 && d2 <= 0.0) {
        return None;
    }
    let ratio = d2 / d1;
    if !(0.0..=0.9).contains(&ratio) {
        return None;
    }
    if n >= 4 {
        let d0 = l[n - 3] - l[n - 4];
        if d0 >= 0.0 {
            return None;
        }
        let prev = d1 / d0;
        if (prev - ratio).abs() > 0.5 * prev.max(ratio) {
            return None;
        }
    }
    Some(l[n - 1] - d2 * d2 / (d2 - d1))
}

pub fn lambda_star(spec: &ProblemSpec, radii: &[f64], h: f64, tol: f64) -> Result<PrincipalLimit, SpectrumError> {
    lambda_star_with(spec, radii, h, tol, DEFAULT_INNER_RADIUS)
}

pub fn lambda_star_with(
    spec: &ProblemSpec,
    radii: &[f64],
    h: f64,
    tol: f64,
    inner_radius: f64,
) -> Result<PrincipalLimit, SpectrumError> {
    check_radii(radii)?;
    let last = radii.len() - 1;
    let solved: Vec<Result<(EigenPair, Option<DiscreteOperator>), SpectrumError>> = radii
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let op = ball_operator(spec, r, h)?;
            let pair = principal_eigenpair_lenient(&op, tol)?;
            Ok((pair, (i == last).then_some(op)))
        })
        .collect();
    let mut pairs = vec![];
    let mut op = None;
    for s in solved {
        let (p, o) = s?;
        pairs.push(p);
        if o.is_some() {
            op = o;
        }
    }
    let op = op.expect("largest radius operator");
    let lambdas: Vec<f64> = pairs.iter().map(|p| p.lambda).collect();
    let brackets: Vec<(f64, f64)> = pairs.iter().map(|p| p.bracket).collect();
    for i in 0..last {
        if lambdas[i + 1] > lambdas[i] + 2.0 * tol * (1.0 + lambdas[i].abs()) {
            return Err(SpectrumError::NotDecreasing { index: i, radii: radii.to_vec(), lambdas });
        }
    }
    let pair = pairs.pop().expect("nonempty");
    let (converged, step) = if last == 0 {
        (false, 0.0)
    } else {
        let d = (lambdas[last] - lambdas[last - 1]).abs();
        (d <= tol * (1.0 + lambdas[last - 1].abs()), d)
    };
    let (lambda_star, extrapolated) = match aitken(&lambdas, tol) {
        Some(v) => (v, true),
        None => (lambdas[last], false),
    };
    let uncertainty = step + pair.width();
    let window_profile = profile(&op.grid, &pair.psi, inner_radius);
    Ok(PrincipalLimit {
        radii: radii.to_vec(),
        lambdas,
        brackets,
        lambda_star,
        uncertainty,
        extrapolated,
        converged,
        tol,
        h,
        psi_star: pair.psi.clone(),
        pair,
        op,
        window_profile,
    })
}

#[derive(Debug, Clone)]
pub struct EigenFunction {
    pub lambda: f64,
    pub psi: Vec<f64>,
    pub op: DiscreteOperator,
    pub radius: f64,
}

/// Indicator of the source cell near the outer annulus of a ball of radius
/// `r`, as a row vector.
pub fn source_cell(grid: &Grid, r: f64) -> Vec<f64> {
    let mut center = vec![0.0; grid.dim];
    center[0] = 0.825 * r;
    let cell = Shape::ball(&center, (0.075 * r).max(grid.h));
    grid.sample_rows(|x, _| if cell.contains(x, 1e-9 * grid.h) { 1.0 } else { 0.0 })
}

/// Positive solution of `(A + λ) u = -1_cell` on each ball, normalized at
/// the origin; returns the largest.
pub fn eigenfunction_at(spec: &ProblemSpec, lambda: f64, radii: &[f64], h: f64) -> Result<EigenFunction, SpectrumError> {
    check_radii(radii)?;
    let solved: Vec<Result<Option<EigenFunction>, SpectrumError>> = radii
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let op = ball_operator(spec, r, h)?.shifted(lambda);
            let f = source_cell(&op.grid, r);
            let mut u = match solve_dirichlet(&op, &vec![0.0; op.grid.n_slots()], &f) {
                Ok(u) => u,
                Err(DiscretizeError::SingularSystem { .. }) => return Err(SpectrumError::ResolventNotPositive { radius: r }),
                Err(e) => return Err(e.into()),
            };
            if u.iter().any(|v| !(*v > 0.0)) {
                return Err(SpectrumError::ResolventNotPositive { radius: r });
            }
            let g = &op.grid;
            let node = g.nearest_interior_node(&vec![0.0; g.dim]).ok_or(EigenError::OriginOutside)?;
            let m = (0..g.regimes).filter_map(|k| g.row(node, k)).map(|r| u[r]).fold(f64::INFINITY, f64::min);
            u.iter_mut().for_each(|v| *v /= m);
            Ok((i == radii.len() - 1).then_some(EigenFunction { lambda, psi: u, op, radius: r }))
        })
        .collect();
    let mut out = None;
    for s in solved {
        if let Some(e) = s? {
            out = Some(e);
        }
    }
    Ok(out.expect("largest radius"))
}

/// Nonnegative compactly supported bump per regime and the scale grid.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    pub bump: Vec<Oracle>,
    pub support_radius: f64,
    pub ts: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub ts: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub uncertainties: Vec<f64>,
    pub gap_tol: f64,
    pub right_monotone: bool,
    pub strictly_monotone: bool,
    /// Max over consecutive triples of chord minus value (≤ 0 when concave).
    pub concavity_defect: f64,
    /// Every positive scale moves λ* down and every negative scale moves it
    /// up, within gap_tol.
    pub direction_consistent: bool,
    pub limits: Vec<PrincipalLimit>,
}

pub fn concavity_defect(ts: &[f64], values: &[f64]) -> f64 {
    let mut defect = f64::NEG_INFINITY;
    for i in 1..ts.len().saturating_sub(1) {
        let (a, b, c) = (ts[i - 1], ts[i], ts[i + 1]);
        let th = (c - b) / (c - a);
        let chord = th * values[i - 1] + (1.0 - th) * values[i + 1];
        defect = defect.max(chord - values[i]);
    }
    defect
}

pub fn perturbation_sweep(
    spec: &ProblemSpec,
    pert: &PerturbationSpec,
    radii: &[f64],
    h: f64,
    tol: f64,
) -> Result<MonotonicityReport, SpectrumError> {
    check_radii(radii)?;
    if pert.bump.len() != spec.regimes {
        return Err(SpectrumError::BadInput("one bump oracle per regime required".into()));
    }
    if pert.support_radius >= radii[0] {
        return Err(SpectrumError::BadInput(format!(
            "bump support radius {} must be below the smallest radius {}",
            pert.support_radius, radii[0]
        )));
    }
    let mut ts = pert.ts.clone();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    if !ts.contains(&0.0) || !ts.iter().any(|t| *t > 0.0) || !ts.iter().any(|t| *t < 0.0) {
        return Err(SpectrumError::BadInput("scale grid must contain 0 and both signs".into()));
    }
    let limits: Vec<PrincipalLimit> = ts
        .par_iter()
        .map(|&t| lambda_star(&spec.with_added_potential(t, &pert.bump), radii, h, tol))
        .collect::<Result<_, _>>()?;
    let lambdas: Vec<f64> = limits.iter().map(|l| l.lambda_star).collect();
    let uncertainties: Vec<f64> = limits.iter().map(|l| l.uncertainty).collect();
    let gap_tol = uncertainties.iter().fold(0.0f64, |m, u| m.max(*u));
    let i0 = ts.iter().position(|t| *t == 0.0).expect("zero present");
    let l0 = lambdas[i0];
    let pos = ts.iter().zip(&lambdas).filter(|(t, _)| **t > 0.0);
    let neg = ts.iter().zip(&lambdas).filter(|(t, _)| **t < 0.0);
    let right_monotone = pos.clone().all(|(_, l)| *l < l0 - gap_tol);
    let strictly_monotone = neg.clone().all(|(_, l)| *l > l0 + gap_tol);
    let direction_consistent = pos.into_iter().all(|(_, l)| *l <= l0 + gap_tol) && neg.into_iter().all(|(_, l)| *l >= l0 - gap_tol);
    Ok(MonotonicityReport {
        concavity_defect: concavity_defect(&ts, &lambdas),
        ts,
        lambdas,
        uncertainties,
        gap_tol,
        right_monotone,
        strictly_monotone,
        direction_consistent,
        limits,
    })
}

/// `θ ↦ λ_D(θ c₁ + (1-θ) c₂)` on a fixed operator, with `c₁`, `c₂` as row
/// vectors. Returns the eigenvalues and the largest bracket width.
pub fn potential_path(
    op: &DiscreteOperator,
    c1: &[f64],
    c2: &[f64],
    thetas: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, f64), SpectrumError> {
    let mut out = vec![];
    let mut width: f64 = 0.0;
    for &th in thetas {
        let c: Vec<f64> = c1.iter().zip(c2).map(|(a, b)| th * a + (1.0 - th) * b).collect();
        let p = principal_eigenpair_lenient(&op.with_potential(c), tol)?;
        width = width.max(p.width());
        out.push(p.lambda);
    }
    Ok((out, width))
}
