//! Principal eigenpair of a discrete Dirichlet operator by shifted inverse
//! iteration, certified with Collatz–Wielandt quotients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::discretize::{DiscreteOperator, DiscretizeError, ShiftedLu};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EigenError {
    #[error("eigen::principal_eigenpair: operator has negative off-diagonal entries")]
    MetzlerRequired,
    #[error("eigen::principal_eigenpair: row graph is not strongly connected ({reachable} of {rows} rows reachable)")]
    NotIrreducible { reachable: usize, rows: usize },
    #[error("eigen::principal_eigenpair: no convergence after {iterations} iterations, bracket [{lo}, {hi}]")]
    MaxIterExceeded { iterations: usize, lo: f64, hi: f64, best: Box<EigenPair> },
    #[error("eigen::principal_eigenpair: no interior node within one cell of the origin")]
    OriginOutside,
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

/// Stored with the convention `A Ψ = -λ Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub lambda: f64,
    pub psi: Vec<f64>,
    pub bracket: (f64, f64),
    pub iterations: usize,
    pub normalization_node: usize,
}

impl EigenPair {
    pub fn width(&self) -> f64 {
        self.bracket.1 - self.bracket.0
    }
}

/// Collatz–Wielandt bounds `[min_r (Av)_r/v_r, max_r (Av)_r/v_r]` of the
/// Perron root of `A`, widened by a bound on the rounding in evaluating the
/// quotients. `v` must be positive.
pub fn collatz_wielandt(op: &DiscreteOperator, v: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..op.n() {
        let vr = v[r];
        let mut q = 0.0;
        let mut mag = 0.0;
        let deg = op.row_ptr[r + 1] - op.row_ptr[r] + op.bptr[r + 1] - op.bptr[r];
        for i in op.row_ptr[r]..op.row_ptr[r + 1] {
            let t = op.w[i] * ((v[op.cols[i]] - vr) / vr);
            q += t;
            mag += t.abs();
        }
        for i in op.bptr[r]..op.bptr[r + 1] {
            q -= op.bw[i];
            mag += op.bw[i];
        }
        let c = op.potential[r];
        q += c;
        mag += c.abs();
        let err = (deg as f64 + 4.0) * f64::EPSILON * mag;
        lo = lo.min(q - err);
        hi = hi.max(q + err);
    }
    (lo, hi)
}

/// Checks that every row reaches every other row through positive weights.
pub fn check_irreducible(op: &DiscreteOperator) -> Result<(), EigenError> {
    let n = op.n();
    if n == 0 {
        return Err(EigenError::NotIrreducible { reachable: 0, rows: 0 });
    }
    let mut fwd = vec![vec![]; n];
    let mut bwd = vec![vec![]; n];
    for r in 0..n {
        for i in op.row_ptr[r]..op.row_ptr[r + 1] {
            if op.w[i] > 0.0 {
                fwd[r].push(op.cols[i]);
                bwd[op.cols[i]].push(r);
            }
        }
    }
    for adj in [&fwd, &bwd] {
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0];
        let mut count = 1;
        while let Some(r) = stack.pop() {
            for &j in &adj[r] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        if count != n {
            return Err(EigenError::NotIrreducible { reachable: count, rows: n });
        }
    }
    Ok(())
}

struct Perron {
    lo: f64,
    hi: f64,
    v: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn margin(lo: f64, hi: f64) -> f64 {
    (0.01 * (hi - lo)).max(1e-8 * (1.0 + hi.abs()))
}

fn perron(op: &DiscreteOperator, mut v: Vec<f64>, tol: f64, max_iter: usize) -> Result<Perron, EigenError> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(*x));
    v.iter_mut().for_each(|x| *x /= scale);
    let (mut lo, mut hi) = collatz_wielandt(op, &v);
    let mut best = Perron { lo, hi, v: v.clone(), iterations: 0, converged: false };
    let mut eta = margin(lo, hi);
    let mut lu = ShiftedLu::new(op, hi + eta)?;
    let mut factored_width = hi - lo;
    let mut stall = 0;
    let mut it = 0;
    while it < max_iter {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol * (1.0 + mid.abs()) {
            return Ok(Perron { lo, hi, v, iterations: it, converged: true });
        }
        it += 1;
        let mut w = v.clone();
        lu.solve(&mut w);
        if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            // the shift is too close to the Perron root for this vector
            eta *= 10.0;
            if !eta.is_finite() || eta > 1e12 * (1.0 + hi.abs()) {
                break;
            }
            lu.reshift(best.hi + eta)?;
            factored_width = best.hi - best.lo;
            continue;
        }
        let m = w.iter().fold(0.0f64, |m, x| m.max(*x));
        w.iter_mut().for_each(|x| *x /= m);
        v = w;
        let (l, h) = collatz_wielandt(op, &v);
        lo = l;
        hi = h;
        if hi - lo < best.hi - best.lo {
            best = Perron { lo, hi, v: v.clone(), iterations: it, converged: false };
            stall = 0;
        } else {
            stall += 1;
            if stall > 200 {
                break;
            }
        }
        if hi - lo < 0.5 * factored_width {
            eta = margin(lo, hi);
            lu.reshift(hi + eta)?;
            factored_width = hi - lo;
        }
    }
    best.iterations = it;
    Ok(best)
}

fn normalize(op: &DiscreteOperator, v: &mut [f64]) -> Result<usize, EigenError> {
    let g = &op.grid;
    let node = g.nearest_interior_node(&vec![0.0; g.dim]).ok_or(EigenError::OriginOutside)?;
    let c = g.coords(node);
    if (c[0] * c[0] + c[1] * c[1]).sqrt() > g.h * (g.dim as f64).sqrt() + 1e-12 {
        return Err(EigenError::OriginOutside);
    }
    let m = (0..g.regimes).filter_map(|k| g.row(node, k)).map(|r| v[r]).fold(f64::INFINITY, f64::min);
    v.iter_mut().for_each(|x| *x /= m);
    Ok(node)
}

fn to_pair(op: &DiscreteOperator, p: Perron) -> Result<EigenPair, EigenError> {
    let mut psi = p.v;
    let node = normalize(op, &mut psi)?;
    Ok(EigenPair {
        lambda: -0.5 * (p.lo + p.hi),
        psi,
        bracket: (-p.hi, -p.lo),
        iterations: p.iterations,
        normalization_node: node,
    })
}

pub fn principal_eigenpair(op: &DiscreteOperator, tol: f64, max_iter: usize) -> Result<EigenPair, EigenError> {
    if op.require_metzler().is_err() {
        return Err(EigenError::MetzlerRequired);
    }
    check_irreducible(op)?;
    let p = perron(op, vec![1.0; op.n()], tol, max_iter)?;
    let converged = p.converged;
    let pair = to_pair(op, p)?;
    if converged {
        Ok(pair)
    } else {
        Err(EigenError::MaxIterExceeded {
            iterations: pair.iterations,
            lo: pair.bracket.0,
            hi: pair.bracket.1,
            best: Box::new(pair),
        })
    }
}

/// Principal eigenpair, accepting the best available pair when the iteration
/// stalls at a bracket above `tol` (rounding floor on fine grids).
pub fn principal_eigenpair_lenient(op: &DiscreteOperator, tol: f64) -> Result<EigenPair, EigenError> {
    match principal_eigenpair(op, tol, DEFAULT_MAX_ITER) {
        Err(EigenError::MaxIterExceeded { best, .. }) => Ok(*best),
        r => r,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub passed: bool,
}

/// Restarts the iteration from random positive vectors and measures the
/// largest sup-norm deviation from `pair.psi` after renormalization.
pub fn uniqueness_probe(
    op: &DiscreteOperator,
    pair: &EigenPair,
    trials: usize,
    seed: u64,
) -> Result<UniquenessReport, EigenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = pair.psi.iter().fold(0.0f64, |m, x| m.max(*x));
    let mut dev: f64 = 0.0;
    for _ in 0..trials {
        let v0: Vec<f64> = (0..op.n()).map(|_| rng.random_range(0.1..1.0)).collect();
        let tol = (pair.width() / (1.0 + pair.lambda.abs())).max(DEFAULT_TOL);
        let p = perron(op, v0, tol, DEFAULT_MAX_ITER)?;
        let mut v = p.v;
        normalize(op, &mut v)?;
        let d = v.iter().zip(&pair.psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        dev = dev.max(d);
    }
    Ok(UniquenessReport { trials, max_deviation: dev, passed: dev <= 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{assemble, build_grid};
    use crate::model::{Oracle, ProblemSpec, RegionSpec, Shape, Window};
    use std::f64::consts::PI;

    fn interval_op(regimes: usize, h: f64, rate: f64) -> DiscreteOperator {
        let mut spec = ProblemSpec::new(1, regimes, Window::Ball { radius: 2.0 });
        for i in 0..regimes {
            for j in 0..regimes {
                if i != j {
                    spec = spec.with_rate(i, j, Oracle::Const(rate));
                }
            }
        }
        let g = build_grid(&spec, &RegionSpec::all(Shape::interval(-1.0, 1.0), regimes), h).unwrap();
        assemble(&spec, &g, true).unwrap()
    }

    #[test]
    fn laplacian_on_interval() {
        let op = interval_op(1, 0.01, 0.0);
        let p = principal_eigenpair(&op, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((p.lambda - PI * PI / 4.0).abs() / (PI * PI / 4.0) < 1e-3);
        assert!(p.bracket.0 <= p.lambda && p.lambda <= p.bracket.1);
        assert!(p.psi.iter().all(|v| *v > 0.0));
        // the discrete eigenvalue of the three-point Laplacian is known in closed form
        let n = op.n() as f64 + 1.0;
        let exact = 4.0 / (0.01f64 * 0.01) * (PI / (2.0 * n)).sin().powi(2);
        assert!(p.bracket.0 <= exact && exact <= p.bracket.1, "{exact} {:?}", p.bracket);
    }

    #[test]
    fn shift_moves_lambda_exactly() {
        let op = interval_op(1, 0.05, 0.0);
        let a = principal_eigenpair(&op, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let b = principal_eigenpair(&op.shifted(0.5), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((a.lambda - 0.5 - b.lambda).abs() < 2e-10 * (1.0 + a.lambda.abs()));
    }

    #[test]
    fn symmetric_coupling_keeps_lambda() {
        let one = principal_eigenpair(&interval_op(1, 0.05, 0.0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let op = interval_op(2, 0.05, 1.0);
        let two = principal_eigenpair(&op, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((one.lambda - two.lambda).abs() <= one.width() + two.width());
        for r in (0..op.n()).step_by(2) {
            assert!((two.psi[r] - two.psi[r + 1]).abs() < 1e-8);
        }
    }

    #[test]
    fn uncoupled_regimes_are_reducible() {
        let op = interval_op(2, 0.1, 0.0);
        assert!(matches!(
            principal_eigenpair(&op, DEFAULT_TOL, DEFAULT_MAX_ITER),
            Err(EigenError::NotIrreducible { .. })
        ));
    }

    #[test]
    fn restarts_agree() {
        let op = interval_op(2, 0.05, 1.0);
        let p = principal_eigenpair(&op, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let rep = uniqueness_probe(&op, &p, 5, 7).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn normalized_at_origin() {
        let op = interval_op(2, 0.05, 1.0);
        let p = principal_eigenpair(&op, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let g = &op.grid;
        let m = (0..2).map(|k| p.psi[g.row(p.normalization_node, k).unwrap()]).fold(f64::INFINITY, f64::min);
        assert_eq!(m, 1.0);
    }
}
