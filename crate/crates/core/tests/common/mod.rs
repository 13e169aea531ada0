#![allow(dead_code)]

use coopeig::discretize::DiscreteOperator;
use coopeig::model::{Oracle, ProblemSpec, RegionSpec, Shape, Window};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Principal eigenvalue of a dense copy (`A Ψ = -λ Ψ`) and an error bound.
/// The Schur estimate is polished by dense inverse iteration for the right
/// and left eigenvectors; the bound is the first-order residual estimate
/// plus `n ε ‖A‖∞`.
pub fn dense_lambda(op: &DiscreteOperator) -> (f64, f64) {
    let d = op.to_dense();
    let n = d.len();
    let a = DMatrix::from_fn(n, n, |i, j| d[i][j]);
    let norm = d.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let root = a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let sigma = root + 1e-6 * (1.0 + root.abs());
    let shifted = DMatrix::from_fn(n, n, |i, j| if i == j { sigma - d[i][j] } else { -d[i][j] });
    let polish = |m: &DMatrix<f64>| {
        let lu = m.clone().lu();
        let mut v = DVector::from_element(n, 1.0);
        for _ in 0..6 {
            v = lu.solve(&v).expect("nonsingular shift");
            let s = v.norm();
            v /= s;
        }
        v
    };
    let v = polish(&shifted);
    let u = polish(&shifted.transpose());
    let av = &a * &v;
    let mu = u.dot(&av) / u.dot(&v);
    let resid = (&av - &v * mu).norm();
    let bound = resid / u.dot(&v).abs() + n as f64 * f64::EPSILON * norm;
    (-mu, bound)
}

fn wave(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, f64) {
    ((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0.0..6.3))
}

fn eval_wave(w: &(Vec<f64>, f64), x: &[f64]) -> f64 {
    (w.0.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w.1).sin()
}

/// Smooth random cooperative problem with every rate positive.
pub fn random_problem(seed: u64, dim: usize, regimes: usize) -> ProblemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ProblemSpec::new(dim, regimes, Window::Ball { radius: 3.0 });
    for k in 0..regimes {
        let (wa, amp_a) = (wave(&mut rng, dim), rng.random_range(0.0..0.4));
        let base = rng.random_range(0.5..1.5);
        let a = Oracle::func(move |x| base * (1.0 + amp_a * eval_wave(&wa, x)));
        if dim == 2 {
            let off = rng.random_range(-0.15..0.15) * base;
            spec = spec.with_diffusion(k, vec![a.clone(), Oracle::Const(off), Oracle::Const(off), a]);
        } else {
            spec = spec.with_isotropic(k, a);
        }
        let drift: Vec<Oracle> = (0..dim)
            .map(|_| {
                let (w, amp) = (wave(&mut rng, dim), rng.random_range(-1.0..1.0));
                Oracle::func(move |x| amp * eval_wave(&w, x))
            })
            .collect();
        spec = spec.with_drift(k, drift);
        let (wc, amp_c, mean_c) = (wave(&mut rng, dim), rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0));
        spec = spec.with_potential(k, Oracle::func(move |x| mean_c + amp_c * eval_wave(&wc, x)));
        for j in 0..regimes {
            if j != k {
                let (w, r) = (wave(&mut rng, dim), rng.random_range(0.2..2.0));
                spec = spec.with_rate(k, j, Oracle::func(move |x| r * (1.0 + 0.5 * eval_wave(&w, x))));
            }
        }
    }
    spec
}

/// Unit ball (interval in 1D) over all regimes.
pub fn unit_region(dim: usize, regimes: usize, radius: f64) -> RegionSpec {
    RegionSpec::all(Shape::centered_ball(dim, radius), regimes)
}

/// Nonnegative bump centred at a random point of the unit ball.
pub fn random_bump(seed: u64, dim: usize, regimes: usize) -> Vec<Oracle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    (0..regimes)
        .map(|_| {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.4..0.4)).collect();
            let (r, amp) = (rng.random_range(0.3..0.6), rng.random_range(0.5..2.0));
            Oracle::func(move |x| {
                let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                amp * (1.0 - d2 / (r * r)).max(0.0).powi(2)
            })
        })
        .collect()
}
