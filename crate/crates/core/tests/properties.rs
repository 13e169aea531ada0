mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use coopeig::discretize::{assemble_shared, build_grid, solve_dirichlet, DiscreteOperator};
use coopeig::eigen::{collatz_wielandt, principal_eigenpair, DEFAULT_MAX_ITER};
use coopeig::exprlang::{compile, parse};
use coopeig::model::ProblemSpec;
use common::{dense_lambda, random_problem, unit_region};

fn small_operator(seed: u64, dim: usize, regimes: usize) -> (ProblemSpec, DiscreteOperator) {
    let spec = random_problem(seed, dim, regimes);
    let h = if dim == 1 { 0.05 } else { 0.25 };
    let grid = build_grid(&spec, &unit_region(dim, regimes, 1.0), h).unwrap();
    let op = assemble_shared(&spec, Arc::new(grid), true).unwrap();
    (spec, op)
}

fn expr() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (0u32..100).prop_map(|v| format!("{}", v as f64 / 4.0)),
        Just("x1".to_string()),
        Just("x2".to_string()),
        Just("k".to_string()),
        Just("p".to_string()),
    ];
    leaf.prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone(), prop::sample::select(vec!["+", "-", "*", "/"]))
                .prop_map(|(a, b, op)| format!("({a}) {op} ({b})")),
            inner.clone().prop_map(|a| format!("-({a})")),
            (inner.clone(), 0u32..4).prop_map(|(a, e)| format!("({a})^{e}")),
            (inner.clone(), prop::sample::select(vec!["sin", "cos", "exp", "tanh", "abs", "sign"]))
                .prop_map(|(a, f)| format!("{f}({a})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("max({a}, {b})")),
            (inner.clone(), inner).prop_map(|(a, b)| format!("ind({a} < {b})")),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn printing_then_parsing_is_stable(text in expr(), x1 in -2.0f64..2.0, x2 in -2.0f64..2.0, k in 1usize..3) {
        let e = parse(&text).unwrap();
        let printed = e.to_string();
        let again = parse(&printed).unwrap();
        prop_assert_eq!(&printed, &again.to_string());
        let params = BTreeMap::from([("p".to_string(), 0.75)]);
        let a = compile(&text, 2, &params).unwrap().eval(&[x1, x2], k);
        let b = compile(&printed, 2, &params).unwrap().eval(&[x1, x2], k);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!(a == b || (a.is_nan() && b.is_nan()), "{} vs {}", a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn shift_moves_apply_linearly(seed in 0u64..1000, kappa in -3.0f64..3.0) {
        let (_, op) = small_operator(seed, 1, 2);
        let u: Vec<f64> = (0..op.n()).map(|r| 1.0 + (r as f64).sin()).collect();
        let a = op.apply(&u, None);
        let b = op.shifted(kappa).apply(&u, None);
        for r in 0..op.n() {
            prop_assert!((b[r] - a[r] - kappa * u[r]).abs() <= 1e-12 * (1.0 + a[r].abs()));
        }
    }

    #[test]
    fn collatz_wielandt_brackets_dense_eigenvalue(seed in 0u64..1000, dim in 1usize..3, regimes in 1usize..4) {
        let (_, op) = small_operator(seed, dim, regimes);
        let (dense, eps) = dense_lambda(&op);
        let v: Vec<f64> = (0..op.n()).map(|r| 1.5 + (0.37 * r as f64).cos()).collect();
        let (lo, hi) = collatz_wielandt(&op, &v);
        // bounds are on the Perron root, i.e. -lambda
        prop_assert!(lo <= -dense + eps && -dense - eps <= hi, "{} not in [{}, {}]", -dense, lo, hi);
        let p = principal_eigenpair(&op, 1e-10, DEFAULT_MAX_ITER).unwrap();
        prop_assert!(p.bracket.0 - eps <= dense && dense <= p.bracket.1 + eps);
    }

    #[test]
    fn collatz_wielandt_ignores_scale(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let (_, op) = small_operator(seed, 1, 2);
        let v: Vec<f64> = (0..op.n()).map(|r| 1.0 + 0.5 * (r as f64).sin()).collect();
        let w: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let (a, b) = collatz_wielandt(&op, &v);
        let (c, d) = collatz_wielandt(&op, &w);
        prop_assert!((a - c).abs() <= 1e-9 * (1.0 + a.abs()) && (b - d).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn maximum_principle(seed in 0u64..1000, dim in 1usize..3, at in 0usize..1000) {
        // with λ_D > 0 a nonnegative nonzero source gives a positive solution
        let (_, op) = small_operator(seed, dim, 2);
        let p = principal_eigenpair(&op, 1e-10, DEFAULT_MAX_ITER).unwrap();
        let op = op.shifted(p.lambda - 1.0);
        let mut f = vec![0.0; op.n()];
        f[at % op.n()] = 1.0;
        let u = solve_dirichlet(&op, &vec![0.0; op.grid.n_slots()], &f).unwrap();
        prop_assert!(u.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn eigenvector_is_positive_and_normalized(seed in 0u64..1000, regimes in 1usize..4) {
        let (_, op) = small_operator(seed, 1, regimes);
        let p = principal_eigenpair(&op, 1e-10, DEFAULT_MAX_ITER).unwrap();
        prop_assert!(p.psi.iter().all(|v| *v > 0.0));
        let g = &op.grid;
        let m = (0..regimes).filter_map(|k| g.row(p.normalization_node, k)).map(|r| p.psi[r]).fold(f64::INFINITY, f64::min);
        prop_assert!((m - 1.0).abs() < 1e-14);
    }
}
