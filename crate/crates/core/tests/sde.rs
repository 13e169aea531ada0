use std::sync::Arc;

use coopeig::discretize::build_grid;
use coopeig::model::{Oracle, ProblemSpec, RegionSpec, Shape, Window};
use coopeig::sde::{
    feynman_kac_check, hitting_representation_check, mean_se, risk_sensitive_cost, simulate, twisted_simulate, Dynamics,
    Functional, Outcome, SdeError, SimConfig,
};
use coopeig::spectrum::lambda_star;
use coopeig::twist::{twist, LatticeField, TwistedProblem};

fn ou(regimes: usize) -> ProblemSpec {
    let mut s = ProblemSpec::new(1, regimes, Window::Ball { radius: 20.0 });
    for k in 0..regimes {
        s = s.with_drift(k, vec![Oracle::func(|x| -x[0])]);
    }
    s
}

fn twisted_with(spec: &ProblemSpec, radius: f64, h: f64, psi: impl Fn(&[f64], usize) -> f64) -> TwistedProblem {
    let g = Arc::new(build_grid(spec, &RegionSpec::ball(1, radius, spec.regimes), h).unwrap());
    let rows = g.sample_rows(psi);
    twist(spec, &rows, 0.0, &g).unwrap()
}

fn within(a: (f64, f64), target: f64) -> bool {
    (a.0 - target).abs() <= 3.0 * a.1
}

#[test]
fn symmetric_switching_spends_half_the_time_in_each_regime() {
    let spec = ProblemSpec::new(1, 2, Window::Ball { radius: 50.0 })
        .with_rate(0, 1, Oracle::Const(1.0))
        .with_rate(1, 0, Oracle::Const(1.0));
    let cfg = SimConfig::new(0.01, 50.0, 2000, 5);
    let b = simulate(&Dynamics::base(&spec), &cfg, &Functional::Terminal { t: 50.0 }, 0.0, &[0.0], 0).unwrap();
    let frac: Vec<f64> = b.records.iter().map(|r| r.time_in_regime[0] / 50.0).collect();
    let est = mean_se(&frac);
    assert!(within(est, 0.5), "{est:?}");
}

fn ex1_1() -> ProblemSpec {
    ProblemSpec::new(1, 2, Window::Ball { radius: 30.0 })
        .with_drift(0, vec![Oracle::func(|x| x[0].signum())])
        .with_drift(1, vec![Oracle::func(|x| -x[0])])
        .with_rate(0, 1, Oracle::func(|x| if x[0].abs() > 2.0 { 0.5 } else { 0.0 }))
}

#[test]
fn reducible_example_hits_only_the_full_ball() {
    let spec = ex1_1();
    let one = RegionSpec { shape: coopeig::model::RegionShape::Uniform(Shape::interval(-1.0, 1.0)), regime_set: vec![0] };
    let both = RegionSpec::all(Shape::interval(-1.0, 1.0), 2);
    let mut fractions = vec![];
    for t_max in [25.0, 50.0] {
        let cfg = SimConfig::new(0.01, t_max, 2000, 9);
        let b = simulate(&Dynamics::base(&spec), &cfg, &Functional::Hit { target: one.clone() }, 0.0, &[3.0], 0).unwrap();
        fractions.push(b.hit as f64 / 2000.0);
    }
    assert!(fractions.iter().all(|f| *f < 0.5), "{fractions:?}");
    assert!((fractions[1] - fractions[0]).abs() < 0.05, "{fractions:?}");
    let cfg = SimConfig::new(0.01, 50.0, 2000, 9);
    let b = simulate(&Dynamics::base(&spec), &cfg, &Functional::Hit { target: both }, 0.0, &[3.0], 0).unwrap();
    assert!(b.hit as f64 / 2000.0 > 0.99, "{}", b.hit);
}

#[test]
fn constant_twist_has_the_same_law() {
    let spec = ou(1);
    let tp = twisted_with(&spec, 15.0, 0.05, |_, _| 2.0);
    let cfg = SimConfig::new(0.01, 5.0, 20_000, 21);
    let f = Functional::Terminal { t: 1.0 };
    let a = simulate(&Dynamics::base(&spec), &cfg, &f, 0.0, &[1.0], 0).unwrap();
    let b = twisted_simulate(&tp, &SimConfig { seed: 22, ..cfg.clone() }, &f, &[1.0], 0).unwrap();
    let xa: Vec<f64> = a.records.iter().map(|r| r.x[0]).collect();
    let xb: Vec<f64> = b.records.iter().map(|r| r.x[0]).collect();
    let (ma, sa) = mean_se(&xa);
    let (mb, sb) = mean_se(&xb);
    assert!((ma - mb).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(), "{ma} {mb}");
    // mean reversion at rate 1
    assert!(within((mb, sb), (-1.0f64).exp()), "{mb} {sb}");
}

#[test]
fn doubled_psi_quadruples_the_jump_ratio() {
    let spec = ProblemSpec::new(1, 2, Window::Ball { radius: 20.0 })
        .with_drift(0, vec![Oracle::func(|x| -x[0])])
        .with_drift(1, vec![Oracle::func(|x| -x[0])])
        .with_rate(0, 1, Oracle::Const(1.0))
        .with_rate(1, 0, Oracle::Const(1.0));
    let tp = twisted_with(&spec, 15.0, 0.05, |_, k| if k == 0 { 1.0 } else { 2.0 });
    let cfg = SimConfig::new(0.005, 20.0, 400, 4);
    let b = twisted_simulate(&tp, &cfg, &Functional::Terminal { t: 20.0 }, &[0.0], 0).unwrap();
    // empirical rates: jumps out of a regime over the time spent in it
    let (mut j01, mut j10, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0);
    for r in &b.records {
        j01 += r.jumps[1] as f64;
        j10 += r.jumps[2] as f64;
        t0 += r.time_in_regime[0];
        t1 += r.time_in_regime[1];
    }
    let ratio = (j01 / t0) / (j10 / t1);
    // Poisson counts: relative error of the ratio ≈ sqrt(1/j01 + 1/j10)
    let se = ratio * (1.0 / j01 + 1.0 / j10).sqrt();
    assert!((ratio - 4.0).abs() <= 3.0 * se, "{ratio} ± {se}");
}

#[test]
fn risk_sensitive_cost_of_constants() {
    let spec = ou(1).with_potential(0, Oracle::Const(0.7));
    let cfg = SimConfig::new(0.01, 5.0, 200, 1);
    let r = risk_sensitive_cost(&spec, &cfg, &[0.0], 0, &[1.0, 2.0]).unwrap();
    for e in &r {
        assert!((e.estimate - 0.7).abs() < 1e-12, "{e:?}");
    }
    let r = risk_sensitive_cost(&ou(1), &cfg, &[0.0], 0, &[1.0]).unwrap();
    assert_eq!(r[0].estimate, 0.0);
}

#[test]
fn risk_sensitive_trend_against_both_signs() {
    // the trend is recorded against ±λ*, which of the two it follows is not asserted
    let spec = ou(1).with_potential(0, Oracle::func(|x| 0.5 * (1.0 - (10.0 * (x[0].abs() - 1.0)).tanh())));
    let pl = lambda_star(&spec, &[4.0, 8.0], 0.02, 1e-10).unwrap();
    let cfg = SimConfig::new(0.01, 10.0, 2000, 8);
    let r = risk_sensitive_cost(&spec, &cfg, &[0.0], 0, &[2.0, 8.0]).unwrap();
    let last = r.last().unwrap();
    let (to_minus, to_plus) = ((last.estimate + pl.lambda_star).abs(), (last.estimate - pl.lambda_star).abs());
    println!("risk cost {:.4} ± {:.4}; |·+λ*| = {to_minus:.4}, |·-λ*| = {to_plus:.4}", last.estimate, last.se);
    assert!(last.estimate.is_finite() && last.max_weight_fraction < 0.99);
}

#[test]
fn zero_test_function_gives_zero_sides() {
    let spec = ou(1);
    let tp = twisted_with(&spec, 10.0, 0.05, |x, _| 2.0 + x[0].cos());
    let cfg = SimConfig::new(0.01, 5.0, 500, 2);
    let r = feynman_kac_check(&spec, &tp, &[Oracle::Const(0.0)], 1.0, &cfg, &[0.2], 0, false).unwrap();
    assert_eq!((r.lhs.value, r.rhs.value), (0.0, 0.0));
}

#[test]
fn feynman_kac_with_unit_psi() {
    let spec = ou(1);
    let tp = twisted_with(&spec, 10.0, 0.05, |_, _| 1.0);
    let g = [Oracle::func(|x| (1.0 - x[0] * x[0] / 4.0).max(0.0))];
    let cfg = SimConfig::new(0.01, 5.0, 20_000, 3);
    let r = feynman_kac_check(&spec, &tp, &g, 1.0, &cfg, &[0.5], 0, false).unwrap();
    assert!(r.z.abs() <= 3.0, "{r:?}");
}

#[test]
fn hitting_under_recurrence_is_certain() {
    let spec = ou(1);
    let pl = lambda_star(&spec, &[4.0, 8.0], 0.05, 1e-10).unwrap();
    let field = LatticeField::from_rows(pl.grid(), &vec![1.0; pl.grid().n_rows()]);
    let cfg = SimConfig::new(0.01, 50.0, 2000, 6);
    let r = hitting_representation_check(&spec, &field, 0.0, &RegionSpec::ball(1, 1.0, 1), &cfg, &[2.0], 0).unwrap();
    assert!((r.estimate.value - 1.0).abs() <= 3.0 * r.estimate.se.max(1e-12), "{r:?}");
    assert!(r.pass);
}

#[test]
fn hitting_fails_for_transient_drift() {
    let spec = ProblemSpec::new(1, 1, Window::Ball { radius: 20.0 })
        .with_drift(0, vec![Oracle::func(|x| 2.0 * (10.0 * x[0]).tanh())]);
    let g = Arc::new(build_grid(&spec, &RegionSpec::ball(1, 15.0, 1), 0.05).unwrap());
    let field = LatticeField::from_rows(&g, &vec![1.0; g.n_rows()]);
    let cfg = SimConfig::new(0.01, 50.0, 2000, 6);
    match hitting_representation_check(&spec, &field, 0.0, &RegionSpec::ball(1, 1.0, 1), &cfg, &[2.0], 0) {
        Err(SdeError::CensoringTooHigh { fraction }) => assert!(fraction > 0.01),
        Ok(r) => assert!(!r.pass, "{r:?}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn exploded_paths_are_flagged() {
    let spec = ProblemSpec::new(1, 1, Window::Ball { radius: 20.0 }).with_drift(0, vec![Oracle::func(|x| x[0] * x[0])]);
    let mut cfg = SimConfig::new(0.01, 5.0, 50, 2);
    cfg.cap = 10.0;
    let b = simulate(&Dynamics::base(&spec), &cfg, &Functional::Terminal { t: 5.0 }, 0.0, &[2.0], 0).unwrap();
    assert!(b.exploded > 0);
    assert!(b.records.iter().filter(|r| r.outcome == Outcome::Exploded).all(|r| r.t < 5.0));
}
