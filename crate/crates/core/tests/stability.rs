use coopeig::model::{Oracle, ProblemSpec, RegionSpec, Shape, Window};
use coopeig::sde::{simulate, Dynamics, Functional, SimConfig};
use coopeig::spectrum::{lambda_star, PerturbationSpec};
use coopeig::stability::{
    exp_stability_test, lyapunov_construct, recurrence_test, regularity_test, Classification, GeneratorSource,
    RecurrenceOptions, RegularityOptions, StabilityError,
};

const RADII: [f64; 3] = [4.0, 8.0, 16.0];

fn ou(scale: f64) -> ProblemSpec {
    ProblemSpec::new(1, 1, Window::Ball { radius: 40.0 })
        .with_isotropic(0, Oracle::Const(scale))
        .with_drift(0, vec![Oracle::func(move |x| -scale * x[0])])
}

fn outward() -> ProblemSpec {
    ProblemSpec::new(1, 1, Window::Ball { radius: 40.0 }).with_drift(0, vec![Oracle::func(|x| 2.0 * (10.0 * x[0]).tanh())])
}

fn coupled(rate: f64) -> ProblemSpec {
    ProblemSpec::new(1, 2, Window::Ball { radius: 40.0 })
        .with_rate(0, 1, Oracle::Const(rate))
        .with_rate(1, 0, Oracle::Const(rate))
}

fn hit_fraction(spec: &ProblemSpec, x0: f64, t_max: f64) -> f64 {
    let cfg = SimConfig::new(0.01, t_max, 4000, 13);
    let target = RegionSpec::ball(1, 1.0, spec.regimes);
    let b = simulate(&Dynamics::base(spec), &cfg, &Functional::Hit { target }, 0.0, &[x0], 0).unwrap();
    b.hit as f64 / cfg.n_paths as f64
}

#[test]
fn coupled_laplacian_is_regular() {
    let src = GeneratorSource::Spec { spec: coupled(1.0), h: 0.05 };
    let v = regularity_test(&src, 1.0, &RADII, &RegularityOptions::default()).unwrap();
    assert_eq!(v.classification, Classification::Regular, "{v:?}");
}

#[test]
fn ou_paths_return() {
    assert!(hit_fraction(&ou(1.0), 3.0, 50.0) >= 0.999);
}

#[test]
fn outward_drift_matches_scale_function() {
    // P(hit [-1, 1] from x) = e^{-2(x-1)} for the drift 2 sign(x)
    let src = GeneratorSource::Spec { spec: outward(), h: 0.02 };
    for inner in [2.0, 3.0] {
        let opts = RecurrenceOptions { inner_radius: Some(inner), ..Default::default() };
        let r = recurrence_test(&src, &RegionSpec::ball(1, 1.0, 1), &RADII, &opts).unwrap();
        assert_eq!(r.verdict.classification, Classification::Transient);
        let exact = (-2.0 * (inner - 1.0)).exp();
        let got = r.verdict.evidence[2].1;
        assert!((got / exact - 1.0).abs() < 0.1, "inner {inner}: {got} vs {exact}");
    }
    let f = hit_fraction(&outward(), 2.0, 50.0);
    assert!(f < 0.9, "{f}");
    assert!((f - (-2.0f64).exp()).abs() < 0.04, "{f}");
}

#[test]
fn time_change_keeps_hitting_probabilities() {
    let target = RegionSpec::ball(1, 1.0, 1);
    let a = recurrence_test(&GeneratorSource::Spec { spec: ou(1.0), h: 0.05 }, &target, &RADII, &Default::default()).unwrap();
    let b = recurrence_test(&GeneratorSource::Spec { spec: ou(3.0), h: 0.05 }, &target, &RADII, &Default::default()).unwrap();
    assert_eq!(a.verdict.classification, b.verdict.classification);
    for (x, y) in a.verdict.evidence.iter().zip(&b.verdict.evidence) {
        assert!((x.1 - y.1).abs() < 1e-10, "{x:?} {y:?}");
    }
}

fn certificate(spec: &ProblemSpec, d1: f64, k: Shape) -> Result<coopeig::stability::LyapunovCertificate, StabilityError> {
    lyapunov_construct(
        spec,
        &RegionSpec::all(Shape::interval(-2.0, 2.0), spec.regimes),
        &RegionSpec::all(Shape::interval(-d1, d1), spec.regimes),
        &RegionSpec::all(k, spec.regimes),
        0.05,
        1e-10,
    )
}

#[test]
fn smaller_compact_set_gives_smaller_gap() {
    // with D1 = D the gap stays positive however small K is
    let wide = certificate(&coupled(1.0), 2.0, Shape::interval(-1.0, 1.0)).unwrap();
    let cell = certificate(&coupled(1.0), 2.0, Shape::interval(-0.01, 0.01)).unwrap();
    assert!(cell.kappa1 > 0.0 && cell.kappa1 < wide.kappa1, "{} {}", cell.kappa1, wide.kappa1);
    assert!(cell.valid, "{} > {}", cell.residual, cell.resid_tol);
}

#[test]
fn ou_certificate_is_valid() {
    let c = certificate(&ou(1.0), 3.0, Shape::interval(-1.0, 1.0)).unwrap();
    assert!(c.valid && c.kappa1 > 0.0, "{} > {}", c.residual, c.resid_tol);
    assert!(c.v.iter().all(|v| *v >= 1.0));
}

#[test]
fn free_laplacian_is_not_exp_stable() {
    let spec = ProblemSpec::new(1, 1, Window::Ball { radius: 40.0 });
    let pl = lambda_star(&spec, &RADII, 0.1, 1e-10).unwrap();
    let bump = Oracle::func(|x| (1.0 - x[0] * x[0]).max(0.0));
    let pert = PerturbationSpec { bump: vec![bump], support_radius: 1.0, ts: vec![-1.0, 0.0, 1.0] };
    match exp_stability_test(&spec, &pl, &pert) {
        Err(StabilityError::GapNonpositive { .. }) => {}
        Ok(r) => assert_eq!(r.verdict.classification, Classification::Inconclusive),
        Err(e) => panic!("{e}"),
    }
}
