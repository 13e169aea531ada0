//! One runner per task kind. Runners record results as they go so a
//! numerical failure still leaves a partial report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde_json::{json, Value};

use super::config::{oracles, BumpCfg, ExprCfg, NumericsCfg, OutputCfg, RegionCfg, StartCfg, TaskCfg, TwistedDiagCfg};
use super::report::{est, exact, exact_list, header, lambdas_csv, num, row_x, Report};
use crate::discretize::{assemble_shared, build_grid, DiscreteOperator};
use crate::eigen::{principal_eigenpair, uniqueness_probe, EigenPair};
use crate::model::{norm, ProblemSpec, RegionSpec};
use crate::sde::{
    feynman_kac_check, hitting_representation_check, risk_sensitive_cost, simulate, Dynamics, Functional, Outcome,
    SimConfig,
};
use crate::spectrum::{
    ball_operator, eigenfunction_at, lambda_star_with, perturbation_sweep, profile, PrincipalLimit, DEFAULT_INNER_RADIUS,
};
use crate::stability::{
    exp_stability_test, recurrence_test, regularity_test, twisted_radii, Classification, GeneratorSource,
    RecurrenceOptions, RegularityOptions, StabilityError, Verdict,
};
use crate::twist::{doob_transform, product_identity_residual, twist, LatticeField};

pub struct Ctx<'a> {
    pub spec: &'a ProblemSpec,
    pub num: &'a NumericsCfg,
    pub out: &'a OutputCfg,
    pub rep: &'a mut Report,
}

type TaskResult = Result<(), String>;

fn io(e: std::io::Error) -> String {
    format!("cli::run: writing output: {e}")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Ctx<'_> {
    fn sim(&self) -> SimConfig {
        let n = self.num;
        SimConfig {
            dt: n.dt,
            t_max: n.t_max,
            n_paths: n.n_paths,
            seed: n.seed,
            cap: n.cap,
            substeps: n.substeps,
            dump_paths: self.out.dump_paths,
        }
    }

    fn region(&self, r: &RegionCfg) -> Result<RegionSpec, String> {
        r.to_region(self.spec.dim, self.spec.regimes)
    }

    fn pair_json(&self, p: &EigenPair) -> Value {
        json!({
            "lambda": num(p.lambda, p.width()),
            "bracket": [num(p.bracket.0, 0.0), num(p.bracket.1, 0.0)],
            "iterations": p.iterations,
        })
    }

    fn matrix(&mut self, name: &str, op: &DiscreteOperator) -> TaskResult {
        if self.out.matrix_market {
            let mut buf = vec![];
            op.write_matrix_market(&mut buf).map_err(io)?;
            self.rep.write_file(name, &buf).map_err(io)?;
        }
        Ok(())
    }

    fn limit_json(&mut self, pl: &PrincipalLimit, key: &str) -> TaskResult {
        let lambdas: Vec<Value> = pl
            .radii
            .iter()
            .zip(&pl.lambdas)
            .zip(&pl.brackets)
            .map(|((r, l), b)| {
                json!({
                    "radius": exact(*r, "numerics.radii"),
                    "lambda": num(*l, b.1 - b.0),
                    "bracket": [num(b.0, 0.0), num(b.1, 0.0)],
                })
            })
            .collect();
        let strictly = pl.lambdas.windows(2).all(|w| w[1] < w[0]);
        self.rep.set(
            key,
            json!({
                "lambdas": lambdas,
                "strictly_decreasing": strictly,
                "lambda_star": num(pl.lambda_star, pl.uncertainty),
                "extrapolated": pl.extrapolated,
                "converged": pl.converged,
                "tol": exact(pl.tol, "numerics.tol"),
                "h": exact(pl.h, "numerics.h"),
            }),
        );
        if self.out.csv {
            self.rep
                .write_file(&format!("{key}_lambdas.csv"), lambdas_csv(&pl.radii, &pl.lambdas, &pl.brackets).as_bytes())
                .map_err(io)?;
            self.rep.profile_csv(&format!("{key}_psi_window.csv"), self.spec.dim, &pl.window_profile).map_err(io)?;
        }
        Ok(())
    }
}

fn verdict_json(v: &Verdict, source: &str) -> Value {
    json!({
        "classification": v.classification.to_string(),
        "evidence": v.evidence.iter().map(|(r, d)| json!({"radius": exact(*r, source), "value": num(*d, 0.0)})).collect::<Vec<_>>(),
        "thresholds": v.thresholds.iter().map(|(k, t)| json!({"name": k, "value": *t, "tol": 0.0})).collect::<Vec<_>>(),
    })
}

/// Recurrence verdicts are reported as recurrent / not-recurrent, keeping
/// the finer classification alongside.
fn recurrence_label(c: Classification) -> &'static str {
    match c {
        Classification::Recurrent => "recurrent",
        Classification::Transient => "not-recurrent",
        _ => "inconclusive",
    }
}

pub fn run_task(task: &TaskCfg, cx: &mut Ctx) -> TaskResult {
    match task {
        TaskCfg::Eig { region, trials } => eig(cx, region, *trials),
        TaskCfg::LambdaStar { inner_radius } => {
            let pl = lambda_star_with(cx.spec, &cx.num.radii, cx.num.h, cx.num.tol, inner_radius.unwrap_or(DEFAULT_INNER_RADIUS))
                .map_err(err)?;
            cx.limit_json(&pl, "lambda_star")?;
            cx.matrix("operator.mtx", &pl.op)
        }
        TaskCfg::Twist { radius, phi, inner_radius } => twist_task(cx, *radius, phi.as_deref(), *inner_radius),
        TaskCfg::Diagnose { c, targets, regularity, exp_stability, twisted } => {
            diagnose(cx, *c, targets, *regularity, exp_stability.as_ref(), twisted.as_ref())
        }
        TaskCfg::Perturb { bump, support_radius, ts } => perturb(cx, bump, *support_radius, ts),
        TaskCfg::Simulate { start, horizon, target } => simulate_task(cx, start, *horizon, target.as_ref()),
        TaskCfg::CheckFk { radius, start, horizon, g, halving } => check_fk(cx, *radius, start, *horizon, g, *halving),
        TaskCfg::CheckHitting { ball, starts, risk_horizons } => check_hitting(cx, *ball, starts, risk_horizons.as_deref()),
    }
}

fn eig(cx: &mut Ctx, region: &RegionCfg, trials: usize) -> TaskResult {
    let reg = cx.region(region)?;
    let grid = Arc::new(build_grid(cx.spec, &reg, cx.num.h).map_err(err)?);
    let op = assemble_shared(cx.spec, grid.clone(), true).map_err(err)?;
    cx.rep.set("rows", json!(op.n()));
    cx.matrix("operator.mtx", &op)?;
    let p = principal_eigenpair(&op, cx.num.tol, cx.num.max_iter).map_err(err)?;
    let pj = cx.pair_json(&p);
    cx.rep.set("eigenpair", pj);
    if trials > 0 {
        let u = uniqueness_probe(&op, &p, trials, cx.num.seed).map_err(err)?;
        cx.rep.set(
            "uniqueness",
            json!({"trials": u.trials, "max_deviation": num(u.max_deviation, 0.0), "passed": u.passed}),
        );
    }
    if cx.out.csv {
        let pts = profile(&grid, &p.psi, f64::INFINITY);
        cx.rep.profile_csv("psi.csv", cx.spec.dim, &pts).map_err(io)?;
    }
    Ok(())
}

fn twist_task(cx: &mut Ctx, radius: f64, phi: Option<&[ExprCfg]>, inner: Option<f64>) -> TaskResult {
    let op = ball_operator(cx.spec, radius, cx.num.h).map_err(err)?;
    let p = crate::eigen::principal_eigenpair_lenient(&op, cx.num.tol).map_err(err)?;
    let pj = cx.pair_json(&p);
    cx.rep.set("eigenpair", pj);
    let grid = op.grid.clone();
    let tp = twist(cx.spec, &p.psi, p.lambda, &grid).map_err(err)?;
    let phi_slots: Vec<f64> = match phi {
        Some(list) => {
            let o = oracles(list, cx.spec.regimes, cx.spec.dim, &BTreeMap::new(), "task.phi")?;
            (0..grid.n_slots())
                .map(|s| {
                    let k = grid.regime_of_slot(s);
                    o[k].try_eval(&grid.x(grid.node_of_slot(s)), k).map_err(|e| format!("cli::twist: evaluating phi: {e}"))
                })
                .collect::<Result<_, _>>()?
        }
        None => grid.sample(|x, k| 2.0 + (x[0] + k as f64).cos()),
    };
    let res = product_identity_residual(cx.spec, &p.psi, p.lambda, &grid, &phi_slots, inner).map_err(err)?;
    cx.rep.set(
        "product_identity_residual",
        json!({"max": num(res.max, 0.0), "mean": num(res.mean, 0.0), "rows": res.rows}),
    );
    if cx.out.csv {
        let d = cx.spec.dim;
        let mut cols = vec!["regime".to_string(), "psi".to_string()];
        cols.extend((1..=d).map(|i| format!("drift_correction{i}")));
        cols.extend((1..=cx.spec.regimes).map(|j| format!("rate_to{j}")));
        let cols: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
        let mut s = header(d, &cols);
        for slot in 0..grid.n_slots() {
            if !tp.window[slot] {
                continue;
            }
            let x = grid.x(grid.node_of_slot(slot));
            row_x(&mut s, &x);
            let _ = write!(s, "{},{:e}", grid.regime_of_slot(slot) + 1, tp.psi[slot]);
            for i in 0..d {
                let _ = write!(s, ",{:e}", tp.drift_correction[slot][i]);
            }
            for r in &tp.twisted_rates[slot] {
                let _ = write!(s, ",{r:e}");
            }
            s.push('\n');
        }
        cx.rep.write_file("twist.csv", s.as_bytes()).map_err(io)?;
    }
    Ok(())
}

fn diagnose(
    cx: &mut Ctx,
    c: f64,
    targets: &[RegionCfg],
    regularity: bool,
    exp: Option<&BumpCfg>,
    twisted: Option<&TwistedDiagCfg>,
) -> TaskResult {
    let src = GeneratorSource::Spec { spec: cx.spec.clone(), h: cx.num.h };
    let radii = cx.num.radii.clone();
    if regularity {
        let v = regularity_test(&src, c, &radii, &RegularityOptions { reg_tol: cx.num.reg_tol, inner_radius: None })
            .map_err(err)?;
        cx.rep.set("regularity", verdict_json(&v, "numerics.radii"));
    }
    let ropts = RecurrenceOptions { hit_tol: cx.num.hit_tol, inner_radius: None };
    let mut rec = vec![];
    for t in targets {
        let reg = cx.region(t)?;
        let r = recurrence_test(&src, &reg, &radii, &ropts).map_err(err)?;
        let mut v = verdict_json(&r.verdict, "numerics.radii");
        v["verdict"] = json!(recurrence_label(r.verdict.classification));
        v["regimes"] = json!(reg.regime_set.iter().map(|k| k + 1).collect::<Vec<_>>());
        v["uniqueness_gap"] =
            json!(r.uniqueness_gap.iter().map(|(rr, g)| json!({"radius": exact(*rr, "numerics.radii"), "value": num(*g, 0.0)})).collect::<Vec<_>>());
        rec.push(v);
        cx.rep.set("recurrence", Value::Array(rec.clone()));
    }
    if exp.is_none() && twisted.is_none() {
        return Ok(());
    }
    let pl = lambda_star_with(cx.spec, &radii, cx.num.h, cx.num.tol, DEFAULT_INNER_RADIUS).map_err(err)?;
    cx.limit_json(&pl, "lambda_star")?;
    if let Some(b) = exp {
        let pert = b.to_pert(cx.spec, vec![])?;
        match exp_stability_test(cx.spec, &pl, &pert) {
            Ok(r) => {
                let mut v = verdict_json(&r.verdict, "numerics.radii");
                v["gap"] = num(r.gap, r.gap_tol);
                v["regularity_of_twisted"] = verdict_json(&r.regularity, "twisted radii");
                v["certificate"] = json!({
                    "kappa0": num(r.certificate.kappa0, 0.0),
                    "kappa1": num(r.certificate.kappa1, 0.0),
                    "residual": num(r.certificate.residual, r.certificate.resid_tol),
                    "valid": r.certificate.valid,
                    "rows_checked": r.certificate.rows_checked,
                });
                cx.rep.set("exp_stability", v);
            }
            Err(StabilityError::GapNonpositive { gap, gap_tol, .. }) => {
                cx.rep.set(
                    "exp_stability",
                    json!({"classification": "inconclusive", "gap": num(gap, gap_tol), "reason": "eigenvalue gap not above its tolerance"}),
                );
            }
            Err(e) => return Err(err(e)),
        }
    }
    if let Some(tw) = twisted {
        let target = cx.region(&tw.target)?;
        let rmax = *radii.last().expect("radii");
        let tr = twisted_radii(rmax, cx.num.h);
        let doob = doob_transform(&pl.op, &pl.psi_star);
        let r = recurrence_test(&GeneratorSource::Operator(Arc::new(doob)), &target, &tr, &ropts).map_err(err)?;
        let mut v = verdict_json(&r.verdict, "twisted radii");
        v["verdict"] = json!(recurrence_label(r.verdict.classification));
        v["lambda"] = num(pl.lambda_star, pl.uncertainty);
        let mut out = json!({ "at_lambda_star": v });
        cx.rep.set("twisted_recurrence", out.clone());
        if let Some(below) = tw.below {
            let lam = pl.lambda_star - below;
            let ef = eigenfunction_at(cx.spec, lam, &radii, cx.num.h).map_err(err)?;
            let doob = doob_transform(&ef.op, &ef.psi);
            let r = recurrence_test(&GeneratorSource::Operator(Arc::new(doob)), &target, &tr, &ropts).map_err(err)?;
            let mut v = verdict_json(&r.verdict, "twisted radii");
            v["verdict"] = json!(recurrence_label(r.verdict.classification));
            v["lambda"] = num(lam, pl.uncertainty);
            out["below_lambda_star"] = v;
            cx.rep.set("twisted_recurrence", out);
        }
    }
    Ok(())
}

fn perturb(cx: &mut Ctx, bump: &[ExprCfg], support_radius: f64, ts: &[f64]) -> TaskResult {
    let b = BumpCfg { bump: bump.to_vec(), support_radius };
    let pert = b.to_pert(cx.spec, ts.to_vec())?;
    let r = perturbation_sweep(cx.spec, &pert, &cx.num.radii, cx.num.h, cx.num.tol).map_err(err)?;
    let rows: Vec<Value> = r
        .ts
        .iter()
        .zip(&r.lambdas)
        .zip(&r.uncertainties)
        .map(|((t, l), u)| json!({"t": exact(*t, "task.ts"), "lambda_star": num(*l, *u)}))
        .collect();
    cx.rep.set(
        "sweep",
        json!({
            "points": rows,
            "gap_tol": num(r.gap_tol, 0.0),
            "right_monotone": r.right_monotone,
            "strictly_monotone": r.strictly_monotone,
            "direction_consistent": r.direction_consistent,
            "concavity_defect": num(r.concavity_defect, r.gap_tol),
        }),
    );
    if cx.out.csv {
        let mut s = String::from("t,lambda_star,uncertainty\n");
        for ((t, l), u) in r.ts.iter().zip(&r.lambdas).zip(&r.uncertainties) {
            let _ = writeln!(s, "{t},{l:e},{u:e}");
        }
        cx.rep.write_file("perturb.csv", s.as_bytes()).map_err(io)?;
    }
    Ok(())
}

fn dumps_csv(cx: &mut Ctx, dumps: &[Vec<(f64, Vec<f64>, usize)>]) -> TaskResult {
    for (i, trace) in dumps.iter().enumerate() {
        let mut s = String::from("t,");
        s.push_str(&header(cx.spec.dim, &["regime"]));
        for (t, x, k) in trace {
            let _ = write!(s, "{t},");
            row_x(&mut s, x);
            let _ = writeln!(s, "{}", k + 1);
        }
        cx.rep.write_file(&format!("path_{i:04}.csv"), s.as_bytes()).map_err(io)?;
    }
    Ok(())
}

fn simulate_task(cx: &mut Ctx, start: &StartCfg, horizon: Option<f64>, target: Option<&RegionCfg>) -> TaskResult {
    let (x, k) = start.check(cx.spec)?;
    let functional = match (horizon, target) {
        (Some(t), None) => Functional::Terminal { t },
        (None, Some(r)) => Functional::Hit { target: cx.region(r)? },
        _ => return Err("cli::simulate: give exactly one of `horizon` or `target`".into()),
    };
    let cfg = cx.sim();
    let b = simulate(&Dynamics::base(cx.spec), &cfg, &functional, 0.0, &x, k).map_err(err)?;
    let n = b.records.len();
    let lf: Vec<f64> = b.records.iter().map(|r| r.log_functional).collect();
    let (m, se) = crate::sde::mean_se(&lf);
    let times: Vec<f64> = b.records.iter().filter(|r| r.outcome == Outcome::Hit).map(|r| r.t).collect();
    let regs = cx.spec.regimes;
    let occupancy: Vec<Value> = (0..regs)
        .map(|j| {
            let v: Vec<f64> = b.records.iter().map(|r| r.time_in_regime[j]).collect();
            let (a, s) = crate::sde::mean_se(&v);
            est(a, s)
        })
        .collect();
    let jumps: Vec<Vec<u64>> = (0..regs)
        .map(|i| (0..regs).map(|j| b.records.iter().map(|r| r.jumps[i * regs + j] as u64).sum()).collect())
        .collect();
    let radius: Vec<f64> = b.records.iter().map(|r| r.max_radius).collect();
    let (rm, rs) = crate::sde::mean_se(&radius);
    let mut res = json!({
        "paths": n,
        "terminal": b.terminal,
        "hit": b.hit,
        "censored": b.censored,
        "exploded": b.exploded,
        "log_functional": est(m, se),
        "time_in_regime": occupancy,
        "jumps": jumps,
        "max_radius": est(rm, rs),
        "dt": exact(cfg.dt, "numerics.dt"),
        "seed": cfg.seed,
    });
    if !times.is_empty() {
        let (tm, ts) = crate::sde::mean_se(&times);
        res["hitting_time"] = est(tm, ts);
    }
    cx.rep.set("simulation", res);
    if cx.out.csv {
        dumps_csv(cx, &b.dumps)?;
    }
    Ok(())
}

fn check_fk(cx: &mut Ctx, radius: f64, start: &StartCfg, horizon: f64, g: &[ExprCfg], halving: bool) -> TaskResult {
    let (x, k) = start.check(cx.spec)?;
    let g = oracles(g, cx.spec.regimes, cx.spec.dim, &BTreeMap::new(), "task.g")?;
    let op = ball_operator(cx.spec, radius, cx.num.h).map_err(err)?;
    let p = crate::eigen::principal_eigenpair_lenient(&op, cx.num.tol).map_err(err)?;
    let pj = cx.pair_json(&p);
    cx.rep.set("eigenpair", pj);
    let tp = twist(cx.spec, &p.psi, p.lambda, &op.grid).map_err(err)?;
    let cfg = cx.sim();
    let r = feynman_kac_check(cx.spec, &tp, &g, horizon, &cfg, &x, k, halving).map_err(err)?;
    let mut v = json!({
        "lhs": est(r.lhs.value, r.lhs.se),
        "rhs": est(r.rhs.value, r.rhs.se),
        "z": num(r.z, 3.0),
        "bias_ok": r.bias_ok,
        "pass": r.pass,
        "exploded_twisted": r.exploded_twisted,
        "dt": exact(cfg.dt, "numerics.dt"),
        "paths": cfg.n_paths,
        "seed": cfg.seed,
    });
    if let (Some(lh), Some(rh)) = (&r.lhs_half, &r.rhs_half) {
        v["lhs_half_dt"] = est(lh.value, lh.se);
        v["rhs_half_dt"] = est(rh.value, rh.se);
    }
    cx.rep.set("feynman_kac", v);
    Ok(())
}

fn check_hitting(cx: &mut Ctx, ball: f64, starts: &[StartCfg], risk: Option<&[f64]>) -> TaskResult {
    let pl = lambda_star_with(cx.spec, &cx.num.radii, cx.num.h, cx.num.tol, DEFAULT_INNER_RADIUS).map_err(err)?;
    cx.limit_json(&pl, "lambda_star")?;
    let field = LatticeField::from_rows(pl.grid(), &pl.psi_star);
    let target = RegionSpec::ball(cx.spec.dim, ball, cx.spec.regimes);
    let cfg = cx.sim();
    let mut out = vec![];
    for s in starts {
        let (x, k) = s.check(cx.spec)?;
        if norm(&x) <= ball {
            return Err("cli::check_hitting: start point inside the target ball".into());
        }
        let r = hitting_representation_check(cx.spec, &field, pl.lambda_star, &target, &cfg, &x, k).map_err(err)?;
        let se_rel = r.estimate.se / r.psi;
        out.push(json!({
            "x": exact_list(&r.x, "task.starts"),
            "regime": r.regime + 1,
            "estimate": est(r.estimate.value, r.estimate.se),
            "psi": num(r.psi, pl.uncertainty),
            "relative_deviation": est(r.deviation, se_rel),
            "censored_fraction": num(r.censored_fraction, 0.0),
            "exploded_fraction": num(r.exploded_fraction, 0.0),
            "pass": r.pass,
        }));
        cx.rep.set("hitting", Value::Array(out.clone()));
    }
    if let (Some(ts), Some(s)) = (risk, starts.first()) {
        let (x, k) = s.check(cx.spec)?;
        let est_list = risk_sensitive_cost(cx.spec, &cfg, &x, k, ts).map_err(err)?;
        let v: Vec<Value> = est_list
            .iter()
            .map(|e| {
                json!({
                    "t": exact(e.t, "task.risk_horizons"),
                    "estimate": est(e.estimate, e.se),
                    "max_weight_fraction": num(e.max_weight_fraction, 0.0),
                })
            })
            .collect();
        cx.rep.set(
            "risk_sensitive_cost",
            json!({
                "estimates": v,
                "minus_lambda_star": num(-pl.lambda_star, pl.uncertainty),
                "lambda_star": num(pl.lambda_star, pl.uncertainty),
            }),
        );
    }
    Ok(())
}
