//! Batch runner: `coopeig run <config.json>`.

pub mod config;
pub mod report;
pub mod tasks;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::model::{irreducibility_check, validate, Irreducibility, ProblemSpec};
use config::{oracles, RunConfig, TaskCfg};
use report::{exact, exact_list, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

/// Outcome of a run: the exit code, a message for stderr, and the output
/// directory when one was written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub code: i32,
    pub message: Option<String>,
    pub dir: Option<PathBuf>,
}

impl RunOutcome {
    fn invalid(msg: String) -> RunOutcome {
        RunOutcome { code: EXIT_VALIDATION, message: Some(msg), dir: None }
    }
}

pub fn threads_from_env() -> Option<usize> {
    std::env::var("COOPEIG_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|n| *n > 0)
}

/// Parses and validates a configuration without running it.
pub fn load(path: &Path) -> Result<(RunConfig, ProblemSpec), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cli::load: cannot read {}: {e}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| format!("cli::load: {e}"))?;
    cfg.numerics.check().map_err(|e| format!("cli::load: {e}"))?;
    let spec = cfg.problem.to_spec().map_err(|e| format!("cli::load: {e}"))?;
    precheck(&cfg.task, &spec).map_err(|e| format!("cli::load: {e}"))?;
    let density = cfg.numerics.sample_density;
    let rep = validate(&spec, density).map_err(|e| e.to_string())?;
    rep.check().map_err(|e| e.to_string())?;
    Ok((cfg, spec))
}

fn precheck(task: &TaskCfg, spec: &ProblemSpec) -> Result<(), String> {
    let (d, n) = (spec.dim, spec.regimes);
    let none = BTreeMap::new();
    match task {
        TaskCfg::Eig { region, .. } => region.to_region(d, n).map(|_| ()),
        TaskCfg::LambdaStar { .. } => Ok(()),
        TaskCfg::Twist { radius, phi, .. } => {
            if *radius <= 0.0 {
                return Err("task.radius must be positive".into());
            }
            phi.as_ref().map_or(Ok(()), |p| oracles(p, n, d, &none, "task.phi").map(|_| ()))
        }
        TaskCfg::Diagnose { targets, exp_stability, twisted, .. } => {
            for t in targets {
                t.to_region(d, n)?;
            }
            if let Some(b) = exp_stability {
                b.to_pert(spec, vec![])?;
            }
            if let Some(t) = twisted {
                t.target.to_region(d, n)?;
            }
            Ok(())
        }
        TaskCfg::Perturb { bump, ts, .. } => {
            oracles(bump, n, d, &none, "task.bump")?;
            if ts.is_empty() {
                return Err("task.ts must not be empty".into());
            }
            Ok(())
        }
        TaskCfg::Simulate { start, horizon, target } => {
            start.check(spec)?;
            if let Some(t) = target {
                t.to_region(d, n)?;
            }
            match (horizon, target) {
                (Some(t), None) if *t > 0.0 => Ok(()),
                (None, Some(_)) => Ok(()),
                _ => Err("task needs exactly one of a positive `horizon` or a `target`".into()),
            }
        }
        TaskCfg::CheckFk { radius, start, horizon, g, .. } => {
            start.check(spec)?;
            oracles(g, n, d, &none, "task.g")?;
            if *radius <= 0.0 || *horizon <= 0.0 {
                return Err("task.radius and task.horizon must be positive".into());
            }
            Ok(())
        }
        TaskCfg::CheckHitting { ball, starts, .. } => {
            if *ball <= 0.0 || starts.is_empty() {
                return Err("task.ball must be positive and task.starts nonempty".into());
            }
            starts.iter().try_for_each(|s| s.check(spec).map(|_| ()))
        }
    }
}

/// Runs a configuration. Validation failures write nothing; numerical
/// failures leave a report with `status: "failed"`.
pub fn run(args: &RunArgs) -> RunOutcome {
    let (mut cfg, spec) = match load(&args.config) {
        Ok(v) => v,
        Err(e) => return RunOutcome::invalid(e),
    };
    if let Some(s) = args.seed {
        cfg.numerics.seed = s;
    }
    let threads = args.threads.or_else(threads_from_env);
    let pool = match threads.map(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build()).transpose() {
        Ok(p) => p,
        Err(e) => return RunOutcome::invalid(format!("cli::run: thread pool: {e}")),
    };
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("coopeig_out"));
    if let Err(e) = fs::create_dir_all(&dir) {
        return RunOutcome { code: EXIT_NUMERICAL, message: Some(format!("cli::run: creating {}: {e}", dir.display())), dir: None };
    }
    let mut rep = Report::new(dir.clone(), cfg.task.name());
    let n = &cfg.numerics;
    rep.input("dim", json!(spec.dim));
    rep.input("regimes", json!(spec.regimes));
    rep.input("h", exact(n.h, "numerics.h"));
    rep.input("radii", exact_list(&n.radii, "numerics.radii"));
    rep.input("tol", exact(n.tol, "numerics.tol"));
    rep.input("seed", json!(n.seed));
    // Reducible switching is allowed (some diagnostics are about exactly
    // that); eigen solvers reject it on their own.
    let irreducible = matches!(irreducibility_check(&spec, n.sample_density), Ok(Irreducibility::Irreducible));
    rep.input("irreducible", json!(irreducible));
    let result = {
        let mut cx = tasks::Ctx { spec: &spec, num: &cfg.numerics, out: &cfg.output, rep: &mut rep };
        match &pool {
            Some(p) => p.install(|| tasks::run_task(&cfg.task, &mut cx)),
            None => tasks::run_task(&cfg.task, &mut cx),
        }
    };
    let (code, status, msg) = match result {
        Ok(()) => (EXIT_OK, "ok", None),
        Err(e) => (EXIT_NUMERICAL, "failed", Some(e)),
    };
    if let Err(e) = rep.finish(status, msg.as_deref()) {
        return RunOutcome { code: EXIT_NUMERICAL, message: Some(format!("cli::run: writing report: {e}")), dir: Some(dir) };
    }
    RunOutcome { code, message: msg, dir: Some(dir) }
}
