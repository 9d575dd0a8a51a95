use std::path::PathBuf;
use std::time::Instant;

use kfp_core::bounds::{moser_estimate, random_field_on, verify_davies, SolutionData};
use kfp_core::coefficients::build_field;
use kfp_core::propagator::EvolutionFamily;
use kfp_core::KfpError;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::artifacts::{csv, heatmap_svg, scatter_svg, write_atomic};
use crate::config::{ConfigError, MoserSource, RunConfig};
use crate::report::{SuiteResult, VerificationReport};
use crate::seeds::suite_seed;
use crate::suites::{self, run_suite, SuiteError, SuiteFn, SuiteOutput, VERIFY_SUITES};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Verb {
    Verify,
    Kernel,
    Decay,
    Moser,
    Oracle,
}

impl Verb {
    fn name(self) -> &'static str {
        match self {
            Verb::Verify => "verify",
            Verb::Kernel => "kernel",
            Verb::Decay => "decay",
            Verb::Moser => "moser",
            Verb::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub verb: Verb,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

fn core_error(e: &anyhow::Error) -> Option<&KfpError> {
    e.chain().find_map(|c| c.downcast_ref::<KfpError>())
}

fn is_invalid_input(e: &KfpError) -> bool {
    match e {
        KfpError::InvalidArgument(_) | KfpError::DimensionMismatch { .. } => true,
        KfpError::Indexed { source, .. } => is_invalid_input(source),
        _ => false,
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        let inner = match self {
            RunError::Config(_) => return EXIT_INVALID,
            RunError::Suite(s) => &s.source,
            RunError::Other(e) => e,
        };
        match core_error(inner) {
            Some(k) if k.is_divergence() => EXIT_DIVERGENCE,
            Some(k) if is_invalid_input(k) => EXIT_INVALID,
            _ => EXIT_FAIL,
        }
    }
}

pub fn load_config(inv: &Invocation) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &inv.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = inv.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs a verb, writes its artifacts and returns the process exit code.
pub fn execute(inv: &Invocation) -> i32 {
    let start = Instant::now();
    let cfg = match load_config(inv) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    match dispatch(inv.verb, &cfg) {
        Ok(outputs) => {
            let elapsed = start.elapsed().as_millis() as u64;
            match finish(inv, &cfg, outputs, elapsed) {
                Ok(report) => {
                    print_summary(&report);
                    if report.overall_pass {
                        EXIT_PASS
                    } else {
                        EXIT_FAIL
                    }
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    EXIT_FAIL
                }
            }
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            if let Err(w) = write_error_report(inv, &cfg, &e, code) {
                eprintln!("error: {w:#}");
            }
            code
        }
    }
}

fn dispatch(verb: Verb, cfg: &RunConfig) -> Result<Vec<SuiteOutput>, RunError> {
    match verb {
        Verb::Verify => run_all(cfg, VERIFY_SUITES),
        Verb::Oracle => run_all(
            cfg,
            &[
                ("oracle_selfcheck", suites::oracle_selfcheck as SuiteFn),
                ("oracle_kernel", suites::oracle_kernel as SuiteFn),
            ],
        ),
        Verb::Kernel => Ok(vec![kernel(cfg)?]),
        Verb::Decay => Ok(vec![decay(cfg)?]),
        Verb::Moser => Ok(vec![moser(cfg)?]),
    }
}

/// Suites run in parallel; results keep the listed order.
fn run_all(cfg: &RunConfig, list: &[(&str, SuiteFn)]) -> Result<Vec<SuiteOutput>, RunError> {
    let results: Vec<_> = list.par_iter().map(|&(name, f)| run_suite(cfg, name, f)).collect();
    results.into_iter().map(|r| r.map_err(RunError::from)).collect()
}

fn finish(inv: &Invocation, cfg: &RunConfig, outputs: Vec<SuiteOutput>, runtime_ms: u64) -> anyhow::Result<VerificationReport> {
    let mut suites = Vec::with_capacity(outputs.len());
    for out in outputs {
        for (name, content) in &out.files {
            write_atomic(&inv.out.join(name), content.as_bytes())?;
        }
        suites.push(out.result);
    }
    let report = VerificationReport::new(inv.verb.name(), serde_json::to_value(cfg)?, suites, runtime_ms);
    write_atomic(&inv.out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

fn write_error_report(inv: &Invocation, cfg: &RunConfig, e: &RunError, code: i32) -> anyhow::Result<()> {
    let suite = match e {
        RunError::Suite(s) => Value::String(s.suite.clone()),
        _ => Value::Null,
    };
    let mut report = serde_json::to_value(VerificationReport::new(inv.verb.name(), serde_json::to_value(cfg)?, vec![], 0))?;
    report["overall_pass"] = json!(false);
    report["error"] = json!({"suite": suite, "exit_code": code, "message": e.to_string()});
    write_atomic(&inv.out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())
}

fn print_summary(report: &VerificationReport) {
    for s in &report.suites {
        println!(
            "{:<20} {:<13} measured={:.3e} theoretical={:.3e} margin={:.3e} ({} ms)",
            s.name,
            serde_json::to_value(s.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            s.measured,
            s.theoretical,
            s.margin,
            s.runtime_ms
        );
    }
    println!("overall_pass = {}", report.overall_pass);
}

fn invalid(msg: &str) -> RunError {
    RunError::Other(KfpError::InvalidArgument(msg.to_string()).into())
}

fn named(name: &str, r: anyhow::Result<SuiteOutput>) -> Result<SuiteOutput, RunError> {
    let mut out = r.map_err(|source| SuiteError { suite: name.to_string(), source })?;
    out.result.name = name.to_string();
    Ok(out)
}

fn kernel(cfg: &RunConfig) -> Result<SuiteOutput, RunError> {
    let start = Instant::now();
    let k = &cfg.kernel;
    if !(k.delta_width > 0.0) {
        return Err(invalid("kernel.delta_width must be positive"));
    }
    let mut out = named("kernel", (|| {
        let g = &cfg.grid;
        let field = build_field(&cfg.field)?;
        let fam = EvolutionFamily::new(g, &field, &cfg.solver)?;
        let (s, t) = (cfg.window.s, cfg.window.t);
        let column = fam.kernel_column(s, &k.source.x, &k.source.v, t, k.delta_width)?;
        let defect = (column.mass() - 1.0).abs();
        let tol = cfg.verify.conservation_tol;
        let mut details = json!({"source": k.source, "s": s, "t": t, "delta_width": k.delta_width,
            "mass_defect": defect, "mass_tol": tol});
        if g.d == 1 && field.is_constant() && field.declared_lambda() == 1.0 && field.declared_upper() == 1.0 {
            let o = suites::oracle_comparison(g, &cfg.solver, k.source.x[0], k.source.v[0], t - s, k.delta_width)?;
            details["oracle_overlay"] = json!({"remap": cfg.solver.remap, "l1_relative": o.l1_relative,
                "linf": o.linf, "w_node": o.source.1, "y_node": o.source.0});
        }
        let mut files = vec![("kernel.csv".to_string(), column.to_csv())];
        if g.d == 1 && k.heatmap {
            files.push((
                "kernel.svg".to_string(),
                heatmap_svg("Kernel column", g.nx, g.nv, &column.values, [-g.lx / 2.0, g.lx / 2.0], [-g.lv, g.lv]),
            ));
        }
        Ok(SuiteOutput { result: SuiteResult::at_most("kernel", defect, tol, details), files })
    })())?;
    out.result.runtime_ms = start.elapsed().as_millis() as u64;
    Ok(out)
}

fn decay(cfg: &RunConfig) -> Result<SuiteOutput, RunError> {
    let start = Instant::now();
    if cfg.decay.cases.is_empty() {
        return Err(invalid("decay.cases is empty"));
    }
    let mut out = named("decay", (|| {
        let g = &cfg.grid;
        let field = build_field(&cfg.field)?;
        let fam = EvolutionFamily::new(g, &field, &cfg.solver)?;
        let s = cfg.window.s;
        let base = suite_seed(cfg.seed, "decay");
        let mut reports = Vec::new();
        for (i, case) in cfg.decay.cases.iter().enumerate() {
            let psi = random_field_on(g, &case.f, base.wrapping_add(i as u64))?;
            let rep = verify_davies(&fam, &case.e, &case.f, &psi, s, s + case.tau)
                .map_err(|e| KfpError::Indexed { context: format!("case {i}"), source: Box::new(e) })?;
            reports.push(rep);
        }
        let rows = reports.iter().map(|r| vec![r.theoretical, r.measured, r.margin]);
        let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.theoretical, r.measured)).collect();
        let result = SuiteResult::from_bounds("decay", &reports);
        Ok(SuiteOutput {
            result,
            files: vec![
                ("decay.csv".into(), csv(&["theoretical", "measured", "margin"], rows)),
                ("decay.svg".into(), scatter_svg("Davies decay: measured vs bound", &points)),
            ],
        })
    })())?;
    out.result.runtime_ms = start.elapsed().as_millis() as u64;
    Ok(out)
}

fn moser(cfg: &RunConfig) -> Result<SuiteOutput, RunError> {
    let start = Instant::now();
    let m = &cfg.moser;
    if m.cylinders.is_empty() {
        return Err(invalid("moser.cylinders is empty"));
    }
    let mut out = named("moser", (|| {
        let est = match m.source {
            MoserSource::Exact => suites::exact_moser_estimate(cfg)?,
            MoserSource::Column => {
                let g = &cfg.grid;
                let field = build_field(&cfg.field)?;
                let fam = EvolutionFamily::new(g, &field, &cfg.solver)?;
                let k = &cfg.kernel;
                let delta = fam.mollified_delta(&k.source.x, &k.source.v, k.delta_width)?;
                let mut traj = Vec::new();
                fam.propagate_observed(&delta, cfg.window.s, cfg.window.t, |f| traj.push(f.clone()))?;
                moser_estimate(&SolutionData::Trajectory(&traj), &m.cylinders)?
            }
        };
        let b_max = est.b();
        let radii: Vec<f64> = m.cylinders.iter().map(|c| c.r).collect();
        let rows: Vec<Vec<f64>> = radii
            .iter()
            .zip(&est.per_cylinder)
            .map(|(&r, &b)| vec![r, b_max, b.sqrt(), b_max - b.sqrt()])
            .collect();
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[1], r[2])).collect();
        let details = json!({"source": m.source, "radii": radii, "B_sq": est.per_cylinder, "B_hat": b_max});
        let ok = b_max.is_finite() && b_max > 0.0;
        let mut result = SuiteResult::at_most("moser", b_max, b_max, details);
        result.status = crate::report::Status::from_bool(ok);
        Ok(SuiteOutput {
            result,
            files: vec![
                ("moser.csv".into(), csv(&["r", "theoretical", "measured", "margin"], rows)),
                ("moser.svg".into(), scatter_svg("Per-cylinder B vs sweep B", &points)),
            ],
        })
    })())?;
    out.result.runtime_ms = start.elapsed().as_millis() as u64;
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let div = RunError::Suite(SuiteError {
            suite: "adjoint".into(),
            source: KfpError::Indexed {
                context: "step 3".into(),
                source: Box::new(KfpError::SolverDivergence { iterations: 5, residual: 1.0, tol: 1e-10 }),
            }
            .into(),
        });
        assert_eq!(div.exit_code(), EXIT_DIVERGENCE);
        assert_eq!(invalid("x").exit_code(), EXIT_INVALID);
        let cfg_err = RunError::Config(RunConfig::from_json("{\"nope\": 0}").unwrap_err());
        assert_eq!(cfg_err.exit_code(), EXIT_INVALID);
        let other = RunError::Other(anyhow::anyhow!("disk full"));
        assert_eq!(other.exit_code(), EXIT_FAIL);
    }
}
