use std::time::Instant;

use anyhow::Context;
use kfp_core::bounds::{
    gaussian_envelope, kappa, kernel_chapman_kolmogorov_error, kernel_normalization_error, kernel_pde_residual,
    kolmogorov_exact_kernel, moser_estimate, random_field_on, verify_davies, verify_twist, BoundReport,
    MoserEstimate, SolutionData, TwistFunction,
};
use kfp_core::coefficients::{build_field, estimate_ellipticity, CoefficientField, FieldSpec, SampleRegion};
use kfp_core::geometry::{
    galilean_inverse, kinetic_scale, quasi_symmetry_ratio, rho_tau_sq_periodic, KineticCylinder, KineticPoint,
    Orientation, PhasePoint, PhaseSet,
};
use kfp_core::propagator::EvolutionFamily;
use kfp_core::solver::{energy_residual, PhaseField, PhaseGrid, Remap, SolverOptions, SourceTerm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::artifacts::{csv, heatmap_svg, scatter_svg};
use crate::config::RunConfig;
use crate::report::{Status, SuiteResult};
use crate::seeds::suite_seed;

/// A suite result and the artifacts it wants written, as `(file name, content)`.
pub struct SuiteOutput {
    pub result: SuiteResult,
    pub files: Vec<(String, String)>,
}

impl From<SuiteResult> for SuiteOutput {
    fn from(result: SuiteResult) -> Self {
        SuiteOutput { result, files: Vec::new() }
    }
}

/// Error raised inside a named suite.
#[derive(Debug, thiserror::Error)]
#[error("suite {suite}: {}", chain_message(.source))]
pub struct SuiteError {
    pub suite: String,
    pub source: anyhow::Error,
}

/// Error chain joined by `": "`, skipping causes already quoted by their parent.
fn chain_message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

pub type SuiteFn = fn(&RunConfig, &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput>;

/// Suites of `verify`, in run order.
pub const VERIFY_SUITES: &[(&str, SuiteFn)] = &[
    ("geometry", geometry),
    ("ellipticity", ellipticity),
    ("conservation", conservation),
    ("adjoint", adjoint),
    ("chapman_kolmogorov", chapman_kolmogorov),
    ("energy", energy),
    ("davies", davies),
    ("twist", twist),
    ("oracle_selfcheck", oracle_selfcheck),
    ("oracle_kernel", oracle_kernel),
    ("moser", moser),
    ("envelope", envelope),
];

pub fn run_suite(cfg: &RunConfig, name: &str, f: SuiteFn) -> Result<SuiteOutput, SuiteError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(suite_seed(cfg.seed, name));
    let mut out = f(cfg, &mut rng).map_err(|source| SuiteError {
        suite: name.to_string(),
        source,
    })?;
    out.result.name = name.to_string();
    out.result.runtime_ms = start.elapsed().as_millis() as u64;
    Ok(out)
}

fn rough_field(cfg: &RunConfig, d: usize, seed: u64) -> anyhow::Result<CoefficientField<f64>> {
    Ok(build_field(&cfg.rough.spec(d, seed))?)
}

fn rough_fields(cfg: &RunConfig, d: usize, n: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Vec<CoefficientField<f64>>> {
    (0..n).map(|_| rough_field(cfg, d, rng.random())).collect()
}

fn positive_field(g: &PhaseGrid<f64>, rng: &mut ChaCha8Rng) -> PhaseField<f64> {
    let values = (0..g.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    PhaseField::from_values(g, 0.0, values).expect("grid-sized values")
}

fn signed_field(g: &PhaseGrid<f64>, rng: &mut ChaCha8Rng) -> PhaseField<f64> {
    let values = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    PhaseField::from_values(g, 0.0, values).expect("grid-sized values")
}

/// A lattice time in `[lo, hi]`, at least one step.
fn lattice_time(g: &PhaseGrid<f64>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    let k = (rng.random_range(lo..=hi) / g.dt).round().max(1.0);
    k * g.dt
}

// Criterion-level geometry: quasi-symmetry, cylinder scaling, Moser scale-freeness.
fn geometry(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let n = cfg.verify.geometry_samples;
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let sqrt3 = 3f64.sqrt();
    let mut worst: f64 = 1.0;
    let mut quasi_violations = 0usize;
    for _ in 0..n {
        let d = rng.random_range(1..=2usize);
        let set = |rng: &mut ChaCha8Rng| {
            let m = rng.random_range(1..=4usize);
            let points = (0..m)
                .map(|_| PhasePoint {
                    x: (0..d).map(|_| rng.random_range(-4.0..4.0)).collect(),
                    v: (0..d).map(|_| rng.random_range(-4.0..4.0)).collect(),
                })
                .collect();
            PhaseSet::points(points)
        };
        let e = set(rng)?;
        let f = set(rng)?;
        let tau = rng.random_range(0.05..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        if let Some(r) = quasi_symmetry_ratio(&e, &f, tau)? {
            worst = worst.max(r).max(1.0 / r);
            if r > sqrt3 || r < 1.0 / sqrt3 {
                quasi_violations += 1;
            }
        }
    }
    let mut membership_mismatches = 0usize;
    for _ in 0..n {
        let d = rng.random_range(1..=2usize);
        let point = |rng: &mut ChaCha8Rng, s: f64| {
            KineticPoint::new(
                rng.random_range(-s..s),
                (0..d).map(|_| rng.random_range(-s..s)).collect(),
                (0..d).map(|_| rng.random_range(-s..s)).collect(),
            )
        };
        let z0 = point(rng, 2.0)?;
        let r = rng.random_range(0.2..1.5);
        let orient = if rng.random_bool(0.5) { Orientation::Backward } else { Orientation::Forward };
        let z = point(rng, 2.0)?;
        let cyl = KineticCylinder::new(z0.clone(), r, orient)?;
        let unit = KineticCylinder::new(KineticPoint::origin(d), 1.0, orient)?;
        let mapped = kinetic_scale(1.0 / r, &galilean_inverse(&z0, &z)?)?;
        if cyl.contains(&z)? != unit.contains(&mapped)? {
            membership_mismatches += 1;
        }
    }
    let one = |_: f64, _: &[f64], _: &[f64]| 1.0;
    let cylinders: Vec<KineticCylinder<f64>> = [0.1, 0.5, 1.0, 2.0]
        .iter()
        .map(|&r| KineticCylinder::new(KineticPoint::new(0.5, vec![0.3], vec![-0.2])?, r, Orientation::Backward))
        .collect::<kfp_core::Result<_>>()?;
    let est = moser_estimate(&SolutionData::Closed { f: &one, d: 1, resolution: 16 }, &cylinders)?;
    let scale_gap = est
        .per_cylinder
        .iter()
        .map(|b| (b * 256.0 - 1.0).abs())
        .fold(0.0, f64::max);
    let scale_ok = scale_gap <= 1e-12;
    let violations = quasi_violations + membership_mismatches + usize::from(!scale_ok);
    let details = json!({
        "quasi_symmetry": {"pairs": n, "max_ratio": worst, "sharp_constant_phi": phi, "asserted_sqrt3": sqrt3,
                           "violations": quasi_violations, "within_phi": worst <= phi * (1.0 + 1e-12)},
        "cylinder_scaling": {"samples": n, "mismatches": membership_mismatches},
        "moser_constants": {"radii": [0.1, 0.5, 1.0, 2.0], "B_sq": est.per_cylinder, "relative_gap_to_1_over_256": scale_gap},
    });
    Ok(SuiteResult::at_most("geometry", violations as f64, 0.0, details).into())
}

fn ellipticity(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let g = &cfg.grid;
    let mut rows = Vec::new();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut specs: Vec<FieldSpec> = vec![cfg.field.clone()];
    specs.extend((0..cfg.verify.conservation_fields).map(|_| cfg.rough.spec(g.d, rng.random())));
    specs.push(cfg.rough.spec(2, rng.random()));
    for spec in specs {
        let field = build_field::<f64>(&spec)?;
        let d = field.dim();
        let region = SampleRegion::cube(d, [0.0, 1.0], [-g.lx / 2.0, g.lx / 2.0], [-g.lv, g.lv]);
        let (lo, hi) = estimate_ellipticity(&field, cfg.verify.ellipticity_samples, &region, rng.random())?;
        let (dl, du) = (field.declared_lambda(), field.declared_upper());
        // Positive when an estimate leaves the declared bracket.
        worst = worst.max(dl - lo).max(hi - du);
        rows.push(json!({"d": d, "kind": field.kind(), "seed": spec.seed,
            "lambda_hat": lo, "Lambda_hat": hi, "declared_lambda": dl, "declared_Lambda": du}));
    }
    Ok(SuiteResult::at_most("ellipticity", worst, 1e-12, json!({ "fields": rows })).into())
}

fn conservation(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let g = &cfg.grid;
    let v = &cfg.verify;
    let horizon = v.conservation_steps as f64 * g.dt;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for field in rough_fields(cfg, g.d, v.conservation_fields, rng)? {
        let fam = EvolutionFamily::new(g, &field, &cfg.solver)?;
        let psi = positive_field(g, rng);
        let out = fam.propagate(&psi, 0.0, horizon)?;
        let drift = (out.mass() - psi.mass()).abs() / psi.mass().abs();
        let one = PhaseField::constant(g, 0.0, 1.0);
        let kept = fam.propagate(&one, 0.0, horizon)?;
        let deviation = kept.values.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
        worst = worst.max(drift).max(deviation);
        rows.push(json!({"seed": field.spec().seed, "mass_drift": drift, "constant_deviation": deviation}));
    }
    let details = json!({"steps": v.conservation_steps, "fields": rows});
    Ok(SuiteResult::at_most("conservation", worst, v.conservation_tol, details).into())
}

fn adjoint_gap(fam: &EvolutionFamily<f64>, s: f64, t: f64, rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let g = fam.grid();
    let psi = signed_field(g, rng);
    let phi = signed_field(g, rng);
    let fwd = fam.propagate(&psi, s, t)?;
    let back = fam.adjoint_propagate(&phi, s, t)?;
    Ok((fwd.inner(&phi) - psi.inner(&back)).abs() / (psi.l2_norm() * phi.l2_norm()))
}

fn adjoint(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let v = &cfg.verify;
    let half = v.adjoint_pairs / 2;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (grid, count, symmetric) in [(&cfg.grid, v.adjoint_pairs - half, true), (&v.adjoint_grid_2d, half, false)] {
        let window = lattice_time(grid, v.adjoint_window, v.adjoint_window, rng);
        for _ in 0..count {
            let d = if symmetric { grid.d } else { 2 };
            let mut spec = cfg.rough.spec(d, rng.random());
            if symmetric {
                spec = FieldSpec::random_piecewise(d, cfg.rough.cell, cfg.rough.eig, 0.0, spec.seed);
            }
            let field = build_field(&spec)?;
            let fam = EvolutionFamily::new(grid, &field, &cfg.solver)?;
            let gap = adjoint_gap(&fam, 0.0, window, rng)?;
            worst = worst.max(gap);
            rows.push(json!({"d": d, "symmetric": field.is_symmetric(), "seed": spec.seed, "relative_gap": gap}));
        }
    }
    Ok(SuiteResult::at_most("adjoint", worst, v.adjoint_tol, json!({ "pairs": rows })).into())
}

fn chapman_kolmogorov(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let g = &cfg.grid;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let span = ((cfg.window.t - cfg.window.s) / 4.0).max(4.0 * g.dt);
    for _ in 0..cfg.verify.chapman_configs {
        let field = rough_field(cfg, g.d, rng.random())?;
        let fam = EvolutionFamily::new(g, &field, &cfg.solver)?;
        let s = lattice_time(g, 0.0, span, rng) - g.dt;
        let n = ((span / g.dt) as i64).max(2);
        let total = rng.random_range(2..=n);
        let mid = rng.random_range(1..total);
        let (r, t) = (s + mid as f64 * g.dt, s + total as f64 * g.dt);
        let psi = signed_field(g, rng);
        let gap = fam.check_chapman_kolmogorov(s, r, t, &psi)?;
        worst = worst.max(gap);
        rows.push(json!({"seed": field.spec().seed, "s": s, "r": r, "t": t, "relative_gap": gap}));
    }
    Ok(SuiteResult::at_most("chapman_kolmogorov", worst, cfg.verify.chapman_tol, json!({ "configs": rows })).into())
}

fn energy(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let g = &cfg.grid;
    let (s, t) = (cfg.window.s, cfg.window.t);
    let psi = PhaseField::from_fn(g, s, |x: &[f64], v: &[f64]| {
        (-x.iter().map(|a| a * a).sum::<f64>() - v.iter().map(|a| a * a).sum::<f64>()).exp()
    });
    let source = SourceTerm::function(|t: f64, x: &[f64], v: &[f64]| {
        (t + x[0]).sin() * (-v.iter().map(|a| a * a).sum::<f64>()).exp()
    });
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut increases = 0usize;
    let fields = vec![build_field::<f64>(&cfg.field)?, rough_field(cfg, g.d, rng.random())?];
    for field in &fields {
        for remap in [Remap::Linear, Remap::Spectral] {
            let opts = SolverOptions { remap, ..cfg.solver };
            let (_, forced) = kfp_core::solver::evolve(&psi, s, t, field, &source, &opts)?;
            let (_, free) = kfp_core::solver::evolve(&psi, s, t, field, &SourceTerm::Zero, &opts)?;
            let r = energy_residual(&forced).max(energy_residual(&free));
            let up = free.iter().filter(|e| e.norm_sq_end > e.norm_sq_start).count();
            worst = worst.max(r);
            if field.is_symmetric() {
                increases += up;
            }
            rows.push(json!({"kind": field.kind(), "symmetric": field.is_symmetric(), "seed": field.spec().seed, "remap": remap,
                "max_residual": r, "norm_increases": up, "steps": free.len()}));
        }
    }
    let ok = worst <= cfg.verify.energy_tol && increases == 0;
    let mut res = SuiteResult::at_most("energy", worst, cfg.verify.energy_tol, json!({ "runs": rows }));
    res.status = Status::from_bool(ok);
    Ok(res.into())
}

fn random_box(rng: &mut ChaCha8Rng, x0: [f64; 2], v0: [f64; 2]) -> PhaseSet<f64> {
    let xl = rng.random_range(x0[0]..x0[1]);
    let vl = rng.random_range(v0[0]..v0[1]);
    PhaseSet::Box {
        x: vec![[xl, xl + rng.random_range(0.5..1.5)]],
        v: vec![[vl, vl + rng.random_range(0.5..1.5)]],
    }
}

/// Disjoint boxes `E`, `F` with `rho > 0`.
fn box_pair(g: &PhaseGrid<f64>, tau: f64, rng: &mut ChaCha8Rng) -> anyhow::Result<(PhaseSet<f64>, PhaseSet<f64>)> {
    loop {
        let f = random_box(rng, [-2.0, 0.0], [-1.5, 0.5]);
        let gap = rng.random_range(0.25..5.0);
        let e = random_box(rng, [1.5 + gap - 1.5, 1.5 + gap], [-2.5, 1.5]);
        if rho_tau_sq_periodic(&e, &f, tau, g.lx)? > 0.0 {
            return Ok((e, f));
        }
    }
}

fn bound_rows(reports: &[BoundReport]) -> Vec<Vec<f64>> {
    reports
        .iter()
        .map(|r| {
            let p = |k: &str| r.params.get(k).and_then(Value::as_f64).unwrap_or(f64::NAN);
            vec![p("tau"), p("rho"), r.theoretical, r.measured, r.margin]
        })
        .collect()
}

fn davies(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let g = &cfg.grid;
    let [lo, hi] = cfg.verify.davies_tau;
    let mut reports = Vec::new();
    for _ in 0..cfg.verify.davies_configs {
        let field = rough_field(cfg, g.d, rng.random())?;
        let fam = EvolutionFamily::new(g, &field, &cfg.solver)?;
        let tau = lattice_time(g, lo, hi, rng);
        let (e, f) = box_pair(g, tau, rng)?;
        let psi = random_field_on(g, &f, rng.random())?;
        let mut rep = verify_davies(&fam, &e, &f, &psi, 0.0, tau)?;
        rep.params["field_seed"] = json!(field.spec().seed);
        reports.push(rep);
    }
    let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.theoretical, r.measured)).collect();
    let files = vec![
        ("davies.csv".into(), csv(&["tau", "rho", "theoretical", "measured", "margin"], bound_rows(&reports))),
        ("davies.svg".into(), scatter_svg("Davies decay: measured vs bound", &points)),
    ];
    Ok(SuiteOutput { result: SuiteResult::from_bounds("davies", &reports), files })
}

fn random_twist(
    cfg: &RunConfig,
    i: usize,
    k: f64,
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<TwistFunction<f64>> {
    let g = &cfg.grid;
    Ok(match i % 4 {
        0 => TwistFunction::sinusoid(
            g.d,
            rng.random_range(0.05..0.5),
            rng.random_range(1..=3),
            rng.random_range(0.0..6.28),
            rng.random_range(0.05..0.5),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..6.28),
            g.lx,
        ),
        1 => TwistFunction::triangle(rng.random_range(0.1..1.0), g.lx),
        2 => TwistFunction::clamped_linear_v(
            (0..g.d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.5..2.0),
        ),
        _ => {
            let tau = cfg.verify.twist_time;
            let (e, f) = box_pair(g, tau, rng)?;
            TwistFunction::decay_cone(&e, &f, tau, k, 20.0, g.lx)?
        }
    })
}

fn twist(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let g = &cfg.grid;
    let v = &cfg.verify;
    let t = lattice_time(g, v.twist_time, v.twist_time, rng);
    let fields = rough_fields(cfg, g.d, v.twist_fields, rng)?;
    let k = kappa(fields[0].declared_lambda(), fields[0].declared_upper())?;
    let support = PhaseSet::Box {
        x: vec![[-1.0, 1.0]; g.d],
        v: vec![[-1.0, 1.0]; g.d],
    };
    let mut reports = Vec::new();
    for i in 0..v.twist_functions {
        let h = random_twist(cfg, i, k, rng)?;
        h.validate(g.d, g.lx, g.lv, 10_000, rng.random())
            .with_context(|| format!("twist {i} fails its declared constants"))?;
        for field in &fields {
            let fam = EvolutionFamily::new(g, field, &cfg.solver)?;
            let psi = random_field_on(g, &support, rng.random())?;
            let mut rep = verify_twist(&fam, &h, &psi, 0.0, t)?;
            rep.params["twist"] = json!(i);
            rep.params["shape"] = json!(["sinusoid", "triangle", "clamped_linear_v", "decay_cone"][i % 4]);
            rep.params["field_seed"] = json!(field.spec().seed);
            reports.push(rep);
        }
    }
    let rows = reports.iter().map(|r| {
        let p = |k: &str| r.params.get(k).and_then(Value::as_f64).unwrap_or(f64::NAN);
        vec![p("twist"), p("lip_x"), p("lip_v"), r.theoretical, r.measured, r.margin]
    });
    let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.theoretical, r.measured)).collect();
    let files = vec![
        ("twist.csv".into(), csv(&["twist", "lip_x", "lip_v", "theoretical", "measured", "margin"], rows)),
        ("twist.svg".into(), scatter_svg("Twisted growth: measured vs bound", &points)),
    ];
    Ok(SuiteOutput { result: SuiteResult::from_bounds("twist", &reports), files })
}

pub fn oracle_selfcheck(cfg: &RunConfig, _rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let o = &cfg.oracle;
    let norm = [(0.5, 0.3, -0.4), (1.0, -0.7, 0.2)]
        .iter()
        .map(|&(tau, x, v)| kernel_normalization_error(tau, x, v, 12.0, 1201))
        .collect::<kfp_core::Result<Vec<f64>>>()?;
    let norm_err = norm.iter().copied().fold(0.0, f64::max);
    let ck = kernel_chapman_kolmogorov_error(0.0, 0.5, 1.0, 0.4, 0.3, -0.2, 0.1, 6.0, 801)?;
    let steps = [0.02, 0.01, 0.005];
    let residuals = steps
        .iter()
        .map(|&h| kernel_pde_residual(0.8, 0.3, 0.5, 0.0, 0.1, h))
        .collect::<kfp_core::Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let order = min_ratio.log2();
    let ok = norm_err <= o.normalization_tol && ck <= o.chapman_tol && order >= 1.8;
    let details = json!({
        "normalization_error": norm, "chapman_kolmogorov_error": ck,
        "pde_residual": {"steps": steps, "residual": residuals, "ratios": ratios, "observed_order": order},
    });
    let mut res = SuiteResult::at_most("oracle_selfcheck", norm_err.max(ck), o.normalization_tol.min(o.chapman_tol), details);
    res.theoretical = o.chapman_tol;
    res.margin = o.chapman_tol - norm_err.max(ck);
    res.status = Status::from_bool(ok);
    Ok(res.into())
}

/// A=I kernel column against the closed form on the lattice.
pub struct OracleComparison {
    pub column: PhaseField<f64>,
    pub exact: Vec<f64>,
    pub l1_relative: f64,
    pub linf: f64,
    pub mass_defect: f64,
    pub source: ([f64; 1], [f64; 1]),
}

fn nearest_v_node(g: &PhaseGrid<f64>, w: f64) -> f64 {
    let j = ((w + g.lv) / g.dv() - 0.5).round().clamp(0.0, (g.nv - 1) as f64) as usize;
    g.v_node(j)
}

fn nearest_x_node(g: &PhaseGrid<f64>, y: f64) -> f64 {
    let i = ((y + g.lx / 2.0) / g.dx()).round().rem_euclid(g.nx as f64) as usize;
    g.x_node(i)
}

pub fn oracle_comparison(
    g: &PhaseGrid<f64>,
    opts: &SolverOptions<f64>,
    y: f64,
    w: f64,
    tau: f64,
    width: f64,
) -> anyhow::Result<OracleComparison> {
    if g.d != 1 {
        anyhow::bail!(kfp_core::KfpError::InvalidArgument("the kernel oracle comparison needs d = 1".into()));
    }
    let id = build_field(&FieldSpec::identity(1))?;
    let fam = EvolutionFamily::new(g, &id, opts)?;
    let (y, w) = ([nearest_x_node(g, y)], [nearest_v_node(g, w)]);
    let column = fam.kernel_column(0.0, &y, &w, tau, width)?;
    let exact: Vec<f64> = (0..g.len())
        .map(|k| {
            let (x, v) = g.point(k);
            // Nearest periodic image of the source in x.
            let dx = x[0] - y[0] - tau * (v[0] + w[0]) / 2.0;
            let shift = g.lx * (dx / g.lx).round();
            kolmogorov_exact_kernel(tau, &[x[0] - shift], &v, &y, &w)
        })
        .collect::<kfp_core::Result<_>>()?;
    let (mut num, mut den, mut linf) = (0.0, 0.0, 0.0f64);
    for (c, e) in column.values.iter().zip(&exact) {
        num += (c - e).abs();
        den += e.abs();
        linf = linf.max((c - e).abs());
    }
    let mass_defect = (column.mass() - 1.0).abs();
    Ok(OracleComparison { l1_relative: num / den, linf, mass_defect, source: (y, w), column, exact })
}

fn refined(g: &PhaseGrid<f64>) -> anyhow::Result<PhaseGrid<f64>> {
    Ok(PhaseGrid::new(g.d, 2 * g.nx, 2 * g.nv, g.lx, g.lv, g.dt / 2.0)?)
}

pub fn oracle_kernel(cfg: &RunConfig, _rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let o = &cfg.oracle;
    let opts = SolverOptions { remap: o.remap, ..cfg.solver };
    let src = &cfg.kernel.source;
    let base = oracle_comparison(&cfg.grid, &opts, src.x[0], src.v[0], o.tau, o.delta_width)?;
    let mut details = json!({
        "remap": o.remap, "tau": o.tau, "delta_width": o.delta_width,
        "source": {"y": base.source.0, "w": base.source.1},
        "coarse": {"nx": cfg.grid.nx, "nv": cfg.grid.nv, "dt": cfg.grid.dt,
                   "l1_relative": base.l1_relative, "linf": base.linf, "mass_defect": base.mass_defect},
    });
    let mut ok = base.l1_relative <= o.l1_tol;
    if o.refine {
        let fine_grid = refined(&cfg.grid)?;
        let fine = oracle_comparison(&fine_grid, &opts, src.x[0], src.v[0], o.tau, o.delta_width)?;
        let ratio = base.l1_relative / fine.l1_relative;
        details["fine"] = json!({"nx": fine_grid.nx, "nv": fine_grid.nv, "dt": fine_grid.dt,
            "l1_relative": fine.l1_relative, "linf": fine.linf, "mass_defect": fine.mass_defect});
        details["refinement_ratio"] = json!(ratio);
        details["observed_order"] = json!(ratio.log2());
        details["min_ratio"] = json!(o.min_ratio);
        ok &= ratio >= o.min_ratio;
    }
    let g = &cfg.grid;
    let rows = (0..g.len()).map(|k| {
        let (x, v) = g.point(k);
        vec![x[0], v[0], base.column.values[k], base.exact[k]]
    });
    let files = vec![("oracle_kernel.csv".into(), csv(&["x", "v", "column", "exact"], rows))];
    let mut res = SuiteResult::at_most("oracle_kernel", base.l1_relative, o.l1_tol, details);
    res.status = Status::from_bool(ok);
    Ok(SuiteOutput { result: res, files })
}

/// Moser estimate of the exact A=I kernel with source at the origin.
pub fn exact_moser_estimate(cfg: &RunConfig) -> anyhow::Result<MoserEstimate<f64>> {
    let k = |t: f64, x: &[f64], v: &[f64]| kolmogorov_exact_kernel(t, x, v, &[0.0], &[0.0]).unwrap_or(0.0);
    Ok(moser_estimate(
        &SolutionData::Closed { f: &k, d: 1, resolution: cfg.moser.resolution },
        &cfg.moser.cylinders,
    )?)
}

fn exact_moser(cfg: &RunConfig) -> anyhow::Result<(Vec<f64>, f64)> {
    let est = exact_moser_estimate(cfg)?;
    Ok((est.per_cylinder, est.b_sq))
}

fn moser(cfg: &RunConfig, _rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let (per, b_sq) = exact_moser(cfg)?;
    let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (b_sq / lo).sqrt();
    let radii: Vec<f64> = cfg.moser.cylinders.iter().map(|c| c.r).collect();
    let details = json!({"source": "exact", "radii": radii, "B_sq": per, "B_hat": b_sq.sqrt(), "B_spread": spread});
    let ok = b_sq.is_finite() && lo > 0.0 && spread <= 2.0;
    let mut res = SuiteResult::at_most("moser", spread, 2.0, details);
    res.status = Status::from_bool(ok);
    let rows = radii.iter().zip(&per).map(|(&r, &b)| vec![r, b.sqrt()]);
    Ok(SuiteOutput { result: res, files: vec![("moser.csv".into(), csv(&["r", "B_hat"], rows))] })
}

fn envelope(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<SuiteOutput> {
    let v = &cfg.verify;
    let (_, b_sq) = exact_moser(cfg)?;
    let b = b_sq.sqrt();
    let steps = (2.0 * v.envelope_offset / v.envelope_step).round() as usize;
    let mut closed_worst: f64 = 0.0;
    let mut closed_points = 0usize;
    for &tau in &v.envelope_taus {
        for i in 0..=steps {
            for j in 0..=steps {
                let dx = -v.envelope_offset + i as f64 * v.envelope_step;
                let dv = -v.envelope_offset + j as f64 * v.envelope_step;
                let k = kolmogorov_exact_kernel(tau, &[dx], &[dv], &[0.0], &[0.0])?;
                let env = gaussian_envelope(1, b, 1.0, 1.0, tau, &[dx], &[dv], None)?;
                closed_worst = closed_worst.max(k / env);
                closed_points += 1;
            }
        }
    }
    let closed_ok = closed_worst <= 1.0;

    // Rough field: solver column, its own Moser constant, and the A=I budget.
    let g0 = &cfg.grid;
    let g = PhaseGrid::new(1, g0.nx, v.envelope_nv, g0.lx, g0.lv, g0.dt)?;
    let tau = 1.0;
    let field = rough_field(cfg, 1, rng.random())?;
    let fam = EvolutionFamily::new(&g, &field, &cfg.solver)?;
    let (y, w) = ([nearest_x_node(&g, 0.0)], [nearest_v_node(&g, 0.0)]);
    let delta = fam.mollified_delta(&y, &w, 2.0)?;
    let mut traj = Vec::new();
    let (column, _) = fam.propagate_observed(&delta, 0.0, tau, |f| traj.push(f.clone()))?;
    let x0 = nearest_x_node(&g, y[0] + tau * w[0]);
    let cyl = KineticCylinder::new(KineticPoint::new(tau, vec![x0], w.to_vec())?, v.envelope_radius, Orientation::Backward)?;
    let b_rough = moser_estimate(&SolutionData::Trajectory(&traj), &[cyl])?.b();
    drop(traj);
    let budget = oracle_comparison(&g, &cfg.solver, y[0], w[0], tau, 2.0)?.linf;
    let (lambda, upper) = (field.declared_lambda(), field.declared_upper());
    let mut dominated = 0usize;
    let mut max_excess: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut envs = Vec::with_capacity(g.len());
    for (k, &c) in column.values.iter().enumerate() {
        let (x, vv) = g.point(k);
        let raw = x[0] - y[0] - tau * w[0];
        let dxg = raw - g.lx * (raw / g.lx).round();
        let env = gaussian_envelope(1, b_rough, lambda, upper, tau, &[dxg], &[vv[0] - w[0]], None)?;
        if c <= env {
            dominated += 1;
        } else {
            max_excess = max_excess.max(c - env);
        }
        max_ratio = max_ratio.max(c / env);
        envs.push(env);
    }
    let fraction = dominated as f64 / g.len() as f64;
    let rough_ok = fraction >= v.envelope_fraction && max_excess <= budget;
    let ok = closed_ok && rough_ok;
    let details = json!({
        "closed_form": {"B_hat": b, "points": closed_points, "max_kernel_over_envelope": closed_worst, "pass": closed_ok},
        "rough": {"field_seed": field.spec().seed, "tau": tau, "nv": g.nv, "cylinder_r": v.envelope_radius,
                  "B_hat": b_rough, "mollification_budget": budget, "dominated_fraction": fraction,
                  "max_excess": max_excess, "max_column_over_envelope": max_ratio, "pass": rough_ok},
    });
    let mut res = SuiteResult::at_most("envelope", closed_worst.max(max_ratio), 1.0, details);
    res.status = Status::from_bool(ok);
    let rows = (0..g.len()).map(|k| {
        let (x, vv) = g.point(k);
        vec![x[0], vv[0], column.values[k], envs[k]]
    });
    let files = vec![
        ("envelope.csv".into(), csv(&["x", "v", "column", "envelope"], rows)),
        (
            "envelope.svg".into(),
            heatmap_svg(
                "Rough-field kernel column / envelope",
                g.nx,
                g.nv,
                &column.values.iter().zip(&envs).map(|(c, e)| c / e).collect::<Vec<_>>(),
                [-g.lx / 2.0, g.lx / 2.0],
                [-g.lv, g.lv],
            ),
        ),
    ];
    Ok(SuiteOutput { result: res, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.grid = PhaseGrid::new(1, 32, 32, 16.0, 8.0, 1.0 / 64.0).unwrap();
        cfg.verify.geometry_samples = 200;
        cfg
    }

    #[test]
    fn lattice_helpers() {
        let g = PhaseGrid::new(1, 16, 16, 16.0, 8.0, 0.125).unwrap();
        assert_eq!(nearest_v_node(&g, 0.1), 0.5);
        assert_eq!(nearest_v_node(&g, -100.0), g.v_node(0));
        assert_eq!(nearest_x_node(&g, 7.9), -8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = lattice_time(&g, 0.0, 0.3, &mut rng);
            assert!(t >= g.dt && (t / g.dt).fract() == 0.0);
            let (e, f) = box_pair(&g, t, &mut rng).unwrap();
            assert!(rho_tau_sq_periodic(&e, &f, t, g.lx).unwrap() > 0.0);
        }
    }

    #[test]
    fn oracle_comparison_small_grid() {
        let g = PhaseGrid::new(1, 64, 64, 16.0, 8.0, 1.0 / 128.0).unwrap();
        let opts = SolverOptions { remap: Remap::Spectral, ..Default::default() };
        let c = oracle_comparison(&g, &opts, 0.1, 0.1, 1.0, 2.0).unwrap();
        assert_eq!(c.source, ([0.0], [0.125]));
        assert!(c.mass_defect < 1e-12);
        assert!(c.l1_relative < 0.1 && c.linf > 0.0);
        let g2 = PhaseGrid::new(2, 8, 8, 8.0, 4.0, 0.125).unwrap();
        assert!(oracle_comparison(&g2, &opts, 0.0, 0.0, 0.5, 2.0).is_err());
    }

    #[test]
    fn cheap_suites_pass_and_repeat() {
        let cfg = small();
        for (name, f) in VERIFY_SUITES {
            if !["geometry", "ellipticity", "oracle_selfcheck", "moser"].contains(name) {
                continue;
            }
            let a = run_suite(&cfg, name, *f).unwrap();
            let b = run_suite(&cfg, name, *f).unwrap();
            assert_eq!(a.result.status, Status::Pass, "{name}: {}", a.result.details);
            assert_eq!(a.result.details, b.result.details);
        }
    }

    #[test]
    fn chain_message_drops_repeats() {
        let inner = kfp_core::KfpError::Indexed {
            context: "cylinder 0".into(),
            source: Box::new(kfp_core::KfpError::InvalidArgument("r too small".into())),
        };
        let e = anyhow::Error::from(inner).context("moser sweep");
        assert_eq!(chain_message(&e), "moser sweep: cylinder 0: invalid argument: r too small");
    }
}
