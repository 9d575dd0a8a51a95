use kfp_core::bounds::*;
use kfp_core::coefficients::{build_field, FieldSpec};
use kfp_core::geometry::{KineticCylinder, KineticPoint, Orientation, PhasePoint, PhaseSet};
use kfp_core::propagator::EvolutionFamily;
use kfp_core::solver::{PhaseField, PhaseGrid, SolverOptions};

fn rough(seed: u64) -> kfp_core::CoefficientField64 {
    build_field(&FieldSpec::random_piecewise(1, [0.25, 1.0, 1.0], [0.5, 2.0], 0.0, seed)).unwrap()
}

fn backward(t: f64, x: f64, v: f64, r: f64) -> KineticCylinder<f64> {
    KineticCylinder::new(KineticPoint::new(t, vec![x], vec![v]).unwrap(), r, Orientation::Backward).unwrap()
}

#[test]
fn davies_dominance_on_rough_fields() {
    let g = PhaseGrid::new(1, 64, 64, 16.0, 8.0, 1.0 / 128.0).unwrap();
    let f = PhaseSet::cuboid(vec![[-1.0, 0.0]], vec![[-0.5, 0.5]]).unwrap();
    for (seed, ex, tau) in [(0, 1.5, 0.25), (1, 3.0, 0.5), (2, 5.0, 0.125)] {
        let fam = EvolutionFamily::new(&g, &rough(seed), &SolverOptions::default()).unwrap();
        let e = PhaseSet::cuboid(vec![[ex, ex + 1.0]], vec![[0.0, 1.0]]).unwrap();
        let psi = random_field_on(&g, &f, seed).unwrap();
        let rep = verify_davies(&fam, &e, &f, &psi, 0.0, tau).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.theoretical < 1.0);
    }
}

#[test]
fn twist_dominance_including_decay_cone() {
    let g = PhaseGrid::new(1, 64, 64, 16.0, 8.0, 1.0 / 128.0).unwrap();
    let field = rough(3);
    let fam = EvolutionFamily::new(&g, &field, &SolverOptions::default()).unwrap();
    let f = PhaseSet::cuboid(vec![[-1.0, 0.0]], vec![[-0.5, 0.5]]).unwrap();
    let e = PhaseSet::cuboid(vec![[2.0, 3.0]], vec![[0.0, 1.0]]).unwrap();
    let psi = random_field_on(&g, &f, 4).unwrap();
    let k = kappa(field.declared_lambda(), field.declared_upper()).unwrap();
    let twists = [
        TwistFunction::sinusoid(1, 0.4, 1, 0.2, 0.3, 1.0, 0.0, 16.0),
        TwistFunction::triangle(0.5, 16.0),
        TwistFunction::clamped_linear_v(vec![0.6], 0.1, 1.5),
        TwistFunction::decay_cone(&e, &f, 0.5, k, 50.0, 16.0).unwrap(),
    ];
    for h in &twists {
        h.validate(1, 16.0, 8.0, 10_000, 1).unwrap();
        let rep = verify_twist(&fam, h, &psi, 0.0, 0.5).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn exact_kernel_sits_under_its_envelope() {
    let k = |t: f64, x: &[f64], v: &[f64]| kolmogorov_exact_kernel(t, x, v, &[0.0], &[0.0]).unwrap_or(0.0);
    let data = SolutionData::Closed { f: &k, d: 1, resolution: 20 };
    let est = moser_estimate(&data, &[backward(1.0, 0.0, 0.0, 0.2), backward(1.0, 0.0, 0.0, 0.4)]).unwrap();
    let (lo, hi) = est.per_cylinder.iter().fold((f64::MAX, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
    assert!((hi / lo).sqrt() <= 2.0, "{:?}", est.per_cylinder);
    let b = est.b();
    for tau in [0.1, 0.5, 1.0] {
        for i in 0..=32 {
            for j in 0..=32 {
                let (dx, dv) = (-8.0 + 0.5 * i as f64, -8.0 + 0.5 * j as f64);
                let kv = kolmogorov_exact_kernel(tau, &[dx], &[dv], &[0.0], &[0.0]).unwrap();
                assert!(kv <= gaussian_envelope(1, b, 1.0, 1.0, tau, &[dx], &[dv], None).unwrap());
            }
        }
    }
}

fn caccioppoli_constant(dt: f64) -> f64 {
    let g = PhaseGrid::new(1, 64, 64, 8.0, 4.0, dt).unwrap();
    let id = build_field(&FieldSpec::identity(1)).unwrap();
    let fam = EvolutionFamily::new(&g, &id, &SolverOptions::default()).unwrap();
    let psi = PhaseField::from_fn(&g, 0.0, |x: &[f64], v: &[f64]| (-(x[0] * x[0]) - 2.0 * v[0] * v[0]).exp());
    let mut traj = Vec::new();
    fam.propagate_observed(&psi, 0.0, 0.5, |f| traj.push(f.clone())).unwrap();
    let chi = Cutoff {
        center: PhasePoint { x: vec![0.0], v: vec![0.0] },
        radius_x: 1.5,
        radius_v: 1.0,
        profile: CutoffProfile::Hat,
    };
    let rep = caccioppoli_ratio(&traj, &chi, 0.0, 0.5, 1.0, 1.0).unwrap();
    assert!(rep.passed());
    rep.params["C_hat"].as_f64().unwrap()
}

#[test]
fn caccioppoli_constant_is_stable_under_refinement() {
    let coarse = caccioppoli_constant(1.0 / 64.0);
    let fine = caccioppoli_constant(1.0 / 128.0);
    assert!(coarse.is_finite() && fine.is_finite());
    assert!((coarse - fine).abs() <= 0.2 * fine.max(coarse), "{coarse} vs {fine}");
}

#[test]
fn moser_on_solver_trajectory_is_finite() {
    let g = PhaseGrid::new(1, 64, 128, 16.0, 4.0, 1.0 / 128.0).unwrap();
    let fam = EvolutionFamily::new(&g, &rough(5), &SolverOptions::default()).unwrap();
    let delta = fam.mollified_delta(&[0.0], &[g.v_node(64)], 2.0).unwrap();
    let mut traj = Vec::new();
    fam.propagate_observed(&delta, 0.0, 1.0, |f| traj.push(f.clone())).unwrap();
    let est = moser_estimate(&SolutionData::Trajectory(&traj), &[backward(1.0, 0.0, 0.0, 0.25)]).unwrap();
    assert!(est.b_sq > 0.0 && est.b_sq.is_finite());
}
