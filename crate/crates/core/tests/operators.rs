use kfp_core::bounds::kolmogorov_exact_kernel;
use kfp_core::coefficients::{build_field, FieldSpec};
use kfp_core::propagator::EvolutionFamily;
use kfp_core::solver::{adjoint_evolve, evolve, PhaseField, PhaseGrid, Remap, SolverOptions, SourceTerm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rough(d: usize, skew: f64, seed: u64) -> kfp_core::CoefficientField64 {
    build_field(&FieldSpec::random_piecewise(d, [0.25, 1.0, 1.0], [0.5, 2.0], skew, seed)).unwrap()
}

fn random_field(g: &PhaseGrid<f64>, rng: &mut ChaCha8Rng) -> PhaseField<f64> {
    let values = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    PhaseField::from_values(g, 0.0, values).unwrap()
}

fn spectral() -> SolverOptions<f64> {
    SolverOptions { remap: Remap::Spectral, ..SolverOptions::default() }
}

fn column_error(n: usize, dt: f64) -> f64 {
    let g = PhaseGrid::new(1, n, n, 16.0, 8.0, dt).unwrap();
    let id = build_field(&FieldSpec::identity(1)).unwrap();
    let fam = EvolutionFamily::new(&g, &id, &spectral()).unwrap();
    let (y, w) = ([0.0], [g.v_node(n / 2)]);
    let col = fam.kernel_column(0.0, &y, &w, 0.5, 2.0).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &c) in col.values.iter().enumerate() {
        let (x, v) = g.point(k);
        let e = kolmogorov_exact_kernel(0.5, &x, &v, &y, &w).unwrap();
        num += (c - e).abs();
        den += e;
    }
    num / den
}

#[test]
fn identity_column_converges_to_exact_kernel() {
    let coarse = column_error(64, 1.0 / 256.0);
    let fine = column_error(128, 1.0 / 512.0);
    assert!(fine <= 0.05, "relative L1 {fine}");
    assert!(coarse / fine >= 1.8, "refinement ratio {}", coarse / fine);
}

#[test]
fn conservation_over_many_steps() {
    let g = PhaseGrid::new(1, 32, 32, 8.0, 4.0, 1.0 / 128.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..3 {
        let field = rough(1, 0.0, seed);
        let values = (0..g.len()).map(|_| rng.random_range(0.5..2.5)).collect();
        let psi = PhaseField::from_values(&g, 0.0, values).unwrap();
        let (out, _) = evolve(&psi, 0.0, 1.0, &field, &SourceTerm::Zero, &SolverOptions::default()).unwrap();
        assert!((out.mass() - psi.mass()).abs() <= 1e-9 * psi.mass().abs());
        let one = PhaseField::constant(&g, 0.0, 1.0);
        let (stay, _) = evolve(&one, 0.0, 0.5, &field, &SourceTerm::Zero, &SolverOptions::default()).unwrap();
        assert!(stay.values.iter().all(|v| (v - 1.0).abs() <= 1e-9));
    }
}

#[test]
fn adjoint_identity_symmetric_and_skew() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (d, skew, n) in [(1, 0.0, 32), (2, 0.6, 8)] {
        let g = PhaseGrid::new(d, n, n, 8.0, 4.0, 1.0 / 32.0).unwrap();
        let field = rough(d, skew, 4);
        for remap in [Remap::Linear, Remap::Spectral] {
            let opts = SolverOptions { tol: 1e-12, remap, ..SolverOptions::default() };
            for _ in 0..3 {
                let psi = random_field(&g, &mut rng);
                let phi = random_field(&g, &mut rng);
                let (fwd, _) = evolve(&psi, 0.0, 0.25, &field, &SourceTerm::Zero, &opts).unwrap();
                let back = adjoint_evolve(&phi, 0.0, 0.25, &field, &opts).unwrap();
                let gap = (fwd.inner(&phi) - psi.inner(&back)).abs();
                assert!(gap <= 1e-8 * psi.l2_norm() * phi.l2_norm(), "{gap}");
            }
        }
    }
}

#[test]
fn chapman_kolmogorov_is_exact_on_the_lattice() {
    let g = PhaseGrid::new(1, 32, 32, 8.0, 4.0, 1.0 / 64.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fam = EvolutionFamily::new(&g, &rough(1, 0.0, 6), &SolverOptions::default()).unwrap();
    for _ in 0..3 {
        let psi = random_field(&g, &mut rng);
        let r = fam.time_of(rng.random_range(1..32));
        let gap = fam.check_chapman_kolmogorov(0.0, r, 0.5, &psi).unwrap();
        assert!(gap <= 1e-10, "{gap}");
    }
}

#[test]
fn energy_ledger_closes_with_source() {
    let g = PhaseGrid::new(1, 32, 32, 8.0, 4.0, 1.0 / 64.0).unwrap();
    let field = rough(1, 0.0, 8);
    let psi = PhaseField::from_fn(&g, 0.0, |x: &[f64], v: &[f64]| (-(x[0] * x[0]) - v[0] * v[0]).exp());
    let source = SourceTerm::function(|t: f64, x: &[f64], v: &[f64]| (t + x[0]).sin() * (-v[0] * v[0]).exp());
    for remap in [Remap::Linear, Remap::Spectral] {
        let opts = SolverOptions { remap, ..SolverOptions::default() };
        let (_, ledger) = evolve(&psi, 0.0, 0.5, &field, &source, &opts).unwrap();
        assert!(kfp_core::solver::energy_residual(&ledger) <= 1e-6);
        let (_, free) = evolve(&psi, 0.0, 0.5, &field, &SourceTerm::Zero, &opts).unwrap();
        assert!(free.windows(2).all(|w| w[1].norm_sq_end <= w[0].norm_sq_end));
    }
}

#[test]
fn columns_concentrate_as_time_shrinks() {
    let g = PhaseGrid::new(1, 64, 64, 8.0, 4.0, 1.0 / 256.0).unwrap();
    let fam = EvolutionFamily::new(&g, &rough(1, 0.0, 2), &SolverOptions::default()).unwrap();
    let (y, w) = ([0.0], [g.v_node(32)]);
    let near = |c: &PhaseField<f64>| -> f64 {
        (0..g.len())
            .filter(|&k| {
                let (x, v) = g.point(k);
                (x[0] - y[0]).abs() < 0.5 && (v[0] - w[0]).abs() < 0.5
            })
            .map(|k| c.values[k])
            .sum::<f64>()
            * g.cell_volume()
    };
    let fractions: Vec<f64> = [0.5, 0.125, 0.03125, 0.0078125]
        .iter()
        .map(|&t| near(&fam.kernel_column(0.0, &y, &w, t, 2.0).unwrap()))
        .collect();
    assert!(fractions.windows(2).all(|p| p[1] > p[0]), "{fractions:?}");
    assert!(fractions[3] > 0.9);
}

#[test]
fn uniqueness_under_rerun() {
    let g = PhaseGrid::new(1, 32, 32, 8.0, 4.0, 1.0 / 64.0).unwrap();
    let field = rough(1, 0.0, 1);
    let psi = PhaseField::from_fn(&g, 0.0, |x: &[f64], v: &[f64]| (x[0] - v[0]).cos());
    let a = evolve(&psi, 0.0, 0.5, &field, &SourceTerm::Zero, &SolverOptions::default()).unwrap().0;
    let b = evolve(&psi, 0.0, 0.5, &field, &SourceTerm::Zero, &SolverOptions::default()).unwrap().0;
    assert_eq!(a.values, b.values);
}
