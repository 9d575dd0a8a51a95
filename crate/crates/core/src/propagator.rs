//! Discrete fundamental-solution operators `Gamma(t, s)` and their adjoints.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoefficientField;
use crate::error::{KfpError, Result};
use crate::geometry::PhasePoint;
use crate::scalar::{wrap_centered, Real};
use crate::solver::{
    coordinate_header, EnergyLedger, PhaseField, PhaseGrid, Remap, Scheme, SolverOptions, SourceTerm,
};

/// The family `Gamma(t, s)` on a fixed time lattice `origin + k dt`.
///
/// Step times are always computed from integer offsets to `origin`, so splitting
/// an interval at a lattice time reproduces the unsplit evolution bit for bit.
#[derive(Clone)]
pub struct EvolutionFamily<T: Real> {
    scheme: Arc<Scheme<T>>,
    origin: T,
}

impl<T: Real> EvolutionFamily<T> {
    pub fn new(grid: &PhaseGrid<T>, field: &CoefficientField<T>, opts: &SolverOptions<T>) -> Result<Self> {
        Self::with_origin(grid, field, opts, T::zero())
    }

    pub fn with_origin(
        grid: &PhaseGrid<T>,
        field: &CoefficientField<T>,
        opts: &SolverOptions<T>,
        origin: T,
    ) -> Result<Self> {
        Ok(EvolutionFamily {
            scheme: Arc::new(Scheme::new(grid, field, opts)?),
            origin,
        })
    }

    pub fn grid(&self) -> &PhaseGrid<T> {
        self.scheme.grid()
    }

    pub fn field(&self) -> &CoefficientField<T> {
        self.scheme.field()
    }

    pub fn scheme(&self) -> &Scheme<T> {
        &self.scheme
    }

    pub fn time_of(&self, k: i64) -> T {
        self.origin + T::of(k as f64) * self.grid().dt
    }

    /// Lattice index of `t`, rejecting off-lattice times.
    pub fn index_of(&self, t: T) -> Result<i64> {
        let n = ((t - self.origin) / self.grid().dt).f64();
        let k = n.round();
        if !n.is_finite() || (n - k).abs() > 1e-9 * k.abs().max(1.0) {
            return Err(KfpError::invalid(format!("time {t} is not on the time lattice")));
        }
        Ok(k as i64)
    }

    fn window(&self, s: T, t: T) -> Result<(i64, i64)> {
        let (ks, kt) = (self.index_of(s)?, self.index_of(t)?);
        if ks > kt {
            return Err(KfpError::invalid(format!(
                "Gamma(t, s) is only defined for s <= t (s = {s}, t = {t})"
            )));
        }
        Ok((ks, kt))
    }

    fn check(&self, f: &PhaseField<T>) -> Result<()> {
        if &f.grid != self.grid() {
            return Err(KfpError::invalid("field lives on a different grid"));
        }
        Ok(())
    }

    /// `Gamma(t, s) psi`.
    pub fn propagate(&self, psi: &PhaseField<T>, s: T, t: T) -> Result<PhaseField<T>> {
        self.propagate_observed(psi, s, t, |_| {}).map(|(f, _)| f)
    }

    /// `Gamma(t, s) psi` with the energy ledger, calling `observe` on the initial
    /// state and after every step.
    pub fn propagate_observed(
        &self,
        psi: &PhaseField<T>,
        s: T,
        t: T,
        mut observe: impl FnMut(&PhaseField<T>),
    ) -> Result<(PhaseField<T>, EnergyLedger<T>)> {
        self.check(psi)?;
        let (ks, kt) = self.window(s, t)?;
        let mut f = psi.clone();
        f.time = self.time_of(ks);
        observe(&f);
        let mut ledger = Vec::with_capacity((kt - ks) as usize);
        for k in ks..kt {
            ledger.push(self.scheme.step(&mut f.values, self.time_of(k), &SourceTerm::Zero)?);
            f.time = self.time_of(k + 1);
            observe(&f);
        }
        Ok((f, ledger))
    }

    /// `Gamma~(s, t) phi`, the transpose of `Gamma(t, s)`.
    pub fn adjoint_propagate(&self, phi: &PhaseField<T>, s: T, t: T) -> Result<PhaseField<T>> {
        self.check(phi)?;
        let (ks, kt) = self.window(s, t)?;
        let mut f = phi.clone();
        for k in (ks..kt).rev() {
            self.scheme.adjoint_step(&mut f.values, self.time_of(k))?;
        }
        f.time = self.time_of(ks);
        Ok(f)
    }

    /// Relative l2 gap between `Gamma(t, s) psi` and `Gamma(t, r) Gamma(r, s) psi`.
    pub fn check_chapman_kolmogorov(&self, s: T, r: T, t: T, psi: &PhaseField<T>) -> Result<T> {
        let (ks, kt) = self.window(s, t)?;
        let kr = self.index_of(r)?;
        if kr < ks || kr > kt {
            return Err(KfpError::invalid(format!("r = {r} lies outside [{s}, {t}]")));
        }
        let direct = self.propagate(psi, s, t)?;
        let split = self.propagate(&self.propagate(psi, s, r)?, r, t)?;
        let mut diff = direct.clone();
        diff.axpy(-T::one(), &split);
        let scale = direct.l2_norm();
        Ok(if scale > T::zero() {
            diff.l2_norm() / scale
        } else {
            diff.l2_norm()
        })
    }

    /// Normalized product-hat approximation of the delta at `(y, w)`.
    ///
    /// `delta_width` is the full support width of each hat in cells; the default
    /// of 2 reduces to a Kronecker delta on lattice nodes. Under the spectral remap
    /// the x-Nyquist mode is projected out: a real row cannot translate it, so it
    /// would otherwise stay behind as a global alternating residue. The projection
    /// has zero mass.
    pub fn mollified_delta(&self, y: &[T], w: &[T], delta_width: T) -> Result<PhaseField<T>> {
        let g = self.grid();
        let d = g.d;
        if y.len() != d || w.len() != d {
            return Err(KfpError::DimensionMismatch {
                expected: d,
                got: y.len().min(w.len()),
            });
        }
        if !(delta_width >= T::one()) || !delta_width.is_finite() {
            return Err(KfpError::invalid(format!(
                "delta_width {delta_width} is below one cell"
            )));
        }
        let half = delta_width * T::of(0.5);
        let (dx, dv) = (g.dx(), g.dv());
        let hat = |u: T| (T::one() - u.abs() / half).max(T::zero());
        let mut f = PhaseField::from_fn(g, T::zero(), |x, v| {
            let mut p = T::one();
            for k in 0..d {
                p *= hat(wrap_centered(x[k] - y[k], g.lx) / dx) * hat((v[k] - w[k]) / dv);
            }
            p
        });
        let total: T = f.values.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(KfpError::invalid(
                "mollified delta has no weight on the lattice (source outside the grid?)",
            ));
        }
        let norm = T::one() / (total * g.cell_volume());
        f.scale(norm);
        if self.scheme.options().remap == Remap::Spectral {
            remove_x_nyquist(&mut f);
        }
        Ok(f)
    }

    /// `Gamma(t, ., ., s, y, w)` approximated by evolving a mollified delta.
    pub fn kernel_column(&self, s: T, y: &[T], w: &[T], t: T, delta_width: T) -> Result<PhaseField<T>> {
        let mut delta = self.mollified_delta(y, w, delta_width)?;
        delta.time = s;
        self.propagate(&delta, s, t)
    }

    /// `Gamma(t, x, v, s, ., .)` via the adjoint evolution of a delta at `(x, v)`.
    pub fn adjoint_kernel_column(&self, s: T, x: &[T], v: &[T], t: T, delta_width: T) -> Result<PhaseField<T>> {
        let mut delta = self.mollified_delta(x, v, delta_width)?;
        delta.time = t;
        self.adjoint_propagate(&delta, s, t)
    }

    /// One kernel column per source node, computed in parallel.
    pub fn kernel_assemble(
        &self,
        s: T,
        t: T,
        nodes: &[PhasePoint<T>],
        delta_width: T,
    ) -> Result<KernelEstimate<T>> {
        self.assemble_with(s, t, nodes, delta_width, false)
    }

    /// Columns of the adjoint kernel: for each target node `(x, v)` the function
    /// `(y, w) -> Gamma(t, x, v, s, y, w)`.
    pub fn adjoint_kernel_assemble(
        &self,
        s: T,
        t: T,
        nodes: &[PhasePoint<T>],
        delta_width: T,
    ) -> Result<KernelEstimate<T>> {
        self.assemble_with(s, t, nodes, delta_width, true)
    }

    fn assemble_with(
        &self,
        s: T,
        t: T,
        nodes: &[PhasePoint<T>],
        delta_width: T,
        adjoint: bool,
    ) -> Result<KernelEstimate<T>> {
        if nodes.is_empty() {
            return Err(KfpError::invalid("empty source subsample"));
        }
        let results: Vec<Result<PhaseField<T>>> = nodes
            .par_iter()
            .map(|p| {
                if adjoint {
                    self.adjoint_kernel_column(s, &p.x, &p.v, t, delta_width)
                } else {
                    self.kernel_column(s, &p.x, &p.v, t, delta_width)
                }
            })
            .collect();
        let mut columns = Vec::with_capacity(nodes.len());
        let mut failures = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(c) => columns.push(c),
                Err(e) => failures.push(format!("node {i}: {e}")),
            }
        }
        if !failures.is_empty() {
            return Err(KfpError::Indexed {
                context: format!("{} kernel column(s) failed", failures.len()),
                source: Box::new(KfpError::InvalidArgument(failures.join("; "))),
            });
        }
        let mass_defects = columns.iter().map(|c| c.mass() - T::one()).collect();
        Ok(KernelEstimate {
            s,
            t,
            nodes: nodes.to_vec(),
            delta_width,
            adjoint,
            columns,
            mass_defects,
        })
    }

    /// `Gamma(t, s) psi + sum_k Gamma(t, t_{k+1}) J_k S`, where `J_k` injects the
    /// source of step `k`. Propagated source slices are computed in parallel.
    pub fn duhamel_solve(&self, psi: &PhaseField<T>, source: &SourceTerm<T>, s: T, t: T) -> Result<PhaseField<T>> {
        let mut out = self.propagate(psi, s, t)?;
        if source.is_zero() {
            return Ok(out);
        }
        let (ks, kt) = self.window(s, t)?;
        let g = self.grid();
        let half = g.dt * T::of(0.5);
        let slices: Vec<Result<PhaseField<T>>> = (ks..kt)
            .into_par_iter()
            .map(|k| {
                let t0 = self.time_of(k);
                let src = source.sample(g, t0 + half).expect("non-zero source");
                let injected = self.scheme.inject(&src, t0)?;
                let f = PhaseField::from_values(g, self.time_of(k + 1), injected)?;
                self.propagate(&f, self.time_of(k + 1), t)
            })
            .collect();
        for r in slices {
            out.axpy(T::one(), &r?);
        }
        Ok(out)
    }

    /// Power-iteration estimate of `||Gamma(t, s)||_{l2 -> l2}`; returns the
    /// largest estimate over `trials` random starts.
    pub fn operator_norm_estimate(&self, s: T, t: T, trials: usize, iterations: usize, seed: u64) -> Result<T> {
        let g = self.grid();
        let mut best = T::zero();
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let values = (0..g.len()).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
            let mut v = PhaseField::from_values(g, s, values)?;
            let mut est = T::zero();
            for _ in 0..iterations.max(1) {
                let n0 = v.l2_norm();
                v.scale(T::one() / n0);
                let fv = self.propagate(&v, s, t)?;
                est = est.max(fv.l2_norm());
                v = self.adjoint_propagate(&fv, s, t)?;
            }
            best = best.max(est);
        }
        Ok(best)
    }
}

/// Projects out the Nyquist mode along each x axis (even node counts only).
fn remove_x_nyquist<T: Real>(f: &mut PhaseField<T>) {
    let g = f.grid.clone();
    if g.nx % 2 != 0 {
        return;
    }
    let nv = g.v_count();
    let n = g.nx;
    for axis in 0..g.d {
        let stride = n.pow((g.d - 1 - axis) as u32);
        let xc = g.x_count();
        for base in 0..xc {
            if (base / stride) % n != 0 {
                continue;
            }
            for j in 0..nv {
                let mut a = T::zero();
                for i in 0..n {
                    let val = f.values[(base + i * stride) * nv + j];
                    a += if i % 2 == 0 { val } else { -val };
                }
                a /= T::of_usize(n);
                for i in 0..n {
                    let k = (base + i * stride) * nv + j;
                    f.values[k] -= if i % 2 == 0 { a } else { -a };
                }
            }
        }
    }
}

/// Kernel columns `Gamma_h(t, ., ., s, y_i, w_i)` (or their adjoint analogues).
#[derive(Debug, Clone)]
pub struct KernelEstimate<T> {
    pub s: T,
    pub t: T,
    pub nodes: Vec<PhasePoint<T>>,
    pub delta_width: T,
    /// Columns are functions of the source variables when true.
    pub adjoint: bool,
    pub columns: Vec<PhaseField<T>>,
    /// `mass(column) - 1` per column.
    pub mass_defects: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub mass_defect: f64,
    pub max_value: f64,
    /// Largest phase-space distance from the node at which `|value| > threshold`.
    pub support_radius: f64,
}

impl<T: Real> KernelEstimate<T> {
    pub fn summary(&self, threshold: T) -> Vec<ColumnSummary> {
        self.nodes
            .iter()
            .zip(&self.columns)
            .zip(&self.mass_defects)
            .map(|((node, col), &defect)| {
                let g = &col.grid;
                let mut max_value = T::zero();
                let mut radius = T::zero();
                for (n, &f) in col.values.iter().enumerate() {
                    max_value = max_value.max(f);
                    if f.abs() > threshold {
                        let (x, v) = g.point(n);
                        let r2: T = (0..g.d)
                            .map(|k| {
                                let dx = wrap_centered(x[k] - node.x[k], g.lx);
                                let dv = v[k] - node.v[k];
                                dx * dx + dv * dv
                            })
                            .sum();
                        radius = radius.max(r2.sqrt());
                    }
                }
                ColumnSummary {
                    y: node.x.iter().map(|c| c.f64()).collect(),
                    w: node.v.iter().map(|c| c.f64()).collect(),
                    mass_defect: defect.f64(),
                    max_value: max_value.f64(),
                    support_radius: radius.f64(),
                }
            })
            .collect()
    }

    pub fn max_mass_defect(&self) -> T {
        self.mass_defects
            .iter()
            .map(|m| m.abs())
            .fold(T::zero(), T::max)
    }

    /// CSV `x,v,y,w,value` over all columns (target variables first).
    pub fn to_csv(&self) -> String {
        let d = self.columns.first().map_or(1, |c| c.grid.d);
        let mut out = coordinate_header(d, &["x", "v", "y", "w"]);
        out.push_str(",value\n");
        for (node, col) in self.nodes.iter().zip(&self.columns) {
            for (n, &f) in col.values.iter().enumerate() {
                let (a, b) = col.grid.point(n);
                let (x, v, y, w) = if self.adjoint {
                    (&node.x, &node.v, &a, &b)
                } else {
                    (&a, &b, &node.x, &node.v)
                };
                for c in x.iter().chain(v).chain(y).chain(w) {
                    out.push_str(&format!("{},", c.f64()));
                }
                out.push_str(&format!("{:e}\n", f.f64()));
            }
        }
        out
    }
}
