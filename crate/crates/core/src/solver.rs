//! Strang-split discretization of `(d_t + v.grad_x) f - div_v(A grad_v f) = S`.
//!
//! Phase space is periodic in `x` with period `Lx` and bounded in `v` by `[-Lv, Lv]`
//! with zero flux. Values live on a tensor lattice with `x_i = -Lx/2 + i dx` and
//! cell-centred velocities `v_j = -Lv + (j + 1/2) dv`, stored x-major: the flat
//! index is `x_flat * nv^d + v_flat`, so every x-slice is contiguous.
//!
//! One step from `t` to `t + dt`:
//!
//! ```text
//! h = T(dt/2) f + dt S(t + dt/2)
//! g = (I + dt D(A(t + dt)))^{-1} h
//! f' = T(dt/2) g
//! ```
//!
//! `T` shifts each velocity row along `x`. `D` is the corner-gradient form of
//! `-div_v(A grad_v)`: on every dual cell of the velocity lattice the gradient is
//! evaluated at each of the `2^d` corners from the edges meeting there, and
//! `D = 2^{-d} sum G_k^T A_cell G_k`. It kills constants, has zero column sums,
//! satisfies `D(A)^T = D(A^T)` and has no checkerboard null space.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientField;
use crate::error::{KfpError, Result};
use crate::linalg::{bicgstab, conjugate_gradient, SolveStats};
use crate::scalar::{dot, Real};

/// Uniform phase-space lattice and time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid<T> {
    pub d: usize,
    pub nx: usize,
    pub nv: usize,
    #[serde(rename = "Lx")]
    pub lx: T,
    #[serde(rename = "Lv")]
    pub lv: T,
    pub dt: T,
}

impl<T: Real> PhaseGrid<T> {
    pub fn new(d: usize, nx: usize, nv: usize, lx: T, lv: T, dt: T) -> Result<Self> {
        let g = PhaseGrid {
            d,
            nx,
            nv,
            lx,
            lv,
            dt,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.d) {
            return Err(KfpError::invalid(format!(
                "solver supports d in {{1, 2}}, got {}",
                self.d
            )));
        }
        if self.nx < 8 || self.nv < 8 {
            return Err(KfpError::invalid("nx and nv must be at least 8"));
        }
        for (name, x) in [("Lx", self.lx), ("Lv", self.lv), ("dt", self.dt)] {
            if !(x > T::zero()) || !x.is_finite() {
                return Err(KfpError::invalid(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }

    pub fn dx(&self) -> T {
        self.lx / T::of_usize(self.nx)
    }

    pub fn dv(&self) -> T {
        T::of(2.0) * self.lv / T::of_usize(self.nv)
    }

    /// Number of x nodes, `nx^d`.
    pub fn x_count(&self) -> usize {
        self.nx.pow(self.d as u32)
    }

    /// Number of v nodes, `nv^d`.
    pub fn v_count(&self) -> usize {
        self.nv.pow(self.d as u32)
    }

    pub fn len(&self) -> usize {
        self.x_count() * self.v_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Phase-space volume `dx^d dv^d` of one lattice cell.
    pub fn cell_volume(&self) -> T {
        (self.dx() * self.dv()).powi(self.d as i32)
    }

    pub fn x_node(&self, i: usize) -> T {
        -self.lx * T::of(0.5) + T::of_usize(i) * self.dx()
    }

    pub fn v_node(&self, j: usize) -> T {
        -self.lv + (T::of_usize(j) + T::of(0.5)) * self.dv()
    }

    /// Per-axis indices of a flat x or v index (axis 0 slowest).
    pub fn unflatten(&self, mut flat: usize, n: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d];
        for k in (0..self.d).rev() {
            idx[k] = flat % n;
            flat /= n;
        }
        idx
    }

    pub fn x_of(&self, x_flat: usize) -> Vec<T> {
        self.unflatten(x_flat, self.nx)
            .into_iter()
            .map(|i| self.x_node(i))
            .collect()
    }

    pub fn v_of(&self, v_flat: usize) -> Vec<T> {
        self.unflatten(v_flat, self.nv)
            .into_iter()
            .map(|j| self.v_node(j))
            .collect()
    }

    /// `(x, v)` of a flat lattice index.
    pub fn point(&self, flat: usize) -> (Vec<T>, Vec<T>) {
        let nvt = self.v_count();
        (self.x_of(flat / nvt), self.v_of(flat % nvt))
    }

    /// Number of steps from `s` to `t`, rejecting non-integral ratios.
    pub fn steps_between(&self, s: T, t: T) -> Result<usize> {
        if !(t >= s) {
            return Err(KfpError::invalid(format!(
                "end time {t} precedes start time {s}"
            )));
        }
        let n = ((t - s) / self.dt).f64();
        let k = n.round();
        if (n - k).abs() > 1e-9 * k.max(1.0) {
            return Err(KfpError::invalid(format!(
                "(t - s)/dt = {n} is not an integer"
            )));
        }
        Ok(k as usize)
    }

    /// `dt / dv^2`, recorded for diagnostics; the implicit diffusion step has no
    /// stability restriction.
    pub fn diffusion_number(&self) -> T {
        self.dt / (self.dv() * self.dv())
    }

    /// Largest transport displacement per half-step, in x cells.
    pub fn max_shift_cells(&self) -> T {
        self.v_node(self.nv - 1).abs() * self.dt * T::of(0.5) / self.dx()
    }
}

/// Lattice function at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField<T> {
    pub grid: PhaseGrid<T>,
    pub time: T,
    pub values: Vec<T>,
}

impl<T: Real> PhaseField<T> {
    pub fn zeros(grid: &PhaseGrid<T>, time: T) -> Self {
        PhaseField {
            grid: grid.clone(),
            time,
            values: vec![T::zero(); grid.len()],
        }
    }

    pub fn constant(grid: &PhaseGrid<T>, time: T, c: T) -> Self {
        PhaseField {
            grid: grid.clone(),
            time,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_values(grid: &PhaseGrid<T>, time: T, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(KfpError::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(PhaseField {
            grid: grid.clone(),
            time,
            values,
        })
    }

    /// Samples `f(x, v)` at every lattice node.
    pub fn from_fn(grid: &PhaseGrid<T>, time: T, f: impl Fn(&[T], &[T]) -> T + Sync) -> Self {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|n| {
                let (x, v) = grid.point(n);
                f(&x, &v)
            })
            .collect();
        PhaseField {
            grid: grid.clone(),
            time,
            values,
        }
    }

    pub fn mass(&self) -> T {
        self.values.iter().copied().sum::<T>() * self.grid.cell_volume()
    }

    pub fn l2_norm_sq(&self) -> T {
        dot(&self.values, &self.values) * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> T {
        self.l2_norm_sq().sqrt()
    }

    /// `||f||` restricted to nodes where `mask(x, v)` holds.
    pub fn l2_norm_on(&self, mask: impl Fn(&[T], &[T]) -> bool) -> T {
        let s: T = self
            .values
            .iter()
            .enumerate()
            .filter(|(n, _)| {
                let (x, v) = self.grid.point(*n);
                mask(&x, &v)
            })
            .map(|(_, &f)| f * f)
            .sum();
        (s * self.grid.cell_volume()).sqrt()
    }

    pub fn inner(&self, other: &Self) -> T {
        dot(&self.values, &other.values) * self.grid.cell_volume()
    }

    pub fn l1_distance(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            * self.grid.cell_volume()
    }

    pub fn l1_norm(&self) -> T {
        self.values.iter().map(|a| a.abs()).sum::<T>() * self.grid.cell_volume()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: T, other: &Self) {
        for (x, &y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: T) {
        self.values.iter_mut().for_each(|x| *x *= a);
    }

    /// Pointwise product with `w(x, v)`.
    pub fn weighted(&self, w: impl Fn(&[T], &[T]) -> T + Sync) -> Self {
        let values = self
            .values
            .par_iter()
            .enumerate()
            .map(|(n, &f)| {
                let (x, v) = self.grid.point(n);
                f * w(&x, &v)
            })
            .collect();
        PhaseField {
            grid: self.grid.clone(),
            time: self.time,
            values,
        }
    }

    /// CSV with header `x,v,value` (`x1,..,xd,v1,..,vd,value` for `d > 1`), x-major.
    pub fn to_csv(&self) -> String {
        let d = self.grid.d;
        let mut out = String::new();
        out.push_str(&coordinate_header(d, &["x", "v"]));
        out.push_str(",value\n");
        for (n, f) in self.values.iter().enumerate() {
            let (x, v) = self.grid.point(n);
            for c in x.iter().chain(&v) {
                out.push_str(&format!("{},", c.f64()));
            }
            out.push_str(&format!("{:e}\n", f.f64()));
        }
        out
    }

    /// Binary snapshot: magic `KFP1`, then little-endian `u32 d, u32 nx, u32 nv`,
    /// `f64 Lx, Lv, dt, time`, then the values as `f64`.
    pub fn write_kfp1(&self, mut w: impl Write) -> Result<()> {
        let g = &self.grid;
        w.write_all(b"KFP1")?;
        for n in [g.d, g.nx, g.nv] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for x in [g.lx, g.lv, g.dt, self.time] {
            w.write_all(&x.f64().to_le_bytes())?;
        }
        for x in &self.values {
            w.write_all(&x.f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_kfp1(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"KFP1" {
            return Err(KfpError::Format("missing KFP1 magic".into()));
        }
        let mut u = [0u8; 4];
        let mut dims = [0usize; 3];
        for n in dims.iter_mut() {
            r.read_exact(&mut u)?;
            *n = u32::from_le_bytes(u) as usize;
        }
        let mut b = [0u8; 8];
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let lx = read_f64(&mut r)?;
        let lv = read_f64(&mut r)?;
        let dt = read_f64(&mut r)?;
        let time = read_f64(&mut r)?;
        let grid = PhaseGrid::new(dims[0], dims[1], dims[2], T::of(lx), T::of(lv), T::of(dt))
            .map_err(|e| KfpError::Format(e.to_string()))?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            values.push(T::of(read_f64(&mut r)?));
        }
        Ok(PhaseField {
            grid,
            time: T::of(time),
            values,
        })
    }
}

pub(crate) fn coordinate_header(d: usize, names: &[&str]) -> String {
    names
        .iter()
        .flat_map(|n| {
            (0..d).map(move |k| {
                if d == 1 {
                    n.to_string()
                } else {
                    format!("{n}{}", k + 1)
                }
            })
        })
        .collect::<Vec<_>>()
        .join(",")
}

type SourceFn<T> = dyn Fn(T, &[T], &[T]) -> T + Send + Sync;

/// Source `S(t, x, v)` sampled on the lattice.
#[derive(Clone, Default)]
pub enum SourceTerm<T> {
    #[default]
    Zero,
    /// Pointwise sampler.
    Function(Arc<SourceFn<T>>),
    /// `phi(t) * chi(x, v)` with `chi` given on the lattice.
    Tensor {
        phi: Arc<dyn Fn(T) -> T + Send + Sync>,
        chi: Arc<Vec<T>>,
    },
}

impl<T> std::fmt::Debug for SourceTerm<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceTerm::Zero => f.write_str("Zero"),
            SourceTerm::Function(_) => f.write_str("Function(..)"),
            SourceTerm::Tensor { .. } => f.write_str("Tensor(..)"),
        }
    }
}

impl<T: Real> SourceTerm<T> {
    pub fn function(f: impl Fn(T, &[T], &[T]) -> T + Send + Sync + 'static) -> Self {
        SourceTerm::Function(Arc::new(f))
    }

    pub fn tensor(phi: impl Fn(T) -> T + Send + Sync + 'static, chi: &PhaseField<T>) -> Self {
        SourceTerm::Tensor {
            phi: Arc::new(phi),
            chi: Arc::new(chi.values.clone()),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SourceTerm::Zero)
    }

    /// Lattice samples at time `t`, or `None` for the zero source.
    pub fn sample(&self, grid: &PhaseGrid<T>, t: T) -> Option<Vec<T>> {
        match self {
            SourceTerm::Zero => None,
            SourceTerm::Function(f) => Some(
                (0..grid.len())
                    .into_par_iter()
                    .map(|n| {
                        let (x, v) = grid.point(n);
                        f(t, &x, &v)
                    })
                    .collect(),
            ),
            SourceTerm::Tensor { phi, chi } => {
                let p = phi(t);
                Some(chi.iter().map(|&c| p * c).collect())
            }
        }
    }
}

/// Energy balance of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedgerEntry<T> {
    pub t_start: T,
    pub t_end: T,
    pub norm_sq_start: T,
    pub norm_sq_end: T,
    /// Transport loss, `2 dt a_h(g, g)` and the implicit-Euler defect `||g - h||^2`.
    pub dissipation: T,
    pub source_work: T,
    pub residual: T,
}

pub type EnergyLedger<T> = Vec<EnergyLedgerEntry<T>>;

/// Max absolute per-step residual.
pub fn energy_residual<T: Real>(ledger: &[EnergyLedgerEntry<T>]) -> T {
    ledger
        .iter()
        .map(|e| e.residual.abs())
        .fold(T::zero(), T::max)
}

/// Interpolation used for non-lattice shifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Remap {
    /// Two-point conservative linear remap: local, positive, first order.
    #[default]
    Linear,
    /// Trigonometric interpolation; the Nyquist mode is damped by `cos(pi c)`
    /// so the shift stays real. Accurate but global in x and not positive.
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    #[serde(default)]
    pub remap: Remap,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions {
            tol: T::of(1e-10),
            max_iter: 500,
            remap: Remap::Linear,
        }
    }
}

impl<T: Real> SolverOptions<T> {
    pub fn with_tol(tol: T) -> Self {
        SolverOptions {
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero()) {
            return Err(KfpError::invalid("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(KfpError::invalid("max_iter must be positive"));
        }
        Ok(())
    }
}

/// Periodic shifter for lines of length `n`.
struct Shifter<T: Real> {
    n: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> Shifter<T> {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Shifter {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// `line(x) <- line(x - c dx)` in place; returns the loss `||in||^2 - ||out||^2`
    /// in raw (unweighted) units.
    fn shift(&self, line: &mut [T], c: T, remap: Remap, buf: &mut Vec<Complex<T>>) -> T {
        let n = self.n;
        let first = line[0];
        if line.iter().all(|&y| y == first) {
            return T::zero();
        }
        let nearest = c.round();
        if (c - nearest).abs() <= T::of(1e-9) {
            let m = nearest.to_i64().unwrap_or(0).rem_euclid(n as i64) as usize;
            line.rotate_right(m);
            return T::zero();
        }
        match remap {
            Remap::Linear => {
                let m = c.floor();
                let theta = c - m;
                let m = m.to_i64().unwrap_or(0).rem_euclid(n as i64) as usize;
                line.rotate_right(m);
                let mut jumps = T::zero();
                let last = line[n - 1];
                let mut prev = last;
                for y in line.iter_mut() {
                    let cur = *y;
                    jumps += (cur - prev) * (cur - prev);
                    *y = (T::one() - theta) * cur + theta * prev;
                    prev = cur;
                }
                theta * (T::one() - theta) * jumps
            }
            Remap::Spectral => {
                buf.clear();
                buf.extend(line.iter().map(|&y| Complex::new(y, T::zero())));
                self.forward.process(buf);
                let nt = T::of_usize(n);
                let pi = T::of(std::f64::consts::PI);
                let mut loss = T::zero();
                for (k, z) in buf.iter_mut().enumerate() {
                    if 2 * k == n {
                        let damp = (pi * c).cos();
                        loss += (T::one() - damp * damp) * z.norm_sqr() / nt;
                        *z = z.scale(damp);
                    } else {
                        let kk = if 2 * k < n {
                            T::of_usize(k)
                        } else {
                            T::of_usize(k) - nt
                        };
                        let phase = -T::of(2.0) * pi * kk * c / nt;
                        *z = *z * Complex::new(phase.cos(), phase.sin());
                    }
                }
                self.inverse.process(buf);
                for (y, z) in line.iter_mut().zip(buf.iter()) {
                    *y = z.re / nt;
                }
                loss
            }
        }
    }
}

fn shift_rows<T: Real>(g: &PhaseGrid<T>, shifter: &Shifter<T>, remap: Remap, values: &mut [T], tau: T) -> T {
    let (d, nx) = (g.d, g.nx);
    let nvt = g.v_count();
    let nxt = g.x_count();
    let dx = g.dx();
    let rows: Vec<(Vec<T>, T)> = (0..nvt)
        .into_par_iter()
        .map(|j| {
            let v = g.v_of(j);
            let mut block: Vec<T> = (0..nxt).map(|i| values[i * nvt + j]).collect();
            let mut loss = T::zero();
            let mut line = vec![T::zero(); nx];
            let mut buf = Vec::with_capacity(nx);
            for k in 0..d {
                let c = v[k] * tau / dx;
                let step = nx.pow((d - 1 - k) as u32);
                for o in 0..nxt / (step * nx) {
                    for inner in 0..step {
                        let base = o * step * nx + inner;
                        for (i, y) in line.iter_mut().enumerate() {
                            *y = block[base + i * step];
                        }
                        loss += shifter.shift(&mut line, c, remap, &mut buf);
                        for (i, &y) in line.iter().enumerate() {
                            block[base + i * step] = y;
                        }
                    }
                }
            }
            (block, loss)
        })
        .collect();
    let mut loss = T::zero();
    for (j, (block, l)) in rows.into_iter().enumerate() {
        for (i, y) in block.into_iter().enumerate() {
            values[i * nvt + j] = y;
        }
        loss += l;
    }
    loss * g.cell_volume()
}

/// Precomputed lattice tables and transforms shared by every step.
pub struct Scheme<T: Real> {
    grid: PhaseGrid<T>,
    field: CoefficientField<T>,
    opts: SolverOptions<T>,
    shifter: Shifter<T>,
    /// Lower-corner node index of every dual velocity cell.
    cell_base: Vec<usize>,
    /// Cell-centre velocities, `d` per cell.
    cell_center: Vec<T>,
    /// Flat v offset of each of the `2^d` corners.
    corner_offset: Vec<usize>,
    /// Flat v stride of each axis.
    stride: Vec<usize>,
}

impl<T: Real> Scheme<T> {
    pub fn new(grid: &PhaseGrid<T>, field: &CoefficientField<T>, opts: &SolverOptions<T>) -> Result<Self> {
        grid.validate()?;
        opts.validate()?;
        if field.dim() != grid.d {
            return Err(KfpError::DimensionMismatch {
                expected: grid.d,
                got: field.dim(),
            });
        }
        let d = grid.d;
        let (cell_base, corner_offset, stride) = velocity_cells(grid);
        let half = grid.dv() * T::of(0.5);
        let mut cell_center = Vec::with_capacity(cell_base.len() * d);
        for c in 0..cell_base.len() {
            cell_center.extend(grid.unflatten(c, grid.nv - 1).iter().map(|&j| grid.v_node(j) + half));
        }
        Ok(Scheme {
            grid: grid.clone(),
            field: field.clone(),
            opts: *opts,
            shifter: Shifter::new(grid.nx),
            cell_base,
            cell_center,
            corner_offset,
            stride,
        })
    }

    pub fn grid(&self) -> &PhaseGrid<T> {
        &self.grid
    }

    pub fn field(&self) -> &CoefficientField<T> {
        &self.field
    }

    pub fn options(&self) -> &SolverOptions<T> {
        &self.opts
    }

    /// Shifts every velocity row by `v tau`; returns the weighted l2 loss.
    pub fn transport(&self, values: &mut [T], tau: T) -> T {
        shift_rows(&self.grid, &self.shifter, self.opts.remap, values, tau)
    }

    fn sample_cells(&self, t: T, x: &[T], transpose: bool, out: &mut [T]) {
        let d = self.grid.d;
        let dd = d * d;
        for (c, a) in out.chunks_exact_mut(dd).enumerate() {
            self.field
                .sample_into(t, x, &self.cell_center[c * d..(c + 1) * d], a);
            if transpose {
                for i in 0..d {
                    for j in 0..i {
                        a.swap(i * d + j, j * d + i);
                    }
                }
            }
        }
    }

    /// `y = D g` on one x-slice.
    fn apply_d(&self, a_cells: &[T], g: &[T], y: &mut [T]) {
        let d = self.grid.d;
        let dd = d * d;
        let inv_dv = T::one() / self.grid.dv();
        let w = inv_dv / T::of_usize(1 << d);
        y.iter_mut().for_each(|e| *e = T::zero());
        let mut grad = [T::zero(); 2];
        for (c, &b) in self.cell_base.iter().enumerate() {
            let a = &a_cells[c * dd..(c + 1) * dd];
            for corner in 0..1usize << d {
                for k in 0..d {
                    let lo = b + self.corner_offset[corner & !(1 << k)];
                    grad[k] = (g[lo + self.stride[k]] - g[lo]) * inv_dv;
                }
                for k in 0..d {
                    let flux: T = (0..d).map(|l| a[k * d + l] * grad[l]).sum::<T>() * w;
                    let lo = b + self.corner_offset[corner & !(1 << k)];
                    y[lo + self.stride[k]] += flux;
                    y[lo] -= flux;
                }
            }
        }
    }

    /// Raw `sum_v g (D g)` on one slice.
    fn form(&self, a_cells: &[T], g: &[T], scratch: &mut [T]) -> T {
        self.apply_d(a_cells, g, scratch);
        dot(g, scratch)
    }

    /// Solves `(I + dt D) g = h` slice by slice, in place. Returns the weighted
    /// `a_h(g, g)` and the worst solve statistics.
    fn diffuse(&self, values: &mut [T], t: T, dt: T, transpose: bool) -> Result<(T, SolveStats)> {
        let g = &self.grid;
        let nvt = g.v_count();
        let d = g.d;
        let nc = self.cell_base.len();
        let symmetric = self.field.is_symmetric();
        let tol = self.opts.tol;
        let max_iter = self.opts.max_iter;
        let shared_cells = if self.field.is_constant() {
            let mut a = vec![T::zero(); nc * d * d];
            self.sample_cells(t, &g.x_of(0), transpose, &mut a);
            Some(a)
        } else {
            None
        };
        let results: Vec<Result<(T, SolveStats)>> = values
            .par_chunks_mut(nvt)
            .enumerate()
            .map(|(i, slice)| {
                let owned;
                let a_cells = match &shared_cells {
                    Some(a) => a.as_slice(),
                    None => {
                        let mut a = vec![T::zero(); nc * d * d];
                        self.sample_cells(t, &g.x_of(i), transpose, &mut a);
                        owned = a;
                        owned.as_slice()
                    }
                };
                let op = |u: &[T], out: &mut [T]| {
                    self.apply_d(a_cells, u, out);
                    for (o, &ui) in out.iter_mut().zip(u) {
                        *o = ui + dt * *o;
                    }
                };
                let rhs = slice.to_vec();
                let stats = if symmetric {
                    conjugate_gradient(op, &rhs, slice, tol, max_iter)
                } else {
                    bicgstab(op, &rhs, slice, tol, max_iter)
                }
                .map_err(|e| KfpError::Indexed {
                    context: format!("diffusion solve at x-slice {i}, t = {t}"),
                    source: Box::new(e),
                })?;
                let mut scratch = vec![T::zero(); nvt];
                Ok((self.form(a_cells, slice, &mut scratch), stats))
            })
            .collect();
        let mut form = T::zero();
        let mut worst = SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        };
        for r in results {
            let (f, s) = r?;
            form += f;
            if s.relative_residual > worst.relative_residual {
                worst.relative_residual = s.relative_residual;
            }
            worst.iterations = worst.iterations.max(s.iterations);
        }
        Ok((form * g.cell_volume(), worst))
    }

    /// Discrete `a_h(f, f)` of a lattice function with `A` sampled at time `t`.
    pub fn quadratic_form(&self, values: &[T], t: T) -> T {
        let g = &self.grid;
        let nvt = g.v_count();
        let nc = self.cell_base.len();
        let dd = g.d * g.d;
        values
            .par_chunks(nvt)
            .enumerate()
            .map(|(i, slice)| {
                let mut a = vec![T::zero(); nc * dd];
                self.sample_cells(t, &g.x_of(i), false, &mut a);
                let mut scratch = vec![T::zero(); nvt];
                self.form(&a, slice, &mut scratch)
            })
            .collect::<Vec<T>>()
            .into_iter()
            .sum::<T>()
            * g.cell_volume()
    }

    /// Discrete `||grad_v f||^2` in the corner-gradient sense.
    pub fn gradient_norm_sq(&self, values: &[T]) -> T {
        corner_gradient_norm_sq(&self.grid, &self.cell_base, &self.corner_offset, &self.stride, values)
    }

    /// Implicit diffusion step with `A` sampled at `t_new`.
    pub fn diffusion(&self, values: &mut [T], t_new: T, dt: T) -> Result<SolveStats> {
        self.diffuse(values, t_new, dt, false).map(|(_, s)| s)
    }

    /// One forward Strang step from `t0` to `t0 + dt`, in place.
    pub fn step(&self, values: &mut [T], t0: T, source: &SourceTerm<T>) -> Result<EnergyLedgerEntry<T>> {
        let g = &self.grid;
        let dt = g.dt;
        let half = dt * T::of(0.5);
        let cv = g.cell_volume();
        let start = dot(values, values) * cv;
        let loss1 = self.transport(values, half);
        let mut source_work = T::zero();
        if let Some(s) = source.sample(g, t0 + half) {
            let us = dot(values, &s) * cv;
            let ss = dot(&s, &s) * cv;
            source_work = T::of(2.0) * dt * us + dt * dt * ss;
            for (u, &si) in values.iter_mut().zip(&s) {
                *u += dt * si;
            }
        }
        let h = values.to_vec();
        let (form, _) = self.diffuse(values, t0 + dt, dt, false)?;
        let defect: T = values
            .iter()
            .zip(&h)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            * cv;
        let loss2 = self.transport(values, half);
        let end = dot(values, values) * cv;
        let dissipation = loss1 + loss2 + T::of(2.0) * dt * form + defect;
        Ok(EnergyLedgerEntry {
            t_start: t0,
            t_end: t0 + dt,
            norm_sq_start: start,
            norm_sq_end: end,
            dissipation,
            source_work,
            residual: end - start + dissipation - source_work,
        })
    }

    /// Contribution of the source sampled at `t0 + dt/2` to the end of the step
    /// starting at `t0`: `T(dt/2) (I + dt D)^{-1} (dt S)`.
    pub fn inject(&self, source: &[T], t0: T) -> Result<Vec<T>> {
        let dt = self.grid.dt;
        let mut v: Vec<T> = source.iter().map(|&s| dt * s).collect();
        self.diffuse(&mut v, t0 + dt, dt, false)?;
        self.transport(&mut v, dt * T::of(0.5));
        Ok(v)
    }

    /// Transpose of [`Scheme::step`] (without source), in place.
    pub fn adjoint_step(&self, values: &mut [T], t0: T) -> Result<()> {
        let dt = self.grid.dt;
        let half = dt * T::of(0.5);
        self.transport(values, -half);
        self.diffuse(values, t0 + dt, dt, true)?;
        self.transport(values, -half);
        Ok(())
    }
}

fn corner_gradient_norm_sq<T: Real>(
    g: &PhaseGrid<T>,
    cell_base: &[usize],
    corner_offset: &[usize],
    stride: &[usize],
    values: &[T],
) -> T {
    let d = g.d;
    let nvt = g.v_count();
    let inv_dv = T::one() / g.dv();
    let w = T::one() / T::of_usize(1 << d);
    values
        .chunks(nvt)
        .map(|slice| {
            let mut acc = T::zero();
            for &b in cell_base {
                for corner in 0..1usize << d {
                    for k in 0..d {
                        let lo = b + corner_offset[corner & !(1 << k)];
                        let gk = (slice[lo + stride[k]] - slice[lo]) * inv_dv;
                        acc += w * gk * gk;
                    }
                }
            }
            acc
        })
        .sum::<T>()
        * g.cell_volume()
}

/// `||grad_v f||^2` with the same corner gradients as the diffusion operator.
pub fn velocity_gradient_norm_sq<T: Real>(f: &PhaseField<T>) -> T {
    let g = &f.grid;
    let (cell_base, offsets, stride) = velocity_cells(g);
    corner_gradient_norm_sq(g, &cell_base, &offsets, &stride, &f.values)
}

fn velocity_cells<T: Real>(g: &PhaseGrid<T>) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (d, nv) = (g.d, g.nv);
    let stride: Vec<usize> = (0..d).map(|k| nv.pow((d - 1 - k) as u32)).collect();
    let corner_offset = (0..1usize << d)
        .map(|c| (0..d).filter(|k| c >> k & 1 == 1).map(|k| stride[k]).sum())
        .collect();
    let cell_base = (0..(nv - 1).pow(d as u32))
        .map(|c| g.unflatten(c, nv - 1).iter().zip(&stride).map(|(i, s)| i * s).sum())
        .collect();
    (cell_base, corner_offset, stride)
}

/// Transport over time `dt` with the default spectral remap.
pub fn transport_step<T: Real>(f: &PhaseField<T>, dt: T) -> PhaseField<T> {
    transport_step_with(f, dt, Remap::Linear)
}

pub fn transport_step_with<T: Real>(f: &PhaseField<T>, dt: T, remap: Remap) -> PhaseField<T> {
    let mut out = f.clone();
    shift_rows(&f.grid, &Shifter::new(f.grid.nx), remap, &mut out.values, dt);
    out
}

/// Solves `(I + dt D_h(A(t + dt))) g = f`.
pub fn diffusion_step<T: Real>(
    f: &PhaseField<T>,
    field: &CoefficientField<T>,
    t: T,
    dt: T,
    opts: &SolverOptions<T>,
) -> Result<PhaseField<T>> {
    let scheme = Scheme::new(&f.grid, field, opts)?;
    let mut out = f.clone();
    scheme.diffusion(&mut out.values, t + dt, dt)?;
    out.time = t + dt;
    Ok(out)
}

/// Strang-split evolution from `s` to `t`.
pub fn evolve<T: Real>(
    psi: &PhaseField<T>,
    s: T,
    t: T,
    field: &CoefficientField<T>,
    source: &SourceTerm<T>,
    opts: &SolverOptions<T>,
) -> Result<(PhaseField<T>, EnergyLedger<T>)> {
    evolve_observed(psi, s, t, field, source, opts, |_| {})
}

/// Like [`evolve`], calling `observe` on the initial state and after every step.
pub fn evolve_observed<T: Real>(
    psi: &PhaseField<T>,
    s: T,
    t: T,
    field: &CoefficientField<T>,
    source: &SourceTerm<T>,
    opts: &SolverOptions<T>,
    mut observe: impl FnMut(&PhaseField<T>),
) -> Result<(PhaseField<T>, EnergyLedger<T>)> {
    let grid = &psi.grid;
    if !(t > s) {
        return Err(KfpError::invalid(format!("evolve needs t > s, got s = {s}, t = {t}")));
    }
    let n = grid.steps_between(s, t)?;
    let scheme = Scheme::new(grid, field, opts)?;
    let mut f = psi.clone();
    f.time = s;
    observe(&f);
    let mut ledger = Vec::with_capacity(n);
    for k in 0..n {
        let t0 = s + T::of_usize(k) * grid.dt;
        ledger.push(scheme.step(&mut f.values, t0, source)?);
        f.time = t0 + grid.dt;
        observe(&f);
    }
    f.time = t;
    Ok((f, ledger))
}

/// Every intermediate state of [`evolve`], initial state included.
pub fn evolve_with_trajectory<T: Real>(
    psi: &PhaseField<T>,
    s: T,
    t: T,
    field: &CoefficientField<T>,
    opts: &SolverOptions<T>,
) -> Result<Vec<PhaseField<T>>> {
    let mut traj = Vec::new();
    evolve_observed(psi, s, t, field, &SourceTerm::Zero, opts, |f| traj.push(f.clone()))?;
    Ok(traj)
}

/// Exact transpose of the forward scheme from `s` to `t`.
pub fn adjoint_evolve<T: Real>(
    phi: &PhaseField<T>,
    s: T,
    t: T,
    field: &CoefficientField<T>,
    opts: &SolverOptions<T>,
) -> Result<PhaseField<T>> {
    let grid = &phi.grid;
    let n = grid.steps_between(s, t)?;
    let scheme = Scheme::new(grid, field, opts)?;
    let mut f = phi.clone();
    for k in (0..n).rev() {
        let t0 = s + T::of_usize(k) * grid.dt;
        scheme.adjoint_step(&mut f.values, t0)?;
    }
    f.time = s;
    Ok(f)
}
