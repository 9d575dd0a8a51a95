//! Closed-form decay, twist and Gaussian bounds, the exact constant-coefficient
//! kernel, empirical Moser and Caccioppoli constants, and the harnesses that
//! compare them with solver output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{KfpError, Result};
use crate::geometry::{rho_tau_sq, rho_tau_sq_periodic, KineticCylinder, Orientation, PhasePoint, PhaseSet};
use crate::propagator::EvolutionFamily;
use crate::scalar::{wrap_centered, Real};
use crate::solver::{velocity_gradient_norm_sq, PhaseField, PhaseGrid};

fn check_constants<T: Real>(lambda: T, upper: T) -> Result<()> {
    if !(lambda > T::zero()) || !(upper >= lambda) || !upper.is_finite() {
        return Err(KfpError::invalid(format!(
            "ellipticity constants need 0 < lambda <= Lambda, got ({lambda}, {upper})"
        )));
    }
    Ok(())
}

/// `3 lambda / (104 Lambda^2)`.
pub fn davies_alpha<T: Real>(lambda: T, upper: T) -> Result<T> {
    check_constants(lambda, upper)?;
    Ok(T::of(3.0) * lambda / (T::of(104.0) * upper * upper))
}

/// `2 Lambda^2 / lambda`.
pub fn kappa<T: Real>(lambda: T, upper: T) -> Result<T> {
    check_constants(lambda, upper)?;
    Ok(T::of(2.0) * upper * upper / lambda)
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(KfpError::invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// `exp(-alpha rho_tau(E, F)^2 / tau)` on the whole space.
pub fn davies_l2_bound<T: Real>(lambda: T, upper: T, e: &PhaseSet<T>, f: &PhaseSet<T>, tau: T) -> Result<T> {
    check_tau(tau)?;
    let alpha = davies_alpha(lambda, upper)?;
    Ok((-alpha * rho_tau_sq(e, f, tau)? / tau).exp())
}

/// [`davies_l2_bound`] on a phase space periodic in `x`: the distance is taken to
/// the nearest periodic image of `F`.
pub fn davies_l2_bound_periodic<T: Real>(
    lambda: T,
    upper: T,
    e: &PhaseSet<T>,
    f: &PhaseSet<T>,
    tau: T,
    period: T,
) -> Result<T> {
    check_tau(tau)?;
    let alpha = davies_alpha(lambda, upper)?;
    Ok((-alpha * rho_tau_sq_periodic(e, f, tau, period)? / tau).exp())
}

/// Outcome of comparing a measured quantity against its theoretical bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub params: Value,
    pub theoretical: f64,
    pub measured: f64,
    /// `theoretical - measured`.
    pub margin: f64,
    /// `None` when the comparison is indeterminate (overflow).
    pub pass: Option<bool>,
    pub slack: f64,
}

impl BoundReport {
    pub fn new(name: &str, params: Value, theoretical: f64, measured: f64, slack: f64) -> Self {
        let margin = theoretical - measured;
        BoundReport {
            bound_name: name.to_string(),
            params,
            theoretical,
            measured,
            margin,
            pass: Some(margin >= -slack),
            slack,
        }
    }

    pub fn indeterminate(name: &str, params: Value, theoretical: f64, measured: f64) -> Self {
        BoundReport {
            bound_name: name.to_string(),
            params,
            theoretical,
            measured,
            margin: theoretical - measured,
            pass: None,
            slack: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.pass == Some(true)
    }
}

/// Random values on the lattice nodes of `set`, zero elsewhere.
pub fn random_field_on<T: Real>(grid: &PhaseGrid<T>, set: &PhaseSet<T>, seed: u64) -> Result<PhaseField<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = PhaseField::zeros(grid, T::zero());
    let mut hits = 0usize;
    for n in 0..grid.len() {
        let (x, v) = grid.point(n);
        if set.contains(&x, &v) {
            f.values[n] = T::of(rng.random_range(0.1..1.0));
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(KfpError::invalid("set contains no lattice node"));
    }
    Ok(f)
}

/// Measures `||Gamma(t, s) psi||_{l2(E)} / ||psi||` against the periodic Davies
/// bound; `psi` must vanish off `F`.
pub fn verify_davies<T: Real>(
    fam: &EvolutionFamily<T>,
    e: &PhaseSet<T>,
    f: &PhaseSet<T>,
    psi: &PhaseField<T>,
    s: T,
    t: T,
) -> Result<BoundReport> {
    let g = fam.grid();
    for (n, &val) in psi.values.iter().enumerate() {
        if val != T::zero() {
            let (x, v) = g.point(n);
            if !f.contains(&x, &v) {
                return Err(KfpError::invalid("psi is not supported in F"));
            }
        }
    }
    let tau = t - s;
    let field = fam.field();
    let (lambda, upper) = (field.declared_lambda(), field.declared_upper());
    let theoretical = davies_l2_bound_periodic(lambda, upper, e, f, tau, g.lx)?;
    let out = fam.propagate(psi, s, t)?;
    let measured = out.l2_norm_on(|x, v| e.contains(x, v)) / psi.l2_norm();
    let rho = rho_tau_sq_periodic(e, f, tau, g.lx)?.sqrt();
    let params = json!({
        "lambda": lambda.f64(), "Lambda": upper.f64(), "d": g.d, "tau": tau.f64(),
        "rho": rho.f64(), "alpha": davies_alpha(lambda, upper)?.f64(),
        "E": serde_json::to_value(e.clone().map_f64()).unwrap_or(Value::Null),
        "F": serde_json::to_value(f.clone().map_f64()).unwrap_or(Value::Null),
    });
    Ok(BoundReport::new(
        "davies_l2",
        params,
        theoretical.f64(),
        measured.f64(),
        1e-12,
    ))
}

trait MapF64 {
    fn map_f64(self) -> PhaseSet<f64>;
}

impl<T: Real> MapF64 for PhaseSet<T> {
    fn map_f64(self) -> PhaseSet<f64> {
        let p = |v: Vec<T>| v.into_iter().map(|c| c.f64()).collect::<Vec<f64>>();
        let b = |v: Vec<[T; 2]>| v.into_iter().map(|[a, b]| [a.f64(), b.f64()]).collect::<Vec<_>>();
        match self {
            PhaseSet::Points { points } => PhaseSet::Points {
                points: points
                    .into_iter()
                    .map(|q| PhasePoint { x: p(q.x), v: p(q.v) })
                    .collect(),
            },
            PhaseSet::Box { x, v } => PhaseSet::Box { x: b(x), v: b(v) },
        }
    }
}

/// Shape of a twist function `h(x, v)` on a phase space periodic in `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum TwistShape<T> {
    Zero,
    /// `sum_k ax sin(2 pi m x_k / L + px) + av sin(kv v_k + pv)`.
    Sinusoid {
        ax: T,
        modes: u32,
        px: T,
        av: T,
        kv: T,
        pv: T,
        period: T,
    },
    /// Periodic triangle wave in `x_1` with slope `+-slope`.
    Triangle { slope: T, period: T },
    /// `clamp(b . v + c, -cap, cap)`.
    ClampedLinearV { b: Vec<T>, c: T, cap: T },
    /// `min(delta * rho_tau({(x + tau v, v)}, F), cap)` with periodic images of `F`.
    /// Vanishes on `F`, and on `E` at time `tau` it is at least
    /// `min(delta rho_tau(E, F), cap)`.
    Cone {
        target: PhaseSet<T>,
        tau: T,
        delta: T,
        cap: T,
        period: T,
    },
}

/// Bounded Lipschitz twist with declared constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistFunction<T> {
    pub shape: TwistShape<T>,
    pub lip_x: T,
    pub lip_v: T,
    pub bound: T,
}

impl<T: Real> TwistFunction<T> {
    pub fn zero() -> Self {
        TwistFunction {
            shape: TwistShape::Zero,
            lip_x: T::zero(),
            lip_v: T::zero(),
            bound: T::zero(),
        }
    }

    pub fn sinusoid(d: usize, ax: T, modes: u32, px: T, av: T, kv: T, pv: T, period: T) -> Self {
        let two_pi = T::of(std::f64::consts::TAU);
        let rd = T::of_usize(d).sqrt();
        TwistFunction {
            lip_x: ax.abs() * two_pi * T::of(modes as f64) / period * rd,
            lip_v: (av * kv).abs() * rd,
            bound: T::of_usize(d) * (ax.abs() + av.abs()),
            shape: TwistShape::Sinusoid {
                ax,
                modes,
                px,
                av,
                kv,
                pv,
                period,
            },
        }
    }

    pub fn triangle(slope: T, period: T) -> Self {
        TwistFunction {
            lip_x: slope.abs(),
            lip_v: T::zero(),
            bound: slope.abs() * period * T::of(0.25),
            shape: TwistShape::Triangle { slope, period },
        }
    }

    pub fn clamped_linear_v(b: Vec<T>, c: T, cap: T) -> Self {
        let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
        TwistFunction {
            lip_x: T::zero(),
            lip_v: nb,
            bound: cap.abs(),
            shape: TwistShape::ClampedLinearV { b, c, cap: cap.abs() },
        }
    }

    /// The cone twist of the decay argument with `delta = 3 rho / (26 kappa tau)`.
    ///
    /// `(x, v) -> (x/tau + v, v)` has x-Lipschitz constant `1/tau` and v-Lipschitz
    /// constant `sqrt(2) <= 2`; the declared `lip_v = 2 delta` makes the twist bound
    /// times `exp(-delta rho)` collapse to the Davies bound exactly.
    pub fn decay_cone(e: &PhaseSet<T>, f: &PhaseSet<T>, tau: T, kappa: T, cap: T, period: T) -> Result<Self> {
        check_tau(tau)?;
        let rho = rho_tau_sq_periodic(e, f, tau, period)?.sqrt();
        let delta = T::of(3.0) * rho / (T::of(26.0) * kappa * tau);
        Ok(TwistFunction {
            lip_x: delta / tau,
            lip_v: T::of(2.0) * delta,
            bound: cap,
            shape: TwistShape::Cone {
                target: f.clone(),
                tau,
                delta,
                cap,
                period,
            },
        })
    }

    pub fn eval(&self, x: &[T], v: &[T]) -> T {
        match &self.shape {
            TwistShape::Zero => T::zero(),
            TwistShape::Sinusoid {
                ax,
                modes,
                px,
                av,
                kv,
                pv,
                period,
            } => {
                let w = T::of(std::f64::consts::TAU) * T::of(*modes as f64) / *period;
                x.iter()
                    .zip(v)
                    .map(|(&xk, &vk)| *ax * (w * xk + *px).sin() + *av * (*kv * vk + *pv).sin())
                    .sum()
            }
            TwistShape::Triangle { slope, period } => {
                let y = wrap_centered(x[0], *period);
                *slope * (*period * T::of(0.25) - y.abs())
            }
            TwistShape::ClampedLinearV { b, c, cap } => {
                let s: T = b.iter().zip(v).map(|(&bk, &vk)| bk * vk).sum::<T>() + *c;
                s.max(-*cap).min(*cap)
            }
            TwistShape::Cone {
                target,
                tau,
                delta,
                cap,
                period,
            } => {
                let xs: Vec<T> = x.iter().zip(v).map(|(&a, &b)| a + *tau * b).collect();
                let p = PhaseSet::Points {
                    points: vec![PhasePoint { x: xs, v: v.to_vec() }],
                };
                let r = rho_tau_sq_periodic(&p, target, *tau, *period)
                    .map(|s| s.sqrt())
                    .unwrap_or(T::infinity());
                (*delta * r).min(*cap)
            }
        }
    }

    /// `h_t(x, v) = h(x - t v, v)`.
    pub fn eval_transported(&self, t: T, x: &[T], v: &[T]) -> T {
        let xs: Vec<T> = x.iter().zip(v).map(|(&a, &b)| a - t * b).collect();
        self.eval(&xs, v)
    }

    /// Checks the declared constants on `n_pairs` random pairs in `x in [-Lx/2, Lx/2)^d`,
    /// `v in [-vmax, vmax]^d`: half the pairs differ only in `x`, half only in `v`.
    pub fn validate(&self, d: usize, lx: T, vmax: T, n_pairs: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tol = T::of(1.0 + 1e-6);
        let draw = |rng: &mut ChaCha8Rng, lo: T, hi: T| T::of(rng.random_range(lo.f64()..hi.f64()));
        let half = lx * T::of(0.5);
        for i in 0..n_pairs {
            let x: Vec<T> = (0..d).map(|_| draw(&mut rng, -half, half)).collect();
            let v: Vec<T> = (0..d).map(|_| draw(&mut rng, -vmax, vmax)).collect();
            let scale = T::of(10f64.powf(rng.random_range(-3.0..0.0)));
            let step: Vec<T> = (0..d).map(|_| draw(&mut rng, -T::one(), T::one()) * scale).collect();
            let len = step.iter().map(|&s| s * s).sum::<T>().sqrt();
            if len == T::zero() {
                continue;
            }
            let h0 = self.eval(&x, &v);
            if h0.abs() > self.bound * tol + T::of(1e-12) {
                return Err(KfpError::invalid(format!("|h| = {h0} exceeds declared bound {}", self.bound)));
            }
            let (h1, lip, axis) = if i % 2 == 0 {
                let x1: Vec<T> = x.iter().zip(&step).map(|(&a, &b)| a + b).collect();
                (self.eval(&x1, &v), self.lip_x, "x")
            } else {
                let v1: Vec<T> = v.iter().zip(&step).map(|(&a, &b)| a + b).collect();
                (self.eval(&x, &v1), self.lip_v, "v")
            };
            let q = (h1 - h0).abs() / len;
            if q > lip * tol + T::of(1e-9) {
                return Err(KfpError::invalid(format!(
                    "sampled {axis}-Lipschitz quotient {q} exceeds declared constant {lip}"
                )));
            }
        }
        Ok(())
    }
}

/// `exp(kappa (lip_v^2 t + lip_x^2 t^3 / 3))`.
pub fn twist_growth_bound<T: Real>(lambda: T, upper: T, h: &TwistFunction<T>, t: T) -> Result<T> {
    if !(t > T::zero()) {
        return Err(KfpError::invalid(format!("t must be positive, got {t}")));
    }
    let k = kappa(lambda, upper)?;
    Ok((k * (h.lip_v * h.lip_v * t + h.lip_x * h.lip_x * t * t * t / T::of(3.0))).exp())
}

/// Measures `||e^{h_{t-s}} Gamma(t, s) (e^{-h} psi)|| / ||psi||` against
/// [`twist_growth_bound`].
pub fn verify_twist<T: Real>(
    fam: &EvolutionFamily<T>,
    h: &TwistFunction<T>,
    psi: &PhaseField<T>,
    s: T,
    t: T,
) -> Result<BoundReport> {
    let tau = t - s;
    let field = fam.field();
    let (lambda, upper) = (field.declared_lambda(), field.declared_upper());
    let bound = twist_growth_bound(lambda, upper, h, tau)?;
    let params = json!({
        "lambda": lambda.f64(), "Lambda": upper.f64(), "d": fam.grid().d, "tau": tau.f64(),
        "lip_x": h.lip_x.f64(), "lip_v": h.lip_v.f64(), "sup_h": h.bound.f64(),
    });
    let norm = psi.l2_norm();
    if !bound.is_finite() || bound.f64() * norm.f64() > 1e300 {
        return Ok(BoundReport::indeterminate("twist_growth", params, f64::INFINITY, f64::NAN));
    }
    let twisted = psi.weighted(|x, v| (-h.eval(x, v)).exp());
    let out = fam.propagate(&twisted, s, t)?;
    let back = out.weighted(|x, v| h.eval_transported(tau, x, v).exp());
    let measured = back.l2_norm() / norm;
    Ok(BoundReport::new("twist_growth", params, bound.f64(), measured.f64(), 1e-12))
}

/// Exact kernel of `d_t + v.grad_x - Laplace_v` on the whole space:
/// `(sqrt3 / (2 pi tau^2))^d exp(-3|x - y - tau (v + w)/2|^2 / tau^3 - |v - w|^2 / (4 tau))`.
pub fn kolmogorov_exact_kernel<T: Real>(tau: T, x: &[T], v: &[T], y: &[T], w: &[T]) -> Result<T> {
    check_tau(tau)?;
    let d = x.len();
    if v.len() != d || y.len() != d || w.len() != d {
        return Err(KfpError::DimensionMismatch {
            expected: d,
            got: v.len().min(y.len()).min(w.len()),
        });
    }
    let half = T::of(0.5);
    let mut q = T::zero();
    for k in 0..d {
        let a = x[k] - y[k] - tau * (v[k] + w[k]) * half;
        let b = v[k] - w[k];
        q += T::of(3.0) * a * a / (tau * tau * tau) + b * b / (T::of(4.0) * tau);
    }
    let pre = T::of(3f64.sqrt()) / (T::of(2.0 * std::f64::consts::PI) * tau * tau);
    Ok(pre.powi(d as i32) * (-q).exp())
}

fn trapezoid_weights<T: Real>(n: usize, lo: T, hi: T) -> (Vec<T>, Vec<T>) {
    let h = (hi - lo) / T::of_usize(n - 1);
    let nodes = (0..n).map(|i| lo + T::of_usize(i) * h).collect();
    let weights = (0..n)
        .map(|i| if i == 0 || i == n - 1 { h * T::of(0.5) } else { h })
        .collect();
    (nodes, weights)
}

/// `|int int K(tau, x, v, y, w) dy dw - 1|` for `d = 1` by the trapezoid rule on
/// `[-half_width, half_width]^2` with `n` nodes per axis.
pub fn kernel_normalization_error<T: Real>(tau: T, x: T, v: T, half_width: T, n: usize) -> Result<T> {
    check_tau(tau)?;
    let (nodes, wts) = trapezoid_weights(n, -half_width, half_width);
    let total: T = nodes
        .par_iter()
        .zip(&wts)
        .map(|(&y, &wy)| {
            nodes
                .iter()
                .zip(&wts)
                .map(|(&w, &ww)| wy * ww * kolmogorov_exact_kernel(tau, &[x], &[v], &[y], &[w]).unwrap_or(T::zero()))
                .sum::<T>()
        })
        .collect::<Vec<T>>()
        .into_iter()
        .sum();
    Ok((total - T::one()).abs())
}

/// Relative gap between `K(t - s)` and the quadrature of `K(t - r) K(r - s)` over the
/// intermediate point, `d = 1`, on a window centred between the two endpoints.
#[allow(clippy::too_many_arguments)]
pub fn kernel_chapman_kolmogorov_error<T: Real>(
    s: T,
    r: T,
    t: T,
    x: T,
    v: T,
    y: T,
    w: T,
    half_width: T,
    n: usize,
) -> Result<T> {
    if !(s < r && r < t) {
        return Err(KfpError::invalid("need s < r < t"));
    }
    let direct = kolmogorov_exact_kernel(t - s, &[x], &[v], &[y], &[w])?;
    // Intermediate state concentrates near the free flight from (y, w).
    let zc = y + (r - s) * w;
    let (zs, wz) = trapezoid_weights(n, zc - half_width, zc + half_width);
    let uc = (v + w) * T::of(0.5);
    let (us, wu) = trapezoid_weights(n, uc - half_width, uc + half_width);
    let total: T = zs
        .par_iter()
        .zip(&wz)
        .map(|(&z, &a)| {
            us.iter()
                .zip(&wu)
                .map(|(&u, &b)| {
                    let k1 = kolmogorov_exact_kernel(t - r, &[x], &[v], &[z], &[u]).unwrap_or(T::zero());
                    let k2 = kolmogorov_exact_kernel(r - s, &[z], &[u], &[y], &[w]).unwrap_or(T::zero());
                    a * b * k1 * k2
                })
                .sum::<T>()
        })
        .collect::<Vec<T>>()
        .into_iter()
        .sum();
    Ok((total - direct).abs() / direct)
}

/// Central-difference residual of `(d_t + v d_x - d_vv) K` at `(tau, x, v)` for a
/// source at `(y, w)`, `d = 1`, step `h`, relative to the kernel value.
pub fn kernel_pde_residual<T: Real>(tau: T, x: T, v: T, y: T, w: T, h: T) -> Result<T> {
    let k = |t: T, x: T, v: T| kolmogorov_exact_kernel(t, &[x], &[v], &[y], &[w]);
    if !(tau > h) {
        return Err(KfpError::invalid("step must be smaller than tau"));
    }
    let two = T::of(2.0);
    let dt = (k(tau + h, x, v)? - k(tau - h, x, v)?) / (two * h);
    let dx = (k(tau, x + h, v)? - k(tau, x - h, v)?) / (two * h);
    let dvv = (k(tau, x, v + h)? - two * k(tau, x, v)? + k(tau, x, v - h)?) / (h * h);
    Ok((dt + v * dx - dvv).abs() / k(tau, x, v)?)
}

/// Prefactor and exponent constants of the Gaussian envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConstants<T> {
    pub prefactor: T,
    pub rate: T,
}

impl<T: Real> EnvelopeConstants<T> {
    /// `C = 2^{3+6d} e^{1/(64 kappa)}`, `c = 1/(128 kappa)`.
    pub fn proof_chain(d: usize, kappa: T) -> Self {
        EnvelopeConstants {
            prefactor: T::of(2.0).powi(3 + 6 * d as i32) * (T::one() / (T::of(64.0) * kappa)).exp(),
            rate: T::one() / (T::of(128.0) * kappa),
        }
    }
}

/// `C B^2 / tau^{2d} exp(-c (|dx_gal|^2 / tau^3 + |dv|^2 / tau))`; defaults to the
/// proof-chain constants when `constants` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_envelope<T: Real>(
    d: usize,
    b: T,
    lambda: T,
    upper: T,
    tau: T,
    dx_gal: &[T],
    dv: &[T],
    constants: Option<EnvelopeConstants<T>>,
) -> Result<T> {
    check_tau(tau)?;
    if !(b > T::zero()) {
        return Err(KfpError::invalid(format!("B must be positive, got {b}")));
    }
    if dx_gal.len() != d || dv.len() != d {
        return Err(KfpError::DimensionMismatch {
            expected: d,
            got: dx_gal.len().min(dv.len()),
        });
    }
    let c = match constants {
        Some(c) => c,
        None => EnvelopeConstants::proof_chain(d, kappa(lambda, upper)?),
    };
    let sx: T = dx_gal.iter().map(|&a| a * a).sum();
    let sv: T = dv.iter().map(|&a| a * a).sum();
    let q = sx / (tau * tau * tau) + sv / tau;
    Ok(c.prefactor * b * b / tau.powi(2 * d as i32) * (-c.rate * q).exp())
}

/// Space-time data a Moser estimate is computed from.
pub enum SolutionData<'a, T> {
    /// A closed-form solution, integrated by the midpoint rule with `resolution`
    /// nodes per axis in normalized cylinder coordinates.
    Closed {
        f: &'a (dyn Fn(T, &[T], &[T]) -> T + Sync),
        d: usize,
        resolution: usize,
    },
    /// Lattice snapshots at consecutive solver steps.
    Trajectory(&'a [PhaseField<T>]),
}

/// Per-cylinder `B^2` estimates and their maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct MoserEstimate<T> {
    pub per_cylinder: Vec<T>,
    pub b_sq: T,
}

impl<T: Real> MoserEstimate<T> {
    pub fn b(&self) -> T {
        self.b_sq.sqrt()
    }
}

/// `B^2 = r^{4d+2} max_{B_r} |f(t0)|^2 / int_{Q_2r} |f|^2`, maximized over cylinders.
/// Backward cylinders use `Q_2r`, forward ones `Q*_2r`.
pub fn moser_estimate<T: Real>(data: &SolutionData<'_, T>, cylinders: &[KineticCylinder<T>]) -> Result<MoserEstimate<T>> {
    if cylinders.is_empty() {
        return Err(KfpError::invalid("no cylinders given"));
    }
    let per_cylinder = cylinders
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.validate()?;
            match data {
                SolutionData::Closed { f, d, resolution } => moser_closed(*f, *d, *resolution, c),
                SolutionData::Trajectory(traj) => moser_discrete(traj, c),
            }
            .map_err(|e| KfpError::Indexed {
                context: format!("cylinder {i} (t = {}, r = {})", c.center.t, c.r),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<T>>>()?;
    let b_sq = per_cylinder.iter().copied().fold(T::zero(), T::max);
    Ok(MoserEstimate { per_cylinder, b_sq })
}

/// Midpoints of `(-1, 1)` per axis restricted to the unit Euclidean ball.
fn unit_ball_nodes<T: Real>(d: usize, n: usize) -> Vec<Vec<T>> {
    let mid: Vec<T> = (0..n)
        .map(|i| T::of(-1.0 + (2.0 * i as f64 + 1.0) / n as f64))
        .collect();
    let mut out = Vec::new();
    let total = n.pow(d as u32);
    for flat in 0..total {
        let mut f = flat;
        let mut p = vec![T::zero(); d];
        for k in (0..d).rev() {
            p[k] = mid[f % n];
            f /= n;
        }
        if p.iter().map(|&a| a * a).sum::<T>() < T::one() {
            out.push(p);
        }
    }
    out
}

fn moser_closed<T: Real>(
    f: &(dyn Fn(T, &[T], &[T]) -> T + Sync),
    d: usize,
    n: usize,
    c: &KineticCylinder<T>,
) -> Result<T> {
    if n < 2 {
        return Err(KfpError::invalid("resolution must be at least 2"));
    }
    let (t0, x0, v0, r) = (c.center.t, &c.center.x, &c.center.v, c.r);
    let r2 = r * T::of(2.0);
    let ball = unit_ball_nodes::<T>(d, n);
    let hn = T::of(2.0) / T::of_usize(n);
    let cell = hn.powi(2 * d as i32) / T::of_usize(n);
    let sign = match c.orientation {
        Orientation::Backward => -T::one(),
        Orientation::Forward => T::one(),
    };
    // Normalized coordinates: t = t0 + sign (2r)^2 s, x = x0 + (2r)^3 xi + (t - t0) v0,
    // v = v0 + 2r eta, so the Jacobian is (2r)^{4d+2}.
    let integral: T = (0..n)
        .into_par_iter()
        .map(|it| {
            let s = T::of((it as f64 + 0.5) / n as f64);
            let t = t0 + sign * r2 * r2 * s;
            let mut acc = T::zero();
            for xi in &ball {
                let x: Vec<T> = (0..d)
                    .map(|k| x0[k] + r2 * r2 * r2 * xi[k] + (t - t0) * v0[k])
                    .collect();
                for eta in &ball {
                    let v: Vec<T> = (0..d).map(|k| v0[k] + r2 * eta[k]).collect();
                    let val = f(t, &x, &v);
                    acc += val * val;
                }
            }
            acc
        })
        .collect::<Vec<T>>()
        .into_iter()
        .sum::<T>()
        * cell
        * r2.powi(4 * d as i32 + 2);
    let mut peak = T::zero();
    let nb = 2 * n + 1;
    let mut probe = unit_ball_nodes::<T>(d, nb);
    probe.push(vec![T::zero(); d]);
    for xi in &probe {
        let x: Vec<T> = (0..d).map(|k| x0[k] + r * r * r * xi[k]).collect();
        for eta in &probe {
            let v: Vec<T> = (0..d).map(|k| v0[k] + r * eta[k]).collect();
            let val = f(t0, &x, &v);
            peak = peak.max(val * val);
        }
    }
    if !integral.is_finite() || !peak.is_finite() {
        return Err(KfpError::invalid("solution is not finite on the cylinder"));
    }
    if integral.f64() < 1e-300 {
        return Err(KfpError::DegenerateSolution(format!(
            "integral over Q_2r is {integral}"
        )));
    }
    Ok(r.powi(4 * d as i32 + 2) * peak / integral)
}

fn moser_discrete<T: Real>(traj: &[PhaseField<T>], c: &KineticCylinder<T>) -> Result<T> {
    let first = traj.first().ok_or_else(|| KfpError::invalid("empty trajectory"))?;
    let g = &first.grid;
    let d = g.d;
    if c.center.dim() != d {
        return Err(KfpError::DimensionMismatch {
            expected: d,
            got: c.center.dim(),
        });
    }
    let (t0, x0, v0, r) = (c.center.t, &c.center.x, &c.center.v, c.r);
    if r < T::of(4.0) * g.dv() * T::of(1.0 - 1e-12) {
        return Err(KfpError::invalid(format!(
            "r = {r} resolves fewer than 4 velocity cells (dv = {})",
            g.dv()
        )));
    }
    let r2 = r * T::of(2.0);
    let big = r2 * r2 * r2;
    if big >= g.lx * T::of(0.5) {
        return Err(KfpError::invalid("x extent of Q_2r wraps around the period"));
    }
    if v0.iter().any(|&v| v.abs() + r2 > g.lv) {
        return Err(KfpError::invalid("Q_2r leaves the velocity domain"));
    }
    let dt = g.dt;
    let k0 = traj
        .iter()
        .position(|f| (f.time - t0).abs() <= dt * T::of(1e-9))
        .ok_or_else(|| KfpError::invalid(format!("t0 = {t0} is not a trajectory time")))?;
    let (t_first, t_last) = (traj[0].time, traj[traj.len() - 1].time);
    let window = r2 * r2;
    let eps = dt * T::of(1e-9);
    let slices: Vec<usize> = match c.orientation {
        Orientation::Backward => {
            if t0 - window < t_first - eps {
                return Err(KfpError::invalid("Q_2r starts before the first snapshot"));
            }
            (0..=k0).filter(|&k| traj[k].time > t0 - window + eps).collect()
        }
        Orientation::Forward => {
            if t0 + window > t_last + eps {
                return Err(KfpError::invalid("Q*_2r ends after the last snapshot"));
            }
            (k0..traj.len()).filter(|&k| traj[k].time < t0 + window - eps).collect()
        }
    };
    let cv = g.cell_volume();
    let norm = |a: &[T]| a.iter().map(|&z| z * z).sum::<T>().sqrt();
    let mut integral = T::zero();
    for &k in &slices {
        let f = &traj[k];
        let tk = f.time;
        let mut acc = T::zero();
        for (n, &val) in f.values.iter().enumerate() {
            let (x, v) = g.point(n);
            let dvv: Vec<T> = (0..d).map(|i| v[i] - v0[i]).collect();
            if norm(&dvv) >= r2 {
                continue;
            }
            let dxx: Vec<T> = (0..d)
                .map(|i| wrap_centered(x[i] - x0[i] - (tk - t0) * v0[i], g.lx))
                .collect();
            if norm(&dxx) < big {
                acc += val * val;
            }
        }
        integral += acc * cv * dt;
    }
    let mut peak = T::zero();
    let mut hits = 0usize;
    for (n, &val) in traj[k0].values.iter().enumerate() {
        let (x, v) = g.point(n);
        let dvv: Vec<T> = (0..d).map(|i| v[i] - v0[i]).collect();
        let dxx: Vec<T> = (0..d).map(|i| wrap_centered(x[i] - x0[i], g.lx)).collect();
        if norm(&dvv) < r && norm(&dxx) < r * r * r {
            peak = peak.max(val * val);
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(KfpError::invalid("B_r contains no lattice node"));
    }
    if integral.f64() < 1e-300 {
        return Err(KfpError::DegenerateSolution(format!(
            "integral over Q_2r is {integral}"
        )));
    }
    Ok(r.powi(4 * d as i32 + 2) * peak / integral)
}

/// Tensor-product cutoff `chi(x, v) = prod_k b((x_k - cx_k)/rx) b((v_k - cv_k)/rv)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cutoff<T> {
    pub center: PhasePoint<T>,
    pub radius_x: T,
    pub radius_v: T,
    pub profile: CutoffProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffProfile {
    /// `max(0, 1 - |s|)`.
    Hat,
    /// `(1 - s^2)^2` on `|s| < 1`.
    Smooth,
}

impl<T: Real> Cutoff<T> {
    fn profile(&self, s: T) -> (T, T) {
        let a = s.abs();
        if a >= T::one() {
            return (T::zero(), T::zero());
        }
        match self.profile {
            CutoffProfile::Hat => (T::one() - a, -s.signum()),
            CutoffProfile::Smooth => {
                let q = T::one() - s * s;
                (q * q, -T::of(4.0) * s * q)
            }
        }
    }

    /// `(chi, grad_x chi, grad_v chi)` at `(x, v)` on a space of x-period `period`.
    pub fn eval(&self, x: &[T], v: &[T], period: T) -> (T, Vec<T>, Vec<T>) {
        let d = x.len();
        let mut fx = Vec::with_capacity(d);
        let mut fv = Vec::with_capacity(d);
        for k in 0..d {
            let sx = wrap_centered(x[k] - self.center.x[k], period) / self.radius_x;
            let sv = (v[k] - self.center.v[k]) / self.radius_v;
            fx.push(self.profile(sx));
            fv.push(self.profile(sv));
        }
        let all: Vec<(T, T)> = fx.iter().chain(&fv).copied().collect();
        let value: T = all.iter().fold(T::one(), |p, &(b, _)| p * b);
        let partial = |j: usize, scale: T| -> T {
            all.iter()
                .enumerate()
                .fold(T::one(), |p, (i, &(b, db))| p * if i == j { db / scale } else { b })
        };
        let gx = (0..d).map(|k| partial(k, self.radius_x)).collect();
        let gv = (0..d).map(|k| partial(d + k, self.radius_v)).collect();
        (value, gx, gv)
    }
}

/// Caccioppoli constant over the snapshots in `(t, t_prime]`:
/// `LHS = sum dt ||grad_v(chi f)||^2`, `piece1 = ||chi f(t)||^2`,
/// `piece2 = sum dt int (|grad_v chi|^2 + |chi v.grad_x chi|) |f|^2`, and
/// `C_hat = max(0, (LHS - 2 piece1 / lambda) / piece2)`.
pub fn caccioppoli_ratio<T: Real>(
    traj: &[PhaseField<T>],
    chi: &Cutoff<T>,
    t: T,
    t_prime: T,
    lambda: T,
    upper: T,
) -> Result<BoundReport> {
    check_constants(lambda, upper)?;
    let first = traj.first().ok_or_else(|| KfpError::invalid("empty trajectory"))?;
    let g = &first.grid;
    let dt = g.dt;
    let eps = dt * T::of(1e-9);
    if !(t_prime > t) {
        return Err(KfpError::invalid("need t < t'"));
    }
    let k_t = traj
        .iter()
        .position(|f| (f.time - t).abs() <= eps)
        .ok_or_else(|| KfpError::invalid(format!("t = {t} is not a trajectory time")))?;
    if traj.last().map(|f| f.time).unwrap_or(t) < t_prime - eps {
        return Err(KfpError::invalid("trajectory ends before t'"));
    }
    let weights: Vec<(T, T)> = (0..g.len())
        .map(|n| {
            let (x, v) = g.point(n);
            let (c, gx, gv) = chi.eval(&x, &v, g.lx);
            let gv2: T = gv.iter().map(|&a| a * a).sum();
            let transport: T = v.iter().zip(&gx).map(|(&a, &b)| a * b).sum();
            (c, gv2 + (c * transport).abs())
        })
        .collect();
    let cut = |f: &PhaseField<T>| {
        let mut out = f.clone();
        for (o, &(c, _)) in out.values.iter_mut().zip(&weights) {
            *o *= c;
        }
        out
    };
    let piece1 = cut(&traj[k_t]).l2_norm_sq();
    let mut lhs = T::zero();
    let mut piece2 = T::zero();
    for f in traj[k_t + 1..].iter().take_while(|f| f.time <= t_prime + eps) {
        lhs += dt * velocity_gradient_norm_sq(&cut(f));
        let p2: T = f
            .values
            .iter()
            .zip(&weights)
            .map(|(&y, &(_, w))| w * y * y)
            .sum::<T>()
            * g.cell_volume();
        piece2 += dt * p2;
    }
    let base = T::of(2.0) / lambda * piece1;
    let excess = lhs - base;
    let (c_hat, pass) = if excess <= T::zero() {
        (T::zero(), true)
    } else if piece2 > T::zero() {
        (excess / piece2, true)
    } else {
        (T::infinity(), false)
    };
    let params = json!({
        "lambda": lambda.f64(), "Lambda": upper.f64(), "d": g.d, "t": t.f64(), "t_prime": t_prime.f64(),
        "piece1": piece1.f64(), "piece2": piece2.f64(), "C_hat": c_hat.f64(),
    });
    let theoretical = if c_hat.is_finite() { base + c_hat * piece2 } else { base };
    let mut report = BoundReport::new("caccioppoli", params, theoretical.f64(), lhs.f64(), 1e-12);
    report.pass = Some(pass);
    Ok(report)
}
