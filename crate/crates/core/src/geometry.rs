//! Kinetic geometry: the Galilean group action, kinetic dilations, kinetic
//! cylinders and the twisted distance `rho_tau` between phase-space sets.
//!
//! Everything here is dimension generic (`d >= 1`) and purely functional.

use serde::{Deserialize, Serialize};

use crate::error::{KfpError, Result};
use crate::scalar::{norm, Real};

/// A space-time point `z = (t, x, v)` with `x, v` in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticPoint<T> {
    pub t: T,
    pub x: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> KineticPoint<T> {
    pub fn new(t: T, x: Vec<T>, v: Vec<T>) -> Result<Self> {
        let p = KineticPoint { t, x, v };
        p.validate()?;
        Ok(p)
    }

    /// Origin of `R x R^d x R^d`.
    pub fn origin(d: usize) -> Self {
        KineticPoint {
            t: T::zero(),
            x: vec![T::zero(); d],
            v: vec![T::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(KfpError::invalid("kinetic point needs d >= 1"));
        }
        if self.x.len() != self.v.len() {
            return Err(KfpError::DimensionMismatch {
                expected: self.x.len(),
                got: self.v.len(),
            });
        }
        Ok(())
    }
}

fn same_dim<T: Real>(a: &KineticPoint<T>, b: &KineticPoint<T>) -> Result<usize> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(KfpError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(a.dim())
}

/// `T_{z0}(t, x, v) = (t0 + t, x0 + x + t v0, v0 + v)`.
pub fn galilean_transform<T: Real>(
    z0: &KineticPoint<T>,
    z: &KineticPoint<T>,
) -> Result<KineticPoint<T>> {
    let d = same_dim(z0, z)?;
    Ok(KineticPoint {
        t: z0.t + z.t,
        x: (0..d).map(|k| z0.x[k] + z.x[k] + z.t * z0.v[k]).collect(),
        v: (0..d).map(|k| z0.v[k] + z.v[k]).collect(),
    })
}

/// Inverse of [`galilean_transform`]: `(t - t0, x - x0 - (t - t0) v0, v - v0)`.
pub fn galilean_inverse<T: Real>(
    z0: &KineticPoint<T>,
    z: &KineticPoint<T>,
) -> Result<KineticPoint<T>> {
    let d = same_dim(z0, z)?;
    let s = z.t - z0.t;
    Ok(KineticPoint {
        t: s,
        x: (0..d).map(|k| z.x[k] - z0.x[k] - s * z0.v[k]).collect(),
        v: (0..d).map(|k| z.v[k] - z0.v[k]).collect(),
    })
}

/// Kinetic dilation `delta_r(t, x, v) = (r^2 t, r^3 x, r v)`.
pub fn kinetic_scale<T: Real>(r: T, z: &KineticPoint<T>) -> Result<KineticPoint<T>> {
    if !(r > T::zero()) || !r.is_finite() {
        return Err(KfpError::invalid(format!("kinetic scale needs r > 0, got {r}")));
    }
    z.validate()?;
    let r2 = r * r;
    let r3 = r2 * r;
    Ok(KineticPoint {
        t: r2 * z.t,
        x: z.x.iter().map(|&xi| r3 * xi).collect(),
        v: z.v.iter().map(|&vi| r * vi).collect(),
    })
}

/// Time orientation of a kinetic cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// `Q*_r(z0)`: times in `[t0, t0 + r^2)`, used for the backward (adjoint) equation.
    Forward,
    /// `Q_r(z0)`: times in `(t0 - r^2, t0]`, used for the forward equation.
    Backward,
}

/// Kinetic cylinder `Q_r(z0)` or `Q*_r(z0)`.
///
/// Serialized flat as `{"t", "x", "v", "r", "orientation"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "CylinderRepr<T>",
    into = "CylinderRepr<T>",
    bound(serialize = "T: Clone + Serialize", deserialize = "T: Deserialize<'de>")
)]
pub struct KineticCylinder<T> {
    pub center: KineticPoint<T>,
    pub r: T,
    pub orientation: Orientation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CylinderRepr<T> {
    t: T,
    x: Vec<T>,
    v: Vec<T>,
    r: T,
    orientation: Orientation,
}

impl<T> From<CylinderRepr<T>> for KineticCylinder<T> {
    fn from(c: CylinderRepr<T>) -> Self {
        KineticCylinder {
            center: KineticPoint {
                t: c.t,
                x: c.x,
                v: c.v,
            },
            r: c.r,
            orientation: c.orientation,
        }
    }
}

impl<T> From<KineticCylinder<T>> for CylinderRepr<T> {
    fn from(c: KineticCylinder<T>) -> Self {
        CylinderRepr {
            t: c.center.t,
            x: c.center.x,
            v: c.center.v,
            r: c.r,
            orientation: c.orientation,
        }
    }
}

impl<T: Real> KineticCylinder<T> {
    pub fn new(center: KineticPoint<T>, r: T, orientation: Orientation) -> Result<Self> {
        let c = KineticCylinder {
            center,
            r,
            orientation,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.center.validate()?;
        if !(self.r > T::zero()) || !self.r.is_finite() {
            return Err(KfpError::invalid(format!(
                "cylinder radius must be positive, got {}",
                self.r
            )));
        }
        Ok(())
    }

    /// The same cylinder with radius scaled by `factor` (e.g. `Q_{2r}`).
    pub fn scaled(&self, factor: T) -> Self {
        KineticCylinder {
            center: self.center.clone(),
            r: self.r * factor,
            orientation: self.orientation,
        }
    }

    /// Time window as `(lo, hi)`; openness depends on orientation.
    pub fn time_window(&self) -> (T, T) {
        let r2 = self.r * self.r;
        match self.orientation {
            Orientation::Backward => (self.center.t - r2, self.center.t),
            Orientation::Forward => (self.center.t, self.center.t + r2),
        }
    }

    pub fn contains_time(&self, t: T) -> bool {
        let (lo, hi) = self.time_window();
        match self.orientation {
            Orientation::Backward => t > lo && t <= hi,
            Orientation::Forward => t >= lo && t < hi,
        }
    }

    /// Spatial section at time `t` (ignores the time window).
    pub fn section_contains(&self, t: T, x: &[T], v: &[T]) -> bool {
        let c = &self.center;
        let s = t - c.t;
        let dv: Vec<T> = v.iter().zip(&c.v).map(|(&a, &b)| a - b).collect();
        let dx: Vec<T> = (0..x.len()).map(|k| x[k] - c.x[k] - s * c.v[k]).collect();
        norm(&dv) < self.r && norm(&dx) < self.r * self.r * self.r
    }

    /// Membership of `z` by the three defining conditions.
    pub fn contains(&self, z: &KineticPoint<T>) -> Result<bool> {
        same_dim(&self.center, z)?;
        Ok(self.contains_time(z.t) && self.section_contains(z.t, &z.x, &z.v))
    }

    /// Membership in the ball `B_r(x0, v0) = {|v - v0| < r, |x - x0| < r^3}`.
    pub fn ball_contains(&self, x: &[T], v: &[T]) -> bool {
        self.section_contains(self.center.t, x, v)
    }
}

/// A point of phase space `(x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePoint<T> {
    pub x: Vec<T>,
    pub v: Vec<T>,
}

/// Closed subsets of phase space supported by the distance computations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhaseSet<T> {
    /// Nonempty finite list of points.
    Points { points: Vec<PhasePoint<T>> },
    /// Axis-aligned box; one `[lo, hi]` pair per coordinate.
    Box { x: Vec<[T; 2]>, v: Vec<[T; 2]> },
}

impl<T: Real> PhaseSet<T> {
    pub fn points(points: Vec<PhasePoint<T>>) -> Result<Self> {
        let s = PhaseSet::Points { points };
        s.validate()?;
        Ok(s)
    }

    pub fn point(x: Vec<T>, v: Vec<T>) -> Result<Self> {
        Self::points(vec![PhasePoint { x, v }])
    }

    pub fn cuboid(x: Vec<[T; 2]>, v: Vec<[T; 2]>) -> Result<Self> {
        let s = PhaseSet::Box { x, v };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        match self {
            PhaseSet::Points { points } => points.first().map_or(0, |p| p.x.len()),
            PhaseSet::Box { x, .. } => x.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PhaseSet::Points { points } => {
                let first = points
                    .first()
                    .ok_or_else(|| KfpError::invalid("point list must be nonempty"))?;
                let d = first.x.len();
                if d == 0 {
                    return Err(KfpError::invalid("phase points need d >= 1"));
                }
                for p in points {
                    if p.x.len() != d || p.v.len() != d {
                        return Err(KfpError::DimensionMismatch {
                            expected: d,
                            got: p.x.len().max(p.v.len()),
                        });
                    }
                }
            }
            PhaseSet::Box { x, v } => {
                if x.is_empty() {
                    return Err(KfpError::invalid("box needs d >= 1"));
                }
                if x.len() != v.len() {
                    return Err(KfpError::DimensionMismatch {
                        expected: x.len(),
                        got: v.len(),
                    });
                }
                for [lo, hi] in x.iter().chain(v.iter()) {
                    if !(lo <= hi) {
                        return Err(KfpError::invalid(format!(
                            "box bounds must satisfy lo <= hi, got [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[T], v: &[T]) -> bool {
        match self {
            PhaseSet::Points { points } => points.iter().any(|p| p.x == x && p.v == v),
            PhaseSet::Box { x: bx, v: bv } => {
                x.iter().zip(bx).all(|(&c, [lo, hi])| c >= *lo && c <= *hi)
                    && v.iter().zip(bv).all(|(&c, [lo, hi])| c >= *lo && c <= *hi)
            }
        }
    }

    /// Translate every `x` coordinate by `shift`.
    pub fn translated_x(&self, shift: &[T]) -> Self {
        match self {
            PhaseSet::Points { points } => PhaseSet::Points {
                points: points
                    .iter()
                    .map(|p| PhasePoint {
                        x: p.x.iter().zip(shift).map(|(&a, &s)| a + s).collect(),
                        v: p.v.clone(),
                    })
                    .collect(),
            },
            PhaseSet::Box { x, v } => PhaseSet::Box {
                x: x.iter()
                    .zip(shift)
                    .map(|([lo, hi], &s)| [*lo + s, *hi + s])
                    .collect(),
                v: v.clone(),
            },
        }
    }

    /// The set as a list of (possibly degenerate) boxes.
    fn as_boxes(&self) -> Vec<(Vec<[T; 2]>, Vec<[T; 2]>)> {
        match self {
            PhaseSet::Points { points } => points
                .iter()
                .map(|p| {
                    (
                        p.x.iter().map(|&c| [c, c]).collect(),
                        p.v.iter().map(|&c| [c, c]).collect(),
                    )
                })
                .collect(),
            PhaseSet::Box { x, v } => vec![(x.clone(), v.clone())],
        }
    }
}

/// Squared twisted distance between two phase points.
pub fn pair_distance_sq<T: Real>(x: &[T], v: &[T], y: &[T], w: &[T], tau: T) -> T {
    let mut acc = T::zero();
    for k in 0..x.len() {
        let a = (x[k] - y[k] - tau * w[k]) / tau;
        let b = v[k] - w[k];
        acc += a * a + b * b;
    }
    acc
}

fn dist_to_interval<T: Real>(z: T, [lo, hi]: [T; 2]) -> T {
    if z < lo {
        lo - z
    } else if z > hi {
        z - hi
    } else {
        T::zero()
    }
}

/// `min_{w in W} dist(w, I1)^2 + dist(w, I2)^2`, exact.
///
/// The objective is convex and piecewise quadratic; its unconstrained minimizers
/// form an interval `M`, so the constrained minimum sits in `W ∩ M` or at the
/// endpoint of `W` nearest to `M`.
fn two_interval_min<T: Real>(i1: [T; 2], i2: [T; 2], w: [T; 2]) -> T {
    let lo = i1[0].max(i2[0]);
    let hi = i1[1].min(i2[1]);
    let m = if lo <= hi {
        [lo, hi]
    } else {
        let mid = (lo + hi) * T::of(0.5);
        [mid, mid]
    };
    let wstar = if w[1] < m[0] {
        w[1]
    } else if w[0] > m[1] {
        w[0]
    } else {
        w[0].max(m[0])
    };
    let a = dist_to_interval(wstar, i1);
    let b = dist_to_interval(wstar, i2);
    a * a + b * b
}

fn box_pair_sq<T: Real>(
    e: &(Vec<[T; 2]>, Vec<[T; 2]>),
    f: &(Vec<[T; 2]>, Vec<[T; 2]>),
    tau: T,
) -> T {
    let mut acc = T::zero();
    for k in 0..e.0.len() {
        let [xl, xh] = e.0[k];
        let [yl, yh] = f.0[k];
        // x - y ranges over P; (x - y - tau w)/tau = (x - y)/tau - w.
        let (p0, p1) = ((xl - yh) / tau, (xh - yl) / tau);
        let pp = if p0 <= p1 { [p0, p1] } else { [p1, p0] };
        acc += two_interval_min(pp, e.1[k], f.1[k]);
    }
    acc
}

/// Squared twisted distance `rho_tau(E, F)^2`.
pub fn rho_tau_sq<T: Real>(e: &PhaseSet<T>, f: &PhaseSet<T>, tau: T) -> Result<T> {
    if tau == T::zero() || !tau.is_finite() {
        return Err(KfpError::invalid("rho_tau is undefined for tau = 0"));
    }
    e.validate()?;
    f.validate()?;
    if e.dim() != f.dim() {
        return Err(KfpError::DimensionMismatch {
            expected: e.dim(),
            got: f.dim(),
        });
    }
    if let (PhaseSet::Points { points: pe }, PhaseSet::Points { points: pf }) = (e, f) {
        let mut best = T::infinity();
        for a in pe {
            for b in pf {
                best = best.min(pair_distance_sq(&a.x, &a.v, &b.x, &b.v, tau));
            }
        }
        return Ok(best);
    }
    let eb = e.as_boxes();
    let fb = f.as_boxes();
    let mut best = T::infinity();
    for a in &eb {
        for b in &fb {
            best = best.min(box_pair_sq(a, b, tau));
        }
    }
    Ok(best)
}

/// `rho_tau(E, F + k L e)^2` minimized over all integer image shifts `k` of `F`
/// along each x axis, for phase spaces periodic in `x` with period `period`.
pub fn rho_tau_sq_periodic<T: Real>(e: &PhaseSet<T>, f: &PhaseSet<T>, tau: T, period: T) -> Result<T> {
    if !(period > T::zero()) || !period.is_finite() {
        return Err(KfpError::invalid("period must be positive and finite"));
    }
    rho_tau_sq(e, f, tau)?;
    let step = (period / tau).abs();
    let mut best = T::infinity();
    for a in &e.as_boxes() {
        for b in &f.as_boxes() {
            let mut acc = T::zero();
            for k in 0..a.0.len() {
                let [xl, xh] = a.0[k];
                let [yl, yh] = b.0[k];
                let (p0, p1) = ((xl - yh) / tau, (xh - yl) / tau);
                let pp = if p0 <= p1 { [p0, p1] } else { [p1, p0] };
                let (v, w) = (a.1[k], b.1[k]);
                let lo = v[0].min(w[0]);
                let hi = v[1].max(w[1]);
                // Images whose P-interval is farther than one period from the
                // velocity hull cannot be closer than a nearer image.
                let kmin = ((lo - pp[1]) / step).floor() - T::one();
                let kmax = ((hi - pp[0]) / step).ceil() + T::one();
                let (kmin, kmax) = (kmin.to_i64().unwrap_or(0), kmax.to_i64().unwrap_or(0));
                let mut term = T::infinity();
                for j in kmin..=kmax {
                    let sh = T::of(j as f64) * step;
                    term = term.min(two_interval_min([pp[0] + sh, pp[1] + sh], v, w));
                }
                acc += term;
            }
            best = best.min(acc);
        }
    }
    Ok(best)
}

/// Twisted distance
/// `rho_tau(E, F) = inf_{(x,v) in E, (y,w) in F} (|x - y - tau w|^2 / tau^2 + |v - w|^2)^{1/2}`.
///
/// Finite sets are handled by the exact pairwise minimum; boxes by an exact
/// per-coordinate convex minimization (the objective separates across coordinates).
pub fn rho_tau<T: Real>(e: &PhaseSet<T>, f: &PhaseSet<T>, tau: T) -> Result<T> {
    rho_tau_sq(e, f, tau).map(|s| s.sqrt())
}

/// `rho_{-tau}(F, E) / rho_tau(E, F)`, or `None` when `rho_tau(E, F) = 0`.
///
/// Always within `[1/phi, phi]`, `phi` the golden ratio: per pair the two squared
/// distances are `|a|^2 + |b|^2` and `|a - b|^2 + |b|^2` with `a`, `b` the
/// twisted position and velocity gaps.
pub fn quasi_symmetry_ratio<T: Real>(e: &PhaseSet<T>, f: &PhaseSet<T>, tau: T) -> Result<Option<T>> {
    let forward = rho_tau(e, f, tau)?;
    let backward = rho_tau(f, e, -tau)?;
    Ok((forward > T::zero()).then(|| backward / forward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(t: f64, x: f64, v: f64) -> KineticPoint<f64> {
        KineticPoint::new(t, vec![x], vec![v]).unwrap()
    }

    #[test]
    fn galilean_identity_and_substitution() {
        let z = pt(0.3, -1.2, 0.7);
        assert_eq!(galilean_transform(&KineticPoint::origin(1), &z).unwrap(), z);
        let out = galilean_transform(&pt(1.0, 0.0, 1.0), &pt(2.0, 0.0, 0.0)).unwrap();
        assert_eq!(out, pt(3.0, 2.0, 1.0));
    }

    #[test]
    fn galilean_dimension_mismatch() {
        let z2 = KineticPoint::new(0.0, vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let err = galilean_transform(&pt(0.0, 0.0, 0.0), &z2).unwrap_err();
        assert!(matches!(err, KfpError::DimensionMismatch { .. }));
        assert!(KineticPoint::new(0.0, vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn kinetic_scale_substitution_and_errors() {
        assert_eq!(kinetic_scale(2.0, &pt(1.0, 1.0, 1.0)).unwrap(), pt(4.0, 8.0, 2.0));
        let z = pt(0.1, 0.2, 0.3);
        assert_eq!(kinetic_scale(1.0, &z).unwrap(), z);
        assert!(kinetic_scale(0.0, &z).is_err());
        assert!(kinetic_scale(-1.0, &z).is_err());
    }

    #[test]
    fn cylinder_examples() {
        for r in [0.01, 0.5, 3.0] {
            for o in [Orientation::Forward, Orientation::Backward] {
                let c = KineticCylinder::new(pt(0.4, -0.3, 1.1), r, o).unwrap();
                assert!(c.contains(&c.center).unwrap());
            }
        }
        let q = KineticCylinder::new(pt(0.0, 0.0, 0.0), 1.0, Orientation::Backward).unwrap();
        assert!(q.contains(&pt(-0.5, 0.4, 0.5)).unwrap());
        assert!(!q.contains(&pt(0.5, 0.4, 0.5)).unwrap());
        assert!(!q.contains(&pt(-1.0, 0.0, 0.0)).unwrap());
        let qf = KineticCylinder::new(pt(0.0, 0.0, 0.0), 1.0, Orientation::Forward).unwrap();
        assert!(qf.contains(&pt(0.5, 0.4, 0.5)).unwrap());
        assert!(!qf.contains(&pt(-0.5, 0.4, 0.5)).unwrap());
        assert!(KineticCylinder::new(pt(0.0, 0.0, 0.0), 0.0, Orientation::Forward).is_err());
    }

    #[test]
    fn cylinder_follows_the_flow() {
        // Center moving with v0 = 2: x must be measured against x0 + (t - t0) v0.
        let q = KineticCylinder::new(pt(1.0, 0.0, 2.0), 1.0, Orientation::Backward).unwrap();
        assert!(q.contains(&pt(0.5, -1.0, 2.0)).unwrap());
        assert!(!q.contains(&pt(0.5, 0.0, 2.0)).unwrap());
    }

    #[test]
    fn rho_examples() {
        let o = PhaseSet::point(vec![0.0], vec![0.0]).unwrap();
        for tau in [-3.0, 0.1, 2.0] {
            assert_eq!(rho_tau(&o, &o, tau).unwrap(), 0.0);
        }
        let e = PhaseSet::point(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(rho_tau(&e, &o, 2.0).unwrap(), 0.5);
        assert!(rho_tau(&e, &o, 0.0).is_err());
    }

    #[test]
    fn periodic_rho_matches_explicit_images() {
        let e = PhaseSet::cuboid(vec![[6.0f64, 7.0]], vec![[0.5, 1.0]]).unwrap();
        let f = PhaseSet::cuboid(vec![[-7.0, -6.5]], vec![[-0.5, 0.0]]).unwrap();
        for tau in [0.1, 0.5, 1.0, -0.7] {
            let periodic = rho_tau_sq_periodic(&e, &f, tau, 16.0).unwrap();
            let explicit = (-4..=4)
                .map(|k| rho_tau_sq(&e, &f.translated_x(&[16.0 * k as f64]), tau).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!((periodic - explicit).abs() < 1e-12, "tau {tau}: {periodic} vs {explicit}");
            assert!(periodic <= rho_tau_sq(&e, &f, tau).unwrap());
        }
    }

    #[test]
    fn rho_box_example_against_grid() {
        let e = PhaseSet::cuboid(vec![[2.0, 3.0]], vec![[0.0, 0.0]]).unwrap();
        let f = PhaseSet::cuboid(vec![[0.0, 0.0]], vec![[0.0, 0.0]]).unwrap();
        let exact: f64 = rho_tau(&e, &f, 1.0).unwrap();
        assert!((exact - 2.0).abs() < 1e-12);
        // Brute force over a 10^4-point grid on E.
        let mut best = f64::INFINITY;
        for i in 0..10_000 {
            let x = 2.0 + i as f64 / 9999.0;
            best = best.min(pair_distance_sq(&[x], &[0.0], &[0.0], &[0.0], 1.0));
        }
        assert!((best.sqrt() - exact).abs() < 1e-9);
    }

    #[test]
    fn rho_box_nested_matches_dense_sampling() {
        let e = PhaseSet::cuboid(vec![[1.0, 1.5]], vec![[-0.5, 0.25]]).unwrap();
        let f = PhaseSet::cuboid(vec![[-1.0, -0.2]], vec![[0.5, 1.0]]).unwrap();
        for tau in [-0.7, 0.3, 1.0, 2.5] {
            let exact = rho_tau_sq(&e, &f, tau).unwrap();
            let n = 24;
            let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let mut best = f64::INFINITY;
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        for d in 0..n {
                            let q = pair_distance_sq(
                                &[lin(1.0, 1.5, a)],
                                &[lin(-0.5, 0.25, b)],
                                &[lin(-1.0, -0.2, c)],
                                &[lin(0.5, 1.0, d)],
                                tau,
                            );
                            best = best.min(q);
                        }
                    }
                }
            }
            assert!(exact <= best + 1e-12, "tau={tau}: exact {exact} > sampled {best}");
            assert!(best - exact < 5e-3, "tau={tau}: sampled {best} far above {exact}");
        }
    }

    #[test]
    fn phase_set_validation() {
        assert!(PhaseSet::<f64>::points(vec![]).is_err());
        assert!(PhaseSet::cuboid(vec![[1.0, 0.0]], vec![[0.0, 0.0]]).is_err());
        assert!(PhaseSet::cuboid(vec![[0.0, 1.0]], vec![[0.0, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn json_field_names() {
        let c = KineticCylinder::new(pt(1.0, 0.5, -0.5), 0.25, Orientation::Forward).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(
            s,
            r#"{"t":1.0,"x":[0.5],"v":[-0.5],"r":0.25,"orientation":"forward"}"#
        );
        let back: KineticCylinder<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let b: PhaseSet<f64> =
            serde_json::from_str(r#"{"kind":"box","x":[[2,3]],"v":[[0,0]]}"#).unwrap();
        assert_eq!(b, PhaseSet::cuboid(vec![[2.0, 3.0]], vec![[0.0, 0.0]]).unwrap());
    }

    #[test]
    fn quasi_symmetry_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut worst: f64 = 1.0;
        for _ in 0..20_000 {
            let d = rng.random_range(1..=2);
            let mut draw = || (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
            let (x, v, y, w) = (draw(), draw(), draw(), draw());
            let tau = rng.random_range(0.05..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let e = PhaseSet::point(x, v).unwrap();
            let f = PhaseSet::point(y, w).unwrap();
            let r = quasi_symmetry_ratio(&e, &f, tau).unwrap().unwrap();
            worst = worst.max(r).max(1.0 / r);
        }
        assert!(worst <= phi * (1.0 + 1e-12));
        assert!(worst > 1.6, "sampled sup {worst} should approach phi");
        // Extremal pair: (a, b) = (-1/phi, 1) spans the top eigenvector.
        let a = -1.0 / phi;
        let e = PhaseSet::point(vec![a], vec![1.0]).unwrap();
        let f = PhaseSet::point(vec![0.0], vec![0.0]).unwrap();
        let r = quasi_symmetry_ratio(&e, &f, 1.0).unwrap().unwrap();
        assert!((r - phi).abs() < 1e-12, "{r}");
        assert!(quasi_symmetry_ratio(&f, &f, 1.0).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn quasi_symmetry_within_sqrt3(
            x in -4.0..4.0f64, v in -4.0..4.0f64, y in -4.0..4.0f64, w in -4.0..4.0f64,
            tau in 0.05..2.0f64,
        ) {
            let e = PhaseSet::point(vec![x], vec![v]).unwrap();
            let f = PhaseSet::point(vec![y], vec![w]).unwrap();
            if let Some(r) = quasi_symmetry_ratio(&e, &f, tau).unwrap() {
                prop_assert!(r <= 3f64.sqrt() && r >= 1.0 / 3f64.sqrt());
            }
        }

        #[test]
        fn rho_monotone_under_inclusion(
            a in -2.0..2.0f64, b in 0.1..2.0f64, c in -2.0..2.0f64, grow in 0.0..1.0f64, tau in 0.1..1.5f64,
        ) {
            let f = PhaseSet::cuboid(vec![[3.0, 4.0]], vec![[0.0, 0.5]]).unwrap();
            let e = PhaseSet::cuboid(vec![[a, a + b]], vec![[c, c + b]]).unwrap();
            let big = PhaseSet::cuboid(vec![[a - grow, a + b + grow]], vec![[c - grow, c + b]]).unwrap();
            prop_assert!(rho_tau(&big, &f, tau).unwrap() <= rho_tau(&e, &f, tau).unwrap() + 1e-12);
        }
    }
}
