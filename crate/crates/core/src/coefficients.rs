//! Rough diffusion-matrix fields `A(t, x, v)`.
//!
//! Every field is a pure function of its spec and the query point. Cell-wise
//! randomness comes from hashing the seed with the integer cell index, so no
//! state is shared between samples.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{KfpError, Result};
use crate::linalg::SmallMatrix;
use crate::scalar::Real;

/// Kind tag of a coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Constant,
    Checkerboard,
    RandomPiecewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantParams {
    pub matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_lambda: Option<f64>,
    #[serde(default, rename = "declared_Lambda", skip_serializing_if = "Option::is_none")]
    pub declared_upper: Option<f64>,
}

/// Two matrices alternating on a rectangular partition of `(t, x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerboardParams {
    /// Cell sizes `[t, x, v]`.
    pub cell: [f64; 3],
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_lambda: Option<f64>,
    #[serde(default, rename = "declared_Lambda", skip_serializing_if = "Option::is_none")]
    pub declared_upper: Option<f64>,
}

/// Independent random matrix per cell: `Q diag(mu) Q^T + k (q1 q2^T - q2 q1^T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPiecewiseParams {
    pub cell: [f64; 3],
    pub eig_min: f64,
    pub eig_max: f64,
    /// Bound on the skew coefficient `|k|`; requires `d >= 2` when nonzero.
    #[serde(default)]
    pub skew: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_lambda: Option<f64>,
    #[serde(default, rename = "declared_Lambda", skip_serializing_if = "Option::is_none")]
    pub declared_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldParams {
    Constant(ConstantParams),
    Checkerboard(CheckerboardParams),
    RandomPiecewise(RandomPiecewiseParams),
}

impl FieldParams {
    pub fn kind(&self) -> FieldKind {
        match self {
            FieldParams::Constant(_) => FieldKind::Constant,
            FieldParams::Checkerboard(_) => FieldKind::Checkerboard,
            FieldParams::RandomPiecewise(_) => FieldKind::RandomPiecewise,
        }
    }

    fn declared(&self) -> (Option<f64>, Option<f64>) {
        match self {
            FieldParams::Constant(p) => (p.declared_lambda, p.declared_upper),
            FieldParams::Checkerboard(p) => (p.declared_lambda, p.declared_upper),
            FieldParams::RandomPiecewise(p) => (p.declared_lambda, p.declared_upper),
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            FieldParams::Constant(p) => serde_json::to_value(p),
            FieldParams::Checkerboard(p) => serde_json::to_value(p),
            FieldParams::RandomPiecewise(p) => serde_json::to_value(p),
        };
        v.expect("params serialize")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSpecRepr {
    kind: FieldKind,
    params: Value,
    #[serde(default)]
    seed: u64,
    d: usize,
}

/// Serializable description `{"kind", "params", "seed", "d"}` of a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldSpecRepr", into = "FieldSpecRepr")]
pub struct FieldSpec {
    pub params: FieldParams,
    pub seed: u64,
    pub d: usize,
}

impl TryFrom<FieldSpecRepr> for FieldSpec {
    type Error = String;

    fn try_from(r: FieldSpecRepr) -> std::result::Result<Self, String> {
        let params = match r.kind {
            FieldKind::Constant => serde_json::from_value(r.params).map(FieldParams::Constant),
            FieldKind::Checkerboard => {
                serde_json::from_value(r.params).map(FieldParams::Checkerboard)
            }
            FieldKind::RandomPiecewise => {
                serde_json::from_value(r.params).map(FieldParams::RandomPiecewise)
            }
        }
        .map_err(|e| format!("params: {e}"))?;
        Ok(FieldSpec {
            params,
            seed: r.seed,
            d: r.d,
        })
    }
}

impl From<FieldSpec> for FieldSpecRepr {
    fn from(s: FieldSpec) -> Self {
        FieldSpecRepr {
            kind: s.params.kind(),
            params: s.params.to_value(),
            seed: s.seed,
            d: s.d,
        }
    }
}

impl FieldSpec {
    pub fn identity(d: usize) -> Self {
        let matrix = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        FieldSpec {
            params: FieldParams::Constant(ConstantParams {
                matrix,
                declared_lambda: None,
                declared_upper: None,
            }),
            seed: 0,
            d,
        }
    }

    pub fn random_piecewise(d: usize, cell: [f64; 3], eig: [f64; 2], skew: f64, seed: u64) -> Self {
        FieldSpec {
            params: FieldParams::RandomPiecewise(RandomPiecewiseParams {
                cell,
                eig_min: eig[0],
                eig_max: eig[1],
                skew,
                declared_lambda: None,
                declared_upper: None,
            }),
            seed,
            d,
        }
    }

    pub fn checkerboard(d: usize, cell: [f64; 3], a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Self {
        FieldSpec {
            params: FieldParams::Checkerboard(CheckerboardParams {
                cell,
                a,
                b,
                declared_lambda: None,
                declared_upper: None,
            }),
            seed: 0,
            d,
        }
    }
}

#[derive(Debug, Clone)]
enum Sampler<T> {
    Constant(Vec<T>),
    Checkerboard {
        inv_cell: [f64; 3],
        a: Vec<T>,
        b: Vec<T>,
    },
    Random {
        inv_cell: [f64; 3],
        eig_min: f64,
        eig_max: f64,
        skew: f64,
    },
}

/// Immutable, thread-safe sampler of `A(t, x, v)` with declared ellipticity bounds.
#[derive(Debug, Clone)]
pub struct CoefficientField<T> {
    spec: FieldSpec,
    d: usize,
    sampler: Sampler<T>,
    declared_lambda: T,
    declared_upper: T,
    symmetric: bool,
}

fn matrix_of<T: Real>(rows: &[Vec<f64>], d: usize, name: &str) -> Result<SmallMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(KfpError::invalid(format!("{name} must be {d}x{d}")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(KfpError::invalid(format!("{name} has non-finite entries")));
    }
    let m = SmallMatrix::from_rows(rows)?;
    let lo = m.min_symmetric_eigenvalue();
    if !(lo > 0.0) {
        return Err(KfpError::invalid(format!(
            "{name}: symmetric part not positive definite (min eigenvalue {lo})"
        )));
    }
    Ok(m)
}

fn check_cell(cell: &[f64; 3]) -> Result<[f64; 3]> {
    if cell.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(KfpError::invalid("cell sizes must be positive and finite"));
    }
    Ok([1.0 / cell[0], 1.0 / cell[1], 1.0 / cell[2]])
}

fn to_t<T: Real>(m: &SmallMatrix<f64>) -> Vec<T> {
    m.as_slice().iter().map(|&x| T::of(x)).collect()
}

/// Exact `(lambda, Lambda)` of the random palette: the symmetric part has spectrum in
/// `[eig_min, eig_max]`, and the norm of `S + K` is maximized at a vertex of the
/// `(mu1, mu2, k)` box restricted to the `q1, q2` plane.
fn random_palette_bounds(d: usize, eig_min: f64, eig_max: f64, skew: f64) -> f64 {
    if skew == 0.0 || d < 2 {
        return eig_max;
    }
    let mut upper = eig_max;
    for &m1 in &[eig_min, eig_max] {
        for &m2 in &[eig_min, eig_max] {
            let block = SmallMatrix::from_slice(2, &[m1, skew, -skew, m2]);
            upper = upper.max(block.operator_norm());
        }
    }
    upper
}

pub fn build_field<T: Real>(spec: &FieldSpec) -> Result<CoefficientField<T>> {
    let d = spec.d;
    if d == 0 {
        return Err(KfpError::invalid("dimension d must be at least 1"));
    }
    let (sampler, lambda, upper, symmetric) = match &spec.params {
        FieldParams::Constant(p) => {
            let m = matrix_of::<T>(&p.matrix, d, "matrix")?;
            (
                Sampler::Constant(to_t(&m)),
                m.min_symmetric_eigenvalue(),
                m.operator_norm(),
                m.is_symmetric(),
            )
        }
        FieldParams::Checkerboard(p) => {
            let inv_cell = check_cell(&p.cell)?;
            let a = matrix_of::<T>(&p.a, d, "a")?;
            let b = matrix_of::<T>(&p.b, d, "b")?;
            let lambda = a.min_symmetric_eigenvalue().min(b.min_symmetric_eigenvalue());
            let upper = a.operator_norm().max(b.operator_norm());
            let symmetric = a.is_symmetric() && b.is_symmetric();
            (
                Sampler::Checkerboard {
                    inv_cell,
                    a: to_t(&a),
                    b: to_t(&b),
                },
                lambda,
                upper,
                symmetric,
            )
        }
        FieldParams::RandomPiecewise(p) => {
            let inv_cell = check_cell(&p.cell)?;
            if !(p.eig_min > 0.0) || !(p.eig_max >= p.eig_min) || !p.eig_max.is_finite() {
                return Err(KfpError::invalid(format!(
                    "eigenvalue range [{}, {}] must satisfy 0 < eig_min <= eig_max",
                    p.eig_min, p.eig_max
                )));
            }
            if !(p.skew >= 0.0) || !p.skew.is_finite() {
                return Err(KfpError::invalid("skew must be a finite non-negative number"));
            }
            if p.skew > 0.0 && d < 2 {
                return Err(KfpError::invalid(
                    "a skew-symmetric part needs d >= 2 (1x1 matrices are symmetric)",
                ));
            }
            (
                Sampler::Random {
                    inv_cell,
                    eig_min: p.eig_min,
                    eig_max: p.eig_max,
                    skew: p.skew,
                },
                p.eig_min,
                random_palette_bounds(d, p.eig_min, p.eig_max, p.skew),
                p.skew == 0.0,
            )
        }
    };
    let (dl, du) = spec.params.declared();
    if let (Some(l), Some(u)) = (dl, du) {
        if l > u {
            return Err(KfpError::invalid(format!(
                "declared_lambda {l} exceeds declared_Lambda {u}"
            )));
        }
    }
    let declared_lambda = match dl {
        Some(l) if !(l > 0.0 && l <= lambda) => {
            return Err(KfpError::invalid(format!(
                "declared_lambda {l} must lie in (0, {lambda}]"
            )))
        }
        Some(l) => l,
        None => lambda,
    };
    let declared_upper = match du {
        Some(u) if !(u >= upper) || !u.is_finite() => {
            return Err(KfpError::invalid(format!(
                "declared_Lambda {u} must be at least {upper}"
            )))
        }
        Some(u) => u,
        None => upper,
    };
    Ok(CoefficientField {
        spec: spec.clone(),
        d,
        sampler,
        declared_lambda: T::of(declared_lambda),
        declared_upper: T::of(declared_upper),
        symmetric,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based uniform stream keyed by a cell hash.
struct CellStream(u64);

impl CellStream {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        (splitmix64(self.0) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn cell_index(x: f64, inv: f64) -> i64 {
    (x * inv).floor() as i64
}

impl<T: Real> CoefficientField<T> {
    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> FieldKind {
        self.spec.params.kind()
    }

    pub fn declared_lambda(&self) -> T {
        self.declared_lambda
    }

    pub fn declared_upper(&self) -> T {
        self.declared_upper
    }

    /// True when every sample is a symmetric matrix.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// True when the field does not depend on `(t, x, v)`.
    pub fn is_constant(&self) -> bool {
        matches!(self.sampler, Sampler::Constant(_))
    }

    /// Writes `A(t, x, v)` row-major into `out` (length `d*d`).
    pub fn sample_into(&self, t: T, x: &[T], v: &[T], out: &mut [T]) {
        let d = self.d;
        debug_assert_eq!(out.len(), d * d);
        match &self.sampler {
            Sampler::Constant(m) => out.copy_from_slice(m),
            Sampler::Checkerboard { inv_cell, a, b } => {
                let mut parity = cell_index(t.f64(), inv_cell[0]);
                for i in 0..d {
                    parity += cell_index(x[i].f64(), inv_cell[1]);
                    parity += cell_index(v[i].f64(), inv_cell[2]);
                }
                out.copy_from_slice(if parity.rem_euclid(2) == 0 { a } else { b });
            }
            Sampler::Random {
                inv_cell,
                eig_min,
                eig_max,
                skew,
            } => {
                let mut h = splitmix64(self.spec.seed ^ 0x6B46_5031_u64);
                h = splitmix64(h ^ cell_index(t.f64(), inv_cell[0]) as u64);
                for i in 0..d {
                    h = splitmix64(h ^ cell_index(x[i].f64(), inv_cell[1]) as u64);
                    h = splitmix64(h ^ cell_index(v[i].f64(), inv_cell[2]) as u64);
                }
                let m = random_cell_matrix(&mut CellStream(h), d, *eig_min, *eig_max, *skew);
                for (o, &m) in out.iter_mut().zip(&m) {
                    *o = T::of(m);
                }
            }
        }
    }

    pub fn sample(&self, t: T, x: &[T], v: &[T]) -> SmallMatrix<T> {
        let mut out = vec![T::zero(); self.d * self.d];
        self.sample_into(t, x, v, &mut out);
        SmallMatrix::from_slice(self.d, &out)
    }
}

fn random_cell_matrix(s: &mut CellStream, d: usize, emin: f64, emax: f64, skew: f64) -> Vec<f64> {
    let mu: Vec<f64> = (0..d).map(|_| emin + (emax - emin) * s.next_f64()).collect();
    if d == 1 {
        return mu;
    }
    // Gram-Schmidt on Gaussian columns gives a Haar-distributed orthogonal frame.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut c: Vec<f64> = (0..d).map(|_| s.normal()).collect();
        for e in &q {
            let p: f64 = c.iter().zip(e).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(e).for_each(|(a, b)| *a -= p * b);
        }
        let n = c.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            c.iter_mut().for_each(|a| *a /= n);
            q.push(c);
        }
    }
    let k = skew * (2.0 * s.next_f64() - 1.0);
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc: f64 = (0..d).map(|l| q[l][i] * mu[l] * q[l][j]).sum();
            acc += k * (q[0][i] * q[1][j] - q[1][i] * q[0][j]);
            m[i * d + j] = acc;
        }
    }
    m
}

/// Axis-aligned sampling region in `(t, x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRegion {
    pub t: [f64; 2],
    pub x: Vec<[f64; 2]>,
    pub v: Vec<[f64; 2]>,
}

impl SampleRegion {
    pub fn cube(d: usize, t: [f64; 2], x: [f64; 2], v: [f64; 2]) -> Self {
        SampleRegion {
            t,
            x: vec![x; d],
            v: vec![v; d],
        }
    }
}

/// Empirical `(lambda_hat, Lambda_hat)` over `n_samples` uniform points of `region`.
pub fn estimate_ellipticity<T: Real>(
    field: &CoefficientField<T>,
    n_samples: usize,
    region: &SampleRegion,
    seed: u64,
) -> Result<(T, T)> {
    let d = field.dim();
    if n_samples == 0 {
        return Err(KfpError::invalid("n_samples must be at least 1"));
    }
    if region.x.len() != d || region.v.len() != d {
        return Err(KfpError::DimensionMismatch {
            expected: d,
            got: region.x.len().min(region.v.len()),
        });
    }
    let mut s = CellStream(splitmix64(seed));
    let mut lo = T::infinity();
    let mut hi = T::zero();
    let lerp = |s: &mut CellStream, r: [f64; 2]| T::of(r[0] + (r[1] - r[0]) * s.next_f64());
    let mut buf = vec![T::zero(); d * d];
    for _ in 0..n_samples {
        let t = lerp(&mut s, region.t);
        let x: Vec<T> = region.x.iter().map(|&r| lerp(&mut s, r)).collect();
        let v: Vec<T> = region.v.iter().map(|&r| lerp(&mut s, r)).collect();
        field.sample_into(t, &x, &v, &mut buf);
        let m = SmallMatrix::from_slice(d, &buf);
        lo = lo.min(m.min_symmetric_eigenvalue());
        hi = hi.max(m.operator_norm());
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn checkerboard_1d() -> FieldSpec {
        FieldSpec::checkerboard(1, [1.0, 1.0, 1.0], vec![vec![1.0]], vec![vec![4.0]])
    }

    #[test]
    fn constant_identity() {
        let f = build_field::<f64>(&FieldSpec::identity(1)).unwrap();
        assert_eq!(f.sample(0.3, &[1.0], &[-2.0]).as_slice(), &[1.0]);
        assert_eq!((f.declared_lambda(), f.declared_upper()), (1.0, 1.0));
        let r = SampleRegion::cube(1, [0.0, 1.0], [-3.0, 3.0], [-3.0, 3.0]);
        assert_eq!(estimate_ellipticity(&f, 100, &r, 5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn checkerboard_alternates() {
        let f = build_field::<f64>(&checkerboard_1d()).unwrap();
        assert_eq!((f.declared_lambda(), f.declared_upper()), (1.0, 4.0));
        let a = f.sample(0.5, &[0.5], &[0.5]).as_slice()[0];
        let b = f.sample(0.5, &[0.5], &[1.5]).as_slice()[0];
        assert_ne!(a, b);
        let r = SampleRegion::cube(1, [0.0, 4.0], [-4.0, 4.0], [-4.0, 4.0]);
        assert_eq!(estimate_ellipticity(&f, 2000, &r, 1).unwrap(), (1.0, 4.0));
    }

    #[test]
    fn random_piecewise_is_deterministic_and_bounded() {
        for d in [1, 2, 3] {
            let skew = if d > 1 { 0.8 } else { 0.0 };
            let spec = FieldSpec::random_piecewise(d, [0.25, 0.5, 0.5], [1.0, 3.0], skew, 42);
            let f = build_field::<f64>(&spec).unwrap();
            let g = build_field::<f64>(&spec).unwrap();
            let pts: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..10)
                .map(|i| {
                    let s = i as f64 * 0.731;
                    (s.sin(), vec![s.cos() * 3.0; d], vec![(2.0 * s).sin() * 4.0; d])
                })
                .collect();
            for (t, x, v) in &pts {
                assert_eq!(f.sample(*t, x, v), g.sample(*t, x, v));
                assert_eq!(f.sample(*t, x, v), f.sample(*t, x, v));
            }
            let r = SampleRegion::cube(d, [0.0, 1.0], [-8.0, 8.0], [-8.0, 8.0]);
            let (lo, hi) = estimate_ellipticity(&f, 10_000, &r, 9).unwrap();
            assert!(f.declared_lambda() <= lo + 1e-12, "d={d}: {lo}");
            assert!(lo <= hi);
            assert!(hi <= f.declared_upper() + 1e-12, "d={d}: {hi} vs {}", f.declared_upper());
        }
    }

    #[test]
    fn skew_bound_matches_brute_force() {
        let upper = random_palette_bounds(2, 1.0, 3.0, 1.0);
        let mut best = 0.0f64;
        for i in 0..=40 {
            for j in 0..=40 {
                for l in 0..=40 {
                    let m1 = 1.0 + 2.0 * i as f64 / 40.0;
                    let m2 = 1.0 + 2.0 * j as f64 / 40.0;
                    let k = -1.0 + 2.0 * l as f64 / 40.0;
                    best = best.max(SmallMatrix::from_slice(2, &[m1, k, -k, m2]).operator_norm());
                }
            }
        }
        assert!((upper - best).abs() < 1e-12, "{upper} vs {best}");
        assert!(upper > 10f64.sqrt());
    }

    #[test]
    fn rejects_bad_specs() {
        let bad_eig = FieldSpec::random_piecewise(1, [1.0; 3], [0.0, 2.0], 0.0, 0);
        assert!(build_field::<f64>(&bad_eig).is_err());
        let bad_cell = FieldSpec::random_piecewise(1, [1.0, 0.0, 1.0], [1.0, 2.0], 0.0, 0);
        assert!(build_field::<f64>(&bad_cell).is_err());
        let skew_1d = FieldSpec::random_piecewise(1, [1.0; 3], [1.0, 2.0], 0.5, 0);
        assert!(build_field::<f64>(&skew_1d).is_err());
        let indefinite = FieldSpec {
            params: FieldParams::Constant(ConstantParams {
                matrix: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
                declared_lambda: None,
                declared_upper: None,
            }),
            seed: 0,
            d: 2,
        };
        assert!(build_field::<f64>(&indefinite).is_err());
        let mut declared = FieldSpec::identity(1);
        if let FieldParams::Constant(p) = &mut declared.params {
            p.declared_lambda = Some(2.0);
            p.declared_upper = Some(1.5);
        }
        assert!(build_field::<f64>(&declared).is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"kind":"random-piecewise","params":{"cell":[0.25,0.5,0.5],"eig_min":1,"eig_max":3},"seed":7,"d":1}"#;
        let spec: FieldSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.params.kind(), FieldKind::RandomPiecewise);
        let back: FieldSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let unknown = r#"{"kind":"constant","params":{"matrix":[[1]],"extra":1},"d":1}"#;
        assert!(serde_json::from_str::<FieldSpec>(unknown).is_err());
        let declared = r#"{"kind":"constant","params":{"matrix":[[2]],"declared_lambda":1,"declared_Lambda":3},"d":1}"#;
        let f = build_field::<f64>(&serde_json::from_str(declared).unwrap()).unwrap();
        assert_eq!((f.declared_lambda(), f.declared_upper()), (1.0, 3.0));
    }

    #[test]
    fn f32_sampling_matches_f64() {
        let spec = FieldSpec::random_piecewise(2, [0.5; 3], [1.0, 2.0], 0.3, 3);
        let a = build_field::<f64>(&spec).unwrap().sample(0.1, &[0.2, 0.3], &[0.4, 0.5]);
        let b = build_field::<f32>(&spec).unwrap().sample(0.1, &[0.2, 0.3], &[0.4, 0.5]);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - *y as f64).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn skew_part_leaves_quadratic_form(
            k in -5.0f64..5.0,
            xi in proptest::collection::vec(-10.0f64..10.0, 2),
            m in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let a = SmallMatrix::from_slice(2, &m);
            let mut b = a.clone();
            b.set(0, 1, b.get(0, 1) + k);
            b.set(1, 0, b.get(1, 0) - k);
            let qa = a.quadratic_form(&xi);
            let qb = b.quadratic_form(&xi);
            prop_assert!((qa - qb).abs() <= 1e-12 * (1.0 + qa.abs()));
        }

        #[test]
        fn samples_respect_declared_bounds(
            seed in any::<u64>(),
            t in -2.0f64..2.0,
            x in proptest::collection::vec(-5.0f64..5.0, 2),
            v in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let spec = FieldSpec::random_piecewise(2, [0.3, 0.7, 0.4], [0.5, 2.5], 1.2, seed);
            let f = build_field::<f64>(&spec).unwrap();
            let a = f.sample(t, &x, &v);
            prop_assert!(a.min_symmetric_eigenvalue() >= f.declared_lambda() - 1e-12);
            prop_assert!(a.operator_norm() <= f.declared_upper() + 1e-12);
        }
    }
}
