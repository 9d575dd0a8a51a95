//! Small dense matrices and matrix-free Krylov solvers.

use crate::error::{KfpError, Result};
use crate::scalar::{dot, norm, Real};

/// Row-major `d x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallMatrix<T> {
    d: usize,
    data: Vec<T>,
}

impl<T: Real> SmallMatrix<T> {
    pub fn zeros(d: usize) -> Self {
        SmallMatrix {
            d,
            data: vec![T::zero(); d * d],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.data[i * d + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.len();
        if d == 0 {
            return Err(KfpError::invalid("matrix must be at least 1x1"));
        }
        let mut data = Vec::with_capacity(d * d);
        for r in rows {
            if r.len() != d {
                return Err(KfpError::invalid("matrix must be square"));
            }
            data.extend_from_slice(r);
        }
        Ok(SmallMatrix { d, data })
    }

    pub fn from_slice(d: usize, data: &[T]) -> Self {
        assert_eq!(data.len(), d * d);
        SmallMatrix {
            d,
            data: data.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: T) {
        self.data[i * self.d + j] = x;
    }

    pub fn transpose(&self) -> Self {
        let d = self.d;
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.data[j * d + i] = self.data[i * d + j];
            }
        }
        m
    }

    /// `(A + A^T) / 2`.
    pub fn symmetric_part(&self) -> Self {
        let d = self.d;
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.data[i * d + j] = (self.get(i, j) + self.get(j, i)) * T::of(0.5);
            }
        }
        m
    }

    pub fn mul(&self, other: &Self) -> Self {
        let d = self.d;
        let mut m = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.get(i, k);
                for j in 0..d {
                    m.data[i * d + j] += a * other.get(k, j);
                }
            }
        }
        m
    }

    pub fn apply(&self, xi: &[T]) -> Vec<T> {
        (0..self.d)
            .map(|i| (0..self.d).map(|j| self.get(i, j) * xi[j]).sum())
            .collect()
    }

    /// `<A xi, xi>`.
    pub fn quadratic_form(&self, xi: &[T]) -> T {
        dot(&self.apply(xi), xi)
    }

    pub fn is_symmetric(&self) -> bool {
        let d = self.d;
        (0..d).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Eigenvalues of a symmetric matrix, ascending (cyclic Jacobi).
    pub fn symmetric_eigenvalues(&self) -> Vec<T> {
        let d = self.d;
        let mut a = self.symmetric_part();
        if d == 1 {
            return vec![a.data[0]];
        }
        let eps = T::epsilon();
        for _sweep in 0..64 {
            let off: T = (0..d)
                .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a.get(i, j) * a.get(i, j))
                .sum();
            let diag: T = (0..d).map(|i| a.get(i, i) * a.get(i, i)).sum();
            if off <= eps * eps * diag || off == T::zero() {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a.get(p, q);
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (T::of(2.0) * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..d {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        let mut ev: Vec<T> = (0..d).map(|i| a.get(i, i)).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_symmetric_eigenvalue(&self) -> T {
        self.symmetric_eigenvalues()[0]
    }

    /// Spectral norm `sqrt(lambda_max(A^T A))`.
    pub fn operator_norm(&self) -> T {
        let ata = self.transpose().mul(self);
        let ev = SmallMatrix::from_slice(self.d, &ata.data).symmetric_eigenvalues();
        ev[self.d - 1].max(T::zero()).sqrt()
    }
}

/// Outcome of a Krylov solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn residual<T: Real>(apply: &impl Fn(&[T], &mut [T]), b: &[T], x: &[T], r: &mut [T]) {
    apply(x, r);
    for (ri, &bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Unpreconditioned conjugate gradients for a symmetric positive definite operator.
///
/// `x` holds the initial guess on entry. Without a preconditioner every residual
/// stays in `r0 + A K`, so linear invariants annihilated by `A - I` (such as total
/// mass when `1^T A = 1^T`) are preserved to round-off, independent of `tol`.
pub fn conjugate_gradient<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == T::zero() {
        x.iter_mut().for_each(|xi| *xi = T::zero());
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![T::zero(); n];
    residual(&apply, b, x, &mut r);
    let mut p = r.clone();
    let mut ap = vec![T::zero(); n];
    let mut rr = dot(&r, &r);
    let target = tol * bnorm;
    for it in 0..=max_iter {
        if rr.sqrt() <= target {
            return Ok(SolveStats {
                iterations: it,
                relative_residual: (rr.sqrt() / bnorm).f64(),
            });
        }
        if it == max_iter {
            break;
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(KfpError::SolverDivergence {
        iterations: max_iter,
        residual: (rr.sqrt() / bnorm).f64(),
        tol: tol.f64(),
    })
}

/// Unpreconditioned BiCGSTAB for general nonsymmetric operators.
pub fn bicgstab<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == T::zero() {
        x.iter_mut().for_each(|xi| *xi = T::zero());
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let target = tol * bnorm;
    let mut r = vec![T::zero(); n];
    residual(&apply, b, x, &mut r);
    if norm(&r) <= target {
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: (norm(&r) / bnorm).f64(),
        });
    }
    let mut r_hat = r.clone();
    let mut rho = T::one();
    let mut alpha = T::one();
    let mut omega = T::one();
    let mut v = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut s = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() <= T::epsilon() * T::epsilon() * bnorm * bnorm {
            // Breakdown: restart the shadow residual.
            r_hat.copy_from_slice(&r);
            rho = T::one();
            alpha = T::one();
            omega = T::one();
            v.iter_mut().for_each(|e| *e = T::zero());
            p.iter_mut().for_each(|e| *e = T::zero());
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        apply(&p, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == T::zero() {
            break;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= target {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            return Ok(SolveStats {
                iterations: it,
                relative_residual: (norm(&s) / bnorm).f64(),
            });
        }
        apply(&s, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > T::zero() { dot(&t, &s) / tt } else { T::zero() };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        let rn = norm(&r);
        if rn <= target {
            return Ok(SolveStats {
                iterations: it,
                relative_residual: (rn / bnorm).f64(),
            });
        }
        if omega == T::zero() {
            break;
        }
    }
    residual(&apply, b, x, &mut r);
    Err(KfpError::SolverDivergence {
        iterations: max_iter,
        residual: (norm(&r) / bnorm).f64(),
        tol: tol.f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_and_norms() {
        let m = SmallMatrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = m.symmetric_eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        assert!((m.operator_norm() - 3.0).abs() < 1e-13);
        let skew = SmallMatrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![-2.0, 1.0]]).unwrap();
        assert!((skew.min_symmetric_eigenvalue() - 1.0).abs() < 1e-14);
        assert!((skew.operator_norm() - 5f64.sqrt()).abs() < 1e-13);
        let m3 = SmallMatrix::<f64>::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.25],
            vec![0.5, 0.25, 1.0],
        ])
        .unwrap();
        let ev = m3.symmetric_eigenvalues();
        let trace: f64 = ev.iter().sum();
        assert!((trace - 8.0).abs() < 1e-12);
        for &l in &ev {
            // det(M - l I) = 0
            let mut s = m3.clone();
            for i in 0..3 {
                s.set(i, i, s.get(i, i) - l);
            }
            let det = s.get(0, 0) * (s.get(1, 1) * s.get(2, 2) - s.get(1, 2) * s.get(2, 1))
                - s.get(0, 1) * (s.get(1, 0) * s.get(2, 2) - s.get(1, 2) * s.get(2, 0))
                + s.get(0, 2) * (s.get(1, 0) * s.get(2, 1) - s.get(1, 1) * s.get(2, 0));
            assert!(det.abs() < 1e-11, "det {det}");
        }
    }

    fn tridiag(n: usize, skew: f64) -> impl Fn(&[f64], &mut [f64]) {
        move |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let mut acc = 3.0 * x[i];
                if i > 0 {
                    acc -= (1.0 + skew) * x[i - 1];
                }
                if i + 1 < n {
                    acc -= (1.0 - skew) * x[i + 1];
                }
                y[i] = acc;
            }
        }
    }

    #[test]
    fn cg_solves_spd_system() {
        let n = 40;
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = vec![0.0; n];
        let stats = conjugate_gradient(tridiag(n, 0.0), &b, &mut x, 1e-12, 200).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        let mut ax = vec![0.0; n];
        tridiag(n, 0.0)(&x, &mut ax);
        let err: f64 = ax.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_system() {
        let n = 40;
        let b: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.11).cos()).collect();
        let mut x = vec![0.0; n];
        bicgstab(tridiag(n, 0.4), &b, &mut x, 1e-12, 400).unwrap();
        let mut ax = vec![0.0; n];
        tridiag(n, 0.4)(&x, &mut ax);
        let err: f64 = ax.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn divergence_is_reported() {
        let n = 40;
        let b = vec![1.0; n];
        let mut x = vec![0.0; n];
        let err = conjugate_gradient(tridiag(n, 0.0), &b, &mut x, 1e-14, 2).unwrap_err();
        assert!(err.is_divergence());
        if let KfpError::SolverDivergence { residual, .. } = err {
            assert!(residual > 1e-14);
        }
    }
}
