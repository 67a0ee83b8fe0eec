//! Cyclic Jacobi eigensolver for small dense symmetric matrices.

use super::matrix::DenseMatrix;
use crate::error::{structural, Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs sorted by descending eigenvalue; column `k` of `vectors` pairs
/// with `values[k]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
    pub sweeps: usize,
}

fn off_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j).powi(2);
            }
        }
    }
    s.sqrt()
}

fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(structural(format!(
            "eigensolver needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let tol = SYMMETRY_TOL * m.frobenius_norm().max(1.0);
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (m.get(i, j) - m.get(j, i)).abs();
            if gap > tol {
                return Err(structural(format!(
                    "matrix is not symmetric: |m[{i},{j}] - m[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Full eigendecomposition `m = Q Λ Qᵀ` by cyclic Jacobi rotations.
pub fn sym_eigen(m: &DenseMatrix) -> Result<SymEigen> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.clone();
    // Work on the exactly symmetric part.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = DenseMatrix::identity(n);
    let threshold = OFF_DIAGONAL_TOL * m.frobenius_norm();

    let mut sweeps = 0;
    while off_norm(&a) > threshold {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerics(format!(
                "Jacobi did not converge in {MAX_SWEEPS} sweeps (off-diagonal norm {:e})",
                off_norm(&a)
            )));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, k, v.get(r, src));
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Annihilates `a[p,q]` with `a ← JᵀaJ` and accumulates `v ← vJ`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sym_eigvals(m: &DenseMatrix) -> Result<Vec<f64>> {
    sym_eigen(m).map(|e| e.values)
}
