//! Cyclic Jacobi eigensolver for 4×4 symmetric matrices and the derivative
//! of the eigenvector belonging to the smallest eigenvalue.

use crate::error::{AutogradError, Result};

pub const JACOBI_TOL: f64 = 1e-14;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Minimum λ₁ − λ₀ for which the smallest eigenvector is differentiated.
pub const MIN_EIGENGAP: f64 = 1e-8;

pub type Mat4 = [[f64; 4]; 4];

/// Eigen-decomposition of a symmetric 4×4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen4 {
    /// Ascending eigenvalues.
    pub values: [f64; 4],
    /// `vectors[j]` is the unit eigenvector for `values[j]`.
    pub vectors: [[f64; 4]; 4],
}

impl SymEigen4 {
    pub fn eigengap(&self) -> f64 {
        self.values[1] - self.values[0]
    }

    /// Smallest eigenvector with its largest-magnitude entry made positive.
    pub fn smallest(&self) -> [f64; 4] {
        canonical_sign(self.vectors[0])
    }
}

/// Flip `v` so its largest-|·| component is positive (first index wins ties).
pub fn canonical_sign(v: [f64; 4]) -> [f64; 4] {
    let mut best = 0;
    for i in 1..4 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.map(|x| -x)
    } else {
        v
    }
}

fn off_diagonal_norm(a: &Mat4) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                s += a[i][j] * a[i][j];
            }
        }
    }
    s.sqrt()
}

/// Diagonalize a symmetric matrix with cyclic Jacobi rotations.
///
/// Only the upper triangle is read; the input is symmetrized first.
pub fn sym_eigen4(m: &Mat4) -> Result<SymEigen4> {
    let mut a = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in i..4 {
            a[i][j] = m[i][j];
            a[j][i] = m[i][j];
        }
    }
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = scale == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        for p in 0..3 {
            for q in (p + 1)..4 {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J restricted to rows/cols p, q.
                for k in 0..4 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                // Columns of V accumulate the rotations.
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
        sweep += 1;
        converged = off_diagonal_norm(&a) <= JACOBI_TOL * scale;
    }
    if !converged {
        return Err(AutogradError::SolverFailure { sweeps: sweep });
    }
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i], v[3][i]]);
    Ok(SymEigen4 { values, vectors })
}

/// Gradient of a loss w.r.t. the (symmetric) input matrix, given the loss
/// gradient `g` w.r.t. the canonical smallest eigenvector.
///
/// With `v₀` the canonical smallest eigenvector, a symmetric perturbation
/// moves it by `Σ_{j≠0} v_j (v_jᵀ dM v₀)/(λ₀ − λ_j)`; the adjoint is the
/// symmetrized outer-product sum returned here.
pub fn smallest_eigenvector_vjp(eig: &SymEigen4, g: &[f64; 4]) -> Mat4 {
    let v0 = eig.smallest();
    let mut out = [[0.0; 4]; 4];
    for j in 1..4 {
        let vj = eig.vectors[j];
        let coeff = dot4(&vj, g) / (eig.values[0] - eig.values[j]);
        for r in 0..4 {
            for c in 0..4 {
                out[r][c] += coeff * vj[r] * v0[c];
            }
        }
    }
    let mut sym = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            sym[r][c] = 0.5 * (out[r][c] + out[c][r]);
        }
    }
    sym
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
