//! Small dense linear-algebra helpers used throughout the crate.
//!
//! All matrices here are tiny (dimension ≤ 8), so everything goes through
//! dense nalgebra routines. Diffusion blocks are fixed to the symmetric
//! principal square root; sign conventions elsewhere rely on that choice.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Eigenvalue floor for square-root arguments. Eigenvalues in
/// `[-NEG_EIG_FLOOR, 0)` are clamped to zero; anything below is an error.
pub const NEG_EIG_FLOOR: f64 = 1e-9;

/// Symmetric principal square root of a symmetric positive semidefinite
/// matrix, via eigendecomposition. Eigenvalues slightly negative from
/// roundoff (within [`NEG_EIG_FLOOR`]) are clamped to zero.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_EIG_FLOOR {
                return Err(Error::NumericalDegeneracy { min_eig: *v });
            }
            *v = 0.0;
        }
    }
    let sqrt_d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&eig.eigenvectors * sqrt_d * eig.eigenvectors.transpose())
}

/// Inverse of a symmetric positive-definite matrix. Errors with the given
/// context when the matrix is not invertible.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::DegenerateOrbit {
            context: context.to_string(),
            detail: "matrix not invertible".to_string(),
        })
}

/// Smallest eigenvalue of a symmetric matrix (0 for empty matrices).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// Determinant, defined as 1 for the empty matrix (consistent with block
/// determinant factorizations over possibly empty blocks).
pub fn det(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        1.0
    } else {
        m.determinant()
    }
}

/// Matrix exponential of a small complex matrix by scaling and squaring on
/// the Taylor series. Dimensions here never exceed 3, so a fixed-order
/// series after scaling is accurate to machine precision.
pub fn expm(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = a.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, a[(0, 0)].exp());
    }
    let norm = a.iter().map(|z| z.norm()).fold(0.0_f64, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.map(|z| z / 2f64.powi(squarings as i32));
    let mut term = DMatrix::<Complex64>::identity(n, n);
    let mut sum = DMatrix::<Complex64>::identity(n, n);
    for k in 1..=12 {
        term = (&term * &scaled) / Complex64::new(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Maximum absolute entry (0 for empty matrices).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Maximum absolute difference between two matrices of equal shape.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b))
}

/// Central finite-difference gradient of a scalar function of a vector.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    z: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let n = z.len();
    let mut g = DVector::zeros(n);
    let mut zp = z.clone();
    for j in 0..n {
        zp[j] = z[j] + h;
        let fp = f(&zp);
        zp[j] = z[j] - h;
        let fm = f(&zp);
        zp[j] = z[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central finite-difference Jacobian of a vector-valued function.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    z: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let n = z.len();
    let probe = f(z);
    let m = probe.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut zp = z.clone();
    for j in 0..n {
        zp[j] = z[j] + h;
        let fp = f(&zp);
        zp[j] = z[j] - h;
        let fm = f(&zp);
        zp[j] = z[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}
