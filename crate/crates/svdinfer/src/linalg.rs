//! Small dense helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// 2-norm condition number from the singular values; `inf` for singular input.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let Some(sv) = singular_values(a) else {
        return f64::INFINITY;
    };
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Thin SVD `a = U diag(s) Vᵀ` with the singular values sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(a: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Thin SVD of `a`; `None` if the iteration fails to converge.
///
/// Uses faer rather than nalgebra: nalgebra's bidiagonal SVD can return
/// singular vectors that do not reconstruct the input.
pub fn svd(a: &DMatrix<f64>) -> Option<ThinSvd> {
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return Some(ThinSvd {
            u: DMatrix::zeros(a.nrows(), 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(a.ncols(), 0),
        });
    }
    let dec = to_faer(a).thin_svd().ok()?;
    let diag = dec.S().column_vector();
    Some(ThinSvd {
        u: from_faer(dec.U()),
        s: DVector::from_fn(k, |i, _| diag[i]),
        v: from_faer(dec.V()),
    })
}

/// Singular values of `a` in decreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Option<DVector<f64>> {
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return Some(DVector::zeros(0));
    }
    let sv = to_faer(a).singular_values().ok()?;
    Some(DVector::from_vec(sv))
}

/// Solves `a x = b` by LU with partial pivoting. Returns `None` if `a` is singular.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, b.ncols()));
    }
    a.clone().lu().solve(b)
}

/// (A + Aᵀ)/2.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Zeroes the negative eigenvalues of a symmetric matrix.
pub fn psd_project(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let vals = eig.eigenvalues.map(|x| x.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    symmetrize(&out)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

/// `xᵀ A y`.
pub fn bilinear(x: &DVector<f64>, a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&(a * y))
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// AR(1) correlation matrix `(rho^{|i-j|})`.
pub fn ar1(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
}
