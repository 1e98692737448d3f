//! Regression data, Gram matrix, SVD fits and the scaled latent factors.
//!
//! The model is `Y = X C + E` with `C = Σ_i d_i l_i r_iᵀ`. For each layer the
//! scaled factors are
//!
//! ```text
//! u_i = (l_iᵀ Σ̂ l_i)^{-1/2} n^{-1/2} X l_i      (n-vector, unit norm)
//! v_i = (l_iᵀ Σ̂ l_i)^{1/2}  d_i r_i             (q-vector)
//! ```
//!
//! so that `n^{-1/2} X C = Σ_i u_i v_iᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Fixed design `X` (n×p) and responses `Y` (n×q).
#[derive(Debug, Clone)]
pub struct RegressionData {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl RegressionData {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 observations, got {}",
                x.nrows()
            )));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::InvalidInput(format!(
                "X has {} rows but Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::InvalidInput("X and Y need at least one column".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("X and Y must be finite".into()));
        }
        Ok(RegressionData { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    /// Columns of `X` whose Euclidean norm differs from `√n` by more than 20%.
    ///
    /// The design is never rescaled, since that would change the inferential
    /// target; callers may surface these indices as a warning.
    pub fn column_norm_warnings(&self) -> Vec<usize> {
        let target = (self.n() as f64).sqrt();
        (0..self.p())
            .filter(|&j| (self.x.column(j).norm() / target - 1.0).abs() > 0.2)
            .collect()
    }
}

/// The Gram matrix `Σ̂ = XᵀX / n`.
#[derive(Debug, Clone)]
pub struct GramMatrix(pub DMatrix<f64>);

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `aᵀ Σ̂ b`.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        linalg::bilinear(a, &self.0, b)
    }
}

/// Returns `XᵀX / n`, symmetrized.
pub fn gram(data: &RegressionData) -> GramMatrix {
    let n = data.n() as f64;
    let g = data.x.tr_mul(&data.x) / n;
    GramMatrix(linalg::symmetrize(&g))
}

/// A rank-r SVD `C = Σ d_i l_i r_iᵀ` with unit left vectors and orthonormal
/// right vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFit {
    d: DVector<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

/// Relative gap below which two singular values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-10;

impl SvdFit {
    /// Validates and wraps `(d, L, R)`.
    ///
    /// Rejects non-unit left vectors, non-orthonormal right vectors and
    /// singular values that are not strictly decreasing and positive.
    pub fn new(d: DVector<f64>, left: DMatrix<f64>, right: DMatrix<f64>) -> Result<Self> {
        let r = d.len();
        if r == 0 {
            return Err(Error::InvalidInput("fit must have rank at least 1".into()));
        }
        if left.ncols() != r || right.ncols() != r {
            return Err(Error::InvalidInput(format!(
                "rank {} but L has {} and R has {} columns",
                r,
                left.ncols(),
                right.ncols()
            )));
        }
        if d.iter().chain(left.iter()).chain(right.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("fit contains non-finite values".into()));
        }
        for i in 0..r {
            let norm = left.column(i).norm();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidInput(format!(
                    "left vector {i} has norm {norm}"
                )));
            }
        }
        let rtr = right.tr_mul(&right);
        if linalg::max_abs(&(rtr - DMatrix::identity(r, r))) > 1e-8 {
            return Err(Error::InvalidInput(
                "right vectors are not orthonormal".into(),
            ));
        }
        if d[r - 1] <= 0.0 {
            return Err(Error::InvalidInput("singular values must be positive".into()));
        }
        for i in 0..r - 1 {
            if d[i] - d[i + 1] < TIE_TOLERANCE * d[0] {
                return Err(Error::InvalidInput(format!(
                    "singular values {} and {} are not strictly decreasing",
                    d[i],
                    d[i + 1]
                )));
            }
        }
        Ok(SvdFit { d, left, right })
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    pub fn l(&self, i: usize) -> DVector<f64> {
        self.left.column(i).into_owned()
    }

    pub fn r(&self, i: usize) -> DVector<f64> {
        self.right.column(i).into_owned()
    }

    /// `μ_i = d_i l_i`.
    pub fn mu(&self, i: usize) -> DVector<f64> {
        self.left.column(i) * self.d[i]
    }

    /// `C = Σ d_i l_i r_iᵀ` (p×q).
    pub fn coefficient(&self) -> DMatrix<f64> {
        &self.left * DMatrix::from_diagonal(&self.d) * self.right.transpose()
    }

    /// Flips the sign of `(l_i, r_i)` jointly; `C` is unchanged.
    pub fn flip_sign(&mut self, i: usize) {
        self.left.column_mut(i).neg_mut();
        self.right.column_mut(i).neg_mut();
    }
}

/// Scaled latent factors of every layer of a fit.
#[derive(Debug, Clone)]
pub struct ScaledFactors {
    /// n×r, columns `u_i`.
    pub u: DMatrix<f64>,
    /// q×r, columns `v_i`.
    pub v: DMatrix<f64>,
    /// `z_i = μ_iᵀ Σ̂ μ_i = d_i² l_iᵀ Σ̂ l_i`.
    pub z: DVector<f64>,
    /// `l_iᵀ Σ̂ l_i`.
    pub lsl: DVector<f64>,
}

impl ScaledFactors {
    pub fn rank(&self) -> usize {
        self.z.len()
    }

    pub fn u_col(&self, i: usize) -> DVector<f64> {
        self.u.column(i).into_owned()
    }

    pub fn v_col(&self, i: usize) -> DVector<f64> {
        self.v.column(i).into_owned()
    }
}

/// Below this value `l_iᵀ Σ̂ l_i` is treated as zero.
pub const DEGENERATE_SCALE: f64 = 1e-12;

/// Builds `u_i` and `v_i` for every layer of `fit`.
pub fn scaled_factors(
    data: &RegressionData,
    sigma: &GramMatrix,
    fit: &SvdFit,
) -> Result<ScaledFactors> {
    let r = fit.rank();
    let n = data.n() as f64;
    let mut u = DMatrix::zeros(data.n(), r);
    let mut v = DMatrix::zeros(fit.right.nrows(), r);
    let mut z = DVector::zeros(r);
    let mut lsl = DVector::zeros(r);
    for i in 0..r {
        let l = fit.l(i);
        let s = sigma.inner(&l, &l);
        if s <= DEGENERATE_SCALE {
            return Err(Error::DegenerateFactor { layer: i, value: s });
        }
        let xl = &data.x * &l;
        u.set_column(i, &(xl / (s.sqrt() * n.sqrt())));
        v.set_column(i, &(fit.right.column(i) * (s.sqrt() * fit.d[i])));
        z[i] = fit.d[i] * fit.d[i] * s;
        lsl[i] = s;
    }
    Ok(ScaledFactors { u, v, z, lsl })
}
