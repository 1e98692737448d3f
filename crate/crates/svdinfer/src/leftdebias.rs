//! Debiased estimates of the weighted left singular vectors `μ_k = d_k l_k`,
//! their hard-thresholded versions, and the thresholded latent factors that
//! the weakly orthogonal right-factor procedure consumes.
//!
//! The score for `μ_k` treats `r_k` as the nuisance parameter:
//!
//! ```text
//! μ̂_k = μ̃_k − W_u (g_μ − M_u g_r)
//! M_u = −z_k⁻¹ Σ̂ Σ_{j>k} μ̃_j r̃_jᵀ
//! W_u = Θ̂ [I + z_k⁻¹ Σ̂ L₂ (I − z_k⁻¹ L₂ᵀ Σ̂ L₂)⁻¹ L₂ᵀ],   L₂ = [μ̃_{k+1}, …, μ̃_r]
//! ```
//!
//! where `g_μ`, `g_r` are the partial gradients of
//! `L(μ, r) = (2n)⁻¹ ‖Y − X Σ μ_i r_iᵀ‖²`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::linmodel::{GramMatrix, RegressionData, SvdFit, DEGENERATE_SCALE};

/// Condition number above which the trailing-layer core is rejected.
pub const MAX_CORE_CONDITION: f64 = 1e12;

/// Everything computed for one layer of the left debiasing step.
#[derive(Debug, Clone)]
pub struct LeftDebiasResult {
    pub k: usize,
    /// Dense debiased estimate `μ̂_k`.
    pub mu_hat: DVector<f64>,
    /// Indices kept by the hard threshold.
    pub support: Vec<usize>,
    /// `μ̂_k^t`.
    pub mu_thresholded: DVector<f64>,
    /// `û_k^t`.
    pub u_thresholded: DVector<f64>,
    /// p×q.
    pub m_u: DMatrix<f64>,
    /// p×p.
    pub w_u: DMatrix<f64>,
}

/// Builds `(M_u, W_u)` for layer `k` (zero-based) of `fit`.
pub fn left_aux_matrices(
    k: usize,
    fit: &SvdFit,
    sigma: &GramMatrix,
    theta: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = fit.rank();
    if k >= r {
        return Err(Error::InvalidInput(format!("layer {k} out of range for rank {r}")));
    }
    let s = sigma.matrix();
    let (p, q) = (fit.left().nrows(), fit.right().nrows());
    let mu_k = fit.mu(k);
    let z = sigma.inner(&mu_k, &mu_k);
    if z <= DEGENERATE_SCALE {
        return Err(Error::DegenerateFactor { layer: k, value: z });
    }
    let trailing = r - k - 1;
    if trailing == 0 {
        return Ok((DMatrix::zeros(p, q), theta.clone()));
    }
    let mut l2 = DMatrix::zeros(p, trailing);
    let mut r2 = DMatrix::zeros(q, trailing);
    for (c, j) in ((k + 1)..r).enumerate() {
        l2.set_column(c, &fit.mu(j));
        r2.set_column(c, &fit.r(j));
    }
    let sl2 = s * &l2;
    let m_u = -(&sl2 * r2.transpose()) / z;
    let core = DMatrix::identity(trailing, trailing) - l2.tr_mul(&sl2) / z;
    let cond = linalg::condition_number(&core);
    if !(cond <= MAX_CORE_CONDITION) {
        return Err(Error::NearSingularCore { layer: k, cond });
    }
    let core_inv_l2t = linalg::solve(&core, &l2.transpose())
        .ok_or(Error::NearSingularCore { layer: k, cond })?;
    let bracket = DMatrix::identity(p, p) + &sl2 * core_inv_l2t / z;
    Ok((m_u, theta * bracket))
}

/// Partial gradients `(g_μ, g_r)` of `(2n)⁻¹‖Y − X Σ μ_i r_iᵀ‖²` with respect
/// to `μ_k` and `r_k`, at arbitrary (not necessarily normalized) `μ`, `r`.
///
/// `mus` is p×r and `rs` is q×r. `xty_n` is `XᵀY/n`.
pub fn left_gradients(
    k: usize,
    mus: &DMatrix<f64>,
    rs: &DMatrix<f64>,
    sigma: &GramMatrix,
    xty_n: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let s = sigma.matrix();
    let r = mus.ncols();
    let mu_k = mus.column(k).into_owned();
    let r_k = rs.column(k).into_owned();
    let s_mu_k = s * &mu_k;
    let z = mu_k.dot(&s_mu_k);
    let mut g_mu = &s_mu_k * r_k.dot(&r_k) - xty_n * &r_k;
    let mut g_r = &r_k * z - xty_n.tr_mul(&mu_k);
    for i in (0..r).filter(|&i| i != k) {
        let mu_i = mus.column(i);
        let r_i = rs.column(i);
        g_mu += (s * mu_i) * r_i.dot(&r_k);
        g_r += r_i * mu_i.dot(&s_mu_k);
    }
    (g_mu, g_r)
}

/// Debiased estimate `μ̂_k`.
pub fn debias_left(
    k: usize,
    data: &RegressionData,
    fit: &SvdFit,
    sigma: &GramMatrix,
    theta: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (m_u, w_u) = left_aux_matrices(k, fit, sigma, theta)?;
    Ok(debias_left_with(k, data, fit, sigma, &m_u, &w_u))
}

fn debias_left_with(
    k: usize,
    data: &RegressionData,
    fit: &SvdFit,
    sigma: &GramMatrix,
    m_u: &DMatrix<f64>,
    w_u: &DMatrix<f64>,
) -> DVector<f64> {
    let mus = fit.left() * DMatrix::from_diagonal(fit.d());
    let xty_n = data.x().tr_mul(data.y()) / data.n() as f64;
    let (g_mu, g_r) = left_gradients(k, &mus, fit.right(), sigma, &xty_n);
    fit.mu(k) - w_u * (g_mu - m_u * g_r)
}

/// The hard-threshold level `log n / √n`.
pub fn threshold_level(n: usize) -> f64 {
    let nf = n as f64;
    nf.ln() / nf.sqrt()
}

/// Keeps entries with `|x_j| ≥ log n / √n` and zeroes the rest.
pub fn hard_threshold(mu_hat: &DVector<f64>, n: usize) -> (DVector<f64>, Vec<usize>) {
    let level = threshold_level(n);
    let support: Vec<usize> = (0..mu_hat.len()).filter(|&j| mu_hat[j].abs() >= level).collect();
    let mut out = DVector::zeros(mu_hat.len());
    for &j in &support {
        out[j] = mu_hat[j];
    }
    (out, support)
}

/// `û_k^t = z_k^{-1/2} n^{-1/2} X μ̂_k^t`, with `z_k = μ̃_kᵀ Σ̂ μ̃_k` from the fit.
pub fn thresholded_factor(
    k: usize,
    data: &RegressionData,
    fit: &SvdFit,
    sigma: &GramMatrix,
    mu_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mu_k = fit.mu(k);
    let z = sigma.inner(&mu_k, &mu_k);
    if z <= DEGENERATE_SCALE {
        return Err(Error::DegenerateFactor { layer: k, value: z });
    }
    Ok(data.x() * mu_t / (z.sqrt() * (data.n() as f64).sqrt()))
}

/// Runs the full left step for layer `k`: auxiliary matrices, debiasing,
/// thresholding and the thresholded factor.
pub fn left_layer(
    k: usize,
    data: &RegressionData,
    fit: &SvdFit,
    sigma: &GramMatrix,
    theta: &DMatrix<f64>,
) -> Result<LeftDebiasResult> {
    let (m_u, w_u) = left_aux_matrices(k, fit, sigma, theta)?;
    let mu_hat = debias_left_with(k, data, fit, sigma, &m_u, &w_u);
    let (mu_thresholded, support) = hard_threshold(&mu_hat, data.n());
    let u_thresholded = thresholded_factor(k, data, fit, sigma, &mu_thresholded)?;
    Ok(LeftDebiasResult {
        k,
        mu_hat,
        support,
        mu_thresholded,
        u_thresholded,
        m_u,
        w_u,
    })
}
