//! Debiased estimation of the latent right factors `v_k`.
//!
//! Both procedures share the shape
//!
//! ```text
//! v̂_k = ṽ_k − W (g_v − M g_u)
//! ```
//!
//! where `g_v`, `g_u` are gradients of a least-squares loss in `(u_k, v_k)`
//! and `(M, W)` make the score insensitive to the nuisance `u_k`. `W` is the
//! exact inverse of `T = I − M ũ_k ṽ_kᵀ + M Σ_{i≠k} ũ_i ṽ_iᵀ`.
//!
//! * Strong mode assumes the latent left factors are mutually orthogonal and
//!   builds `M` from all other layers.
//! * Weak mode tolerates small correlations among the left factors; it plugs
//!   in the hard-thresholded left estimates `û_i^t` for the other layers and
//!   adds their contribution to the variance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leftdebias::{self, LeftDebiasResult};
use crate::linalg;
use crate::linmodel::{GramMatrix, RegressionData, ScaledFactors, SvdFit, DEGENERATE_SCALE};

/// Condition number above which `A` is rejected.
pub const MAX_A_CONDITION: f64 = 1e12;

/// Which orthogonality regime to assume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Strong,
    Weak,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Strong => "strong",
            Mode::Weak => "weak",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Mode::Strong),
            "weak" => Ok(Mode::Weak),
            other => Err(Error::InvalidInput(format!(
                "mode must be \"strong\" or \"weak\", got {other:?}"
            ))),
        }
    }
}

/// `(M, A, W)` of the strongly orthogonal procedure.
#[derive(Debug, Clone)]
pub struct StrongAux {
    pub k: usize,
    /// q×n.
    pub m: DMatrix<f64>,
    /// (r−1)×(r−1).
    pub a: DMatrix<f64>,
    /// q×q.
    pub w: DMatrix<f64>,
    pub cond_a: f64,
}

/// `(M, W)` of the weakly orthogonal procedure.
#[derive(Debug, Clone)]
pub struct WeakAux {
    pub k: usize,
    /// q×n.
    pub m: DMatrix<f64>,
    /// q×q.
    pub w: DMatrix<f64>,
}

/// Debiased right factor of one layer with componentwise variances.
#[derive(Debug, Clone)]
pub struct RightDebiasResult {
    pub k: usize,
    pub mode: Mode,
    pub v_hat: DVector<f64>,
    /// `ν̃²` for each direction `e_j`.
    pub variance: DVector<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Condition number of `A` (strong mode only; 1 otherwise).
    pub cond: f64,
    /// Support sizes of the thresholded left estimates (weak mode only).
    pub support_sizes: Vec<usize>,
    /// `Σ_{j≠k} |l̃_jᵀ Σ̂ l̃_k|`, the size of the cross-layer correlation.
    pub cross_correlation: f64,
}

fn other_columns(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..m.ncols()).filter(|&i| i != k).collect();
    m.select_columns(&keep)
}

/// `T_k = I − M ũ_k ṽ_kᵀ + M Σ_{i≠k} ũ_i ṽ_iᵀ`, the matrix that `W` inverts.
pub fn t_matrix(k: usize, factors: &ScaledFactors, m: &DMatrix<f64>) -> DMatrix<f64> {
    let q = factors.v.nrows();
    let mut t = DMatrix::identity(q, q);
    for i in 0..factors.rank() {
        let mu = m * factors.u.column(i);
        let sign = if i == k { -1.0 } else { 1.0 };
        t += sign * mu * factors.v.column(i).transpose();
    }
    t
}

/// Builds `(M, A, W)` for layer `k` (zero-based).
pub fn strong_aux(k: usize, factors: &ScaledFactors) -> Result<StrongAux> {
    let r = factors.rank();
    let (n, q) = (factors.u.nrows(), factors.v.nrows());
    let u_k = factors.u_col(k);
    let v_k = factors.v_col(k);
    let c = v_k.dot(&v_k);
    if c <= DEGENERATE_SCALE {
        return Err(Error::DegenerateFactor { layer: k, value: c });
    }
    if r == 1 {
        return Ok(StrongAux {
            k,
            m: DMatrix::zeros(q, n),
            a: DMatrix::zeros(0, 0),
            w: DMatrix::identity(q, q),
            cond_a: 1.0,
        });
    }
    let u_o = other_columns(&factors.u, k);
    let v_o = other_columns(&factors.v, k);
    let m = -(&v_o * u_o.transpose()) / c;
    let utu = u_o.tr_mul(&u_o);
    let a = DMatrix::identity(r - 1, r - 1) * c - v_o.tr_mul(&v_o) * &utu;
    let cond_a = linalg::condition_number(&a);
    if !(cond_a <= MAX_A_CONDITION) {
        return Err(Error::SingularA { layer: k, cond: cond_a });
    }
    // B = V₋ (U₋ᵀU₋) A⁻¹ V₋ᵀ
    let a_inv_vt = linalg::solve(&a, &v_o.transpose())
        .ok_or(Error::SingularA { layer: k, cond: cond_a })?;
    let b = &v_o * &utu * a_inv_vt;
    let eye = DMatrix::identity(q, q);
    let x = &v_o * u_o.tr_mul(&u_k);
    let w = &eye - (&eye + &b) * x * v_k.transpose() / c + b;
    Ok(StrongAux { k, m, a, w, cond_a })
}

/// Gradients `(g_v, g_u)` of the strong-mode loss at `(ũ_k, ṽ_k)`.
pub fn strong_gradients(
    k: usize,
    y: &DMatrix<f64>,
    factors: &ScaledFactors,
) -> (DVector<f64>, DVector<f64>) {
    let sqrt_n = (y.nrows() as f64).sqrt();
    let u_k = factors.u_col(k);
    let v_k = factors.v_col(k);
    let g_v = &v_k * u_k.dot(&u_k) - y.tr_mul(&u_k) / sqrt_n;
    let g_u = &u_k * v_k.dot(&v_k) - y * &v_k / sqrt_n;
    (g_v, g_u)
}

/// Strongly orthogonal debiased estimate `v̂_k`.
pub fn strong_debias(
    k: usize,
    data: &RegressionData,
    factors: &ScaledFactors,
    aux: &StrongAux,
) -> DVector<f64> {
    let (g_v, g_u) = strong_gradients(k, data.y(), factors);
    factors.v_col(k) - &aux.w * (g_v - &aux.m * g_u)
}

/// `ν̃² = aᵀ W (Σ̃_e + (ṽ_kᵀΣ̃_eṽ_k) M Mᵀ − 2 M ũ_k ṽ_kᵀ Σ̃_e) Wᵀ a` for a
/// general direction `a`.
pub fn strong_variance_dir(
    a: &DVector<f64>,
    k: usize,
    factors: &ScaledFactors,
    aux: &StrongAux,
    sigma_e: &DMatrix<f64>,
) -> f64 {
    let w = aux.w.tr_mul(a);
    let u_k = factors.u_col(k);
    let v_k = factors.v_col(k);
    let mt_w = aux.m.tr_mul(&w);
    let mu = &aux.m * &u_k;
    let s_v = sigma_e * &v_k;
    let base = linalg::bilinear(&w, sigma_e, &w);
    let mm = v_k.dot(&s_v) * mt_w.dot(&mt_w);
    let cross = 2.0 * w.dot(&mu) * s_v.dot(&w);
    base + mm - cross
}

/// Componentwise strong-mode variance for direction `e_j`.
pub fn strong_variance(
    k: usize,
    j: usize,
    factors: &ScaledFactors,
    aux: &StrongAux,
    sigma_e: &DMatrix<f64>,
) -> f64 {
    let mut a = DVector::zeros(factors.v.nrows());
    a[j] = 1.0;
    strong_variance_dir(&a, k, factors, aux, sigma_e)
}

/// Builds `(M, W)` of the weakly orthogonal procedure for layer `k`.
pub fn weak_aux(k: usize, factors: &ScaledFactors) -> Result<WeakAux> {
    let u_k = factors.u_col(k);
    let v_k = factors.v_col(k);
    let c = v_k.dot(&v_k);
    if c <= DEGENERATE_SCALE {
        return Err(Error::DegenerateFactor { layer: k, value: c });
    }
    let q = v_k.len();
    let m = -(&v_k * u_k.transpose()) / c;
    let mut inner = &v_k * v_k.transpose();
    if factors.rank() > 1 {
        let u_o = other_columns(&factors.u, k);
        let v_o = other_columns(&factors.v, k);
        // ṽ_k ũ_kᵀ Ũ₋ₖ Ṽ₋ₖᵀ
        let row = v_o * u_o.tr_mul(&u_k);
        inner -= &v_k * row.transpose();
    }
    let w = DMatrix::identity(q, q) - inner * (0.5 / c);
    Ok(WeakAux { k, m, w })
}

/// Gradients `(g_v, g_u)` of the weak-mode loss, where the other layers enter
/// through the thresholded factors `thresholded[i]` (`i ≠ k`).
pub fn weak_gradients(
    k: usize,
    y: &DMatrix<f64>,
    factors: &ScaledFactors,
    thresholded: &[DVector<f64>],
) -> (DVector<f64>, DVector<f64>) {
    let (mut g_v, mut g_u) = strong_gradients(k, y, factors);
    let u_k = factors.u_col(k);
    let v_k = factors.v_col(k);
    for i in (0..factors.rank()).filter(|&i| i != k) {
        let v_i = factors.v.column(i);
        g_v += v_i * u_k.dot(&thresholded[i]);
        g_u += &thresholded[i] * v_i.dot(&v_k);
    }
    (g_v, g_u)
}

/// Weakly orthogonal debiased estimate `v̂_k`.
///
/// `thresholded` holds `û_i^t` for every layer; entry `k` is ignored.
pub fn weak_debias(
    k: usize,
    data: &RegressionData,
    factors: &ScaledFactors,
    thresholded: &[DVector<f64>],
    aux: &WeakAux,
) -> DVector<f64> {
    let (g_v, g_u) = weak_gradients(k, data.y(), factors, thresholded);
    factors.v_col(k) - &aux.w * (g_v - &aux.m * g_u)
}

/// `ω_{k,i} = z_k^{-1/2} aᵀ W r̃_i`, with `r̃_i = ṽ_i / √z_i`.
pub fn omega(
    a: &DVector<f64>,
    k: usize,
    i: usize,
    factors: &ScaledFactors,
    aux: &WeakAux,
) -> f64 {
    let r_i = factors.v_col(i) / factors.z[i].sqrt();
    a.dot(&(&aux.w * r_i)) / factors.z[k].sqrt()
}

/// Direction-independent pieces of the weak-mode variance of layer `k`.
///
/// For another layer `i` with thresholded support `S_i`, let
/// `b_i = (Σ̂ μ̃_k)` restricted to `S_i`, `β_i = W_{u_i}ᵀ b_i` and
/// `m_i = M_{u_i}ᵀ β_i`. The variance for direction `a`, with `w = Wᵀa`,
/// combines
///
/// * `cov_vv`, the variance of the layer's own noise term,
/// * `cov_vu(i)`, its covariance with the left estimate of layer `i`,
/// * `cov_uu(i, j)`, the covariance between two left estimates,
///
/// weighted by `ω_{k,i}`.
#[derive(Debug, Clone)]
pub struct WeakVarianceTerms {
    k: usize,
    w: DMatrix<f64>,
    sigma_e: DMatrix<f64>,
    /// `Σ̃_e + d²(lᵀΣ̂l)(rᵀΣ̃_e r) M_v Σ̂ M_vᵀ − 2 M_v Σ̂ d l rᵀ Σ̃_e`.
    vv_core: DMatrix<f64>,
    others: Vec<OtherLayer>,
    /// `cov_uu(i, j)` over `others`.
    cov_uu: DMatrix<f64>,
    z_k: f64,
}

/// Pieces of `cov_vu(i)` for one other layer `i`. With `w = Wᵀa`,
/// `cov_vu(i) = wᵀt1 − (wᵀt2_vec)·t2_scalar − t3_scalar·(t3_vecᵀw) + (wᵀt4_vec)·t4_scalar`.
#[derive(Debug, Clone)]
struct OtherLayer {
    r_i: DVector<f64>,
    /// `d_i c₂ (l_iᵀΣ̂l_k) Σ̃_e m_i`.
    t1: DVector<f64>,
    /// `M_v Σ̂ d_i l_i`.
    t2_vec: DVector<f64>,
    /// `c₁ r_kᵀ Σ̃_e m_i`.
    t2_scalar: f64,
    /// `c₂ β_iᵀ Σ̂ l_k`.
    t3_scalar: f64,
    /// `Σ̃_e r_i`.
    t3_vec: DVector<f64>,
    /// `M_v Σ̂ β_i`.
    t4_vec: DVector<f64>,
    /// `c₁ r_kᵀ Σ̃_e r_i`.
    t4_scalar: f64,
}

impl WeakVarianceTerms {
    /// Precomputes the variance pieces for layer `k`.
    ///
    /// `left` must hold the left-step results of every layer; entry `k` is
    /// not used.
    pub fn new(
        k: usize,
        fit: &SvdFit,
        factors: &ScaledFactors,
        aux: &WeakAux,
        sigma: &GramMatrix,
        sigma_e: &DMatrix<f64>,
        left: &[LeftDebiasResult],
    ) -> Result<Self> {
        let s = sigma.matrix();
        let r = fit.rank();
        let d_k = fit.d()[k];
        let l_k = fit.l(k);
        let r_k = fit.r(k);
        let lsl = sigma.inner(&l_k, &l_k);
        if lsl <= DEGENERATE_SCALE {
            return Err(Error::DegenerateFactor { layer: k, value: lsl });
        }
        let c1 = d_k * lsl.sqrt();
        let c2 = 1.0 / lsl.sqrt();
        // M_v = −(d_k lᵀΣ̂l)⁻¹ r_k l_kᵀ
        let m_v = -(&r_k * l_k.transpose()) / (d_k * lsl);
        let m_v_s = &m_v * s;
        let se_r_k = sigma_e * &r_k;
        let vv_core = sigma_e + (&m_v_s * m_v.transpose()) * (d_k * d_k * lsl * r_k.dot(&se_r_k))
            - (&m_v_s * &l_k) * se_r_k.transpose() * (2.0 * d_k);

        let s_mu_k = s * fit.mu(k);
        let s_l_k = s * &l_k;
        let mut others = Vec::new();
        let mut betas = Vec::new();
        let mut ms = Vec::new();
        let mut layer_ids = Vec::new();
        for i in (0..r).filter(|&i| i != k) {
            let li = &left[i];
            let mut b = DVector::zeros(s_mu_k.len());
            for &j in &li.support {
                b[j] = s_mu_k[j];
            }
            let beta = li.w_u.tr_mul(&b);
            let m_i = li.m_u.tr_mul(&beta);
            let d_i = fit.d()[i];
            let l_i = fit.l(i);
            let r_i = fit.r(i);
            let se_r_i = sigma_e * &r_i;
            let t1 = (sigma_e * &m_i) * (d_i * c2 * l_i.dot(&s_l_k));
            let t2_vec = &m_v_s * &l_i * d_i;
            let t2_scalar = c1 * se_r_k.dot(&m_i);
            let t3_scalar = c2 * beta.dot(&s_l_k);
            let t4_vec = &m_v_s * &beta;
            let t4_scalar = c1 * se_r_k.dot(&r_i);
            others.push(OtherLayer {
                r_i,
                t1,
                t2_vec,
                t2_scalar,
                t3_scalar,
                t3_vec: se_r_i,
                t4_vec,
                t4_scalar,
            });
            betas.push(beta);
            ms.push(m_i);
            layer_ids.push(i);
        }
        let m = others.len();
        let mut cov_uu = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                let (i, j) = (layer_ids[a], layer_ids[b]);
                let (l_i, l_j) = (fit.l(i), fit.l(j));
                let (d_i, d_j) = (fit.d()[i], fit.d()[j]);
                let t1 = d_i * d_j * sigma.inner(&l_i, &l_j) * linalg::bilinear(&ms[a], sigma_e, &ms[b]);
                let t2 = sigma.inner(&betas[a], &l_j) * d_j * linalg::bilinear(&others[a].r_i, sigma_e, &ms[b]);
                let t3 = sigma.inner(&betas[b], &l_i) * d_i * linalg::bilinear(&others[b].r_i, sigma_e, &ms[a]);
                let t4 = sigma.inner(&betas[a], &betas[b]) * linalg::bilinear(&others[a].r_i, sigma_e, &others[b].r_i);
                cov_uu[(a, b)] = t1 - t2 - t3 + t4;
            }
        }
        Ok(WeakVarianceTerms {
            k,
            w: aux.w.clone(),
            sigma_e: sigma_e.clone(),
            vv_core,
            others,
            cov_uu,
            z_k: factors.z[k],
        })
    }

    pub fn layer(&self) -> usize {
        self.k
    }

    /// `(cov_vv, ω, cov_vu, cov_uu)` for direction `a`.
    pub fn components(&self, a: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let w = self.w.tr_mul(a);
        let cov_vv = linalg::bilinear(&w, &self.vv_core, &w);
        let m = self.others.len();
        let mut omega = DVector::zeros(m);
        let mut cov_vu = DVector::zeros(m);
        for (idx, o) in self.others.iter().enumerate() {
            omega[idx] = w.dot(&o.r_i) / self.z_k.sqrt();
            cov_vu[idx] = w.dot(&o.t1) - w.dot(&o.t2_vec) * o.t2_scalar
                - o.t3_scalar * o.t3_vec.dot(&w)
                + w.dot(&o.t4_vec) * o.t4_scalar;
        }
        (cov_vv, omega, cov_vu, self.cov_uu.clone())
    }

    /// `ν̃²` for direction `a`.
    pub fn variance_dir(&self, a: &DVector<f64>) -> f64 {
        let (vv, omega, vu, uu) = self.components(a);
        vv + CROSS_SIGN * 2.0 * omega.dot(&vu) + linalg::bilinear(&omega, &uu, &omega)
    }

    /// `ν̃²` for direction `e_j`.
    pub fn variance(&self, j: usize) -> f64 {
        let mut a = DVector::zeros(self.w.nrows());
        a[j] = 1.0;
        self.variance_dir(&a)
    }

    /// The noise covariance these terms were built with.
    pub fn sigma_e(&self) -> &DMatrix<f64> {
        &self.sigma_e
    }
}

/// Sign of the `ω·cov_vu` cross term in the weak-mode variance.
///
/// The debiased estimate expands as `−(h_v + Σ ω_i h_{u_i})` in terms of the
/// noise forms `h_v = aᵀW(M_v XᵀE c₁ r_k − EᵀX c₂ l_k)/√n` and
/// `h_{u_i} = b_iᵀW_{u_i}(XᵀE r_i − M_{u_i} EᵀX μ_i)/√n`, so the cross
/// covariance enters with a plus sign.
pub const CROSS_SIGN: f64 = 1.0;

/// Componentwise weak-mode variance for direction `e_j`.
#[allow(clippy::too_many_arguments)]
pub fn weak_variance(
    k: usize,
    j: usize,
    fit: &SvdFit,
    factors: &ScaledFactors,
    aux: &WeakAux,
    sigma: &GramMatrix,
    sigma_e: &DMatrix<f64>,
    left: &[LeftDebiasResult],
) -> Result<f64> {
    Ok(WeakVarianceTerms::new(k, fit, factors, aux, sigma, sigma_e, left)?.variance(j))
}

fn cross_correlation(k: usize, fit: &SvdFit, sigma: &GramMatrix) -> f64 {
    let l_k = fit.l(k);
    (0..fit.rank())
        .filter(|&j| j != k)
        .map(|j| sigma.inner(&fit.l(j), &l_k).abs())
        .sum()
}

/// Runs the strongly orthogonal procedure on every layer of `fit`.
pub fn infer_strong(
    data: &RegressionData,
    fit: &SvdFit,
    factors: &ScaledFactors,
    sigma: &GramMatrix,
    sigma_e: &DMatrix<f64>,
) -> Result<Vec<RightDebiasResult>> {
    let q = data.q();
    (0..fit.rank())
        .map(|k| {
            let aux = strong_aux(k, factors)?;
            let v_hat = strong_debias(k, data, factors, &aux);
            let variance =
                DVector::from_iterator(q, (0..q).map(|j| strong_variance(k, j, factors, &aux, sigma_e)));
            Ok(RightDebiasResult {
                k,
                mode: Mode::Strong,
                v_hat,
                variance,
                diagnostics: Diagnostics {
                    cond: aux.cond_a,
                    support_sizes: Vec::new(),
                    cross_correlation: cross_correlation(k, fit, sigma),
                },
            })
        })
        .collect()
}

/// Left-step results for every layer of `fit`.
pub fn left_layers(
    data: &RegressionData,
    fit: &SvdFit,
    sigma: &GramMatrix,
    theta: &DMatrix<f64>,
) -> Result<Vec<LeftDebiasResult>> {
    (0..fit.rank())
        .map(|i| leftdebias::left_layer(i, data, fit, sigma, theta))
        .collect()
}

/// Runs the weakly orthogonal procedure on every layer of `fit`.
pub fn infer_weak(
    data: &RegressionData,
    fit: &SvdFit,
    factors: &ScaledFactors,
    sigma: &GramMatrix,
    theta: &DMatrix<f64>,
    sigma_e: &DMatrix<f64>,
) -> Result<Vec<RightDebiasResult>> {
    let left = left_layers(data, fit, sigma, theta)?;
    let thresholded: Vec<DVector<f64>> = left.iter().map(|l| l.u_thresholded.clone()).collect();
    let q = data.q();
    (0..fit.rank())
        .map(|k| {
            let aux = weak_aux(k, factors)?;
            let v_hat = weak_debias(k, data, factors, &thresholded, &aux);
            let terms = WeakVarianceTerms::new(k, fit, factors, &aux, sigma, sigma_e, &left)?;
            let variance = DVector::from_iterator(q, (0..q).map(|j| terms.variance(j)));
            Ok(RightDebiasResult {
                k,
                mode: Mode::Weak,
                v_hat,
                variance,
                diagnostics: Diagnostics {
                    cond: 1.0,
                    support_sizes: left
                        .iter()
                        .filter(|l| l.k != k)
                        .map(|l| l.support.len())
                        .collect(),
                    cross_correlation: cross_correlation(k, fit, sigma),
                },
            })
        })
        .collect()
}
