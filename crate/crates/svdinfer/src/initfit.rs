//! Initial estimators: a sparse SVD fit of the coefficient matrix, a rank
//! estimate, a nodewise-lasso precision surrogate, and a thresholded noise
//! covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::linmodel::{GramMatrix, RegressionData, SvdFit, TIE_TOLERANCE};

/// A penalty level that is either fixed or chosen from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LambdaRepr", into = "LambdaRepr")]
pub enum Lambda {
    Auto,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<LambdaRepr> for Lambda {
    type Error = String;

    fn try_from(raw: LambdaRepr) -> std::result::Result<Self, String> {
        match raw {
            LambdaRepr::Number(x) if x >= 0.0 && x.is_finite() => Ok(Lambda::Value(x)),
            LambdaRepr::Number(x) => Err(format!("penalty must be nonnegative, got {x}")),
            LambdaRepr::Text(s) if s == "auto" => Ok(Lambda::Auto),
            LambdaRepr::Text(s) => Err(format!("expected a number or \"auto\", got {s:?}")),
        }
    }
}

impl From<Lambda> for LambdaRepr {
    fn from(l: Lambda) -> Self {
        match l {
            Lambda::Auto => LambdaRepr::Text("auto".into()),
            Lambda::Value(x) => LambdaRepr::Number(x),
        }
    }
}

/// Tuning parameters for the initial estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Entrywise L1 penalty of the sparse SVD fit.
    pub lambda_sofar: Lambda,
    /// L1 penalty of the nodewise regressions.
    pub lambda_node: Lambda,
    /// Iteration cap shared by the alternating and coordinate-descent solvers.
    pub max_iter: usize,
    /// Relative convergence tolerance.
    pub tol: f64,
    /// Adaptive-thresholding constant for the noise covariance.
    pub tau_cov: f64,
    /// Multiplier of the noise edge in the rank selector.
    pub rank_c: f64,
    /// Refit each extracted layer without penalty on its selected supports.
    pub relax: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda_sofar: Lambda::Auto,
            lambda_node: Lambda::Auto,
            max_iter: 1000,
            tol: 1e-8,
            tau_cov: 2.0,
            rank_c: 2.0,
            relax: true,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.tau_cov >= 0.0) {
            return Err(Error::InvalidInput("tau_cov must be nonnegative".into()));
        }
        if !(self.rank_c > 0.0) {
            return Err(Error::InvalidInput("rank_c must be positive".into()));
        }
        Ok(())
    }
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Outcome of a coordinate-descent lasso solve.
#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub beta: DVector<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Minimizes `½ βᵀ G β − cᵀ β + λ ‖β‖₁` by cyclic coordinate descent.
///
/// With `G = XᵀX/n` and `c = Xᵀy/n` this is the lasso
/// `(2n)⁻¹‖y − Xβ‖² + λ‖β‖₁`. Coordinates with `G_jj = 0` stay at zero.
/// Stops when no coordinate moves by more than `tol` relative to the
/// current scale of the fit.
pub fn lasso_gram(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    start: Option<&DVector<f64>>,
    max_sweeps: usize,
    tol: f64,
) -> LassoSolution {
    let dim = c.len();
    let mut beta = start.cloned().unwrap_or_else(|| DVector::zeros(dim));
    // grad = G β, maintained incrementally.
    let mut gb = g * &beta;
    let mut sweeps = 0;
    let mut converged = dim == 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        let mut max_step = 0.0_f64;
        let mut max_coef = 0.0_f64;
        for j in 0..dim {
            let gjj = g[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = beta[j];
            let partial = c[j] - (gb[j] - gjj * old);
            let new = soft(partial, lambda) / gjj;
            if new != old {
                let delta = new - old;
                beta[j] = new;
                gb.axpy(delta, &g.column(j), 1.0);
                max_step = max_step.max(delta.abs() * gjj.sqrt());
            }
            max_coef = max_coef.max(new.abs() * gjj.sqrt());
        }
        converged = max_step <= tol * max_coef.max(f64::MIN_POSITIVE);
    }
    LassoSolution {
        beta,
        sweeps,
        converged,
    }
}

/// Residual noise scale `σ̂`, from least squares when `n > p` and from the raw
/// responses otherwise.
pub fn noise_scale(data: &RegressionData, sigma: &GramMatrix) -> f64 {
    let (n, p, q) = (data.n(), data.p(), data.q());
    if n > p {
        let xty = data.x().tr_mul(data.y()) / n as f64;
        if let Some(chol) = sigma.matrix().clone().cholesky() {
            let beta = chol.solve(&xty);
            let resid = data.y() - data.x() * beta;
            return (resid.norm_squared() / ((n - p) * q) as f64).sqrt();
        }
    }
    (data.y().norm_squared() / (n * q) as f64).sqrt()
}

/// Diagnostics returned with a sparse SVD fit.
#[derive(Debug, Clone)]
pub struct SofarOutput {
    pub fit: SvdFit,
    /// Penalty level actually used.
    pub lambda: f64,
    /// Alternating iterations per extracted layer.
    pub iterations: Vec<usize>,
    /// False if some layer hit `max_iter`; the last iterate is still returned.
    pub converged: bool,
}

/// Sparse rank-r SVD fit of `C` under an entrywise L1 penalty.
///
/// Layers are extracted one at a time from the deflated residual by
/// alternating soft-thresholded updates of the left and right vectors. With
/// `cfg.relax`, each layer is then refit without penalty on the supports it
/// selected, removing the shrinkage bias from the fit and its residuals. The
/// stacked estimate is then re-decomposed by an exact SVD, so the returned
/// right vectors are exactly orthonormal and the left vectors exactly unit.
pub fn sofar_fit(
    data: &RegressionData,
    sigma: &GramMatrix,
    r: usize,
    cfg: &PenaltyConfig,
) -> Result<SofarOutput> {
    cfg.validate()?;
    let (n, p, q) = (data.n(), data.p(), data.q());
    if r == 0 || r > p.min(q) {
        return Err(Error::InvalidInput(format!(
            "rank {r} outside [1, {}]",
            p.min(q)
        )));
    }
    let lambda = match cfg.lambda_sofar {
        Lambda::Value(v) => v,
        Lambda::Auto => {
            noise_scale(data, sigma) * (2.0 * ((p * q) as f64).ln() / n as f64).sqrt()
        }
    };
    let sxy = data.x().tr_mul(data.y()) / n as f64;
    let scale = sxy.norm();
    let mut c_hat = DMatrix::<f64>::zeros(p, q);
    let mut iterations = Vec::with_capacity(r);
    let mut converged = true;
    for k in 0..r {
        // XᵀR/n for the current residual R = Y − X Ĉ.
        let sres = &sxy - sigma.matrix() * &c_hat;
        let mut layer = unit_rank(&sres, sigma.matrix(), lambda, scale, cfg, None)
            .ok_or(Error::RankDeficient { found: k, requested: r })?;
        if cfg.relax && lambda > 0.0 {
            let masks = (support(&layer.b), support(&layer.r));
            let start = (layer.b.clone(), layer.r.clone());
            let refit = unit_rank(&sres, sigma.matrix(), 0.0, scale, cfg, Some((&masks, &start)))
                .ok_or(Error::RankDeficient { found: k, requested: r })?;
            layer.iterations += refit.iterations;
            layer.converged &= refit.converged;
            layer.b = refit.b;
            layer.r = refit.r;
        }
        iterations.push(layer.iterations);
        converged &= layer.converged;
        c_hat += &layer.b * layer.r.transpose();
    }
    let fit = resvd(&c_hat, r)?;
    Ok(SofarOutput {
        fit,
        lambda,
        iterations,
        converged,
    })
}

fn support(v: &DVector<f64>) -> Vec<usize> {
    (0..v.len()).filter(|&j| v[j] != 0.0).collect()
}

type Masks = (Vec<usize>, Vec<usize>);
/// Starting values `(b0, r0)` for a restricted refit.
type Start = (DVector<f64>, DVector<f64>);

struct UnitLayer {
    b: DVector<f64>,
    r: DVector<f64>,
    iterations: usize,
    converged: bool,
}

/// Alternating soft-thresholded rank-one fit to the residual cross-product
/// `sres = XᵀR/n`.
///
/// With `restrict = Some(((rows, cols), (b0, r0)))` the layer is confined to
/// the given supports and started from `(b0, r0)`; this is used for the
/// unpenalized refit.
fn unit_rank(
    sres: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    lambda: f64,
    scale: f64,
    cfg: &PenaltyConfig,
    restrict: Option<(&Masks, &Start)>,
) -> Option<UnitLayer> {
    if sres.norm() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
        return None;
    }
    let (rows, cols): (Vec<usize>, Vec<usize>) = match restrict {
        Some((masks, _)) => masks.clone(),
        None => ((0..sres.nrows()).collect(), (0..sres.ncols()).collect()),
    };
    let sub = sres.select_rows(&rows).select_columns(&cols);
    let sub_sigma = sigma.select_rows(&rows).select_columns(&rows);
    let (mut b, mut r) = match restrict {
        Some((_, (b0, r0))) => (
            DVector::from_iterator(rows.len(), rows.iter().map(|&i| b0[i])),
            DVector::from_iterator(cols.len(), cols.iter().map(|&j| r0[j])),
        ),
        None => {
            let svd = linalg::svd(&sub)?;
            (DVector::zeros(rows.len()), svd.v.column(0).into_owned())
        }
    };
    let mut prev = DMatrix::zeros(rows.len(), cols.len());
    let mut iterations = cfg.max_iter;
    let mut converged = false;
    for it in 1..=cfg.max_iter {
        let c = &sub * &r;
        let sol = lasso_gram(&sub_sigma, &c, lambda * r.lp_norm(1), Some(&b), cfg.max_iter, cfg.tol * 1e-2);
        b = sol.beta;
        let s = linalg::bilinear(&b, &sub_sigma, &b);
        if s <= 0.0 {
            return None;
        }
        let g = sub.tr_mul(&b);
        let t = lambda * b.lp_norm(1);
        r = g.map(|x| soft(x, t) / s);
        let rn = r.norm();
        if rn == 0.0 {
            return None;
        }
        r /= rn;
        b *= rn;
        let cur = &b * r.transpose();
        let change = (&cur - &prev).norm() / cur.norm();
        prev = cur;
        if change < cfg.tol {
            iterations = it;
            converged = true;
            break;
        }
    }
    let mut b_full = DVector::zeros(sres.nrows());
    for (idx, &i) in rows.iter().enumerate() {
        b_full[i] = b[idx];
    }
    let mut r_full = DVector::zeros(sres.ncols());
    for (idx, &j) in cols.iter().enumerate() {
        r_full[j] = r[idx];
    }
    Some(UnitLayer {
        b: b_full,
        r: r_full,
        iterations,
        converged,
    })
}

/// Exact rank-r SVD of `c`, oriented so the largest-magnitude entry of each
/// right vector is positive.
fn resvd(c: &DMatrix<f64>, r: usize) -> Result<SvdFit> {
    let svd = linalg::svd(c).ok_or_else(|| Error::InvalidInput("SVD of the fitted coefficient failed".into()))?;
    let d1 = svd.s[0];
    let mut d = DVector::zeros(r);
    let mut left = DMatrix::zeros(c.nrows(), r);
    let mut right = DMatrix::zeros(c.ncols(), r);
    for slot in 0..r {
        let dv = svd.s[slot];
        if dv <= 1e-12 * d1 {
            return Err(Error::RankDeficient { found: slot, requested: r });
        }
        let mut l = svd.u.column(slot).into_owned();
        let mut rv = svd.v.column(slot).into_owned();
        let pivot = rv.iamax();
        if rv[pivot] < 0.0 {
            l.neg_mut();
            rv.neg_mut();
        }
        d[slot] = dv;
        left.set_column(slot, &l);
        right.set_column(slot, &rv);
    }
    for i in 1..r {
        if d[i - 1] - d[i] < TIE_TOLERANCE * d[0] {
            return Err(Error::InvalidInput(format!(
                "fitted singular values {} and {} are tied",
                d[i - 1],
                d[i]
            )));
        }
    }
    SvdFit::new(d, left, right)
}

/// Ridge pilot `Ĉ₀ = (XᵀX + λI)⁻¹XᵀY` with `λ = √(log p / n)·tr(Σ̂)/p`.
pub fn ridge_pilot(data: &RegressionData, sigma: &GramMatrix) -> DMatrix<f64> {
    let (n, p) = (data.n() as f64, data.p());
    let lambda = ((p as f64).ln() / n).sqrt() * sigma.matrix().trace() / p as f64;
    let a = data.x().tr_mul(data.x()) + DMatrix::identity(p, p) * lambda;
    let rhs = data.x().tr_mul(data.y());
    match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => linalg::solve(&a, &rhs).unwrap_or_else(|| DMatrix::zeros(p, data.q())),
    }
}

/// Number of layers whose fitted singular value clears the noise edge.
///
/// The singular values `σ_i` of the fitted pilot `n^{-1/2} X Ĉ₀` are compared
/// with `τ = c·σ̂·(√p + √q)/√n`, where `σ̂` is [`noise_scale`]. The result is
/// clipped to `[1, r_max]`.
pub fn select_rank(data: &RegressionData, sigma: &GramMatrix, r_max: usize, c: f64) -> usize {
    let (n, p, q) = (data.n() as f64, data.p() as f64, data.q() as f64);
    let pilot = ridge_pilot(data, sigma);
    let fitted = data.x() * pilot / n.sqrt();
    let sv = linalg::singular_values(&fitted).unwrap_or_else(|| fitted.singular_values());
    let top = sv.max();
    let edge = c * noise_scale(data, sigma) * (p.sqrt() + q.sqrt()) / n.sqrt();
    let tau = edge.max(1e-8 * top);
    let count = sv.iter().filter(|&&s| s > tau).count();
    count.clamp(1, r_max.max(1))
}

/// Nodewise-lasso approximate inverse of `Σ̂`.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub theta: DMatrix<f64>,
    pub lambda: f64,
    /// Largest number of nonzeros in a row of `Θ̂`.
    pub max_row_support: usize,
    /// `‖I − Θ̂ Σ̂‖_max`.
    pub inverse_error: f64,
}

/// Regresses each column of `X` on the others with an L1 penalty and
/// assembles the rows `θ̂_j`.
pub fn nodewise_precision(
    data: &RegressionData,
    sigma: &GramMatrix,
    cfg: &PenaltyConfig,
) -> Result<PrecisionEstimate> {
    cfg.validate()?;
    let p = data.p();
    let g = sigma.matrix();
    let lambda = match cfg.lambda_node {
        Lambda::Value(v) => v,
        Lambda::Auto => (2.0 * (p as f64).ln() / data.n() as f64).sqrt(),
    };
    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let g_oo = g.select_rows(&others).select_columns(&others);
        let g_oj = DVector::from_iterator(others.len(), others.iter().map(|&k| g[(k, j)]));
        let gamma = lasso_gram(&g_oo, &g_oj, lambda, None, cfg.max_iter, cfg.tol).beta;
        let resid = g[(j, j)] - 2.0 * gamma.dot(&g_oj) + linalg::bilinear(&gamma, &g_oo, &gamma);
        let tau2 = resid + lambda * gamma.lp_norm(1);
        if !(tau2 >= 1e-12) {
            return Err(Error::SingularColumn { column: j, value: tau2 });
        }
        theta[(j, j)] = 1.0 / tau2;
        for (idx, &k) in others.iter().enumerate() {
            theta[(j, k)] = -gamma[idx] / tau2;
        }
    }
    let max_row_support = (0..p)
        .map(|j| theta.row(j).iter().filter(|x| **x != 0.0).count())
        .max()
        .unwrap_or(0);
    let inverse_error = linalg::max_abs(&(DMatrix::identity(p, p) - &theta * g));
    Ok(PrecisionEstimate {
        theta,
        lambda,
        max_row_support,
        inverse_error,
    })
}

/// Thresholded, PSD-projected estimate of the noise covariance.
#[derive(Debug, Clone)]
pub struct NoiseCovEstimate {
    pub sigma_e: DMatrix<f64>,
    pub tau: f64,
}

/// Adaptive thresholding of the residual covariance followed by projection
/// onto the PSD cone.
///
/// An off-diagonal entry `S_ab` survives when
/// `|S_ab| ≥ τ·√(θ̂_ab·log q / n)`, with `θ̂_ab` the empirical variance of the
/// products `Ê_ta Ê_tb`. The diagonal is always kept.
pub fn residual_noise_cov(data: &RegressionData, fit: &SvdFit, tau: f64) -> NoiseCovEstimate {
    let resid = data.y() - data.x() * fit.coefficient();
    noise_cov_from_residuals(&resid, tau)
}

/// [`residual_noise_cov`] on an explicit residual matrix.
pub fn noise_cov_from_residuals(resid: &DMatrix<f64>, tau: f64) -> NoiseCovEstimate {
    let (n, q) = (resid.nrows(), resid.ncols());
    let nf = n as f64;
    let s = resid.tr_mul(resid) / nf;
    let logq = (q as f64).ln();
    let mut out = s.clone();
    for a in 0..q {
        for b in (a + 1)..q {
            let sab = s[(a, b)];
            let theta = (0..n)
                .map(|t| {
                    let dev = resid[(t, a)] * resid[(t, b)] - sab;
                    dev * dev
                })
                .sum::<f64>()
                / nf;
            let keep = sab.abs() >= tau * (theta * logq / nf).sqrt();
            let val = if keep { sab } else { 0.0 };
            out[(a, b)] = val;
            out[(b, a)] = val;
        }
    }
    NoiseCovEstimate {
        sigma_e: linalg::psd_project(&out),
        tau,
    }
}
