#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use svdinfer::linalg;
use svdinfer::simlab::{self, SimConfig, TrueModel};
use svdinfer::{GramMatrix, RegressionData, ScaledFactors, SvdFit};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vec(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::<f64>::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Rows iid `N(0, AR(rho))`.
pub fn ar_rows(rows: usize, cols: usize, rho: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let chol = linalg::ar1(cols, rho).cholesky().expect("AR(1) is positive definite");
    gaussian(rows, cols, rng) * chol.l().transpose()
}

/// Columns orthonormal, via QR of a Gaussian matrix.
pub fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(rows, cols, rng).qr().q().columns(0, cols).into_owned()
}

/// Unit-norm dense left vectors, orthonormal right vectors and well separated
/// singular values.
pub fn random_fit(p: usize, q: usize, r: usize, rng: &mut ChaCha8Rng) -> SvdFit {
    let mut left = gaussian(p, r, rng);
    for mut c in left.column_iter_mut() {
        let norm = c.norm();
        c /= norm;
    }
    let right = orthonormal(q, r, rng);
    let d = DVector::from_fn(r, |i, _| 4.0 * (r - i) as f64 + 1.0);
    SvdFit::new(d, left, right).expect("valid random fit")
}

/// Unit-norm u columns with random overlaps and orthogonal v columns with
/// separated norms, as produced by a fit on a correlated design.
pub fn random_factors(n: usize, q: usize, r: usize, g: &mut ChaCha8Rng) -> ScaledFactors {
    let mut u = gaussian(n, r, g);
    for mut c in u.column_iter_mut() {
        let norm = c.norm();
        c /= norm;
    }
    let mut v = orthonormal(q, r, g);
    for (i, mut c) in v.column_iter_mut().enumerate() {
        c *= 3.0 * (r - i) as f64;
    }
    let z = DVector::from_iterator(r, v.column_iter().map(|c| c.norm_squared()));
    ScaledFactors { u, v, z, lsl: DVector::from_element(r, 1.0) }
}

pub fn orthogonal_factors(n: usize, q: usize, r: usize, g: &mut ChaCha8Rng) -> ScaledFactors {
    let u = orthonormal(n, r, g);
    let d = DMatrix::from_fn(r, r, |i, j| if i == j { 2.0 * (r - i) as f64 + 1.0 } else { 0.0 });
    let v = orthonormal(q, r, g) * d;
    let z = DVector::from_iterator(r, v.column_iter().map(|c| c.norm_squared()));
    ScaledFactors { u, v, z, lsl: DVector::from_element(r, 1.0) }
}

pub fn data(x: DMatrix<f64>, y: DMatrix<f64>) -> RegressionData {
    RegressionData::new(x, y).expect("valid data")
}

/// `‖A − B‖_max`.
pub fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    linalg::max_abs(&(a - b))
}

pub fn vec_max_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// Replication `index` of a reference setting.
pub struct SettingDraw {
    pub cfg: SimConfig,
    pub truth: TrueModel,
    pub data: RegressionData,
    pub noise: DMatrix<f64>,
    pub sigma: GramMatrix,
}

pub fn setting_draw(setting: u32, index: u64) -> SettingDraw {
    let cfg = SimConfig::setting(setting).unwrap();
    let (truth, fixed) = simlab::setup(&cfg).unwrap();
    let sim = simlab::gen_data(&cfg, &truth, fixed.as_ref(), index).unwrap();
    let data = data(sim.x, sim.y);
    let sigma = svdinfer::linmodel::gram(&data);
    SettingDraw {
        cfg,
        truth,
        data,
        noise: sim.e,
        sigma,
    }
}

/// Small two-layer truth with overlapping left and right supports, so that
/// every cross-layer covariance term is active.
pub struct OracleModel {
    pub x: DMatrix<f64>,
    pub fit: SvdFit,
    pub sigma: GramMatrix,
    pub sigma_e: DMatrix<f64>,
    pub clean: RegressionData,
}

pub fn oracle_model(noise_scale: f64) -> OracleModel {
    let (n, p, q) = (40, 6, 5);
    let mut g = rng(7);
    let x = ar_rows(n, p, 0.8, &mut g);
    let s2 = 0.5f64.sqrt();
    let left = DMatrix::from_column_slice(
        p,
        2,
        &[s2, s2, 0.0, 0.0, 0.0, 0.0, 0.5, -0.5, 0.5, 0.5, 0.0, 0.0],
    );
    let right = DMatrix::from_column_slice(
        q,
        2,
        &[0.6, 0.8 * s2, 0.8 * s2, 0.0, 0.0, 0.8, -0.6 * s2, -0.6 * s2, 0.0, 0.0],
    );
    let fit = SvdFit::new(DVector::from_vec(vec![6.0, 3.0]), left, right).unwrap();
    let clean = data(x.clone(), &x * fit.coefficient());
    let sigma = svdinfer::linmodel::gram(&clean);
    let sigma_e = linalg::ar1(q, 0.3) * (noise_scale * noise_scale);
    OracleModel {
        x,
        fit,
        sigma,
        sigma_e,
        clean,
    }
}

/// Plug-in variance at truth against the Monte Carlo variance of the explicit
/// distribution term, for one `(layer, component)`.
#[derive(Debug, Clone)]
pub struct OracleRow {
    pub weak: bool,
    pub k: usize,
    pub j: usize,
    pub monte_carlo: f64,
    pub formula: f64,
}

impl OracleRow {
    pub fn rel_err(&self) -> f64 {
        (self.formula / self.monte_carlo - 1.0).abs()
    }
}

/// Explicit distribution terms of both procedures for one noise draw `e`, as
/// q-vectors over the directions `e_j`.
pub struct DistributionTerms {
    pub strong: Vec<DVector<f64>>,
    pub weak: Vec<DVector<f64>>,
}

pub struct OracleParts {
    pub factors: svdinfer::ScaledFactors,
    pub strong: Vec<svdinfer::rightdebias::StrongAux>,
    pub weak: Vec<svdinfer::rightdebias::WeakAux>,
    pub left: Vec<svdinfer::leftdebias::LeftDebiasResult>,
    pub theta: DMatrix<f64>,
}

pub fn oracle_parts(m: &OracleModel) -> OracleParts {
    use svdinfer::rightdebias;
    let theta = m.sigma.matrix().clone().try_inverse().unwrap();
    let factors = svdinfer::linmodel::scaled_factors(&m.clean, &m.sigma, &m.fit).unwrap();
    let r = m.fit.rank();
    OracleParts {
        strong: (0..r).map(|k| rightdebias::strong_aux(k, &factors).unwrap()).collect(),
        weak: (0..r).map(|k| rightdebias::weak_aux(k, &factors).unwrap()).collect(),
        left: rightdebias::left_layers(&m.clean, &m.fit, &m.sigma, &theta).unwrap(),
        factors,
        theta,
    }
}

/// Strong: `W(Eᵀu_k − M E v_k)`. Weak: `h_v + Σ_i ω_{k,i} h_{u_i}` with
/// `h_v = W(M_v XᵀE c₁ r_k − EᵀX c₂ l_k)/√n`,
/// `h_{u_i} = b_iᵀ W_{u_i}(XᵀE r_i − M_{u_i} EᵀX μ_i)/√n`,
/// `ω_{k,i} = W r_i / √z_k` and `b_i = Σ̂μ_k` restricted to `S_i`.
pub fn distribution_terms(m: &OracleModel, parts: &OracleParts, e: &DMatrix<f64>) -> DistributionTerms {
    let n = m.x.nrows() as f64;
    let s = m.sigma.matrix();
    let r = m.fit.rank();
    let xte = m.x.tr_mul(e);
    let mut strong = Vec::with_capacity(r);
    let mut weak = Vec::with_capacity(r);
    for k in 0..r {
        let u_k = parts.factors.u_col(k);
        let v_k = parts.factors.v_col(k);
        let sa = &parts.strong[k];
        strong.push(&sa.w * (e.tr_mul(&u_k) - &sa.m * (e * &v_k)));

        let w = &parts.weak[k].w;
        let (d_k, l_k, r_k) = (m.fit.d()[k], m.fit.l(k), m.fit.r(k));
        let lsl = m.sigma.inner(&l_k, &l_k);
        let (c1, c2) = (d_k * lsl.sqrt(), 1.0 / lsl.sqrt());
        let m_v = -(&r_k * l_k.transpose()) / (d_k * lsl);
        let inner = &m_v * (&xte * &r_k) * c1 - xte.tr_mul(&l_k) * c2;
        let mut h = w * inner / n.sqrt();
        let s_mu_k = s * m.fit.mu(k);
        for i in (0..r).filter(|&i| i != k) {
            let li = &parts.left[i];
            let mut b = DVector::zeros(s_mu_k.len());
            for &j in &li.support {
                b[j] = s_mu_k[j];
            }
            let core = &xte * m.fit.r(i) - &li.m_u * xte.tr_mul(&m.fit.mu(i));
            let h_u = b.dot(&(&li.w_u * core)) / n.sqrt();
            let omega = w * m.fit.r(i) / parts.factors.z[k].sqrt();
            h += omega * h_u;
        }
        weak.push(h);
    }
    DistributionTerms { strong, weak }
}

/// Runs `draws` Gaussian noise draws and compares variances for both modes.
pub fn variance_oracle(draws: usize) -> Vec<OracleRow> {
    use svdinfer::rightdebias::{strong_variance, WeakVarianceTerms};
    let m = oracle_model(1.0);
    let parts = oracle_parts(&m);
    let (n, q, r) = (m.x.nrows(), m.sigma_e.nrows(), m.fit.rank());
    let chol = m.sigma_e.clone().cholesky().unwrap();
    let mut g = rng(11);
    // Sums of h and h² per (mode, k, j).
    let mut s1 = vec![vec![DVector::<f64>::zeros(q); r]; 2];
    let mut s2 = vec![vec![DVector::<f64>::zeros(q); r]; 2];
    for _ in 0..draws {
        let e = gaussian(n, q, &mut g) * chol.l().transpose();
        let t = distribution_terms(&m, &parts, &e);
        for (mode, hs) in [t.strong, t.weak].into_iter().enumerate() {
            for (k, h) in hs.into_iter().enumerate() {
                s2[mode][k] += h.component_mul(&h);
                s1[mode][k] += h;
            }
        }
    }
    let dn = draws as f64;
    let mut rows = Vec::new();
    for k in 0..r {
        let terms = WeakVarianceTerms::new(
            k,
            &m.fit,
            &parts.factors,
            &parts.weak[k],
            &m.sigma,
            &m.sigma_e,
            &parts.left,
        )
        .unwrap();
        for j in 0..q {
            for (mode, weak) in [(0, false), (1, true)] {
                let mean = s1[mode][k][j] / dn;
                let monte_carlo = s2[mode][k][j] / dn - mean * mean;
                let formula = if weak {
                    terms.variance(j)
                } else {
                    strong_variance(k, j, &parts.factors, &parts.strong[k], &m.sigma_e)
                };
                rows.push(OracleRow {
                    weak,
                    k,
                    j,
                    monte_carlo,
                    formula,
                });
            }
        }
    }
    rows
}
