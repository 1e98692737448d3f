//! Simulation designs, end-to-end Monte Carlo replications and their
//! aggregation into coverage, length and normality diagnostics.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{confidence_interval, normal_cdf, standardized_stat, two_sided_critical};
use crate::initfit::{self, PenaltyConfig};
use crate::linalg;
use crate::linmodel::{self, RegressionData, SvdFit};
use crate::rightdebias::{self, Mode};

/// How the design matrix is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignMode {
    /// Latent factors `X l_k` are independent standard normal columns; the
    /// remaining directions follow the AR(1) conditional law.
    Conditional,
    /// Rows iid from the AR(1) covariance.
    Iid,
}

/// Simulation settings. Every field has a default (setting 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// True singular values, decreasing.
    pub d: Vec<f64>,
    /// Nonzeros per left vector.
    pub s1: usize,
    /// Nonzeros per right vector.
    pub s2: usize,
    /// Values drawn uniformly for the left vectors.
    pub s1_values: Vec<f64>,
    /// Magnitude range `[lo, hi]` for the right vectors; signs are symmetric.
    pub s2_range: [f64; 2],
    pub rho_x: f64,
    pub rho_e: f64,
    /// Ratio `‖X d_r l_r r_rᵀ‖_F / ‖E‖_F`.
    pub snr_target: f64,
    pub design: DesignMode,
    pub mode: Mode,
    pub replications: usize,
    pub base_seed: u64,
    pub alpha: f64,
    /// Largest rank the selector may return.
    pub r_max: usize,
    /// Use this rank instead of the selector's.
    pub rank_override: Option<usize>,
    /// Draw one design for all replications instead of one per replication.
    pub fix_design: bool,
    pub penalty: PenaltyConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::setting(1).expect("setting 1 exists")
    }
}

impl SimConfig {
    /// The four reference settings: 1 and 2 use the conditional design with
    /// `d = (100, 15, 5)` and three nonzeros per vector; 3 and 4 use the iid
    /// AR(1) design with `d = (200, 15, 5)` and five nonzeros. Odd settings
    /// have `(p, q) = (25, 30)`, even ones `(50, 60)`.
    pub fn setting(id: u32) -> Option<SimConfig> {
        let (p, q) = match id {
            1 | 3 => (25, 30),
            2 | 4 => (50, 60),
            _ => return None,
        };
        let (d1, s, design) = if id <= 2 {
            (100.0, 3, DesignMode::Conditional)
        } else {
            (200.0, 5, DesignMode::Iid)
        };
        Some(SimConfig {
            n: 200,
            p,
            q,
            d: vec![d1, 15.0, 5.0],
            s1: s,
            s2: s,
            s1_values: vec![-1.0, 1.0],
            s2_range: [0.3, 1.0],
            rho_x: 0.3,
            rho_e: 0.3,
            snr_target: 1.0,
            design,
            mode: Mode::Weak,
            replications: 1000,
            base_seed: 20240101,
            alpha: 0.05,
            r_max: 6,
            rank_override: None,
            fix_design: false,
            penalty: PenaltyConfig::default(),
        })
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let r = self.rank();
        if r == 0 {
            return bad("d must have at least one singular value".into());
        }
        if self.n < 2 || self.p == 0 || self.q == 0 {
            return bad(format!("invalid dimensions n={} p={} q={}", self.n, self.p, self.q));
        }
        if self.s1 == 0 || self.s2 == 0 || self.s1 * r > self.p || self.s2 * r > self.q {
            return bad(format!(
                "supports need 1 ≤ s1·r ≤ p and 1 ≤ s2·r ≤ q (s1={}, s2={}, r={r})",
                self.s1, self.s2
            ));
        }
        if self.d.iter().any(|x| !(*x > 0.0)) || self.d.windows(2).any(|w| w[0] <= w[1]) {
            return bad("d must be positive and strictly decreasing".into());
        }
        if self.s1_values.is_empty() || self.s1_values.iter().all(|x| *x == 0.0) {
            return bad("s1_values needs a nonzero value".into());
        }
        let [lo, hi] = self.s2_range;
        if !(0.0 < lo && lo <= hi) {
            return bad("s2_range must satisfy 0 < lo ≤ hi".into());
        }
        if !(self.rho_x.abs() < 1.0 && self.rho_e.abs() < 1.0) {
            return bad("correlations must lie in (-1, 1)".into());
        }
        if !(self.snr_target > 0.0) {
            return bad("snr_target must be positive".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)".into());
        }
        if self.r_max == 0 {
            return bad("r_max must be at least 1".into());
        }
        if let Some(rk) = self.rank_override {
            if rk == 0 || rk > self.p.min(self.q) {
                return bad(format!("rank override {rk} outside [1, min(p, q)]"));
            }
        }
        self.penalty.validate()
    }
}

/// Stream reserved for the coefficient draw.
const COEF_STREAM: u64 = u64::MAX;
/// Stream reserved for the shared design when `fix_design` is set.
const DESIGN_STREAM: u64 = u64::MAX - 1;

/// Independent generator for stream `stream` of `base_seed`.
///
/// Replication `i` uses stream `i`, so results do not depend on scheduling.
pub fn stream_rng(base_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

/// The true sparse SVD `C* = Σ d_k l_k r_kᵀ`.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub d: DVector<f64>,
    /// p×r, orthonormal columns with disjoint supports.
    pub left: DMatrix<f64>,
    /// q×r, orthonormal columns with disjoint supports.
    pub right: DMatrix<f64>,
    /// AR(1) correlation of the noise rows before scaling by `σ²`.
    pub sigma_e: DMatrix<f64>,
}

impl TrueModel {
    pub fn coefficient(&self) -> DMatrix<f64> {
        &self.left * DMatrix::from_diagonal(&self.d) * self.right.transpose()
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// `μ_k = d_k l_k`.
    pub fn mu(&self, k: usize) -> DVector<f64> {
        self.left.column(k) * self.d[k]
    }

    /// Realized target `v_k = (l_kᵀ Σ̂ l_k)^{1/2} d_k r_k` for the given design.
    pub fn v_target(&self, k: usize, sigma: &linmodel::GramMatrix) -> DVector<f64> {
        let l = self.left.column(k).into_owned();
        self.right.column(k) * (sigma.inner(&l, &l).sqrt() * self.d[k])
    }

    /// The truth as an [`SvdFit`].
    pub fn as_fit(&self) -> Result<SvdFit> {
        SvdFit::new(self.d.clone(), self.left.clone(), self.right.clone())
    }
}

fn block_vector<R: Rng>(
    dim: usize,
    start: usize,
    s: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> f64,
) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    for j in start..start + s {
        v[j] = draw(rng);
    }
    let norm = v.norm();
    v / norm
}

/// Draws the disjoint-support singular vectors and assembles the truth.
pub fn gen_coefficients<R: Rng>(cfg: &SimConfig, rng: &mut R) -> TrueModel {
    let r = cfg.rank();
    let mut left = DMatrix::zeros(cfg.p, r);
    let mut right = DMatrix::zeros(cfg.q, r);
    let values = &cfg.s1_values;
    let [lo, hi] = cfg.s2_range;
    for k in 0..r {
        // A draw of all zeros is impossible unless every value is zero,
        // which validation rejects; redraw in the unlikely all-zero case.
        let l = loop {
            let mut raw = DVector::zeros(cfg.p);
            for j in cfg.s1 * k..cfg.s1 * (k + 1) {
                raw[j] = values[rng.random_range(0..values.len())];
            }
            if raw.norm() > 0.0 {
                break raw.normalize();
            }
        };
        let rv = block_vector(cfg.q, cfg.s2 * k, cfg.s2, rng, |g| {
            let mag = if hi > lo { g.random_range(lo..=hi) } else { lo };
            if g.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        left.set_column(k, &l);
        right.set_column(k, &rv);
    }
    TrueModel {
        d: DVector::from_vec(cfg.d.clone()),
        left,
        right,
        sigma_e: linalg::ar1(cfg.q, cfg.rho_e),
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Fill row by row so a row's draws are contiguous in the stream.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Orthonormal complement of the columns of `l` (p×r with orthonormal columns).
pub fn orthonormal_complement(l: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, r) = l.shape();
    let mut aug = DMatrix::zeros(p, r + p);
    aug.view_mut((0, 0), (p, r)).copy_from(l);
    aug.view_mut((0, r), (p, p)).copy_from(&DMatrix::<f64>::identity(p, p));
    let q = aug.qr().q();
    q.columns(r, p - r).into_owned()
}

/// Design whose latent factors `X l_k` are exactly the columns of an iid
/// standard normal `X₁`, with the complementary directions `X₂` drawn from
/// the AR(1) conditional law given `X₁`. Returns `[X₁, X₂] P⁻¹`, `P = [L, L⊥]`.
pub fn gen_design_conditional<R: Rng>(
    cfg: &SimConfig,
    left: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (p, r) = left.shape();
    let n = cfg.n;
    let sigma_x = linalg::ar1(p, cfg.rho_x);
    let perp = orthonormal_complement(left);
    let s11 = left.tr_mul(&sigma_x) * left;
    let s21 = perp.tr_mul(&sigma_x) * left;
    let s22 = perp.tr_mul(&sigma_x) * &perp;
    let cond = linalg::condition_number(&s11);
    if !(cond <= 1e12) {
        return Err(Error::SingularSigma11 { cond });
    }
    // B = Σ₂₁ Σ₁₁⁻¹, computed as (Σ₁₁⁻¹ Σ₁₂)ᵀ using symmetry of Σ₁₁.
    let b = linalg::solve(&s11, &s21.transpose())
        .ok_or(Error::SingularSigma11 { cond })?
        .transpose();
    let cond_cov = linalg::symmetrize(&(&s22 - &b * s21.transpose()));
    let chol = cond_cov
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("conditional covariance is not positive definite".into()))?;
    let x1 = normal_matrix(n, r, rng);
    let z = normal_matrix(n, p - r, rng);
    let x2 = &x1 * b.transpose() + z * chol.l().transpose();
    let mut stacked = DMatrix::zeros(n, p);
    stacked.view_mut((0, 0), (n, r)).copy_from(&x1);
    stacked.view_mut((0, r), (n, p - r)).copy_from(&x2);
    // P has orthonormal columns, so P⁻¹ = Pᵀ.
    let mut pmat = DMatrix::zeros(p, p);
    pmat.view_mut((0, 0), (p, r)).copy_from(left);
    pmat.view_mut((0, r), (p, p - r)).copy_from(&perp);
    Ok(stacked * pmat.transpose())
}

/// Rows iid `N(0, Σ_X)` with `Σ_X = (ρ^{|i−j|})`.
pub fn gen_design_iid<R: Rng>(cfg: &SimConfig, rng: &mut R) -> DMatrix<f64> {
    let chol = linalg::ar1(cfg.p, cfg.rho_x)
        .cholesky()
        .expect("AR(1) correlation with |rho| < 1 is positive definite");
    normal_matrix(cfg.n, cfg.p, rng) * chol.l().transpose()
}

/// Draws the design for `cfg`.
pub fn gen_design<R: Rng>(cfg: &SimConfig, truth: &TrueModel, rng: &mut R) -> Result<DMatrix<f64>> {
    match cfg.design {
        DesignMode::Conditional => gen_design_conditional(cfg, &truth.left, rng),
        DesignMode::Iid => Ok(gen_design_iid(cfg, rng)),
    }
}

/// Noise with AR(1) rows, scaled so that
/// `‖X d_r l_r r_rᵀ‖_F / ‖E‖_F = snr_target` exactly.
pub fn gen_noise<R: Rng>(
    cfg: &SimConfig,
    x: &DMatrix<f64>,
    truth: &TrueModel,
    rng: &mut R,
) -> DMatrix<f64> {
    let chol = truth
        .sigma_e
        .clone()
        .cholesky()
        .expect("AR(1) correlation with |rho| < 1 is positive definite");
    let e0 = normal_matrix(x.nrows(), truth.sigma_e.nrows(), rng) * chol.l().transpose();
    let last = truth.rank() - 1;
    let weakest = truth.left.column(last) * (truth.d[last]) * truth.right.column(last).transpose();
    let signal = (x * weakest).norm();
    let sigma = signal / (cfg.snr_target * e0.norm());
    e0 * sigma
}

/// Inference output for one component `v_{k,j}` in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub k: usize,
    pub j: usize,
    pub truth: f64,
    pub estimate: f64,
    pub variance: f64,
    pub lo: f64,
    pub hi: f64,
    pub covered: bool,
    pub t: f64,
}

/// One replication's outcome.
#[derive(Debug, Clone)]
pub struct RepResult {
    pub index: u64,
    /// Rank returned by the selector.
    pub selected_rank: usize,
    /// Components with a positive variance estimate.
    pub components: Vec<ComponentResult>,
    /// Components dropped because their variance was not positive.
    pub nonpositive: usize,
    /// Set when the replication failed before producing estimates.
    pub failure: Option<String>,
}

/// Data drawn for one replication.
#[derive(Debug, Clone)]
pub struct SimData {
    pub x: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Draws `(X, E, Y)` for replication `index`.
pub fn gen_data(
    cfg: &SimConfig,
    truth: &TrueModel,
    fixed_x: Option<&DMatrix<f64>>,
    index: u64,
) -> Result<SimData> {
    let mut rng = stream_rng(cfg.base_seed, index);
    let x = match fixed_x {
        Some(x) => x.clone(),
        None => gen_design(cfg, truth, &mut rng)?,
    };
    let e = gen_noise(cfg, &x, truth, &mut rng);
    let y = &x * truth.coefficient() + &e;
    Ok(SimData { x, e, y })
}

/// Flips fitted layers so each right vector points along the matching true one.
pub fn align_signs(fit: &mut SvdFit, truth: &TrueModel) {
    for k in 0..fit.rank().min(truth.rank()) {
        if fit.r(k).dot(&truth.right.column(k)) < 0.0 {
            fit.flip_sign(k);
        }
    }
}

/// Runs one full replication: draw data, select the rank, fit, debias, and
/// compare the intervals with the realized targets.
pub fn run_replication(
    cfg: &SimConfig,
    truth: &TrueModel,
    fixed_x: Option<&DMatrix<f64>>,
    index: u64,
) -> RepResult {
    let mut out = RepResult {
        index,
        selected_rank: 0,
        components: Vec::new(),
        nonpositive: 0,
        failure: None,
    };
    if let Err(e) = replicate_into(cfg, truth, fixed_x, &mut out) {
        out.failure = Some(e.to_string());
        out.components.clear();
    }
    out
}

fn replicate_into(
    cfg: &SimConfig,
    truth: &TrueModel,
    fixed_x: Option<&DMatrix<f64>>,
    out: &mut RepResult,
) -> Result<()> {
    let sim = gen_data(cfg, truth, fixed_x, out.index)?;
    let data = RegressionData::new(sim.x, sim.y)?;
    let sigma = linmodel::gram(&data);
    out.selected_rank = initfit::select_rank(&data, &sigma, cfg.r_max, cfg.penalty.rank_c);
    let rank = cfg.rank_override.unwrap_or(out.selected_rank);
    let mut fit = initfit::sofar_fit(&data, &sigma, rank, &cfg.penalty)?.fit;
    align_signs(&mut fit, truth);
    let factors = linmodel::scaled_factors(&data, &sigma, &fit)?;
    let sigma_e = initfit::residual_noise_cov(&data, &fit, cfg.penalty.tau_cov).sigma_e;
    let results = match cfg.mode {
        Mode::Strong => rightdebias::infer_strong(&data, &fit, &factors, &sigma, &sigma_e)?,
        Mode::Weak => {
            let theta = initfit::nodewise_precision(&data, &sigma, &cfg.penalty)?.theta;
            rightdebias::infer_weak(&data, &fit, &factors, &sigma, &theta, &sigma_e)?
        }
    };
    let z = two_sided_critical(cfg.alpha);
    let n = data.n();
    for res in results.iter().filter(|r| r.k < truth.rank()) {
        let target = truth.v_target(res.k, &sigma);
        for j in 0..data.q() {
            let var = res.variance[j];
            let est = res.v_hat[j];
            match confidence_interval(est, var, n, cfg.alpha) {
                Ok(ci) => {
                    let t = standardized_stat(est, target[j], var, n);
                    out.components.push(ComponentResult {
                        k: res.k,
                        j,
                        truth: target[j],
                        estimate: est,
                        variance: var,
                        lo: ci.lo,
                        hi: ci.hi,
                        covered: t.abs() <= z,
                        t,
                    });
                }
                Err(_) => out.nonpositive += 1,
            }
        }
    }
    Ok(())
}

/// Aggregated statistics for one component `v_{k,j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub k: usize,
    pub j: usize,
    /// True when `v_{k,j}` is nonzero.
    pub nonzero: bool,
    /// Replications that produced an interval for this component.
    pub count: usize,
    pub covered: usize,
    pub len_sum: f64,
    pub t: Vec<f64>,
}

impl ComponentSummary {
    pub fn cp(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.covered as f64 / self.count as f64
        }
    }

    pub fn mean_len(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.len_sum / self.count as f64
        }
    }
}

/// Aggregate over all replications.
#[derive(Debug, Clone)]
pub struct McSummary {
    pub replications: usize,
    /// Replications whose selected rank equals the true rank.
    pub rank_hits: usize,
    pub failures: usize,
    pub nonpositive: usize,
    /// Indexed by `k * q + j`.
    pub components: Vec<ComponentSummary>,
    pub q: usize,
    pub runtime_secs: f64,
}

impl McSummary {
    pub fn component(&self, k: usize, j: usize) -> &ComponentSummary {
        &self.components[k * self.q + j]
    }

    pub fn rank_recovery(&self) -> f64 {
        self.rank_hits as f64 / self.replications as f64
    }
}

/// Draws the truth and, if requested, the shared design.
pub fn setup(cfg: &SimConfig) -> Result<(TrueModel, Option<DMatrix<f64>>)> {
    cfg.validate()?;
    let truth = gen_coefficients(cfg, &mut stream_rng(cfg.base_seed, COEF_STREAM));
    let fixed = if cfg.fix_design {
        Some(gen_design(cfg, &truth, &mut stream_rng(cfg.base_seed, DESIGN_STREAM))?)
    } else {
        None
    };
    Ok((truth, fixed))
}

/// Runs `cfg.replications` replications on `jobs` worker threads.
///
/// Output is bit-identical for any `jobs`: each replication owns its random
/// stream and results are merged in replication order.
pub fn monte_carlo(cfg: &SimConfig, jobs: usize) -> Result<McSummary> {
    let start = Instant::now();
    let (truth, fixed) = setup(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    let reps: Vec<RepResult> = pool.install(|| {
        (0..cfg.replications as u64)
            .into_par_iter()
            .map(|i| run_replication(cfg, &truth, fixed.as_ref(), i))
            .collect()
    });
    let r = truth.rank();
    let q = cfg.q;
    let mut components: Vec<ComponentSummary> = (0..r * q)
        .map(|idx| {
            let (k, j) = (idx / q, idx % q);
            ComponentSummary {
                k,
                j,
                nonzero: truth.right[(j, k)] != 0.0,
                count: 0,
                covered: 0,
                len_sum: 0.0,
                t: Vec::new(),
            }
        })
        .collect();
    let mut summary = McSummary {
        replications: cfg.replications,
        rank_hits: 0,
        failures: 0,
        nonpositive: 0,
        components: Vec::new(),
        q,
        runtime_secs: 0.0,
    };
    for rep in &reps {
        if rep.selected_rank == r {
            summary.rank_hits += 1;
        }
        if rep.failure.is_some() {
            summary.failures += 1;
        }
        summary.nonpositive += rep.nonpositive;
        for c in &rep.components {
            let slot = &mut components[c.k * q + c.j];
            slot.count += 1;
            slot.covered += c.covered as usize;
            slot.len_sum += c.hi - c.lo;
            slot.t.push(c.t);
        }
    }
    summary.components = components;
    summary.runtime_secs = start.elapsed().as_secs_f64();
    Ok(summary)
}

/// Gaussian kernel density estimate with Silverman's bandwidth
/// `1.06 σ̂ m^{-1/5}`, evaluated on `grid`.
///
/// When all samples coincide, `σ̂` is replaced by `1e-3·max(1, |x̄|)` so the
/// estimate is a narrow spike rather than undefined.
pub fn kde(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("KDE needs at least 2 samples, got {m}")));
    }
    let mf = m as f64;
    let mean = samples.iter().sum::<f64>() / mf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (mf - 1.0);
    let mut sd = var.sqrt();
    if sd == 0.0 {
        sd = 1e-3 * mean.abs().max(1.0);
    }
    let h = 1.06 * sd * mf.powf(-0.2);
    let norm = 1.0 / (mf * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&x| {
                    let u = (g - x) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `samples` and
/// the standard normal CDF.
pub fn ks_distance_normal(samples: &[f64]) -> f64 {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / m).abs().max((f - (i + 1) as f64 / m).abs())
        })
        .fold(0.0, f64::max)
}
