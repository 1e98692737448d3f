//! Acceptance report: one PASS/FAIL line per criterion, with detail lines
//! indented below. Exits 0 so the report never blocks the rest of the test
//! run; set `ACCEPTANCE_STRICT=1` to exit 1 when any line fails.

mod common;

use std::time::Instant;

use common::*;
use nalgebra::{DMatrix, DVector};
use svdinfer::leftdebias::hard_threshold;
use svdinfer::linalg::{condition_number, max_abs};
use svdinfer::linmodel::{gram, scaled_factors};
use svdinfer::rightdebias::{
    strong_aux, strong_debias, strong_gradients, t_matrix, weak_aux, weak_gradients,
};
use svdinfer::simlab::{ks_distance_normal, monte_carlo, McSummary, SimConfig};
use svdinfer::Mode;

const REPLICATIONS: usize = 1000;
const CP_RANGE: (f64, f64) = (0.925, 0.975);

struct Report {
    failed: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, ok: bool, name: &str, details: &[String]) {
        self.total += 1;
        if !ok {
            self.failed += 1;
        }
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        for d in details {
            println!("       {d}");
        }
    }
}

/// Listed components per layer: the nonzero block followed by the last `s`
/// zero components (zero-based).
fn listed(cfg: &SimConfig, k: usize) -> Vec<usize> {
    let s = cfg.s2;
    (s * k..s * (k + 1)).chain(cfg.q - s..cfg.q).collect()
}

fn run(setting: u32) -> (SimConfig, McSummary) {
    let mut cfg = SimConfig::setting(setting).unwrap();
    cfg.replications = REPLICATIONS;
    cfg.mode = Mode::Weak;
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let summary = monte_carlo(&cfg, jobs).unwrap();
    (cfg, summary)
}

fn coverage_details(cfg: &SimConfig, summary: &McSummary) -> (bool, Vec<String>) {
    let mut ok = true;
    let mut out = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..cfg.rank() {
        let mut cells = Vec::new();
        for j in listed(cfg, k) {
            let c = summary.component(k, j);
            let cp = c.cp();
            let inside = cp >= CP_RANGE.0 && cp <= CP_RANGE.1;
            ok &= inside;
            lo = lo.min(cp);
            hi = hi.max(cp);
            cells.push(format!("v[{},{}]={cp:.3}{}", k + 1, j + 1, if inside { "" } else { "!" }));
        }
        out.push(cells.join(" "));
    }
    out.insert(
        0,
        format!(
            "{} replications, {} failures, CP range [{lo:.3}, {hi:.3}], required [{}, {}]",
            summary.replications, summary.failures, CP_RANGE.0, CP_RANGE.1
        ),
    );
    ok &= summary.failures == 0;
    (ok, out)
}

fn length_check(summary: &McSummary, k: usize, j: usize, target: f64, tol: f64) -> (bool, String) {
    let len = summary.component(k, j).mean_len();
    let ok = (len - target).abs() <= tol;
    (ok, format!("v[{},{}] mean length {len:.4}, required {target} ± {tol}", k + 1, j + 1))
}

fn mean_nonzero_len(cfg: &SimConfig, summary: &McSummary, k: usize) -> f64 {
    let js: Vec<usize> = (cfg.s2 * k..cfg.s2 * (k + 1)).collect();
    js.iter().map(|&j| summary.component(k, j).mean_len()).sum::<f64>() / js.len() as f64
}

fn algebraic_identities() -> (bool, Vec<String>) {
    let mut out = Vec::new();

    // Inverse identities on random valid factor sets.
    let (mut cases, mut worst_s, mut worst_w, mut seed) = (0, 0.0f64, 0.0f64, 0u64);
    while cases < 1000 {
        seed += 1;
        let mut g = rng(seed);
        let (n, q, r) = (4 + seed as usize % 16, 5 + seed as usize % 5, 1 + seed as usize % 4);
        let f = random_factors(n, q, r, &mut g);
        let k = seed as usize % r;
        let Ok(sa) = strong_aux(k, &f) else { continue };
        let wa = weak_aux(k, &f).unwrap();
        let ts = t_matrix(k, &f, &sa.m);
        let tw = t_matrix(k, &f, &wa.m);
        if condition_number(&ts) > 1e6 || condition_number(&tw) > 1e6 {
            continue;
        }
        let is = ts.try_inverse().unwrap();
        let iw = tw.try_inverse().unwrap();
        worst_s = worst_s.max(max_diff(&sa.w, &is) / max_abs(&is).max(1.0));
        worst_w = worst_w.max(max_diff(&wa.w, &iw) / max_abs(&iw).max(1.0));
        cases += 1;
    }
    let inv_ok = worst_s < 1e-8 && worst_w < 1e-8;
    out.push(format!(
        "W vs dense inverse of T over {cases} factor sets: strong {worst_s:.1e}, weak {worst_w:.1e} (limit 1e-8)"
    ));

    // Finite-difference gradients.
    let mut worst_fd = 0.0f64;
    for seed in 0..50 {
        let mut g = rng(10_000 + seed);
        let (n, q, r) = (8, 5, 3);
        let y = gaussian(n, q, &mut g);
        let orth = orthogonal_factors(n, q, r, &mut g);
        let corr = random_factors(n, q, r, &mut g);
        let thresholded: Vec<DVector<f64>> = (0..r).map(|_| gaussian_vec(n, &mut g) * 0.3).collect();
        for k in 0..r {
            let own: Vec<DVector<f64>> = (0..r).map(|i| orth.u_col(i)).collect();
            let (gv, gu) = strong_gradients(k, &y, &orth);
            worst_fd = worst_fd.max(fd_error(&y, k, &orth, &own, &gv, &gu));
            let (gv, gu) = weak_gradients(k, &y, &corr, &thresholded);
            worst_fd = worst_fd.max(fd_error(&y, k, &corr, &thresholded, &gv, &gu));
        }
    }
    let fd_ok = worst_fd < 1e-6;
    out.push(format!("gradient vs central differences: worst relative error {worst_fd:.1e} (limit 1e-6)"));

    // Rank-one collapse.
    let mut worst_r1 = 0.0f64;
    for seed in 0..200 {
        let mut g = rng(20_000 + seed);
        let (n, p, q) = (10 + seed as usize % 20, 3, 4);
        let d = data(gaussian(n, p, &mut g), gaussian(n, q, &mut g));
        let s = gram(&d);
        let fit = random_fit(p, q, 1, &mut g);
        let f = scaled_factors(&d, &s, &fit).unwrap();
        let (u, v) = (f.u_col(0), f.v_col(0));
        let sa = strong_aux(0, &f).unwrap();
        let direct = &v - (&v * u.dot(&u) - d.y().tr_mul(&u) / (n as f64).sqrt());
        let got = strong_debias(0, &d, &f, &sa);
        worst_r1 = worst_r1.max(vec_max_diff(&got, &direct) / (f64::EPSILON * direct.amax().max(1.0)));
        let wa = weak_aux(0, &f).unwrap();
        let c = v.norm_squared();
        let w = DMatrix::identity(q, q) - &v * v.transpose() * (0.5 / c);
        worst_r1 = worst_r1.max(max_diff(&wa.w, &w) / f64::EPSILON);
    }
    let r1_ok = worst_r1 <= 4.0;
    out.push(format!("rank-one collapse: worst deviation {worst_r1:.1} ulp (limit 4)"));

    // Hard-threshold idempotence.
    let mut idem_ok = true;
    for seed in 0..500 {
        let mut g = rng(30_000 + seed);
        let mu = gaussian_vec(20, &mut g);
        let n = 5 + seed as usize;
        let (once, s1) = hard_threshold(&mu, n);
        let (twice, s2) = hard_threshold(&once, n);
        idem_ok &= once == twice && s1 == s2;
    }
    out.push(format!("hard threshold idempotent over 500 vectors: {idem_ok}"));

    // Reproducibility under the worker count.
    let mut cfg = SimConfig::setting(1).unwrap();
    cfg.replications = 16;
    let one = monte_carlo(&cfg, 1).unwrap();
    let mut det_ok = true;
    for jobs in [2, 3, 8] {
        let other = monte_carlo(&cfg, jobs).unwrap();
        det_ok &= other.components == one.components && other.rank_hits == one.rank_hits;
    }
    out.push(format!("monte_carlo bit-identical for jobs 1, 2, 3, 8: {det_ok}"));

    (inv_ok && fd_ok && r1_ok && idem_ok && det_ok, out)
}

fn layer_loss(
    y: &DMatrix<f64>,
    k: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    others_u: &[DVector<f64>],
    f: &svdinfer::ScaledFactors,
) -> f64 {
    let n = y.nrows() as f64;
    let mut fit = u * v.transpose();
    for i in (0..f.rank()).filter(|&i| i != k) {
        fit += &others_u[i] * f.v.column(i).transpose();
    }
    (y - fit * n.sqrt()).norm_squared() / (2.0 * n)
}

fn fd_error(
    y: &DMatrix<f64>,
    k: usize,
    f: &svdinfer::ScaledFactors,
    others_u: &[DVector<f64>],
    g_v: &DVector<f64>,
    g_u: &DVector<f64>,
) -> f64 {
    let h = 1e-5;
    let (u, v) = (f.u_col(k), f.v_col(k));
    let mut worst = 0.0f64;
    for j in 0..v.len() {
        let (mut up, mut dn) = (v.clone(), v.clone());
        up[j] += h;
        dn[j] -= h;
        let fd = (layer_loss(y, k, &u, &up, others_u, f) - layer_loss(y, k, &u, &dn, others_u, f)) / (2.0 * h);
        worst = worst.max((fd - g_v[j]).abs() / g_v[j].abs().max(1.0));
    }
    for t in 0..u.len() {
        let (mut up, mut dn) = (u.clone(), u.clone());
        up[t] += h;
        dn[t] -= h;
        let fd = (layer_loss(y, k, &up, &v, others_u, f) - layer_loss(y, k, &dn, &v, others_u, f)) / (2.0 * h);
        worst = worst.max((fd - g_u[t]).abs() / g_u[t].abs().max(1.0));
    }
    worst
}

fn main() {
    let start = Instant::now();
    let mut report = Report { failed: 0, total: 0 };

    let (cfg1, s1) = run(1);
    let (ok, details) = coverage_details(&cfg1, &s1);
    report.line(ok, "coverage, setting 1", &details);

    let (a, da) = length_check(&s1, 0, 0, 0.353, 0.04);
    let (b, db) = length_check(&s1, 2, 6, 0.380, 0.04);
    let means: Vec<f64> = (0..3).map(|k| mean_nonzero_len(&cfg1, &s1, k)).collect();
    let min3 = (6..9).map(|j| s1.component(2, j).mean_len()).fold(f64::INFINITY, f64::min);
    let max1 = (0..3).map(|j| s1.component(0, j).mean_len()).fold(0.0, f64::max);
    let order = min3 >= max1;
    let dc = format!(
        "nonzero mean lengths by layer {:.4} {:.4} {:.4}; layer 3 min {min3:.4} ≥ layer 1 max {max1:.4}: {order}",
        means[0], means[1], means[2]
    );
    report.line(a && b && order, "interval lengths, setting 1", &[da, db, dc]);

    let (cfg2, s2) = run(2);
    let (cov, mut details) = coverage_details(&cfg2, &s2);
    let (len, dl) = length_check(&s2, 0, 0, 0.249, 0.03);
    details.push(dl);
    report.line(cov && len, "coverage and length, setting 2", &details);

    let (cfg3, s3) = run(3);
    let (cov, mut details) = coverage_details(&cfg3, &s3);
    let (len, dl) = length_check(&s3, 0, 0, 0.264, 0.03);
    details.push(dl);
    report.line(cov && len, "robustness, setting 3", &details);

    let rate = s1.rank_recovery();
    report.line(
        rate >= 0.95,
        "rank recovery, setting 1",
        &[format!(
            "selected rank 3 in {} of {} replications ({rate:.3}, required ≥ 0.95); settings 2 and 3: {:.3}, {:.3}",
            s1.rank_hits,
            s1.replications,
            s2.rank_recovery(),
            s3.rank_recovery()
        )],
    );

    let mut ks_ok = true;
    let mut cells = Vec::new();
    for k in 0..cfg1.rank() {
        for j in [cfg1.s2 * k, cfg1.q - 1] {
            let c = s1.component(k, j);
            let ks = ks_distance_normal(&c.t);
            ks_ok &= ks < 0.06 && c.t.len() == REPLICATIONS;
            cells.push(format!("T[{},{}]: {ks:.4}", k + 1, j + 1));
        }
    }
    report.line(
        ks_ok,
        "normality of standardized statistics, setting 1",
        &[format!("KS distance (limit 0.06): {}", cells.join(", "))],
    );

    let (ok, details) = algebraic_identities();
    report.line(ok, "exact algebraic identities", &details);

    let rows = variance_oracle(100_000);
    let worst = |weak: bool| {
        rows.iter()
            .filter(|r| r.weak == weak)
            .map(|r| r.rel_err())
            .fold(0.0f64, f64::max)
    };
    let (ws, ww) = (worst(false), worst(true));
    report.line(
        ws < 0.03 && ww < 0.03,
        "variance oracle, 10^5 draws",
        &[format!(
            "worst relative error over {} components: strong {ws:.4}, weak {ww:.4} (limit 0.03)",
            rows.len() / 2
        )],
    );

    println!(
        "acceptance: {} of {} criteria pass ({:.1}s)",
        report.total - report.failed,
        report.total,
        start.elapsed().as_secs_f64()
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && report.failed > 0 {
        std::process::exit(1);
    }
}
