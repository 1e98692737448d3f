mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use svdinfer::linmodel::{gram, scaled_factors};
use svdinfer::{Error, RegressionData, SvdFit};

#[test]
fn gram_of_identity_design() {
    let n = 5;
    let d = data(DMatrix::identity(n, n), DMatrix::zeros(n, 1));
    let s = gram(&d);
    assert!(max_diff(s.matrix(), &(DMatrix::identity(n, n) / n as f64)) < 1e-15);
}

#[test]
fn gram_of_constant_column() {
    let c = 1.7;
    let d = data(DMatrix::from_element(9, 1, c), DMatrix::zeros(9, 1));
    let s = gram(&d);
    assert_eq!(s.dim(), 1);
    assert!((s.matrix()[(0, 0)] - c * c).abs() < 1e-14);
}

#[test]
fn gram_matches_double_loop() {
    let mut g = rng(1);
    let x = gaussian(4, 3, &mut g);
    let s = gram(&data(x.clone(), DMatrix::zeros(4, 1)));
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for t in 0..4 {
                acc += x[(t, a)] * x[(t, b)];
            }
            assert!((s.matrix()[(a, b)] - acc / 4.0).abs() < 1e-14);
        }
    }
    assert_eq!(s.matrix(), &s.matrix().transpose());
}

#[test]
fn regression_data_rejects_bad_shapes() {
    let x = DMatrix::zeros(3, 2);
    assert!(matches!(
        RegressionData::new(x.clone(), DMatrix::zeros(4, 1)),
        Err(Error::InvalidInput(_))
    ));
    assert!(RegressionData::new(DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).is_err());
    let mut y = DMatrix::zeros(3, 1);
    y[(0, 0)] = f64::NAN;
    assert!(RegressionData::new(x, y).is_err());
}

#[test]
fn column_norm_warning_flags_off_scale_columns() {
    let mut x = DMatrix::from_element(4, 2, 1.0);
    x.column_mut(1).scale_mut(2.0);
    let d = data(x, DMatrix::zeros(4, 1));
    assert_eq!(d.column_norm_warnings(), vec![1]);
}

#[test]
fn svd_fit_validates_invariants() {
    let left = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let right = left.clone();
    assert!(SvdFit::new(DVector::from_vec(vec![2.0, 1.0]), left.clone(), right.clone()).is_ok());
    assert!(SvdFit::new(DVector::from_vec(vec![1.0, 2.0]), left.clone(), right.clone()).is_err());
    assert!(SvdFit::new(DVector::from_vec(vec![1.0, 1.0]), left.clone(), right.clone()).is_err());
    assert!(SvdFit::new(DVector::from_vec(vec![2.0, 0.0]), left.clone(), right.clone()).is_err());
    assert!(SvdFit::new(DVector::from_vec(vec![2.0, 1.0]), left.clone() * 2.0, right.clone()).is_err());
    let skew = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
    assert!(SvdFit::new(DVector::from_vec(vec![2.0, 1.0]), left.clone(), skew.clone()).is_err());
    assert!(SvdFit::new(DVector::from_vec(vec![2.0, 1.0]), skew, right).is_ok());
}

#[test]
fn scaled_factors_with_orthogonal_design() {
    let (n, p) = (8, 3);
    let mut g = rng(2);
    let x = orthonormal(n, p, &mut g) * (n as f64).sqrt();
    let d = data(x.clone(), gaussian(n, 2, &mut g));
    let s = gram(&d);
    let e1p = DMatrix::from_fn(p, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let e1q = DMatrix::from_fn(2, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let fit = SvdFit::new(DVector::from_element(1, 2.0), e1p, e1q).unwrap();
    let f = scaled_factors(&d, &s, &fit).unwrap();
    let expect_u = x.column(0) / (n as f64).sqrt();
    assert!(vec_max_diff(&f.u_col(0), &expect_u.into_owned()) < 1e-12);
    assert!(vec_max_diff(&f.v_col(0), &DVector::from_vec(vec![2.0, 0.0])) < 1e-12);
}

#[test]
fn rank_one_factors_are_normalized() {
    let mut g = rng(3);
    let d = data(gaussian(12, 5, &mut g), gaussian(12, 4, &mut g));
    let s = gram(&d);
    let fit = random_fit(5, 4, 1, &mut g);
    let f = scaled_factors(&d, &s, &fit).unwrap();
    assert!((f.u.tr_mul(&f.u)[(0, 0)] - 1.0).abs() < 1e-12);
    assert!((f.v.tr_mul(&f.v)[(0, 0)] - f.z[0]).abs() < 1e-10 * f.z[0]);
}

#[test]
fn scaled_factors_match_direct_evaluation() {
    let mut g = rng(4);
    let (n, p, q) = (6, 3, 4);
    let x = gaussian(n, p, &mut g);
    let d = data(x.clone(), gaussian(n, q, &mut g));
    let s = gram(&d);
    let fit = random_fit(p, q, 2, &mut g);
    let f = scaled_factors(&d, &s, &fit).unwrap();
    for i in 0..2 {
        let l = fit.l(i);
        let mut lsl = 0.0;
        for a in 0..p {
            for b in 0..p {
                let mut sab = 0.0;
                for t in 0..n {
                    sab += x[(t, a)] * x[(t, b)];
                }
                lsl += l[a] * sab / n as f64 * l[b];
            }
        }
        for t in 0..n {
            let xl: f64 = (0..p).map(|a| x[(t, a)] * l[a]).sum();
            assert!((f.u[(t, i)] - xl / (lsl.sqrt() * (n as f64).sqrt())).abs() < 1e-12);
        }
        for j in 0..q {
            assert!((f.v[(j, i)] - lsl.sqrt() * fit.d()[i] * fit.r(i)[j]).abs() < 1e-12);
        }
        assert!((f.z[i] - fit.d()[i].powi(2) * lsl).abs() < 1e-10 * f.z[i]);
        assert!((f.u.column(i).norm_squared() - 1.0).abs() < 1e-8);
    }
    assert!(f.v.column(0).dot(&f.v.column(1)).abs() < 1e-8);
}

#[test]
fn reconstruction_matches_coefficient() {
    let mut g = rng(5);
    let (n, p, q) = (10, 4, 3);
    let d = data(gaussian(n, p, &mut g), gaussian(n, q, &mut g));
    let s = gram(&d);
    let fit = random_fit(p, q, 3, &mut g);
    let f = scaled_factors(&d, &s, &fit).unwrap();
    let lhs = &f.u * f.v.transpose();
    let rhs = d.x() * fit.coefficient() / (n as f64).sqrt();
    assert!(max_diff(&lhs, &rhs) < 1e-10);
}

#[test]
fn annihilated_left_vector_is_degenerate() {
    let mut g = rng(6);
    let mut x = gaussian(7, 3, &mut g);
    x.column_mut(2).fill(0.0);
    let d = data(x, gaussian(7, 2, &mut g));
    let s = gram(&d);
    let l = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
    let r = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let fit = SvdFit::new(DVector::from_element(1, 1.0), l, r).unwrap();
    assert!(matches!(
        scaled_factors(&d, &s, &fit),
        Err(Error::DegenerateFactor { layer: 0, .. })
    ));
}
