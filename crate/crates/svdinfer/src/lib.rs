//! Debiased inference on the latent right factors of a sparse SVD in
//! multi-response linear regression.
//!
//! For `Y = X C + E` with `C = Σ_k d_k l_k r_kᵀ`, the crate estimates the
//! latent right factors `v_k = (l_kᵀ Σ̂ l_k)^{1/2} d_k r_k` componentwise with
//! asymptotically normal, debiased estimates and plug-in variances.
//!
//! * [`linmodel`]: data, Gram matrix, SVD fits and scaled factors.
//! * [`initfit`]: initial sparse SVD, rank selection, precision and noise
//!   covariance estimates.
//! * [`leftdebias`]: debiased and thresholded left factors.
//! * [`rightdebias`]: the strong and weak right-factor procedures.
//! * [`inference`]: intervals and standardized statistics.
//! * [`simlab`]: simulation designs and the Monte Carlo harness.
//! * [`io`]: CSV and JSON helpers.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod inference;
pub mod initfit;
pub mod io;
pub mod leftdebias;
pub mod linalg;
pub mod linmodel;
pub mod rightdebias;
pub mod simlab;

pub use error::{Error, Result};
pub use linmodel::{GramMatrix, RegressionData, ScaledFactors, SvdFit};
pub use rightdebias::Mode;
