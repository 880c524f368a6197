//! Linear MMSE estimation of the signal coefficients, with and without a
//! jitter model.
//!
//! The estimator is `x_hat = E[H]^T (E[H H^T] + r I)^{-1} y` with
//! `r = E[sigma_w^2] / E[sigma_x^2]` under the prior means. The two moments
//! of `H(z)` are quadrature expectations over the jitter-variance prior and
//! the conditional Gaussian jitter; dropping the jitter model replaces both
//! by `H(0)`. Every symmetric positive-definite solve goes through Cholesky,
//! never an explicit inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::model::{build_h_matrix, Hyperparams, ModelConfig};
use crate::quadrature::{jitter_rule_with_half_width, variance_rules, QuadSpec};
use crate::{Error, Result};

/// Ratio of prior-mean noise variance to prior-mean coefficient variance,
/// the regularizer in both linear estimators.
pub fn prior_variance_ratio(hyper: &Hyperparams) -> Result<f64> {
    if hyper.alpha_x <= 1.0 || hyper.alpha_w <= 1.0 {
        return Err(Error::InvalidParameter(
            "linear estimators need prior variance means, so shapes must exceed one".into(),
        ));
    }
    Ok(hyper.prior_mean_w2() / hyper.prior_mean_x2())
}

/// Entrywise prior mean of the observation matrix.
pub fn expected_h(
    hyper: &Hyperparams,
    config: &ModelConfig,
    quad: &QuadSpec,
) -> Result<DMatrix<f64>> {
    let (_, z_rule) = variance_rules(hyper, quad)?;
    let e_sigma_z2 = hyper.prior_mean_z2();
    let n = config.n();
    let mut e_h = DMatrix::zeros(n, config.k);
    for (&sz2, &w2) in z_rule.nodes.iter().zip(&z_rule.weights) {
        let inner =
            jitter_rule_with_half_width(sz2, quad.j3, e_sigma_z2, quad.legendre_half_width)?;
        for (&z, &w3) in inner.nodes.iter().zip(&inner.weights) {
            let w = w2 * w3;
            for row in 0..n {
                for col in 0..config.k {
                    e_h[(row, col)] += w * config.h_entry(row, col, z);
                }
            }
        }
    }
    Ok(e_h)
}

/// Prior mean of `H H^T`.
///
/// Rows share the jitter variance but have independent jitter values, so
/// off-diagonal entries factor into conditional expected rows while the
/// diagonal needs the conditional second moment of each row.
pub fn expected_hht(
    hyper: &Hyperparams,
    config: &ModelConfig,
    quad: &QuadSpec,
) -> Result<DMatrix<f64>> {
    let (_, z_rule) = variance_rules(hyper, quad)?;
    let e_sigma_z2 = hyper.prior_mean_z2();
    let n = config.n();
    let mut acc = DMatrix::zeros(n, n);
    let mut diag = vec![0.0; n];
    for (&sz2, &w2) in z_rule.nodes.iter().zip(&z_rule.weights) {
        let inner =
            jitter_rule_with_half_width(sz2, quad.j3, e_sigma_z2, quad.legendre_half_width)?;
        let mut cond_rows = DMatrix::zeros(n, config.k);
        for (&z, &w3) in inner.nodes.iter().zip(&inner.weights) {
            for row in 0..n {
                let mut norm2 = 0.0;
                for col in 0..config.k {
                    let h = config.h_entry(row, col, z);
                    cond_rows[(row, col)] += w3 * h;
                    norm2 += h * h;
                }
                diag[row] += w2 * w3 * norm2;
            }
        }
        acc += w2 * &cond_rows * cond_rows.transpose();
    }
    for (i, &d) in diag.iter().enumerate() {
        acc[(i, i)] = d;
    }
    Ok(acc)
}

/// Everything the jitter-aware linear estimator needs, reusable across
/// observations drawn from the same prior.
#[derive(Debug, Clone)]
pub struct LmmsePrecompute {
    pub e_h: DMatrix<f64>,
    pub e_hht: DMatrix<f64>,
    pub ratio: f64,
    /// `E[H]^T (E[H H^T] + ratio I)^{-1}`, applied to observations.
    pub gain: DMatrix<f64>,
}

impl LmmsePrecompute {
    pub fn build(hyper: &Hyperparams, config: &ModelConfig, quad: &QuadSpec) -> Result<Self> {
        let ratio = prior_variance_ratio(hyper)?;
        let e_h = expected_h(hyper, config, quad)?;
        let e_hht = expected_hht(hyper, config, quad)?;
        let n = config.n();
        let mut a = e_hht.clone();
        for i in 0..n {
            a[(i, i)] += ratio;
        }
        let chol = spd_factor(a.clone(), "jitter-aware linear gain")?;
        let mut solved = e_h.clone();
        chol.solve_mut(&mut solved);
        debug_assert!({
            let resid = (&a * &solved - &e_h).norm() / e_h.norm().max(1.0);
            resid < 1e-10
        });
        Ok(Self {
            e_h,
            e_hht,
            ratio,
            gain: solved.transpose(),
        })
    }
}

fn spd_factor(a: DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    a.cholesky().ok_or(Error::CholeskyFailure { context })
}

/// Jitter-aware linear MMSE estimate.
pub fn lmmse_estimate(y: &DVector<f64>, pre: &LmmsePrecompute) -> Result<DVector<f64>> {
    if y.len() != pre.gain.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries, precompute expects {}",
            y.len(),
            pre.gain.ncols()
        )));
    }
    Ok(&pre.gain * y)
}

/// Error covariance of the jitter-aware estimator under the prior.
pub fn lmmse_error_cov(pre: &LmmsePrecompute, hyper: &Hyperparams) -> DMatrix<f64> {
    let k = pre.e_h.ncols();
    let scale = hyper.prior_mean_x2();
    (DMatrix::identity(k, k) - &pre.gain * &pre.e_h) * scale
}

fn no_jitter_normal_chol(
    config: &ModelConfig,
    hyper: &Hyperparams,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    let ratio = prior_variance_ratio(hyper)?;
    let h0 = build_h_matrix(&DVector::zeros(config.n()), config)?;
    let mut gram = h0.transpose() * &h0;
    for i in 0..config.k {
        gram[(i, i)] += ratio;
    }
    let chol = spd_factor(gram, "no-jitter linear gain")?;
    Ok((h0, chol))
}

/// Linear MMSE estimate that models no jitter: `H(0)` replaces both moments.
///
/// Solved in coefficient space; `H^T (H H^T + r I)^{-1}` and
/// `(H^T H + r I)^{-1} H^T` agree by the push-through identity.
pub fn lmmse_no_jitter(
    y: &DVector<f64>,
    config: &ModelConfig,
    hyper: &Hyperparams,
) -> Result<DVector<f64>> {
    if y.len() != config.n() {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries, model expects {}",
            y.len(),
            config.n()
        )));
    }
    let (h0, chol) = no_jitter_normal_chol(config, hyper)?;
    Ok(chol.solve(&(h0.transpose() * y)))
}

/// Error covariance of the no-jitter estimator under its own model
/// assumptions (no jitter present).
pub fn lmmse_no_jitter_error_cov(
    config: &ModelConfig,
    hyper: &Hyperparams,
) -> Result<DMatrix<f64>> {
    let (h0, chol) = no_jitter_normal_chol(config, hyper)?;
    let gram = h0.transpose() * &h0;
    let solved = chol.solve(&gram);
    let k = config.k;
    Ok((DMatrix::identity(k, k) - solved) * hyper.prior_mean_x2())
}

/// MMSE estimate when the jitter realization and both variances are known:
/// the classical Gaussian posterior mean under `H(z)`.
pub fn lmmse_fixed_jitter(
    y: &DVector<f64>,
    z: &DVector<f64>,
    sigma_x2: f64,
    sigma_w2: f64,
    config: &ModelConfig,
) -> Result<DVector<f64>> {
    if !(sigma_x2 > 0.0) || !(sigma_w2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "fixed-jitter estimate needs positive variances, got {sigma_x2}, {sigma_w2}"
        )));
    }
    if y.len() != config.n() {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries, model expects {}",
            y.len(),
            config.n()
        )));
    }
    let h = build_h_matrix(z, config)?;
    let mut gram = h.transpose() * &h;
    let ratio = sigma_w2 / sigma_x2;
    for i in 0..config.k {
        gram[(i, i)] += ratio;
    }
    let chol = spd_factor(gram, "fixed-jitter gain")?;
    Ok(chol.solve(&(h.transpose() * y)))
}
