//! Densities and samplers shared by the estimators: inverse-Gamma, scalar
//! and multivariate Gaussians, and the unnormalized jitter conditional.
//!
//! Every density here is evaluated in the log domain; the sampler and the
//! quadrature code rely on that to survive likelihood ratios far beyond f64
//! range in the linear domain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::model::ModelConfig;
use crate::{Error, Result};

/// Shape/scale pair for an inverse-Gamma distribution with density
/// `beta^alpha / Gamma(alpha) * s^{-(alpha+1)} * exp(-beta / s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl InverseGammaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "inverse-Gamma needs positive finite parameters, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Log density of the inverse-Gamma distribution at `s > 0`.
pub fn inverse_gamma_logpdf(s: f64, params: &InverseGammaParams) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "inverse-Gamma support is s > 0, got {s}"
        )));
    }
    let InverseGammaParams { alpha, beta } = *params;
    Ok(alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * s.ln() - beta / s)
}

/// Draws from an inverse-Gamma distribution as `beta / g` with
/// `g ~ Gamma(alpha, 1)`. A zero gamma draw (underflow at tiny shapes) is
/// rejected and redrawn so the result is always finite and positive.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(params: &InverseGammaParams, rng: &mut R) -> f64 {
    let gamma = Gamma::new(params.alpha, 1.0).expect("params validated at construction");
    loop {
        let g = gamma.sample(rng);
        if g > 0.0 {
            return params.beta / g;
        }
    }
}

/// Log density of a scalar Gaussian with the given mean and variance.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    debug_assert!(var > 0.0);
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

/// Draws from `N(mean, cov)` via the Cholesky factor of `cov`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() || !cov.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "mean has {} entries, covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cov.clone().cholesky().ok_or(Error::CholeskyFailure {
        context: "mvn covariance",
    })?;
    let eps = standard_normal_vector(mean.len(), rng);
    Ok(mean + chol.l() * eps)
}

/// Draws from the Gaussian with the given precision matrix and
/// precision-weighted mean `b` (the distribution of `x` with
/// `precision * E[x] = b`), without forming the covariance.
///
/// Factors `precision = L L^T`, solves for the mean, and returns
/// `mean + L^{-T} eps`; the second term has covariance `precision^{-1}`.
pub fn sample_mvn_from_precision<R: Rng + ?Sized>(
    b: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if precision.nrows() != b.len() || !precision.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "b has {} entries, precision is {}x{}",
            b.len(),
            precision.nrows(),
            precision.ncols()
        )));
    }
    let chol = precision.clone().cholesky().ok_or(Error::CholeskyFailure {
        context: "mvn precision",
    })?;
    let mean = chol.solve(b);
    let eps = standard_normal_vector(b.len(), rng);
    // Solve L^T v = eps in place.
    let mut v = eps;
    chol.l().tr_solve_lower_triangular_mut(&mut v);
    Ok(mean + v)
}

fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Log of the unnormalized single-site jitter conditional
/// `N(y_n; h_n(z_n)^T x, sigma_w2) * N(z_n; 0, sigma_z2)`.
///
/// Both Gaussian normalization constants are kept: the slice sampler derives
/// its initial bracket from the peak value of this exact product.
#[allow(clippy::too_many_arguments)]
pub fn log_unnormalized_z_conditional(
    z_n: f64,
    n: usize,
    y_n: f64,
    x: &DVector<f64>,
    sigma_z2: f64,
    sigma_w2: f64,
    config: &ModelConfig,
) -> f64 {
    let mu = config.h_dot(n, z_n, x);
    log_normal_pdf(y_n, mu, sigma_w2) + log_normal_pdf(z_n, 0.0, sigma_z2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Generator;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut acc = f(a) + f(b);
        for i in 1..panels {
            let x = a + i as f64 * h;
            acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn inverse_gamma_logpdf_reference_value() {
        // alpha=2, beta=1 at s=1: density is e^{-1}.
        let p = InverseGammaParams::new(2.0, 1.0).unwrap();
        assert_relative_eq!(
            inverse_gamma_logpdf(1.0, &p).unwrap(),
            -1.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn inverse_gamma_logpdf_integrates_to_one() {
        let p = InverseGammaParams::new(3.5, 2.0).unwrap();
        let integral = simpson(
            |s| inverse_gamma_logpdf(s, &p).unwrap().exp(),
            1e-4,
            60.0,
            200_000,
        );
        assert_relative_eq!(integral, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn inverse_gamma_logpdf_rejects_nonpositive_support() {
        let p = InverseGammaParams::new(2.0, 1.0).unwrap();
        assert!(inverse_gamma_logpdf(0.0, &p).is_err());
        assert!(inverse_gamma_logpdf(-1.0, &p).is_err());
        assert!(InverseGammaParams::new(0.0, 1.0).is_err());
        assert!(InverseGammaParams::new(1.0, -2.0).is_err());
    }

    #[test]
    fn inverse_gamma_sampling_matches_moments() {
        // alpha=6.5, beta=5.5: mean 1, variance 1/4.5.
        let p = InverseGammaParams::new(6.5, 5.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1001);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let s = sample_inverse_gamma(&p, &mut rng);
            assert!(s > 0.0);
            sum += s;
            sum2 += s * s;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 0.01);
        assert_relative_eq!(var, 1.0 / 4.5, max_relative = 0.05);
    }

    #[test]
    fn log_normal_pdf_reference_values() {
        assert_relative_eq!(
            log_normal_pdf(0.0, 0.0, 1.0),
            -0.9189385332046727,
            max_relative = 1e-15
        );
        // Shift/scale invariance of the quadratic form.
        assert_relative_eq!(
            log_normal_pdf(3.0, 1.0, 4.0),
            -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.5,
            max_relative = 1e-15
        );
    }

    #[test]
    fn mvn_sampling_matches_moments() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2002);
        let n = 100_000;
        let mut s = DVector::zeros(2);
        let mut s2 = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let d = sample_mvn(&mean, &cov, &mut rng).unwrap();
            s += &d;
            s2 += &d * d.transpose();
        }
        let m = s / n as f64;
        let c = s2 / n as f64 - &m * m.transpose();
        assert_abs_diff_eq!(m[0], 1.0, epsilon = 0.02);
        assert_abs_diff_eq!(m[1], -2.0, epsilon = 0.02);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(c[(i, j)], cov[(i, j)], epsilon = 0.05);
            }
        }
    }

    #[test]
    fn precision_sampler_matches_covariance_sampler_statistics() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 0.8]);
        let precision = cov.clone().try_inverse().unwrap();
        let mean = DVector::from_vec(vec![0.7, 0.1]);
        let b = &precision * &mean;
        let mut rng = ChaCha8Rng::seed_from_u64(3003);
        let n = 100_000;
        let mut s = DVector::zeros(2);
        let mut s2 = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let d = sample_mvn_from_precision(&b, &precision, &mut rng).unwrap();
            s += &d;
            s2 += &d * d.transpose();
        }
        let m = s / n as f64;
        let c = s2 / n as f64 - &m * m.transpose();
        assert_abs_diff_eq!(m[0], mean[0], epsilon = 0.01);
        assert_abs_diff_eq!(m[1], mean[1], epsilon = 0.01);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(c[(i, j)], cov[(i, j)], epsilon = 0.02);
            }
        }
    }

    #[test]
    fn mvn_rejects_indefinite_covariance() {
        let mean = DVector::zeros(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_mvn(&mean, &cov, &mut rng).is_err());
    }

    #[test]
    fn z_conditional_is_product_of_gaussians_and_stays_finite() {
        let config = ModelConfig::new(4, 2, Generator::Sinc).unwrap();
        let x = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let (y_n, sz2, sw2) = (0.8, 0.09, 0.0025);
        for &z in &[0.0, 0.13, -0.4, 15.0, -40.0] {
            let got = log_unnormalized_z_conditional(z, 3, y_n, &x, sz2, sw2, &config);
            let mu = config.h_dot(3, z, &x);
            let want = log_normal_pdf(y_n, mu, sw2) + log_normal_pdf(z, 0.0, sz2);
            assert!(got.is_finite());
            assert_relative_eq!(got, want, max_relative = 1e-14);
        }
    }
}
