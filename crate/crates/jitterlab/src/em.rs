//! EM approximation to the maximum-likelihood estimate of the signal
//! coefficients.
//!
//! The jitter values are latent; with random variances the noise and jitter
//! variances join them, and every E-step expectation becomes a triple
//! quadrature sum sharing the rules of the marginal likelihood. Each
//! iteration solves the accumulated linear system, so there is no prior on
//! `x` and no ridge: the estimator is classical, not Bayesian.
//!
//! The known-variance variant used as a simulation proxy runs the identical
//! code path with the two variance rules collapsed to single point masses,
//! which keeps the two estimators comparable term by term.

use nalgebra::{DMatrix, DVector};

use crate::model::{Hyperparams, ModelConfig};
use crate::quadrature::{jitter_rule_with_half_width, variance_rules, QuadSpec};
use crate::{Error, Result};

/// Whether the variances are latent (integrated under their priors) or known
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceMode {
    Random,
    Known { sigma_z2: f64, sigma_w2: f64 },
}

impl VarianceMode {
    fn validate(&self) -> Result<()> {
        if let Self::Known { sigma_z2, sigma_w2 } = *self {
            if !(sigma_z2 >= 0.0) || !sigma_z2.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "known jitter variance must be nonnegative, got {sigma_z2}"
                )));
            }
            if !(sigma_w2 > 0.0) || !sigma_w2.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "known noise variance must be positive, got {sigma_w2}"
                )));
            }
        }
        Ok(())
    }
}

/// Quadrature sizes, stopping rule, and variance handling for one EM run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub quad: QuadSpec,
    pub max_iters: usize,
    pub tol: f64,
    pub variance_mode: VarianceMode,
}

impl EmConfig {
    pub fn new(variance_mode: VarianceMode) -> Self {
        Self {
            quad: QuadSpec::default(),
            max_iters: 200,
            tol: 1e-6,
            variance_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        self.variance_mode.validate()?;
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Result of one EM run.
#[derive(Debug, Clone)]
pub struct EmOutput {
    pub x_hat: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Entry `i` is the observed log-likelihood of the iterate entering
    /// E-step `i`, so ascent shows up as a non-decreasing sequence.
    pub loglik_trace: Vec<f64>,
}

/// Shared per-run quadrature terms: the jitter nodes with their combined
/// variance-by-jitter log weights, and the noise-variance nodes with theirs.
struct EStepContext {
    /// `(z node, ln(w2 w3))` over every (variance node, jitter node) pair.
    jitter_terms: Vec<(f64, f64)>,
    /// `(sigma_w2 node, ln w1)`.
    noise_terms: Vec<(f64, f64)>,
}

impl EStepContext {
    fn new(hyper: &Hyperparams, em_cfg: &EmConfig) -> Result<Self> {
        em_cfg.validate()?;
        let quad = &em_cfg.quad;
        match em_cfg.variance_mode {
            VarianceMode::Random => {
                let (w_rule, z_rule) = variance_rules(hyper, quad)?;
                let e_sigma_z2 = hyper.prior_mean_z2();
                let mut jitter_terms = Vec::with_capacity(quad.j2 * quad.j3);
                for (&sz2, &w2) in z_rule.nodes.iter().zip(&z_rule.weights) {
                    let inner = jitter_rule_with_half_width(
                        sz2,
                        quad.j3,
                        e_sigma_z2,
                        quad.legendre_half_width,
                    )?;
                    let lw2 = w2.ln();
                    for (&z, &w3) in inner.nodes.iter().zip(&inner.weights) {
                        jitter_terms.push((z, lw2 + w3.ln()));
                    }
                }
                let noise_terms = w_rule
                    .nodes
                    .iter()
                    .zip(&w_rule.weights)
                    .map(|(&sw2, &w1)| (sw2, w1.ln()))
                    .collect();
                Ok(Self {
                    jitter_terms,
                    noise_terms,
                })
            }
            VarianceMode::Known { sigma_z2, sigma_w2 } => {
                // Point-mass variance rules; a zero jitter variance pins the
                // jitter itself to zero as well.
                let jitter_terms = if sigma_z2 == 0.0 {
                    vec![(0.0, 0.0)]
                } else {
                    let inner = jitter_rule_with_half_width(
                        sigma_z2,
                        quad.j3,
                        sigma_z2,
                        quad.legendre_half_width,
                    )?;
                    inner
                        .nodes
                        .iter()
                        .zip(&inner.weights)
                        .map(|(&z, &w3)| (z, w3.ln()))
                        .collect()
                };
                Ok(Self {
                    jitter_terms,
                    noise_terms: vec![(sigma_w2, 0.0)],
                })
            }
        }
    }

    /// Generator rows for sample `n` at every jitter node, one per column.
    fn h_columns(&self, n: usize, config: &ModelConfig) -> DMatrix<f64> {
        let t = self.jitter_terms.len();
        let mut h = DMatrix::zeros(config.k, t);
        for (ti, &(z, _)) in self.jitter_terms.iter().enumerate() {
            h.column_mut(ti).copy_from(&config.h_row(n, z));
        }
        h
    }

    /// Per-sample E-step: the normalized expectation pieces and the sample's
    /// observed log-likelihood under the same rules.
    fn sample_expectations(
        &self,
        y_n: f64,
        n: usize,
        h_cols: &DMatrix<f64>,
        x_prev: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let t = self.jitter_terms.len();
        let k = h_cols.nrows();
        let mu = h_cols.tr_mul(x_prev);

        // Log weights of every (noise node, jitter node) pair, shifted by
        // the running max so the later exponentials stay in range.
        let mut ell = vec![0.0; self.noise_terms.len() * t];
        let mut max = f64::NEG_INFINITY;
        for (j1, &(sw2, lw1)) in self.noise_terms.iter().enumerate() {
            let norm = -0.5 * (2.0 * std::f64::consts::PI * sw2).ln();
            let inv2 = 1.0 / (2.0 * sw2);
            for ti in 0..t {
                let d = y_n - mu[ti];
                let l = lw1 + self.jitter_terms[ti].1 + norm - d * d * inv2;
                ell[j1 * t + ti] = l;
                if l > max {
                    max = l;
                }
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::LikelihoodUnderflow { n });
        }

        // Fold the noise nodes into one scale per jitter node: the outer
        // products only depend on the jitter node, so the K x K work stays
        // proportional to the jitter terms.
        let mut scale = DVector::zeros(t);
        let mut total = 0.0;
        for (j1, &(sw2, _)) in self.noise_terms.iter().enumerate() {
            let inv_var = 1.0 / sw2;
            for ti in 0..t {
                let c = (ell[j1 * t + ti] - max).exp();
                total += c;
                scale[ti] += c * inv_var;
            }
        }

        let mut a = DMatrix::zeros(k, k);
        for ti in 0..t {
            let col = h_cols.column(ti);
            a.syger(scale[ti] / total, &col, &col, 1.0);
        }
        for i in 0..k {
            for j in (i + 1)..k {
                a[(i, j)] = a[(j, i)];
            }
        }
        let b = h_cols * (&scale * (y_n / total));
        Ok((a, b, max + total.ln()))
    }
}

/// Normalized E-step expectations for one sample: `A_n` approximates
/// `E[h_n h_n^T / sigma_w^2 | y_n, x_prev]` and `b_n` the matching
/// `E[h_n / sigma_w^2 | y_n, x_prev] y_n`, both normalized by the
/// quadrature marginal likelihood of `y_n` under the same rules.
pub fn em_expectations(
    y_n: f64,
    n: usize,
    x_prev: &DVector<f64>,
    hyper: &Hyperparams,
    config: &ModelConfig,
    em_cfg: &EmConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if x_prev.len() != config.k {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, model expects {}",
            x_prev.len(),
            config.k
        )));
    }
    if n >= config.n() {
        return Err(Error::InvalidParameter(format!(
            "sample index {n} out of range for {} samples",
            config.n()
        )));
    }
    let ctx = EStepContext::new(hyper, em_cfg)?;
    let h_cols = ctx.h_columns(n, config);
    let (a, b, _) = ctx.sample_expectations(y_n, n, &h_cols, x_prev)?;
    Ok((a, b))
}

/// Runs EM from `x0` until the relative iterate change drops below the
/// tolerance or the iteration cap is hit; the final iterate is returned
/// either way, with `converged` distinguishing the two exits.
pub fn em_iterate(
    y: &DVector<f64>,
    x0: &DVector<f64>,
    hyper: &Hyperparams,
    config: &ModelConfig,
    em_cfg: &EmConfig,
) -> Result<EmOutput> {
    let n_samples = config.n();
    if y.len() != n_samples {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries, model expects {}",
            y.len(),
            n_samples
        )));
    }
    if x0.len() != config.k {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {} entries, model expects {}",
            x0.len(),
            config.k
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "initial iterate must be finite".into(),
        ));
    }

    let ctx = EStepContext::new(hyper, em_cfg)?;
    // The generator rows at the quadrature nodes never change across
    // iterations, so they are computed once per sample.
    let h_cache: Vec<DMatrix<f64>> = (0..n_samples).map(|n| ctx.h_columns(n, config)).collect();

    let k = config.k;
    let mut x = x0.clone();
    let mut loglik_trace = Vec::new();
    let mut iters = 0;
    let mut converged = false;

    for _ in 0..em_cfg.max_iters {
        let mut a_sum = DMatrix::zeros(k, k);
        let mut b_sum = DVector::zeros(k);
        let mut loglik = 0.0;
        for n in 0..n_samples {
            let (a, b, l) = ctx.sample_expectations(y[n], n, &h_cache[n], &x)?;
            a_sum += a;
            b_sum += b;
            loglik += l;
        }
        loglik_trace.push(loglik);

        let chol = a_sum.cholesky().ok_or(Error::CholeskyFailure {
            context: "EM accumulated system",
        })?;
        let x_next = chol.solve(&b_sum);
        iters += 1;

        let rel = (&x_next - &x).norm() / x.norm().max(1e-12);
        x = x_next;
        if rel < em_cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(EmOutput {
        x_hat: x,
        iters,
        converged,
        loglik_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{log_normal_pdf, sample_inverse_gamma, InverseGammaParams};
    use crate::linear::lmmse_no_jitter;
    use crate::model::{
        build_h_matrix, hyperparams_from_expected, synthesize, Generator, SynthOverrides,
    };
    use crate::quadrature::jitter_rule;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_setup() -> (ModelConfig, Hyperparams) {
        let config = ModelConfig::new(4, 2, Generator::Sinc).unwrap();
        let hyper = hyperparams_from_expected(4, 8, 0.25 * 0.25, 0.1 * 0.1).unwrap();
        (config, hyper)
    }

    #[test]
    fn a_matrix_is_symmetric_psd() {
        let (config, hyper) = small_setup();
        let inst = synthesize(&config, &hyper, &SynthOverrides::default(), 71).unwrap();
        let em_cfg = EmConfig::new(VarianceMode::Random);
        let x_prev = DVector::from_element(4, 0.3);
        for n in 0..config.n() {
            let (a, _) = em_expectations(inst.y[n], n, &x_prev, &hyper, &config, &em_cfg).unwrap();
            assert_relative_eq!((&a - a.transpose()).amax(), 0.0, epsilon = 1e-12);
            let min_eig = a
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |m, &v| m.min(v));
            assert!(min_eig >= -1e-10, "min eigenvalue {min_eig} at n={n}");
        }
    }

    #[test]
    fn known_zero_jitter_degenerates_to_fixed_row() {
        let (config, hyper) = small_setup();
        let sigma_w2 = 0.04;
        let em_cfg = EmConfig::new(VarianceMode::Known {
            sigma_z2: 0.0,
            sigma_w2,
        });
        let x_prev = DVector::from_vec(vec![0.5, -1.0, 0.25, 2.0]);
        let (n, y_n) = (5, 0.8);
        let (a, b) = em_expectations(y_n, n, &x_prev, &hyper, &config, &em_cfg).unwrap();
        let h0 = config.h_row(n, 0.0);
        let a_ref = &h0 * h0.transpose() / sigma_w2;
        let b_ref = &h0 * (y_n / sigma_w2);
        assert_relative_eq!((a - a_ref).amax(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((b - b_ref).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn known_mode_matches_direct_jitter_quadrature() {
        // Independent linear-domain reduction: with both variances fixed,
        // the expectation is a single weighted sum over the jitter rule.
        let (config, hyper) = small_setup();
        let (sigma_z2, sigma_w2) = (0.09, 0.01);
        let mut em_cfg = EmConfig::new(VarianceMode::Known { sigma_z2, sigma_w2 });
        em_cfg.quad.j3 = 65;
        let x_prev = DVector::from_vec(vec![1.0, -0.5, 0.75, 0.2]);
        let (n, y_n) = (3, -0.4);
        let (a, b) = em_expectations(y_n, n, &x_prev, &hyper, &config, &em_cfg).unwrap();

        let rule = jitter_rule(sigma_z2, 65, sigma_z2).unwrap();
        let mut a_ref = DMatrix::zeros(4, 4);
        let mut b_ref = DVector::zeros(4);
        let mut norm = 0.0;
        for (&z, &w3) in rule.nodes.iter().zip(&rule.weights) {
            let h = config.h_row(n, z);
            let like = w3 * log_normal_pdf(y_n, h.dot(&x_prev), sigma_w2).exp();
            a_ref += &h * h.transpose() * (like / sigma_w2);
            b_ref += &h * (like * y_n / sigma_w2);
            norm += like;
        }
        a_ref /= norm;
        b_ref /= norm;
        assert_relative_eq!((a - a_ref).amax(), 0.0, epsilon = 1e-10);
        assert_relative_eq!((b - b_ref).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn expectations_match_importance_sampling_oracle() {
        let (config, hyper) = small_setup();
        let inst = synthesize(&config, &hyper, &SynthOverrides::default(), 404).unwrap();
        let n = 3;
        let y_n = inst.y[n];
        let x_prev = &inst.x_true * 0.9;
        let em_cfg = EmConfig::new(VarianceMode::Random);
        let (a, b) = em_expectations(y_n, n, &x_prev, &hyper, &config, &em_cfg).unwrap();

        // Prior draws of (sigma_z2, sigma_w2, z_n) weighted by the sample
        // likelihood estimate the same posterior expectations.
        let mut rng = ChaCha8Rng::seed_from_u64(9911);
        let z_prior = InverseGammaParams::new(hyper.alpha_z, hyper.beta_z).unwrap();
        let w_prior = InverseGammaParams::new(hyper.alpha_w, hyper.beta_w).unwrap();
        let draws = 1_000_000;
        let mut a_acc = DMatrix::zeros(4, 4);
        let mut b_acc = DVector::zeros(4);
        let mut w_acc = 0.0;
        for _ in 0..draws {
            let sz2 = sample_inverse_gamma(&z_prior, &mut rng);
            let sw2 = sample_inverse_gamma(&w_prior, &mut rng);
            let z = sz2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let h = config.h_row(n, z);
            let wt = log_normal_pdf(y_n, h.dot(&x_prev), sw2).exp();
            a_acc.syger(wt / sw2, &h, &h, 1.0);
            b_acc += &h * (wt / sw2);
            w_acc += wt;
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                a_acc[(i, j)] = a_acc[(j, i)];
            }
        }
        a_acc /= w_acc;
        b_acc *= y_n / w_acc;

        for i in 0..4 {
            assert_relative_eq!(b[i], b_acc[i], max_relative = 0.02, epsilon = 1e-3);
            for j in 0..4 {
                assert_relative_eq!(
                    a[(i, j)],
                    a_acc[(i, j)],
                    max_relative = 0.02,
                    epsilon = 1e-3
                );
            }
        }
    }

    #[test]
    fn zero_jitter_known_mode_solves_least_squares_immediately() {
        let config = ModelConfig::new(5, 3, Generator::Sinc).unwrap();
        let hyper = hyperparams_from_expected(5, 15, 0.25 * 0.25, 0.1 * 0.1).unwrap();
        let sigma_w2 = 0.01;
        let overrides = SynthOverrides {
            sigma_w2: Some(sigma_w2),
            z: Some(DVector::zeros(15)),
            ..Default::default()
        };
        let inst = synthesize(&config, &hyper, &overrides, 17).unwrap();
        let em_cfg = EmConfig::new(VarianceMode::Known {
            sigma_z2: 0.0,
            sigma_w2,
        });
        let x0 = DVector::zeros(5);
        let out = em_iterate(&inst.y, &x0, &hyper, &config, &em_cfg).unwrap();

        let h0 = build_h_matrix(&DVector::zeros(15), &config).unwrap();
        let ls = (h0.transpose() * &h0)
            .cholesky()
            .unwrap()
            .solve(&(h0.transpose() * &inst.y));
        assert!(out.converged);
        assert!(out.iters <= 2, "iters {}", out.iters);
        assert_relative_eq!((out.x_hat - ls).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn observed_loglik_is_nondecreasing() {
        let config = ModelConfig::new(6, 4, Generator::Sinc).unwrap();
        let hyper = hyperparams_from_expected(6, 24, 0.25 * 0.25, 0.05 * 0.05).unwrap();
        let inst = synthesize(&config, &hyper, &SynthOverrides::default(), 2024).unwrap();
        let mut em_cfg = EmConfig::new(VarianceMode::Random);
        em_cfg.max_iters = 40;
        let x0 = lmmse_no_jitter(&inst.y, &config, &hyper).unwrap();
        let out = em_iterate(&inst.y, &x0, &hyper, &config, &em_cfg).unwrap();
        assert!(out.loglik_trace.len() >= 2);
        for w in out.loglik_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8,
                "log-likelihood dropped: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn random_and_known_variances_give_similar_errors() {
        let config = ModelConfig::new(6, 4, Generator::Sinc).unwrap();
        let hyper = hyperparams_from_expected(6, 24, 0.3 * 0.3, 0.05 * 0.05).unwrap();
        let trials = 15;
        let mut se_random = 0.0;
        let mut se_known = 0.0;
        for t in 0..trials {
            let inst = synthesize(&config, &hyper, &SynthOverrides::default(), 5000 + t).unwrap();
            let x0 = lmmse_no_jitter(&inst.y, &config, &hyper).unwrap();
            let random_cfg = EmConfig::new(VarianceMode::Random);
            let known_cfg = EmConfig::new(VarianceMode::Known {
                sigma_z2: inst.sigma_z2,
                sigma_w2: inst.sigma_w2,
            });
            let xr = em_iterate(&inst.y, &x0, &hyper, &config, &random_cfg)
                .unwrap()
                .x_hat;
            let xk = em_iterate(&inst.y, &x0, &hyper, &config, &known_cfg)
                .unwrap()
                .x_hat;
            se_random += (&xr - &inst.x_true).norm_squared();
            se_known += (&xk - &inst.x_true).norm_squared();
        }
        let gap_db = 10.0 * (se_random / se_known).log10();
        assert!(gap_db.abs() <= 2.0, "gap {gap_db} dB");
    }

    #[test]
    fn input_validation() {
        let (config, hyper) = small_setup();
        let em_cfg = EmConfig::new(VarianceMode::Random);
        let x_bad = DVector::zeros(3);
        assert!(em_expectations(0.0, 0, &x_bad, &hyper, &config, &em_cfg).is_err());
        let x_ok = DVector::zeros(4);
        assert!(em_expectations(0.0, 8, &x_ok, &hyper, &config, &em_cfg).is_err());
        let y_bad = DVector::zeros(7);
        assert!(em_iterate(&y_bad, &x_ok, &hyper, &config, &em_cfg).is_err());
        let y_ok = DVector::zeros(8);
        let x_nan = DVector::from_element(4, f64::NAN);
        assert!(em_iterate(&y_ok, &x_nan, &hyper, &config, &em_cfg).is_err());
        let bad_mode = VarianceMode::Known {
            sigma_z2: -1.0,
            sigma_w2: 0.01,
        };
        assert!(bad_mode.validate().is_err());
        let mut zero_tol = EmConfig::new(VarianceMode::Random);
        zero_tol.tol = 0.0;
        assert!(zero_tol.validate().is_err());
    }
}
