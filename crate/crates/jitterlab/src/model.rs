//! Observation model: generator pulse, observation matrix, variance priors,
//! and synthetic problem instances.
//!
//! Signals live in a shift-invariant subspace with unit spacing between
//! coefficients: `s(t) = sum_k x_k h(t - k)`. Sampling at rate `M` per unit
//! interval with per-sample timing jitter `z_n` and additive noise gives
//! `y_n = sum_k x_k h(n/M + z_n - k) + w_n`, i.e. `y = H(z) x + w` with
//! `[H(z)]_{n,k} = h(n/M + z_n - k)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::distributions::{sample_inverse_gamma, InverseGammaParams};
use crate::{Error, Result};

/// Normalized sinc pulse, `sin(pi t) / (pi t)`.
///
/// Near zero the ratio is replaced by its quadratic Taylor expansion; the
/// switch point keeps the two branches within one ulp of each other.
pub fn sinc(t: f64) -> f64 {
    let a = std::f64::consts::PI * t;
    if a.abs() < 1e-8 {
        1.0 - a * a / 6.0
    } else {
        a.sin() / a
    }
}

/// Generator pulse for the shift-invariant subspace.
///
/// Only the sinc pulse is implemented; the scalar signature leaves room for
/// compactly supported generators later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Generator {
    #[default]
    Sinc,
}

impl Generator {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Generator::Sinc => sinc(t),
        }
    }
}

/// Problem dimensions: `k` signal coefficients observed at `m` samples per
/// unit interval, `n = k * m` samples total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub k: usize,
    pub m: usize,
    pub generator: Generator,
}

impl ModelConfig {
    /// Spacing between coefficients; all time quantities are relative to it.
    pub const SPACING: f64 = 1.0;

    pub fn new(k: usize, m: usize, generator: Generator) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::InvalidParameter(format!(
                "model dimensions must be positive, got k={k}, m={m}"
            )));
        }
        Ok(Self { k, m, generator })
    }

    /// Number of observed samples.
    pub fn n(&self) -> usize {
        self.k * self.m
    }

    /// Single observation-matrix entry `h(n/M + z_n - k)`.
    pub fn h_entry(&self, n: usize, k: usize, z_n: f64) -> f64 {
        let u = n as f64 / self.m as f64 + z_n;
        self.generator.eval(u - k as f64)
    }

    /// Row `n` of the observation matrix for jitter value `z_n`.
    pub fn h_row(&self, n: usize, z_n: f64) -> DVector<f64> {
        let u = n as f64 / self.m as f64 + z_n;
        DVector::from_fn(self.k, |k, _| self.generator.eval(u - k as f64))
    }

    /// Inner product of row `n` with `x`, without building the row.
    pub fn h_dot(&self, n: usize, z_n: f64, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.k);
        let u = n as f64 / self.m as f64 + z_n;
        let mut acc = 0.0;
        for k in 0..self.k {
            acc += self.generator.eval(u - k as f64) * x[k];
        }
        acc
    }
}

/// Builds the full observation matrix `H(z)`; `z` must have one entry per
/// sample.
pub fn build_h_matrix(z: &DVector<f64>, config: &ModelConfig) -> Result<DMatrix<f64>> {
    let n = config.n();
    if z.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "jitter vector has {} entries, model expects {}",
            z.len(),
            n
        )));
    }
    Ok(DMatrix::from_fn(n, config.k, |row, col| {
        config.h_entry(row, col, z[row])
    }))
}

/// Inverse-Gamma hyperparameters for the three variances.
///
/// All-zero parameters select the improper Jeffreys prior; it is usable for
/// the conjugate posterior updates but not for sampling or prior moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub alpha_x: f64,
    pub beta_x: f64,
    pub alpha_z: f64,
    pub beta_z: f64,
    pub alpha_w: f64,
    pub beta_w: f64,
}

impl Hyperparams {
    pub fn new(
        alpha_x: f64,
        beta_x: f64,
        alpha_z: f64,
        beta_z: f64,
        alpha_w: f64,
        beta_w: f64,
    ) -> Result<Self> {
        let all = [alpha_x, beta_x, alpha_z, beta_z, alpha_w, beta_w];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "hyperparameters must be positive and finite, got {all:?}"
            )));
        }
        Ok(Self {
            alpha_x,
            beta_x,
            alpha_z,
            beta_z,
            alpha_w,
            beta_w,
        })
    }

    /// Improper Jeffreys prior on all three variances.
    pub fn jeffreys() -> Self {
        Self {
            alpha_x: 0.0,
            beta_x: 0.0,
            alpha_z: 0.0,
            beta_z: 0.0,
            alpha_w: 0.0,
            beta_w: 0.0,
        }
    }

    pub fn is_jeffreys(&self) -> bool {
        self.alpha_x == 0.0 && self.beta_x == 0.0
    }

    /// Prior mean of the coefficient variance, `beta_x / (alpha_x - 1)`.
    pub fn prior_mean_x2(&self) -> f64 {
        self.beta_x / (self.alpha_x - 1.0)
    }

    /// Prior mean of the jitter variance.
    pub fn prior_mean_z2(&self) -> f64 {
        self.beta_z / (self.alpha_z - 1.0)
    }

    /// Prior mean of the noise variance.
    pub fn prior_mean_w2(&self) -> f64 {
        self.beta_w / (self.alpha_w - 1.0)
    }

    fn x_params(&self) -> Result<InverseGammaParams> {
        InverseGammaParams::new(self.alpha_x, self.beta_x)
    }

    fn z_params(&self) -> Result<InverseGammaParams> {
        InverseGammaParams::new(self.alpha_z, self.beta_z)
    }

    fn w_params(&self) -> Result<InverseGammaParams> {
        InverseGammaParams::new(self.alpha_w, self.beta_w)
    }
}

/// Fits hyperparameters so the prior variances concentrate around target
/// means as the problem grows.
///
/// The coefficient variance gets mean 1; the jitter and noise variances get
/// the supplied means. Shapes scale with the dimension counts so the prior
/// standard deviation shrinks relative to the mean as `k` and `n` grow.
pub fn hyperparams_from_expected(
    k: usize,
    n: usize,
    e_sigma_z2: f64,
    e_sigma_w2: f64,
) -> Result<Hyperparams> {
    if k == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "hyperparameter fit needs positive dimensions".into(),
        ));
    }
    if !(e_sigma_z2 > 0.0) || !(e_sigma_w2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "expected variances must be positive, got E[sigma_z^2]={e_sigma_z2}, \
             E[sigma_w^2]={e_sigma_w2}"
        )));
    }
    let kf = k as f64;
    let nf = n as f64;
    Hyperparams::new(
        (kf + 3.0) / 2.0,
        (kf + 1.0) / 2.0,
        (nf + 3.0) / 2.0,
        (nf + 1.0) / 2.0 * e_sigma_z2,
        (nf + 3.0) / 2.0,
        (nf + 1.0) / 2.0 * e_sigma_w2,
    )
}

/// One synthetic draw from the full generative model.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub x_true: DVector<f64>,
    pub z_true: DVector<f64>,
    pub w_true: DVector<f64>,
    pub sigma_x2: f64,
    pub sigma_z2: f64,
    pub sigma_w2: f64,
    pub y: DVector<f64>,
    pub seed: u64,
}

/// Optional pins applied during synthesis; anything left `None` is drawn from
/// its prior.
#[derive(Debug, Clone, Default)]
pub struct SynthOverrides {
    pub sigma_x2: Option<f64>,
    pub sigma_z2: Option<f64>,
    pub sigma_w2: Option<f64>,
    pub z: Option<DVector<f64>>,
}

/// Draws a synthetic instance. The draw order is fixed (variances, then `x`,
/// `z`, `w`), so a seed fully determines the instance for a given
/// configuration.
pub fn synthesize(
    config: &ModelConfig,
    hyper: &Hyperparams,
    overrides: &SynthOverrides,
    seed: u64,
) -> Result<SyntheticInstance> {
    use rand::SeedableRng;
    let n = config.n();
    if let Some(z) = &overrides.z {
        if z.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "pinned jitter vector has {} entries, model expects {n}",
                z.len()
            )));
        }
    }
    for (name, v) in [
        ("sigma_x2", overrides.sigma_x2),
        ("sigma_z2", overrides.sigma_z2),
        ("sigma_w2", overrides.sigma_w2),
    ] {
        if let Some(v) = v {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "pinned {name} must be positive and finite, got {v}"
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_x2 = match overrides.sigma_x2 {
        Some(v) => v,
        None => sample_inverse_gamma(&hyper.x_params()?, &mut rng),
    };
    let sigma_z2 = match overrides.sigma_z2 {
        Some(v) => v,
        None => sample_inverse_gamma(&hyper.z_params()?, &mut rng),
    };
    let sigma_w2 = match overrides.sigma_w2 {
        Some(v) => v,
        None => sample_inverse_gamma(&hyper.w_params()?, &mut rng),
    };

    let sigma_x = sigma_x2.sqrt();
    let x_true = DVector::from_fn(config.k, |_, _| {
        sigma_x * rng.sample::<f64, _>(StandardNormal)
    });
    let z_true = match &overrides.z {
        Some(z) => z.clone(),
        None => {
            let sigma_z = sigma_z2.sqrt();
            DVector::from_fn(n, |_, _| sigma_z * rng.sample::<f64, _>(StandardNormal))
        }
    };
    let sigma_w = sigma_w2.sqrt();
    let w_true = DVector::from_fn(n, |_, _| sigma_w * rng.sample::<f64, _>(StandardNormal));

    let h = build_h_matrix(&z_true, config)?;
    let y = &h * &x_true + &w_true;

    Ok(SyntheticInstance {
        x_true,
        z_true,
        w_true,
        sigma_x2,
        sigma_z2,
        sigma_w2,
        y,
        seed,
    })
}
