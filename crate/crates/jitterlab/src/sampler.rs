//! Slice-within-Gibbs sampling of the full posterior.
//!
//! Each Gibbs iteration updates, in order: every jitter coordinate by slice
//! sampling its scalar conditional, the coefficient vector jointly from its
//! Gaussian conditional, and the three variances from conjugate
//! inverse-Gamma conditionals. Posterior-mean estimates average the draws
//! after a burn-in prefix.
//!
//! The jitter conditional `p(z_n | ...)` is proportional to
//! `N(y_n; h_n(z_n)^T x, sigma_w^2) N(z_n; 0, sigma_z^2)`, which is bounded
//! by `N(z_n; 0, sigma_z^2) / sqrt(2 pi sigma_w^2)`; inverting that bound at
//! the slice level yields a closed-form interval certain to contain the
//! slice, after which interval shrinkage does the rest.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::distributions::{
    log_unnormalized_z_conditional, sample_inverse_gamma, sample_mvn_from_precision,
    InverseGammaParams,
};
use crate::linear::lmmse_no_jitter;
use crate::model::{build_h_matrix, Hyperparams, ModelConfig, SyntheticInstance};
use crate::{Error, Result};

/// One sampler state: coefficients, jitter, variances, and the iteration
/// count that produced it (0 means initial).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub sigma_x2: f64,
    pub sigma_z2: f64,
    pub sigma_w2: f64,
    pub iteration: usize,
}

impl ChainState {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.x.len() != config.k || self.z.len() != config.n() {
            return Err(Error::DimensionMismatch(format!(
                "state has x:{} z:{}, model expects x:{} z:{}",
                self.x.len(),
                self.z.len(),
                config.k,
                config.n()
            )));
        }
        for (name, v) in [
            ("sigma_x2", self.sigma_x2),
            ("sigma_z2", self.sigma_z2),
            ("sigma_w2", self.sigma_w2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "state {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Concatenation `[x; z; sigma_x2; sigma_z2; sigma_w2]` used by the
    /// convergence diagnostics.
    pub fn to_combined_vector(&self) -> DVector<f64> {
        let k = self.x.len();
        let n = self.z.len();
        let mut v = DVector::zeros(k + n + 3);
        v.rows_mut(0, k).copy_from(&self.x);
        v.rows_mut(k, n).copy_from(&self.z);
        v[k + n] = self.sigma_x2;
        v[k + n + 1] = self.sigma_z2;
        v[k + n + 2] = self.sigma_w2;
        v
    }
}

/// Slice-shrinkage tuning: `tau` is the midpoint threshold (zero disables
/// the hybrid midpoint step), `max_shrink_iters` a safety cap that a
/// continuous target never reaches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceConfig {
    pub tau: f64,
    pub max_shrink_iters: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            tau: 25.0,
            max_shrink_iters: 1000,
        }
    }
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "midpoint threshold must be nonnegative, got {}",
                self.tau
            )));
        }
        if self.max_shrink_iters == 0 {
            return Err(Error::InvalidParameter(
                "shrink iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bookkeeping from slice updates: density evaluations, rejected draws, the
/// summed per-draw width ratio, and the slice level of the last update.
///
/// The width ratio of a draw is the fraction of the interval that would
/// remain after moving the endpoint on the draw's side of the previous
/// value, whether or not the draw is accepted; a uniform draw keeps its
/// expectation between one half and three quarters, which makes the overall
/// shrinkage geometric. The midpoint step can shrink the real interval
/// further than this measure records.
#[derive(Debug, Clone, Copy, Default)]
pub struct SliceStats {
    pub evals: usize,
    pub rejections: usize,
    pub width_ratio_sum: f64,
    pub log_slice_level: f64,
}

impl SliceStats {
    /// Mean per-draw interval-width ratio.
    pub fn mean_shrink_ratio(&self) -> Option<f64> {
        (self.evals > 0).then(|| self.width_ratio_sum / self.evals as f64)
    }

    pub fn absorb(&mut self, other: &SliceStats) {
        self.evals += other.evals;
        self.rejections += other.rejections;
        self.width_ratio_sum += other.width_ratio_sum;
        self.log_slice_level = other.log_slice_level;
    }
}

/// Symmetric interval guaranteed to contain the slice at level `log_u`.
///
/// The conditional's likelihood factor never exceeds its own normalizer, so
/// the slice lies where the prior factor alone reaches the level; solving
/// the resulting quadratic gives the bound. The argument of the square root
/// is nonnegative whenever `log_u` is at most the density bound, which the
/// level construction guarantees.
pub fn slice_initial_interval(log_u: f64, sigma_z2: f64, sigma_w2: f64) -> (f64, f64) {
    let sigma_z = sigma_z2.sqrt();
    let sigma_w = sigma_w2.sqrt();
    let arg = -2.0 * (log_u + (2.0 * std::f64::consts::PI * sigma_w * sigma_z).ln());
    assert!(
        arg >= 0.0,
        "slice level {log_u} exceeds the density bound (argument {arg})"
    );
    let r = sigma_z * arg.sqrt();
    (-r, r)
}

fn positive_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.r#gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// One slice-sampling update of jitter coordinate `n`.
///
/// Draws the level under the current conditional value, brackets the slice
/// with [`slice_initial_interval`], and shrinks: a rejected draw replaces
/// the endpoint on its side of the previous value; if its density also
/// falls a factor `e^tau` below the level, the midpoint of the remaining
/// interval replaces the endpoint on the midpoint's side of the previous
/// value. The returned value always satisfies slice membership.
pub fn slice_sample_z<R: Rng + ?Sized>(
    state: &ChainState,
    n: usize,
    y_n: f64,
    config: &ModelConfig,
    slice: &SliceConfig,
    rng: &mut R,
) -> Result<(f64, SliceStats)> {
    slice.validate()?;
    let z_prev = state.z[n];
    let log_p_prev = log_unnormalized_z_conditional(
        z_prev,
        n,
        y_n,
        &state.x,
        state.sigma_z2,
        state.sigma_w2,
        config,
    );
    let log_u = log_p_prev + positive_uniform(rng).ln();
    let (mut l, mut r) = slice_initial_interval(log_u, state.sigma_z2, state.sigma_w2);
    let mut stats = SliceStats {
        log_slice_level: log_u,
        ..SliceStats::default()
    };

    for _ in 0..slice.max_shrink_iters {
        let width = r - l;
        let z = l + rng.r#gen::<f64>() * width;
        stats.evals += 1;
        stats.width_ratio_sum += (if z < z_prev { r - z } else { z - l }) / width;
        let log_p = log_unnormalized_z_conditional(
            z,
            n,
            y_n,
            &state.x,
            state.sigma_z2,
            state.sigma_w2,
            config,
        );
        if log_p >= log_u {
            return Ok((z, stats));
        }
        stats.rejections += 1;
        if z < z_prev {
            l = z;
        } else {
            r = z;
        }
        if slice.tau > 0.0 && log_p < log_u - slice.tau {
            let mid = 0.5 * (l + r);
            if mid < z_prev {
                l = mid;
            } else {
                r = mid;
            }
        }
    }
    Err(Error::MaxShrinkExceeded {
        n,
        max: slice.max_shrink_iters,
        width: r - l,
        log_level: log_u,
    })
}

/// Draws the coefficient vector from its Gaussian conditional.
pub fn sample_coefficients<R: Rng + ?Sized>(
    state: &ChainState,
    y: &DVector<f64>,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let h = build_h_matrix(&state.z, config)?;
    sample_coefficients_given_h(&h, y, state.sigma_x2, state.sigma_w2, rng)
}

/// As [`sample_coefficients`] with the observation matrix already built.
///
/// The conditional has precision `(H^T H + (sigma_w2/sigma_x2) I) /
/// sigma_w2` and precision-weighted mean `H^T y / sigma_w2`; the draw goes
/// through the precision factorization, never a covariance inverse.
fn sample_coefficients_given_h<R: Rng + ?Sized>(
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_x2: f64,
    sigma_w2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let k = h.ncols();
    let mut precision = h.transpose() * h;
    let ridge = sigma_w2 / sigma_x2;
    for i in 0..k {
        precision[(i, i)] += ridge;
    }
    precision /= sigma_w2;
    let b = h.transpose() * y / sigma_w2;
    sample_mvn_from_precision(&b, &precision, rng)
}

/// Conjugate posterior parameters for the coefficient variance.
pub fn posterior_x_params(hyper: &Hyperparams, x: &DVector<f64>) -> Result<InverseGammaParams> {
    InverseGammaParams::new(
        hyper.alpha_x + x.len() as f64 / 2.0,
        hyper.beta_x + x.norm_squared() / 2.0,
    )
}

/// Conjugate posterior parameters for the jitter variance.
pub fn posterior_z_params(hyper: &Hyperparams, z: &DVector<f64>) -> Result<InverseGammaParams> {
    InverseGammaParams::new(
        hyper.alpha_z + z.len() as f64 / 2.0,
        hyper.beta_z + z.norm_squared() / 2.0,
    )
}

/// Conjugate posterior parameters for the noise variance given the squared
/// residual norm `||y - H(z) x||^2` over `n` samples.
pub fn posterior_w_params(
    hyper: &Hyperparams,
    residual_ssq: f64,
    n: usize,
) -> Result<InverseGammaParams> {
    if !(residual_ssq >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "residual sum of squares must be nonnegative, got {residual_ssq}"
        )));
    }
    InverseGammaParams::new(
        hyper.alpha_w + n as f64 / 2.0,
        hyper.beta_w + residual_ssq / 2.0,
    )
}

/// Draws the three variances from their conjugate conditionals, in the
/// order coefficient, jitter, noise.
pub fn sample_variances<R: Rng + ?Sized>(
    state: &ChainState,
    y: &DVector<f64>,
    config: &ModelConfig,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<(f64, f64, f64)> {
    let h = build_h_matrix(&state.z, config)?;
    let residual_ssq = (y - &h * &state.x).norm_squared();
    let sx2 = sample_inverse_gamma(&posterior_x_params(hyper, &state.x)?, rng);
    let sz2 = sample_inverse_gamma(&posterior_z_params(hyper, &state.z)?, rng);
    let sw2 = sample_inverse_gamma(&posterior_w_params(hyper, residual_ssq, y.len())?, rng);
    Ok((sx2, sz2, sw2))
}

/// Values held fixed throughout a run; anything pinned is neither updated
/// nor consumes randomness.
#[derive(Debug, Clone, Default)]
pub struct GibbsPins {
    pub z: Option<DVector<f64>>,
    pub sigma_x2: Option<f64>,
    pub sigma_z2: Option<f64>,
    pub sigma_w2: Option<f64>,
}

/// Run-length and behavior knobs for one chain.
#[derive(Debug, Clone, Default)]
pub struct GibbsConfig {
    /// Draws averaged into the estimates, after burn-in.
    pub iterations: usize,
    /// Discarded prefix length.
    pub burn_in: usize,
    pub slice: SliceConfig,
    /// Starting state; the default initialization sets the jitter to zero,
    /// the coefficients to the no-jitter linear estimate, and every
    /// variance to its conventional starting value.
    pub init: Option<ChainState>,
    pub pins: GibbsPins,
    pub store_trace: bool,
}

impl GibbsConfig {
    pub fn new(iterations: usize, burn_in: usize) -> Self {
        Self {
            iterations,
            burn_in,
            ..Self::default()
        }
    }
}

/// Posterior-mean estimates from one chain, with the optional full trace.
#[derive(Debug, Clone)]
pub struct GibbsOutput {
    pub x_hat: DVector<f64>,
    pub z_hat: DVector<f64>,
    pub sigma_x2_hat: f64,
    pub sigma_z2_hat: f64,
    pub sigma_w2_hat: f64,
    pub trace: Option<Vec<ChainState>>,
    pub slice_stats: SliceStats,
}

/// Default starting variances.
pub const INIT_SIGMA_X2: f64 = 1.0;
pub const INIT_SIGMA_Z2: f64 = 0.01;
pub const INIT_SIGMA_W2: f64 = 0.01;

fn default_init(y: &DVector<f64>, config: &ModelConfig, hyper: &Hyperparams) -> Result<ChainState> {
    Ok(ChainState {
        x: lmmse_no_jitter(y, config, hyper)?,
        z: DVector::zeros(config.n()),
        sigma_x2: INIT_SIGMA_X2,
        sigma_z2: INIT_SIGMA_Z2,
        sigma_w2: INIT_SIGMA_W2,
        iteration: 0,
    })
}

/// Runs one Gibbs chain and averages iterations
/// `burn_in + 1 ..= burn_in + iterations` into posterior-mean estimates.
pub fn run_chain<R: Rng + ?Sized>(
    y: &DVector<f64>,
    config: &ModelConfig,
    hyper: &Hyperparams,
    gibbs: &GibbsConfig,
    rng: &mut R,
) -> Result<GibbsOutput> {
    gibbs.slice.validate()?;
    if gibbs.iterations == 0 {
        return Err(Error::InvalidParameter(
            "chain needs at least one averaged iteration".into(),
        ));
    }
    let n = config.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "y has {} entries, model expects {n}",
            y.len()
        )));
    }

    let mut state = match &gibbs.init {
        Some(s) => s.clone(),
        None => default_init(y, config, hyper)?,
    };
    let pins = &gibbs.pins;
    if let Some(z) = &pins.z {
        state.z = z.clone();
    }
    if let Some(v) = pins.sigma_x2 {
        state.sigma_x2 = v;
    }
    if let Some(v) = pins.sigma_z2 {
        state.sigma_z2 = v;
    }
    if let Some(v) = pins.sigma_w2 {
        state.sigma_w2 = v;
    }
    state.validate(config)?;

    let total = gibbs.burn_in + gibbs.iterations;
    let mut trace = gibbs.store_trace.then(|| Vec::with_capacity(total));
    let mut stats = SliceStats::default();
    let mut x_sum = DVector::zeros(config.k);
    let mut z_sum = DVector::zeros(n);
    let mut var_sums = [0.0f64; 3];

    for i in 1..=total {
        if pins.z.is_none() {
            for site in 0..n {
                let (z_new, s) = slice_sample_z(&state, site, y[site], config, &gibbs.slice, rng)?;
                state.z[site] = z_new;
                stats.absorb(&s);
            }
        }
        let h = build_h_matrix(&state.z, config)?;
        state.x = sample_coefficients_given_h(&h, y, state.sigma_x2, state.sigma_w2, rng)?;
        let residual_ssq = (y - &h * &state.x).norm_squared();
        if pins.sigma_x2.is_none() {
            state.sigma_x2 = sample_inverse_gamma(&posterior_x_params(hyper, &state.x)?, rng);
        }
        if pins.sigma_z2.is_none() {
            state.sigma_z2 = sample_inverse_gamma(&posterior_z_params(hyper, &state.z)?, rng);
        }
        if pins.sigma_w2.is_none() {
            state.sigma_w2 =
                sample_inverse_gamma(&posterior_w_params(hyper, residual_ssq, n)?, rng);
        }
        state.iteration = i;

        if i > gibbs.burn_in {
            x_sum += &state.x;
            z_sum += &state.z;
            var_sums[0] += state.sigma_x2;
            var_sums[1] += state.sigma_z2;
            var_sums[2] += state.sigma_w2;
        }
        if let Some(t) = trace.as_mut() {
            t.push(state.clone());
        }
    }

    let count = gibbs.iterations as f64;
    Ok(GibbsOutput {
        x_hat: x_sum / count,
        z_hat: z_sum / count,
        sigma_x2_hat: var_sums[0] / count,
        sigma_z2_hat: var_sums[1] / count,
        sigma_w2_hat: var_sums[2] / count,
        trace,
        slice_stats: stats,
    })
}

/// Named chain initializations for the initialization-sensitivity study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPreset {
    /// Zero coefficients and jitter, default variances.
    Zeros,
    /// No-jitter linear estimate for the coefficients, zero jitter, default
    /// variances.
    NoJitterLmmse,
    /// The generating values of the synthetic instance.
    Truth,
    /// Variances and jitter drawn from their priors, coefficients set to
    /// the fixed-jitter linear estimate under the drawn values.
    RandomPrior,
}

impl InitPreset {
    pub fn name(self) -> &'static str {
        match self {
            InitPreset::Zeros => "zeros",
            InitPreset::NoJitterLmmse => "lmmse0",
            InitPreset::Truth => "truth",
            InitPreset::RandomPrior => "random",
        }
    }
}

/// Builds a starting state for the given preset. `truth` is required by
/// [`InitPreset::Truth`]; the RNG is consumed only by
/// [`InitPreset::RandomPrior`].
pub fn preset_state<R: Rng + ?Sized>(
    preset: InitPreset,
    y: &DVector<f64>,
    truth: Option<&SyntheticInstance>,
    config: &ModelConfig,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<ChainState> {
    let n = config.n();
    let state = match preset {
        InitPreset::Zeros => ChainState {
            x: DVector::zeros(config.k),
            z: DVector::zeros(n),
            sigma_x2: INIT_SIGMA_X2,
            sigma_z2: INIT_SIGMA_Z2,
            sigma_w2: INIT_SIGMA_W2,
            iteration: 0,
        },
        InitPreset::NoJitterLmmse => default_init(y, config, hyper)?,
        InitPreset::Truth => {
            let inst = truth.ok_or_else(|| {
                Error::InvalidParameter("truth preset needs the synthetic instance".into())
            })?;
            ChainState {
                x: inst.x_true.clone(),
                z: inst.z_true.clone(),
                sigma_x2: inst.sigma_x2,
                sigma_z2: inst.sigma_z2,
                sigma_w2: inst.sigma_w2,
                iteration: 0,
            }
        }
        InitPreset::RandomPrior => {
            use rand_distr::StandardNormal;
            let sx2 =
                sample_inverse_gamma(&InverseGammaParams::new(hyper.alpha_x, hyper.beta_x)?, rng);
            let sz2 =
                sample_inverse_gamma(&InverseGammaParams::new(hyper.alpha_z, hyper.beta_z)?, rng);
            let sw2 =
                sample_inverse_gamma(&InverseGammaParams::new(hyper.alpha_w, hyper.beta_w)?, rng);
            let sz = sz2.sqrt();
            let z = DVector::from_fn(n, |_, _| sz * rng.sample::<f64, _>(StandardNormal));
            let x = crate::linear::lmmse_fixed_jitter(y, &z, sx2, sw2, config)?;
            ChainState {
                x,
                z,
                sigma_x2: sx2,
                sigma_z2: sz2,
                sigma_w2: sw2,
                iteration: 0,
            }
        }
    };
    state.validate(config)?;
    Ok(state)
}
