//! Gauss quadrature rules and the quadrature approximation of the marginal
//! sample likelihood.
//!
//! Rules come from the Golub-Welsch construction: nodes are eigenvalues of
//! the symmetric tridiagonal Jacobi matrix of the weight function's monic
//! three-term recurrence, and each weight is the total weight mass times the
//! squared first component of the matching unit eigenvector.
//!
//! Expectations over an inverse-Gamma variance reduce to a generalized
//! Laguerre rule through the substitution `s = beta / x`, which maps the
//! inverse-Gamma density onto the weight `x^{alpha-1} e^{-x}` up to the
//! normalizer `Gamma(alpha)`. The transformed weights are built normalized
//! (unit mass) so the construction never evaluates `Gamma` at large shapes.
//!
//! Expectations over a zero-mean Gaussian jitter variable use one of two
//! rules: Gauss-Hermite when the expected jitter variance is small enough
//! that the integrand is effectively a polynomial times the Gaussian, and a
//! truncated Gauss-Legendre rule weighted by the Gaussian density otherwise,
//! where the generator's oscillations demand many nodes spread over several
//! standard deviations.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma;

use crate::model::{Hyperparams, ModelConfig};
use crate::{Error, Result};

/// Weight-function family a rule was built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    /// `exp(-x^2)` on the real line.
    Hermite,
    /// Unit weight on `[-1, 1]`.
    Legendre,
    /// `x^a exp(-x)` on `[0, inf)`.
    Laguerre { a: f64 },
    /// Inverse-Gamma density; nodes are variances, weights sum to one.
    InverseGamma { alpha: f64, beta: f64 },
}

/// Nodes and weights of one quadrature rule; nodes ascend.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: RuleKind,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weighted sum of `f` over the nodes.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Evaluates the orthonormal-polynomial ladder of a recurrence at `x`.
///
/// Returns the sum of squares of `p_0..p_{J-1}` (the reciprocal of the
/// Gauss weight at a node), together with `q = sqrt(b_J) p_J(x)` and its
/// derivative; the unknown `sqrt(b_J)` scale cancels in the Newton ratio
/// `q / q'`, so the end polynomial never needs the next recurrence term.
fn recurrence_ladder(diag: &[f64], offdiag_b: &[f64], total_mass: f64, x: f64) -> (f64, f64, f64) {
    let j = diag.len();
    let mut pkm1 = 0.0f64;
    let mut pk = 1.0 / total_mass.sqrt();
    let mut dkm1 = 0.0f64;
    let mut dk = 0.0f64;
    let mut sum = pk * pk;
    for k in 0..j - 1 {
        let rb_next = offdiag_b[k].sqrt();
        let rb_prev = if k == 0 { 0.0 } else { offdiag_b[k - 1].sqrt() };
        let pnext = ((x - diag[k]) * pk - rb_prev * pkm1) / rb_next;
        let dnext = ((x - diag[k]) * dk + pk - rb_prev * dkm1) / rb_next;
        pkm1 = pk;
        pk = pnext;
        dkm1 = dk;
        dk = dnext;
        sum += pk * pk;
    }
    let rb_prev = if j == 1 { 0.0 } else { offdiag_b[j - 2].sqrt() };
    let q = (x - diag[j - 1]) * pk - rb_prev * pkm1;
    let dq = (x - diag[j - 1]) * dk + pk - rb_prev * dkm1;
    (sum, q, dq)
}

/// Builds a rule from a monic three-term recurrence: `diag` holds the
/// recurrence centers, `offdiag` the square roots' squares, i.e. entry `j`
/// is `b_j` and the Jacobi matrix gets `sqrt(b_j)`. `total_mass` is the
/// integral of the weight function.
///
/// Nodes come from the Jacobi-matrix eigendecomposition and are then
/// polished by Newton steps on the end polynomial; weights come from the
/// Christoffel identity `w = 1 / sum_k p_k(x)^2` rather than the squared
/// first eigenvector component. The two weight forms are mathematically
/// identical, but the eigenvector component of a far-tail node is so small
/// that squaring it keeps only absolute accuracy, while the sum of squares
/// is all-positive and keeps full relative accuracy; high-degree moments
/// are dominated by exactly those tail nodes. Any node whose refinement
/// fails to produce finite values falls back to the eigendecomposition
/// result.
pub fn golub_welsch(
    diag: &[f64],
    offdiag_b: &[f64],
    total_mass: f64,
    kind: RuleKind,
) -> Result<QuadratureRule> {
    let j = diag.len();
    if j == 0 {
        return Err(Error::InvalidParameter(
            "quadrature rule needs at least one node".into(),
        ));
    }
    if offdiag_b.len() + 1 != j {
        return Err(Error::DimensionMismatch(format!(
            "recurrence has {} centers but {} off-diagonal terms",
            j,
            offdiag_b.len()
        )));
    }
    if !(total_mass > 0.0) || !total_mass.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "weight mass must be positive and finite, got {total_mass}"
        )));
    }
    if offdiag_b.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::InvalidParameter(
            "recurrence off-diagonal terms must be positive".into(),
        ));
    }

    let mut jacobi = DMatrix::zeros(j, j);
    for (i, &a) in diag.iter().enumerate() {
        jacobi[(i, i)] = a;
    }
    for (i, &b) in offdiag_b.iter().enumerate() {
        let r = b.sqrt();
        jacobi[(i, i + 1)] = r;
        jacobi[(i + 1, i)] = r;
    }

    let family = match kind {
        RuleKind::Hermite => "hermite",
        RuleKind::Legendre => "legendre",
        RuleKind::Laguerre { .. } => "laguerre",
        RuleKind::InverseGamma { .. } => "inverse-gamma",
    };
    let eigen = jacobi
        .symmetric_eigen_try(f64::EPSILON, 10_000)
        .ok_or(Error::EigenFailure { family, nodes: j })?;

    let mut pairs: Vec<(f64, f64)> = (0..j)
        .map(|i| {
            let v0 = eigen.eigenvectors[(0, i)];
            (eigen.eigenvalues[i], total_mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    for i in 0..j {
        let x0 = pairs[i].0;
        // Newton steps may not cross into a neighboring node's basin.
        let gap_lo = if i > 0 {
            x0 - pairs[i - 1].0
        } else {
            f64::INFINITY
        };
        let gap_hi = if i + 1 < j {
            pairs[i + 1].0 - x0
        } else {
            f64::INFINITY
        };
        let max_step = 0.5 * gap_lo.min(gap_hi);
        let mut x = x0;
        for _ in 0..3 {
            let (_, q, dq) = recurrence_ladder(diag, offdiag_b, total_mass, x);
            let step = q / dq;
            if !step.is_finite() || step.abs() > max_step {
                break;
            }
            x -= step;
            if step.abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
                break;
            }
        }
        let (sum, _, _) = recurrence_ladder(diag, offdiag_b, total_mass, x);
        let w = 1.0 / sum;
        if x.is_finite() && w.is_finite() && w > 0.0 {
            pairs[i] = (x, w);
        }
    }

    Ok(QuadratureRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
        kind,
    })
}

trait SymmetricEigenTry {
    fn symmetric_eigen_try(
        self,
        eps: f64,
        max_niter: usize,
    ) -> Option<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>>;
}

impl SymmetricEigenTry for DMatrix<f64> {
    fn symmetric_eigen_try(
        self,
        eps: f64,
        max_niter: usize,
    ) -> Option<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
        nalgebra::SymmetricEigen::try_new(self, eps, max_niter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum RuleKey {
    Hermite(usize),
    Legendre(usize),
    Laguerre(usize, u64),
    InverseGamma(usize, u64, u64),
}

fn rule_cache() -> &'static RwLock<HashMap<RuleKey, Arc<QuadratureRule>>> {
    static CACHE: OnceLock<RwLock<HashMap<RuleKey, Arc<QuadratureRule>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

fn cached_rule<F>(key: RuleKey, build: F) -> Result<Arc<QuadratureRule>>
where
    F: FnOnce() -> Result<QuadratureRule>,
{
    if let Some(rule) = rule_cache().read().expect("rule cache poisoned").get(&key) {
        return Ok(Arc::clone(rule));
    }
    let rule = Arc::new(build()?);
    let mut cache = rule_cache().write().expect("rule cache poisoned");
    Ok(Arc::clone(cache.entry(key).or_insert(rule)))
}

/// Gauss-Hermite rule for the weight `exp(-x^2)` on the real line.
pub fn hermite_rule(j: usize) -> Result<Arc<QuadratureRule>> {
    cached_rule(RuleKey::Hermite(j), || {
        let diag = vec![0.0; j];
        let offdiag: Vec<f64> = (1..j).map(|k| k as f64 / 2.0).collect();
        golub_welsch(
            &diag,
            &offdiag,
            std::f64::consts::PI.sqrt(),
            RuleKind::Hermite,
        )
    })
}

/// Gauss-Legendre rule for the unit weight on `[-1, 1]`.
pub fn legendre_rule(j: usize) -> Result<Arc<QuadratureRule>> {
    cached_rule(RuleKey::Legendre(j), || {
        let diag = vec![0.0; j];
        let offdiag: Vec<f64> = (1..j)
            .map(|k| {
                let kf = k as f64;
                kf * kf / (4.0 * kf * kf - 1.0)
            })
            .collect();
        golub_welsch(&diag, &offdiag, 2.0, RuleKind::Legendre)
    })
}

/// Generalized Gauss-Laguerre rule for the weight `x^a exp(-x)`, `a > -1`.
pub fn laguerre_rule(j: usize, a: f64) -> Result<Arc<QuadratureRule>> {
    if !(a > -1.0) || !a.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "generalized Laguerre weight needs a > -1, got {a}"
        )));
    }
    cached_rule(RuleKey::Laguerre(j, a.to_bits()), || {
        let diag: Vec<f64> = (0..j).map(|k| 2.0 * k as f64 + a + 1.0).collect();
        let offdiag: Vec<f64> = (1..j).map(|k| k as f64 * (k as f64 + a)).collect();
        let mass = gamma(a + 1.0);
        if !mass.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "weight mass Gamma({}) overflows; rule is unusable unnormalized",
                a + 1.0
            )));
        }
        golub_welsch(&diag, &offdiag, mass, RuleKind::Laguerre { a })
    })
}

/// Quadrature rule for expectations against an inverse-Gamma density.
///
/// Substituting `s = beta / x` turns the expectation into a generalized
/// Laguerre integral with `a = alpha - 1`. The rule is assembled with unit
/// mass directly, so weights sum to one and `Gamma(alpha)` never appears;
/// that keeps shapes in the hundreds usable. Nodes ascend after the flip.
pub fn inverse_gamma_rule(j: usize, alpha: f64, beta: f64) -> Result<Arc<QuadratureRule>> {
    if !(alpha > 0.0) || !(beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "inverse-Gamma rule needs positive finite parameters, got alpha={alpha}, beta={beta}"
        )));
    }
    let key = RuleKey::InverseGamma(j, alpha.to_bits(), beta.to_bits());
    cached_rule(key, || {
        let a = alpha - 1.0;
        let diag: Vec<f64> = (0..j).map(|k| 2.0 * k as f64 + a + 1.0).collect();
        let offdiag: Vec<f64> = (1..j).map(|k| k as f64 * (k as f64 + a)).collect();
        let base = golub_welsch(&diag, &offdiag, 1.0, RuleKind::Laguerre { a })?;
        // Large Laguerre nodes map to small variances; reverse to keep
        // nodes ascending.
        let mut pairs: Vec<(f64, f64)> = base
            .nodes
            .iter()
            .zip(&base.weights)
            .map(|(&x, &w)| (beta / x, w))
            .collect();
        pairs.reverse();
        Ok(QuadratureRule {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
            kind: RuleKind::InverseGamma { alpha, beta },
        })
    })
}

/// Expected jitter variance below which the Gaussian-jitter rule switches
/// from truncated Legendre to Hermite.
pub const HERMITE_BRANCH_THRESHOLD: f64 = 0.01;

/// Half-width of the truncated Legendre jitter rule, in jitter standard
/// deviations.
pub const DEFAULT_LEGENDRE_HALF_WIDTH: f64 = 6.0;

/// Rule for expectations of `f(z)` with `z ~ N(0, sigma_z2)`.
///
/// `e_sigma_z2` selects the branch: the prior-mean (or known) jitter
/// variance of the surrounding computation, not necessarily the conditioned
/// value `sigma_z2` itself, decides whether the integrand is tame enough for
/// Hermite.
pub fn jitter_rule(sigma_z2: f64, j3: usize, e_sigma_z2: f64) -> Result<QuadratureRule> {
    jitter_rule_with_half_width(sigma_z2, j3, e_sigma_z2, DEFAULT_LEGENDRE_HALF_WIDTH)
}

/// As [`jitter_rule`], with an explicit Legendre truncation half-width in
/// standard deviations.
pub fn jitter_rule_with_half_width(
    sigma_z2: f64,
    j3: usize,
    e_sigma_z2: f64,
    half_width: f64,
) -> Result<QuadratureRule> {
    if !(sigma_z2 > 0.0) || !sigma_z2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "jitter rule needs a positive variance, got {sigma_z2}"
        )));
    }
    if !(e_sigma_z2 > 0.0) || !e_sigma_z2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "jitter rule branch selector must be positive, got {e_sigma_z2}"
        )));
    }
    if !(half_width > 0.0) || !half_width.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "legendre half-width must be positive, got {half_width}"
        )));
    }
    let sigma = sigma_z2.sqrt();
    if e_sigma_z2 < HERMITE_BRANCH_THRESHOLD {
        let base = hermite_rule(j3)?;
        let scale = (2.0 * sigma_z2).sqrt();
        let inv_mass = 1.0 / std::f64::consts::PI.sqrt();
        Ok(QuadratureRule {
            nodes: base.nodes.iter().map(|&t| scale * t).collect(),
            weights: base.weights.iter().map(|&w| w * inv_mass).collect(),
            kind: RuleKind::Hermite,
        })
    } else {
        let base = legendre_rule(j3)?;
        let half = half_width * sigma;
        let nodes: Vec<f64> = base.nodes.iter().map(|&u| half * u).collect();
        let weights: Vec<f64> = base
            .weights
            .iter()
            .zip(&nodes)
            .map(|(&w, &z)| w * half * crate::distributions::log_normal_pdf(z, 0.0, sigma_z2).exp())
            .collect();
        Ok(QuadratureRule {
            nodes,
            weights,
            kind: RuleKind::Legendre,
        })
    }
}

/// Node counts (and the Legendre truncation width) for the three nested
/// quadratures: noise variance, jitter variance, jitter value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadSpec {
    pub j1: usize,
    pub j2: usize,
    pub j3: usize,
    pub legendre_half_width: f64,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self {
            j1: 9,
            j2: 9,
            j3: 129,
            legendre_half_width: DEFAULT_LEGENDRE_HALF_WIDTH,
        }
    }
}

impl QuadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.j1 == 0 || self.j2 == 0 || self.j3 == 0 {
            return Err(Error::InvalidParameter(format!(
                "quadrature sizes must be positive, got {}/{}/{}",
                self.j1, self.j2, self.j3
            )));
        }
        if !(self.legendre_half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "legendre half-width must be positive, got {}",
                self.legendre_half_width
            )));
        }
        Ok(())
    }
}

/// The two variance rules shared by the marginal likelihood, the linear
/// estimators, and EM: noise variance first, jitter variance second.
pub fn variance_rules(
    hyper: &Hyperparams,
    quad: &QuadSpec,
) -> Result<(Arc<QuadratureRule>, Arc<QuadratureRule>)> {
    quad.validate()?;
    let w_rule = inverse_gamma_rule(quad.j1, hyper.alpha_w, hyper.beta_w)?;
    let z_rule = inverse_gamma_rule(quad.j2, hyper.alpha_z, hyper.beta_z)?;
    Ok((w_rule, z_rule))
}

/// Precomputed triple-quadrature approximation of `p(y_n | x)` for one
/// sample index, reusable across many values of `y_n`.
///
/// Terms are grouped as `(mu, log w2 + log w3)` over the jitter nodes and
/// `(sigma_w2, log w1)` over the noise-variance nodes; an evaluation is one
/// streaming log-sum-exp over their product, so nothing is allocated per
/// call and ratios far beyond linear-domain f64 range survive.
#[derive(Debug, Clone)]
pub struct MarginalEvaluator {
    mean_terms: Vec<(f64, f64)>,
    noise_terms: Vec<(f64, f64)>,
}

impl MarginalEvaluator {
    pub fn new(
        x: &DVector<f64>,
        n: usize,
        hyper: &Hyperparams,
        config: &ModelConfig,
        quad: &QuadSpec,
    ) -> Result<Self> {
        if x.len() != config.k {
            return Err(Error::DimensionMismatch(format!(
                "x has {} entries, model expects {}",
                x.len(),
                config.k
            )));
        }
        if n >= config.n() {
            return Err(Error::InvalidParameter(format!(
                "sample index {n} out of range for {} samples",
                config.n()
            )));
        }
        let (w_rule, z_rule) = variance_rules(hyper, quad)?;
        let e_sigma_z2 = hyper.prior_mean_z2();

        let mut mean_terms = Vec::with_capacity(quad.j2 * quad.j3);
        for (&sz2, &w2) in z_rule.nodes.iter().zip(&z_rule.weights) {
            let inner =
                jitter_rule_with_half_width(sz2, quad.j3, e_sigma_z2, quad.legendre_half_width)?;
            let lw2 = w2.ln();
            for (&z, &w3) in inner.nodes.iter().zip(&inner.weights) {
                mean_terms.push((config.h_dot(n, z, x), lw2 + w3.ln()));
            }
        }
        let noise_terms = w_rule
            .nodes
            .iter()
            .zip(&w_rule.weights)
            .map(|(&sw2, &w1)| (sw2, w1.ln()))
            .collect();
        Ok(Self {
            mean_terms,
            noise_terms,
        })
    }

    /// Log of the approximate marginal density at `y_n`. Returns negative
    /// infinity only if every summand underflows.
    pub fn log_likelihood(&self, y_n: f64) -> f64 {
        // Streaming log-sum-exp: running max plus rescaled sum.
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &(sw2, lw1) in &self.noise_terms {
            let norm = -0.5 * (2.0 * std::f64::consts::PI * sw2).ln();
            let inv2 = 1.0 / (2.0 * sw2);
            for &(mu, lw23) in &self.mean_terms {
                let d = y_n - mu;
                let l = lw1 + lw23 + norm - d * d * inv2;
                if l <= max {
                    sum += (l - max).exp();
                } else {
                    sum = sum * (max - l).exp() + 1.0;
                    max = l;
                }
            }
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + sum.ln()
    }
}

/// Triple-quadrature approximation of `ln p(y_n | x)` for sample `n`.
pub fn marginal_log_likelihood(
    y_n: f64,
    x: &DVector<f64>,
    n: usize,
    hyper: &Hyperparams,
    config: &ModelConfig,
    quad: &QuadSpec,
) -> Result<f64> {
    let ev = MarginalEvaluator::new(x, n, hyper, config, quad)?;
    let l = ev.log_likelihood(y_n);
    if l == f64::NEG_INFINITY {
        return Err(Error::LikelihoodUnderflow { n });
    }
    Ok(l)
}

/// Linear-domain wrapper around [`marginal_log_likelihood`].
pub fn marginal_likelihood(
    y_n: f64,
    x: &DVector<f64>,
    n: usize,
    hyper: &Hyperparams,
    config: &ModelConfig,
    quad: &QuadSpec,
) -> Result<f64> {
    marginal_log_likelihood(y_n, x, n, hyper, config, quad).map(f64::exp)
}
