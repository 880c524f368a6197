//! Multivariate convergence diagnostics for parallel sampler chains.
//!
//! The potential scale reduction factor compares the within-chain covariance
//! `W` of the first `i` combined state vectors against the between-chain
//! covariance `B` of the chain means. As the chains forget their starting
//! points, `B` shrinks against `W` and the factor approaches one from above.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// One checkpoint of the diagnostics: the scale reduction factor and the
/// spectral norm root of the pooled covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsrfPoint {
    pub r_hat: f64,
    pub v_norm: f64,
}

/// Combined state vectors of several equally long chains.
#[derive(Debug, Clone)]
pub struct ChainTraces {
    chains: Vec<Vec<DVector<f64>>>,
    dim: usize,
}

impl ChainTraces {
    pub fn new(chains: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::InvalidParameter("no chains given".into()));
        }
        let len = chains[0].len();
        if len == 0 {
            return Err(Error::InvalidParameter("chains are empty".into()));
        }
        let dim = chains[0][0].len();
        for (c, chain) in chains.iter().enumerate() {
            if chain.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "chain {c} has {} iterations, chain 0 has {len}",
                    chain.len()
                )));
            }
            if chain.iter().any(|v| v.len() != dim) {
                return Err(Error::DimensionMismatch(format!(
                    "chain {c} mixes state dimensions (expected {dim})"
                )));
            }
        }
        Ok(Self { chains, dim })
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn iterations(&self) -> usize {
        self.chains[0].len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_window(&self, i: usize) -> Result<()> {
        if i < 2 {
            return Err(Error::InvalidParameter(format!(
                "covariances need at least two iterations, got {i}"
            )));
        }
        if i > self.iterations() {
            return Err(Error::InvalidParameter(format!(
                "window {i} exceeds stored {} iterations",
                self.iterations()
            )));
        }
        Ok(())
    }

    fn chain_means(&self, i: usize) -> Vec<DVector<f64>> {
        self.chains
            .iter()
            .map(|chain| {
                let mut m = DVector::zeros(self.dim);
                for v in &chain[..i] {
                    m += v;
                }
                m / i as f64
            })
            .collect()
    }

    /// Pooled within-chain covariance of the first `i` iterations.
    pub fn intra_chain_cov(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_window(i)?;
        let means = self.chain_means(i);
        let mut w = DMatrix::zeros(self.dim, self.dim);
        for (chain, mean) in self.chains.iter().zip(&means) {
            for v in &chain[..i] {
                let d = v - mean;
                w.syger(1.0, &d, &d, 1.0);
            }
        }
        let c = self.chain_count() as f64;
        w /= (i as f64 - 1.0) * c;
        fill_upper_from_lower(&mut w);
        Ok(w)
    }

    /// Covariance of the chain means over the first `i` iterations.
    pub fn inter_chain_cov(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_window(i)?;
        if self.chain_count() < 2 {
            return Err(Error::InvalidParameter(
                "between-chain covariance needs at least two chains".into(),
            ));
        }
        let means = self.chain_means(i);
        let mut grand = DVector::zeros(self.dim);
        for m in &means {
            grand += m;
        }
        grand /= self.chain_count() as f64;
        let mut b = DMatrix::zeros(self.dim, self.dim);
        for m in &means {
            let d = m - &grand;
            b.syger(1.0, &d, &d, 1.0);
        }
        b /= self.chain_count() as f64 - 1.0;
        fill_upper_from_lower(&mut b);
        Ok(b)
    }

    /// Scale reduction factor and pooled-covariance norm at iteration `i`.
    ///
    /// The factor is `(i-1)/i + ((C+1)/C) lambda_max(W^{-1} B)`. The
    /// solved system `W^{-1} B` is similar to the symmetric
    /// positive-semidefinite `L^{-1} B L^{-T}` (with `W = L L^T`), so its
    /// spectrum is real and nonnegative and the top eigenvalue comes from
    /// power iteration on that operator; a singular `W` gets a diagonal
    /// bump of `1e-12 trace(W)/dim` before factoring. `v_norm` is
    /// `||V||_2^{1/2}` for the pooled `V = ((i-1)/i) W + ((C+1)/C) B`.
    pub fn psrf(&self, i: usize) -> Result<PsrfPoint> {
        let w = self.intra_chain_cov(i)?;
        let b = self.inter_chain_cov(i)?;
        let d = self.dim;
        let chol = match w.clone().cholesky() {
            Some(c) => c,
            None => {
                let mut reg = w.clone();
                let bump = 1e-12 * w.trace() / d as f64;
                for j in 0..d {
                    reg[(j, j)] += bump;
                }
                reg.cholesky().ok_or(Error::CholeskyFailure {
                    context: "within-chain covariance",
                })?
            }
        };
        let l = chol.l();
        // lambda_max(W^{-1} B) is the top eigenvalue of the symmetric
        // L^{-1} B L^{-T}; the triangular solves cannot fail once the
        // Cholesky factorization has succeeded.
        let lambda = spectral_top(
            |v| {
                let mut t = v.clone();
                let _ = l.tr_solve_lower_triangular_mut(&mut t);
                let mut u = &b * t;
                let _ = l.solve_lower_triangular_mut(&mut u);
                u
            },
            d,
        );
        let cf = self.chain_count() as f64;
        let ifl = i as f64;
        let r_hat = (ifl - 1.0) / ifl + (cf + 1.0) / cf * lambda;

        let v_pooled = w * ((ifl - 1.0) / ifl) + &b * ((cf + 1.0) / cf);
        let v_top = spectral_top(|v| &v_pooled * v, d);
        Ok(PsrfPoint {
            r_hat,
            v_norm: v_top.sqrt(),
        })
    }
}

fn fill_upper_from_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Top eigenvalue of a symmetric positive-semidefinite operator by power
/// iteration, to 1e-8 relative tolerance. The start vector is a fixed
/// deterministic ramp, so results are reproducible.
fn spectral_top<F: Fn(&DVector<f64>) -> DVector<f64>>(apply: F, dim: usize) -> f64 {
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + 0.37 * (i % 5) as f64);
    v /= v.norm();
    let mut lambda_prev = f64::INFINITY;
    for _ in 0..10_000 {
        let w = apply(&v);
        let lambda = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 || lambda <= 0.0 {
            return 0.0;
        }
        if (lambda - lambda_prev).abs() <= 1e-8 * lambda.abs() {
            return lambda;
        }
        lambda_prev = lambda;
        v = w / norm;
    }
    lambda_prev
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn vecs(rows: &[&[f64]]) -> Vec<DVector<f64>> {
        rows.iter().map(|r| DVector::from_row_slice(r)).collect()
    }

    /// Naive two-pass reference for both covariances.
    fn reference_covs(chains: &[Vec<DVector<f64>>], i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = chains[0][0].len();
        let c = chains.len();
        let means: Vec<DVector<f64>> = chains
            .iter()
            .map(|ch| ch[..i].iter().sum::<DVector<f64>>() / i as f64)
            .collect();
        let mut w = DMatrix::zeros(d, d);
        for (ch, m) in chains.iter().zip(&means) {
            for v in &ch[..i] {
                let dv = v - m;
                w += &dv * dv.transpose();
            }
        }
        w /= ((i - 1) * c) as f64;
        let grand = means.iter().sum::<DVector<f64>>() / c as f64;
        let mut b = DMatrix::zeros(d, d);
        for m in &means {
            let dv = m - &grand;
            b += &dv * dv.transpose();
        }
        b /= (c - 1) as f64;
        (w, b)
    }

    #[test]
    fn covariances_match_naive_reference() {
        let chains = vec![
            vecs(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0], &[2.0, 2.0]]),
            vecs(&[&[-1.0, 1.0], &[2.0, 4.0], &[1.5, -2.0], &[0.0, 1.0]]),
            vecs(&[&[0.0, 0.0], &[1.0, 1.0], &[-2.0, 3.0], &[4.0, -4.0]]),
        ];
        let traces = ChainTraces::new(chains.clone()).unwrap();
        for i in [2, 3, 4] {
            let (w_ref, b_ref) = reference_covs(&chains, i);
            let w = traces.intra_chain_cov(i).unwrap();
            let b = traces.inter_chain_cov(i).unwrap();
            assert_relative_eq!((w - w_ref).amax(), 0.0, epsilon = 1e-13);
            assert_relative_eq!((b - b_ref).amax(), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn iid_chains_converge_to_unit_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6006);
        let (c, i, d) = (100, 2000, 3);
        let chains: Vec<Vec<DVector<f64>>> = (0..c)
            .map(|_| {
                (0..i)
                    .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            })
            .collect();
        let traces = ChainTraces::new(chains).unwrap();
        let p = traces.psrf(i).unwrap();
        assert!(p.r_hat >= 0.99 && p.r_hat <= 1.05, "r_hat {}", p.r_hat);
        // Pooled covariance of iid unit Gaussians is near the identity.
        assert_abs_diff_eq!(p.v_norm, 1.0, epsilon = 0.1);
        let w = traces.intra_chain_cov(i).unwrap();
        for a in 0..d {
            assert_abs_diff_eq!(w[(a, a)], 1.0, epsilon = 0.1);
        }
    }

    #[test]
    fn single_chain_intra_is_sample_covariance() {
        let chain = vecs(&[&[1.0, -2.0], &[0.0, 3.0], &[4.0, 1.0], &[-1.0, 0.5]]);
        let traces = ChainTraces::new(vec![chain.clone()]).unwrap();
        let (w_ref, _) = {
            let mean = chain.iter().sum::<DVector<f64>>() / 4.0;
            let mut w = DMatrix::zeros(2, 2);
            for v in &chain {
                let d = v - &mean;
                w += &d * d.transpose();
            }
            (w / 3.0, ())
        };
        let w = traces.intra_chain_cov(4).unwrap();
        assert_relative_eq!((w - w_ref).amax(), 0.0, epsilon = 1e-13);
        assert!(traces.inter_chain_cov(4).is_err());
        assert!(traces.psrf(4).is_err());
    }

    #[test]
    fn constant_chains_give_zero_intra_cov() {
        let c1 = vecs(&[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]]);
        let c2 = vecs(&[&[0.5, 4.0], &[0.5, 4.0], &[0.5, 4.0]]);
        let traces = ChainTraces::new(vec![c1, c2]).unwrap();
        let w = traces.intra_chain_cov(3).unwrap();
        assert_eq!(w.amax(), 0.0);
    }

    #[test]
    fn two_chain_between_cov_is_scaled_mean_gap() {
        let c1 = vecs(&[&[1.0, 0.0], &[3.0, 2.0]]);
        let c2 = vecs(&[&[0.0, 1.0], &[-2.0, 5.0]]);
        let traces = ChainTraces::new(vec![c1.clone(), c2.clone()]).unwrap();
        let m1 = (&c1[0] + &c1[1]) / 2.0;
        let m2 = (&c2[0] + &c2[1]) / 2.0;
        let gap = m1 - m2;
        let expected = &gap * gap.transpose() / 2.0;
        let b = traces.inter_chain_cov(2).unwrap();
        assert_relative_eq!((b - expected).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn factor_uses_the_largest_eigenvalue_of_the_solved_system() {
        // Strongly anisotropic within-chain spread makes W^{-1}B far from
        // normal: its top singular value then exceeds its top eigenvalue.
        // The factor must follow the eigenvalue, checked here against an
        // independent LU-solve plus dense eigensolver oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(4040);
        let (c, i, d) = (6usize, 40usize, 4usize);
        let scales = [1.0, 0.03, 0.7, 0.01];
        let offset = DVector::from_row_slice(&[0.04, 0.05, -0.03, 0.02]);
        let chains: Vec<Vec<DVector<f64>>> = (0..c)
            .map(|ci| {
                (0..i)
                    .map(|_| {
                        DVector::from_fn(d, |r, _| scales[r] * rng.sample::<f64, _>(StandardNormal))
                            + &offset * ci as f64
                    })
                    .collect()
            })
            .collect();
        let traces = ChainTraces::new(chains).unwrap();
        let p = traces.psrf(i).unwrap();
        let w = traces.intra_chain_cov(i).unwrap();
        let b = traces.inter_chain_cov(i).unwrap();
        let m = w.lu().solve(&b).unwrap();
        let lambda = m
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |a, e| a.max(e.re));
        let sigma = m
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .fold(0.0f64, |a, &s| a.max(s));
        assert!(
            sigma > 1.5 * lambda,
            "data must separate the two readings: sigma {sigma} lambda {lambda}"
        );
        let (cf, ifl) = (c as f64, i as f64);
        let expected = (ifl - 1.0) / ifl + (cf + 1.0) / cf * lambda;
        assert_relative_eq!(p.r_hat, expected, max_relative = 1e-6);
    }

    #[test]
    fn psrf_invariant_under_coordinate_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3030);
        let (c, i, d) = (4, 60, 5);
        let chains: Vec<Vec<DVector<f64>>> = (0..c)
            .map(|ci| {
                (0..i)
                    .map(|_| {
                        DVector::from_fn(d, |r, _| {
                            0.3 * ci as f64 * r as f64 + rng.sample::<f64, _>(StandardNormal)
                        })
                    })
                    .collect()
            })
            .collect();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<Vec<DVector<f64>>> = chains
            .iter()
            .map(|ch| {
                ch.iter()
                    .map(|v| DVector::from_fn(d, |r, _| v[perm[r]]))
                    .collect()
            })
            .collect();
        let p0 = ChainTraces::new(chains).unwrap().psrf(i).unwrap();
        let p1 = ChainTraces::new(permuted).unwrap().psrf(i).unwrap();
        assert_relative_eq!(p0.r_hat, p1.r_hat, max_relative = 1e-6);
        assert_relative_eq!(p0.v_norm, p1.v_norm, max_relative = 1e-6);
    }

    #[test]
    fn offset_chains_report_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8008);
        let (c, i, d) = (4, 500, 3);
        let chains: Vec<Vec<DVector<f64>>> = (0..c)
            .map(|ci| {
                (0..i)
                    .map(|_| {
                        DVector::from_fn(d, |_, _| {
                            5.0 * ci as f64 + rng.sample::<f64, _>(StandardNormal)
                        })
                    })
                    .collect()
            })
            .collect();
        let traces = ChainTraces::new(chains).unwrap();
        let p = traces.psrf(i).unwrap();
        assert!(p.r_hat > 10.0, "r_hat {}", p.r_hat);
    }

    #[test]
    fn identical_chains_collapse_between_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9009);
        let base: Vec<DVector<f64>> = (0..200)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let traces = ChainTraces::new(vec![base.clone(), base.clone(), base]).unwrap();
        let p = traces.psrf(200).unwrap();
        assert_relative_eq!(p.r_hat, 199.0 / 200.0, max_relative = 1e-10);
        // With B = 0 the pooled covariance is W alone (scaled).
        let w = traces.intra_chain_cov(200).unwrap();
        let top = (w * (199.0 / 200.0))
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        assert_relative_eq!(p.v_norm, top.sqrt(), max_relative = 1e-6);
    }

    #[test]
    fn constant_coordinate_is_regularized_not_fatal() {
        // A coordinate frozen within every chain but differing across
        // chains makes W singular while B is not; the diagonal bump keeps
        // the factor finite (and large).
        let mut rng = ChaCha8Rng::seed_from_u64(1010);
        let chains: Vec<Vec<DVector<f64>>> = (0..3)
            .map(|ci| {
                (0..50)
                    .map(|_| {
                        let mut v =
                            DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                        v[1] = ci as f64;
                        v
                    })
                    .collect()
            })
            .collect();
        let traces = ChainTraces::new(chains).unwrap();
        let p = traces.psrf(50).unwrap();
        assert!(p.r_hat.is_finite());
        assert!(p.r_hat > 100.0);
    }

    #[test]
    fn construction_and_window_validation() {
        assert!(ChainTraces::new(vec![]).is_err());
        let one = vecs(&[&[1.0], &[2.0]]);
        let short = vecs(&[&[1.0]]);
        assert!(ChainTraces::new(vec![one.clone(), short]).is_err());
        let skewed = vecs(&[&[1.0], &[2.0, 3.0]]);
        assert!(ChainTraces::new(vec![skewed]).is_err());
        let traces = ChainTraces::new(vec![one.clone(), one]).unwrap();
        assert!(traces.psrf(1).is_err());
        assert!(traces.psrf(3).is_err());
        assert!(traces.psrf(2).is_ok());
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(2020);
        let d = 12;
        let raw = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psd = &raw * raw.transpose();
        let top = spectral_top(|v| &psd * v, d);
        let dense_top = psd
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        assert_relative_eq!(top, dense_top, max_relative = 1e-6);
    }
}
