//! Jitter-tolerance improvement factors from MSE-versus-jitter curves.
//!
//! For a target MSE the baseline attains at jitter level `sigma_z0` and a
//! nonlinear method attains at `sigma_z1`, the ratio `sigma_z1 / sigma_z0`
//! measures how much more jitter the method tolerates. The factor reported
//! is the maximum ratio over all shared targets, interpolating both curves
//! piecewise linearly in (ln sigma_z, MSE dB) space, where the ratio is
//! piecewise linear in the target and therefore maximal at a breakpoint.

use super::records::mse_db;
use crate::{Error, Result};

/// Mean-MSE-versus-jitter curve of one method, held in dB over ln sigma_z.
#[derive(Debug, Clone)]
pub struct MseCurve {
    /// `(ln sigma_z, mse_db)`, ascending in sigma_z.
    points: Vec<(f64, f64)>,
}

impl MseCurve {
    /// Builds from `(sigma_z, mean squared error)` pairs in linear units.
    pub fn from_linear(points: &[(f64, f64)]) -> Result<Self> {
        Self::from_db(
            &points
                .iter()
                .map(|&(s, mse)| (s, mse_db(mse)))
                .collect::<Vec<_>>(),
        )
    }

    /// Builds from `(sigma_z, mse_db)` pairs.
    pub fn from_db(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "an MSE curve needs at least two points, got {}",
                points.len()
            )));
        }
        let mut out = Vec::with_capacity(points.len());
        let mut prev = f64::NEG_INFINITY;
        for &(s, db) in points {
            if !(s > 0.0) || !s.is_finite() || !db.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "curve point ({s}, {db}) is not usable"
                )));
            }
            if s.ln() <= prev {
                return Err(Error::InvalidParameter(
                    "curve sigma_z values must strictly ascend".into(),
                ));
            }
            prev = s.ln();
            out.push((prev, db));
        }
        Ok(Self { points: out })
    }

    /// Points restricted to `sigma_z >= sigma_min`, with an interpolated
    /// boundary point when the cut lands inside a segment.
    fn clipped(&self, sigma_min: f64) -> Result<Vec<(f64, f64)>> {
        let cut = sigma_min.ln();
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &(ls, db)) in self.points.iter().enumerate() {
            if ls >= cut {
                if out.is_empty() && i > 0 && ls > cut {
                    let (lp, dp) = self.points[i - 1];
                    let frac = (cut - lp) / (ls - lp);
                    out.push((cut, dp + frac * (db - dp)));
                }
                out.push((ls, db));
            }
        }
        if out.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "curve has fewer than two points at sigma_z >= {sigma_min}"
            )));
        }
        Ok(out)
    }
}

/// Largest `ln sigma_z` where the curve crosses the target dB level.
fn rightmost_crossing(points: &[(f64, f64)], target: f64) -> Option<f64> {
    for pair in points.windows(2).rev() {
        let (la, da) = pair[0];
        let (lb, db) = pair[1];
        if target < da.min(db) || target > da.max(db) {
            continue;
        }
        if da == db {
            return Some(lb);
        }
        let frac = (target - da) / (db - da);
        return Some(la + frac * (lb - la));
    }
    None
}

/// The maximum jitter-tolerance ratio of a method over a baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Improvement {
    pub factor: f64,
    /// The method's tolerated jitter level at the maximizing target.
    pub sigma_z_star: f64,
    /// True when one curve's range limited the comparable targets.
    pub clipped: bool,
}

/// Maximum over shared target MSE levels of the jitter ratio between
/// `method` and `baseline`, with both curves restricted to
/// `sigma_z >= sigma_z_min` to skip the flat low-jitter region.
pub fn improvement_factor(
    baseline: &MseCurve,
    method: &MseCurve,
    sigma_z_min: f64,
) -> Result<Improvement> {
    if !(sigma_z_min > 0.0) || !sigma_z_min.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma_z_min must be positive, got {sigma_z_min}"
        )));
    }
    let base = baseline.clipped(sigma_z_min)?;
    let meth = method.clipped(sigma_z_min)?;
    let range = |pts: &[(f64, f64)]| {
        pts.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &(_, d)| {
                (acc.0.min(d), acc.1.max(d))
            })
    };
    let (b_lo, b_hi) = range(&base);
    let (m_lo, m_hi) = range(&meth);
    let t_lo = b_lo.max(m_lo);
    let t_hi = b_hi.min(m_hi);
    if t_lo > t_hi {
        return Err(Error::InvalidParameter(
            "curves share no target MSE range".into(),
        ));
    }
    let clipped = t_lo > b_lo || t_hi < b_hi;

    let mut targets: Vec<f64> = base
        .iter()
        .chain(&meth)
        .map(|&(_, d)| d)
        .filter(|d| (t_lo..=t_hi).contains(d))
        .chain([t_lo, t_hi])
        .collect();
    targets.sort_by(|a, b| a.total_cmp(b));
    targets.dedup();

    let mut best: Option<(f64, f64)> = None;
    for t in targets {
        let (Some(ls0), Some(ls1)) = (rightmost_crossing(&base, t), rightmost_crossing(&meth, t))
        else {
            continue;
        };
        let log_ratio = ls1 - ls0;
        if best.is_none_or(|(b, _)| log_ratio > b) {
            best = Some((log_ratio, ls1));
        }
    }
    let (log_ratio, ls1) =
        best.ok_or_else(|| Error::InvalidParameter("no target level crosses both curves".into()))?;
    Ok(Improvement {
        factor: log_ratio.exp(),
        sigma_z_star: ls1.exp(),
        clipped,
    })
}
