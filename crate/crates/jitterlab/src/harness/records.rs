//! Per-trial result rows, their CSV form, and sweep-point aggregation.

use std::io::Write;
use std::path::Path;

use crate::Result;

/// Header of every trial-level CSV.
pub const TRIAL_CSV_HEADER: &str =
    "trial,method,m,e_sigma_z,e_sigma_w,squared_error,wall_time_ms,seed,flags";

/// Two-sided 95% normal quantile used for every confidence interval.
pub const CI_Z: f64 = 1.96;

/// One estimator applied to one synthetic trial.
///
/// `squared_error` is the squared distance to the generating coefficients;
/// a failed estimator records NaN there with the failure in `flags`, so a
/// sweep never aborts on one bad trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: String,
    pub m: usize,
    /// Square root of the sweep point's expected jitter variance.
    pub e_sigma_z: f64,
    pub e_sigma_w: f64,
    pub squared_error: f64,
    pub wall_time_ms: f64,
    pub seed: u64,
    pub flags: String,
}

impl TrialRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{},{}",
            self.trial,
            self.method,
            self.m,
            self.e_sigma_z,
            self.e_sigma_w,
            self.squared_error,
            self.wall_time_ms,
            self.seed,
            self.flags
        )
    }
}

pub fn write_trial_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{TRIAL_CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_line())?;
    }
    out.flush()?;
    Ok(())
}

/// Mean squared error in decibels.
pub fn mse_db(mean_se: f64) -> f64 {
    10.0 * mean_se.log10()
}

/// Mean MSE and confidence interval of one (method, m, sweep point) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub m: usize,
    pub e_sigma_z: f64,
    pub trials: usize,
    pub mean_se: f64,
    pub mse_db: f64,
    pub ci_lo_db: f64,
    pub ci_hi_db: f64,
}

pub const AGGREGATE_CSV_HEADER: &str = "method,m,e_sigma_z,trials,mean_se,mse_db,ci_lo_db,ci_hi_db";

impl Aggregate {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.m,
            self.e_sigma_z,
            self.trials,
            self.mean_se,
            self.mse_db,
            self.ci_lo_db,
            self.ci_hi_db
        )
    }
}

/// Groups records by (method, m, sweep point) in first-appearance order and
/// summarizes each group with a normal-approximation 95% interval on the
/// mean squared error. Rows with non-finite errors (failed trials) are left
/// out of the statistics.
pub fn aggregate_records(records: &[TrialRecord]) -> Vec<Aggregate> {
    let mut groups: Vec<(String, usize, f64, Vec<f64>)> = Vec::new();
    for r in records {
        if !r.squared_error.is_finite() {
            continue;
        }
        let found = groups
            .iter_mut()
            .find(|(method, m, sz, _)| *method == r.method && *m == r.m && *sz == r.e_sigma_z);
        match found {
            Some((_, _, _, values)) => values.push(r.squared_error),
            None => groups.push((r.method.clone(), r.m, r.e_sigma_z, vec![r.squared_error])),
        }
    }
    groups
        .into_iter()
        .map(|(method, m, e_sigma_z, values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let half = if n > 1 {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                CI_Z * (var / n as f64).sqrt()
            } else {
                0.0
            };
            Aggregate {
                method,
                m,
                e_sigma_z,
                trials: n,
                mean_se: mean,
                mse_db: mse_db(mean),
                ci_lo_db: mse_db(mean - half),
                ci_hi_db: mse_db(mean + half),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{AGGREGATE_CSV_HEADER}")?;
    for a in aggregates {
        writeln!(out, "{}", a.csv_line())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(trial: usize, method: &str, se: f64) -> TrialRecord {
        TrialRecord {
            trial,
            method: method.into(),
            m: 4,
            e_sigma_z: 0.25,
            e_sigma_w: 0.1,
            squared_error: se,
            wall_time_ms: 1.25,
            seed: 7,
            flags: String::new(),
        }
    }

    #[test]
    fn csv_line_layout_is_stable() {
        let r = record(3, "gibbs", 0.5);
        assert_eq!(r.csv_line(), "3,gibbs,4,0.25,0.1,0.5,1.250,7,");
        assert_eq!(
            TRIAL_CSV_HEADER.split(',').count(),
            r.csv_line().split(',').count()
        );
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        let records = vec![
            record(0, "gibbs", 1.0),
            record(1, "gibbs", 3.0),
            record(0, "lmmse", 2.0),
            record(1, "gibbs", f64::NAN),
        ];
        let aggs = aggregate_records(&records);
        assert_eq!(aggs.len(), 2);
        let g = &aggs[0];
        assert_eq!(g.method, "gibbs");
        assert_eq!(g.trials, 2);
        assert_relative_eq!(g.mean_se, 2.0);
        // Sample sd of {1, 3} is sqrt(2); half-width 1.96 sqrt(2/2) = 1.96.
        assert_relative_eq!(g.mse_db, mse_db(2.0));
        assert_relative_eq!(g.ci_lo_db, mse_db(2.0 - 1.96), max_relative = 1e-12);
        assert_relative_eq!(g.ci_hi_db, mse_db(2.0 + 1.96), max_relative = 1e-12);
        assert_eq!(aggs[1].trials, 1);
        assert_eq!(aggs[1].ci_lo_db, aggs[1].mse_db);
    }

    #[test]
    fn csv_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let records = vec![record(0, "em", 0.125), record(1, "em", 0.25)];
        write_trial_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], TRIAL_CSV_HEADER);
        assert_eq!(lines[1], records[0].csv_line());
    }
}
