//! The five experiment drivers and their output files.
//!
//! Every random stream is derived from the master seed and the sweep
//! coordinates, so a run is reproducible byte for byte (wall-clock timings
//! aside) and any subset of trials reproduces its rows from the full run.
//! Work items run on a worker pool and are re-sorted into sweep order
//! before writing, so scheduling never changes the output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{EmMode, ExperimentConfig, ExperimentKind};
use super::improve::{improvement_factor, MseCurve};
use super::records::{
    aggregate_records, mse_db, write_aggregate_csv, write_trial_csv, Aggregate, TrialRecord,
};
use super::seed::{
    derive_seed, STREAM_GIBBS, STREAM_HISTOGRAM, STREAM_INIT, STREAM_SIGNAL, STREAM_SYNTH,
};
use crate::diagnostics::ChainTraces;
use crate::distributions::{sample_inverse_gamma, InverseGammaParams};
use crate::em::{em_iterate, EmConfig, VarianceMode};
use crate::linear::{lmmse_estimate, lmmse_no_jitter, LmmsePrecompute};
use crate::model::{
    hyperparams_from_expected, synthesize, Generator, Hyperparams, ModelConfig, SynthOverrides,
};
use crate::quadrature::{MarginalEvaluator, HERMITE_BRANCH_THRESHOLD};
use crate::sampler::{preset_state, run_chain, GibbsConfig, InitPreset, SliceConfig};
use crate::{Error, Result};

pub const METHOD_LMMSE0: &str = "lmmse0";
pub const METHOD_LMMSE: &str = "lmmse";
pub const METHOD_EM: &str = "em";
pub const METHOD_EM_RANDOM: &str = "em-random";
pub const METHOD_GIBBS: &str = "gibbs";

/// Iteration spacing of the diagnostics checkpoints.
pub const PSRF_CHECKPOINT_STEP: usize = 50;

/// One (oversampling, jitter-variance) grid point with its shared
/// precomputations.
struct SweepCell {
    m: usize,
    sigma_z2: f64,
    model: ModelConfig,
    hyper: Hyperparams,
    pre: LmmsePrecompute,
}

fn build_cells(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &m in &cfg.m_list {
        let model = ModelConfig::new(cfg.k, m, Generator::Sinc)?;
        for &sigma_z2 in &cfg.e_sigma_z2 {
            let hyper = hyperparams_from_expected(cfg.k, model.n(), sigma_z2, cfg.e_sigma_w2)?;
            let pre = LmmsePrecompute::build(&hyper, &model, &cfg.quad)?;
            cells.push(SweepCell {
                m,
                sigma_z2,
                model,
                hyper,
                pre,
            });
        }
    }
    Ok(cells)
}

fn trial_seed(cfg: &ExperimentConfig, m: usize, sigma_z2: f64, trial: usize) -> u64 {
    derive_seed(cfg.seed, &[m as u64, sigma_z2.to_bits(), trial as u64])
}

fn gibbs_config(cfg: &ExperimentConfig) -> GibbsConfig {
    GibbsConfig {
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        slice: SliceConfig {
            tau: cfg.tau,
            ..SliceConfig::default()
        },
        ..GibbsConfig::default()
    }
}

fn ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

/// Runs `body` over every (cell, trial) pair on the worker pool, returning
/// rows in deterministic (cell, trial) order.
fn run_grid<F>(cfg: &ExperimentConfig, cells: &[SweepCell], body: F) -> Result<Vec<TrialRecord>>
where
    F: Fn(&SweepCell, usize) -> Result<Vec<TrialRecord>> + Sync,
{
    let items: Vec<(usize, &SweepCell, usize)> = cells
        .iter()
        .flat_map(|cell| (0..cfg.trials).map(move |t| (cell, t)))
        .enumerate()
        .map(|(i, (cell, t))| (i, cell, t))
        .collect();
    let mut results: Vec<(usize, Vec<TrialRecord>)> = items
        .into_par_iter()
        .map(|(i, cell, trial)| body(cell, trial).map(|rows| (i, rows)))
        .collect::<Result<_>>()?;
    results.sort_by_key(|(i, _)| *i);
    Ok(results.into_iter().flat_map(|(_, rows)| rows).collect())
}

/// Runs the four standard estimators on one synthetic trial.
fn standard_trial(
    cfg: &ExperimentConfig,
    cell: &SweepCell,
    trial: usize,
) -> Result<Vec<TrialRecord>> {
    let seed = trial_seed(cfg, cell.m, cell.sigma_z2, trial);
    let inst = synthesize(
        &cell.model,
        &cell.hyper,
        &SynthOverrides::default(),
        derive_seed(seed, &[STREAM_SYNTH]),
    )?;
    let sigma_z = cell.sigma_z2.sqrt();
    let sigma_w = cfg.e_sigma_w2.sqrt();
    let row = |method: &str, elapsed_ms: f64, outcome: Result<DVector<f64>>, mut flags: String| {
        let squared_error = match &outcome {
            Ok(x) => (x - &inst.x_true).norm_squared(),
            Err(e) => {
                if !flags.is_empty() {
                    flags.push(';');
                }
                flags.push_str(&format!("error:{e}"));
                f64::NAN
            }
        };
        TrialRecord {
            trial,
            method: method.into(),
            m: cell.m,
            e_sigma_z: sigma_z,
            e_sigma_w: sigma_w,
            squared_error,
            wall_time_ms: elapsed_ms,
            seed,
            flags,
        }
    };

    let mut records = Vec::with_capacity(4);

    let t0 = Instant::now();
    let lmmse0 = lmmse_no_jitter(&inst.y, &cell.model, &cell.hyper);
    // EM starts from the no-jitter linear estimate; in the standard mode it
    // receives the instance's true variances.
    let x0 = match &lmmse0 {
        Ok(x) => x.clone(),
        Err(_) => DVector::zeros(cfg.k),
    };
    records.push(row(METHOD_LMMSE0, ms(t0), lmmse0, String::new()));

    let t0 = Instant::now();
    let lmmse = lmmse_estimate(&inst.y, &cell.pre);
    records.push(row(METHOD_LMMSE, ms(t0), lmmse, String::new()));

    let (mode, em_name) = match cfg.em_mode {
        EmMode::Known => (
            VarianceMode::Known {
                sigma_z2: inst.sigma_z2,
                sigma_w2: inst.sigma_w2,
            },
            METHOD_EM,
        ),
        EmMode::Random => (VarianceMode::Random, METHOD_EM_RANDOM),
    };
    let mut em_cfg = EmConfig::new(mode);
    em_cfg.quad = cfg.quad;
    let t0 = Instant::now();
    let (em_x, em_flags) = match em_iterate(&inst.y, &x0, &cell.hyper, &cell.model, &em_cfg) {
        Ok(out) => {
            let flags = if out.converged {
                String::new()
            } else {
                "nonconverged".to_string()
            };
            (Ok(out.x_hat), flags)
        }
        Err(e) => (Err(e), String::new()),
    };
    records.push(row(em_name, ms(t0), em_x, em_flags));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_GIBBS]));
    let t0 = Instant::now();
    let gibbs = run_chain(
        &inst.y,
        &cell.model,
        &cell.hyper,
        &gibbs_config(cfg),
        &mut rng,
    );
    records.push(row(
        METHOD_GIBBS,
        ms(t0),
        gibbs.map(|g| g.x_hat),
        String::new(),
    ));

    Ok(records)
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareOutput> {
    if cfg.m_list.len() != 1 {
        return Err(Error::Config(
            "compare sweeps jitter only; give a single m".into(),
        ));
    }
    let cells = build_cells(cfg)?;
    let records = run_grid(cfg, &cells, |cell, trial| standard_trial(cfg, cell, trial))?;
    let aggregates = aggregate_records(&records);
    Ok(CompareOutput {
        records,
        aggregates,
    })
}

/// Jitter-tolerance factor of one method at one oversampling, with interval
/// bounds from the MSE confidence band.
#[derive(Debug, Clone)]
pub struct FactorRow {
    pub m: usize,
    pub method: String,
    pub factor: f64,
    pub sigma_z_star: f64,
    pub factor_lo: f64,
    pub factor_hi: f64,
    pub clipped: bool,
}

pub const FACTOR_CSV_HEADER: &str = "m,method,factor,sigma_z_star,factor_lo,factor_hi,clipped";

impl FactorRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.m,
            self.method,
            self.factor,
            self.sigma_z_star,
            self.factor_lo,
            self.factor_hi,
            self.clipped
        )
    }
}

#[derive(Debug, Clone)]
pub struct ImproveOutput {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
    pub factors: Vec<FactorRow>,
}

pub fn run_improve(cfg: &ExperimentConfig) -> Result<ImproveOutput> {
    if cfg.e_sigma_z2.len() < 2 {
        return Err(Error::Config(
            "improve needs at least two e_sigma_z2 sweep points".into(),
        ));
    }
    let cells = build_cells(cfg)?;
    let records = run_grid(cfg, &cells, |cell, trial| standard_trial(cfg, cell, trial))?;
    let aggregates = aggregate_records(&records);
    let factors = improvement_rows(cfg, &aggregates)?;
    Ok(ImproveOutput {
        records,
        aggregates,
        factors,
    })
}

fn curve_points(
    aggregates: &[Aggregate],
    method: &str,
    m: usize,
    f: impl Fn(&Aggregate) -> f64,
) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = aggregates
        .iter()
        .filter(|a| a.method == method && a.m == m)
        .map(|a| (a.e_sigma_z, f(a)))
        .collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    pts
}

fn curve_factor(
    aggregates: &[Aggregate],
    baseline: &MseCurve,
    method: &str,
    m: usize,
    sigma_min: f64,
    f: impl Fn(&Aggregate) -> f64,
) -> f64 {
    let pts = curve_points(aggregates, method, m, f);
    if pts.iter().any(|&(_, d)| !d.is_finite()) {
        return f64::NAN;
    }
    MseCurve::from_db(&pts)
        .and_then(|c| improvement_factor(baseline, &c, sigma_min))
        .map(|i| i.factor)
        .unwrap_or(f64::NAN)
}

/// Factors for EM and Gibbs against the no-jitter baseline per oversampling
/// level. The interval bounds shift the method curve to its confidence
/// edges while the baseline stays at its mean, so `factor_lo` comes from
/// the method's pessimistic (high-MSE) curve.
fn improvement_rows(cfg: &ExperimentConfig, aggregates: &[Aggregate]) -> Result<Vec<FactorRow>> {
    let sigma_min = cfg.e_sigma_w2.sqrt() / 2.0;
    let em_name = match cfg.em_mode {
        EmMode::Known => METHOD_EM,
        EmMode::Random => METHOD_EM_RANDOM,
    };
    let mut rows = Vec::new();
    for &m in &cfg.m_list {
        let baseline =
            MseCurve::from_db(&curve_points(aggregates, METHOD_LMMSE0, m, |a| a.mse_db))?;
        for method in [em_name, METHOD_GIBBS] {
            let imp = improvement_factor(
                &baseline,
                &MseCurve::from_db(&curve_points(aggregates, method, m, |a| a.mse_db))?,
                sigma_min,
            )?;
            rows.push(FactorRow {
                m,
                method: method.to_string(),
                factor: imp.factor,
                sigma_z_star: imp.sigma_z_star,
                factor_lo: curve_factor(aggregates, &baseline, method, m, sigma_min, |a| {
                    a.ci_hi_db
                }),
                factor_hi: curve_factor(aggregates, &baseline, method, m, sigma_min, |a| {
                    a.ci_lo_db
                }),
                clipped: imp.clipped,
            });
        }
    }
    Ok(rows)
}

/// One metric value of the convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub iteration: usize,
    pub value: f64,
}

pub const CONVERGE_CSV_HEADER: &str = "metric,iteration,value";

#[derive(Debug, Clone)]
pub struct ConvergeOutput {
    /// Square root of the scale reduction factor at each checkpoint.
    pub psrf_sqrt: Vec<(usize, f64)>,
    /// Pooled-covariance norm root, normalized by its final value.
    pub vnorm_sqrt_normalized: Vec<(usize, f64)>,
    /// Mean squared error of the running average after `I` kept
    /// iterations, in dB relative to the final checkpoint.
    pub mse_vs_i_db: Vec<(usize, f64)>,
}

impl ConvergeOutput {
    pub fn rows(&self) -> Vec<MetricRow> {
        let tag = |metric, pairs: &[(usize, f64)]| {
            pairs
                .iter()
                .map(|&(iteration, value)| MetricRow {
                    metric,
                    iteration,
                    value,
                })
                .collect::<Vec<_>>()
        };
        let mut rows = tag("psrf_sqrt", &self.psrf_sqrt);
        rows.extend(tag("vnorm_sqrt_normalized", &self.vnorm_sqrt_normalized));
        rows.extend(tag("mse_vs_i_db", &self.mse_vs_i_db));
        rows
    }
}

fn mse_checkpoints(iterations: usize) -> Vec<usize> {
    let base = [1, 2, 5, 10, 20, 50, 100, 200, 350, 500, 750, 1000];
    let mut out: Vec<usize> = base.iter().copied().filter(|&i| i <= iterations).collect();
    if out.last() != Some(&iterations) {
        out.push(iterations);
    }
    out
}

pub fn run_converge(cfg: &ExperimentConfig) -> Result<ConvergeOutput> {
    if cfg.m_list.len() != 1 || cfg.e_sigma_z2.len() != 1 {
        return Err(Error::Config(
            "converge runs a single (m, e_sigma_z2) setting".into(),
        ));
    }
    if cfg.chains < 2 {
        return Err(Error::Config("converge needs at least two chains".into()));
    }
    let cells = build_cells(cfg)?;
    let cell = &cells[0];
    let total = cfg.burn_in + cfg.iterations;
    if total < PSRF_CHECKPOINT_STEP {
        return Err(Error::Config(format!(
            "converge needs at least {PSRF_CHECKPOINT_STEP} total iterations"
        )));
    }

    // Diagnostics: chains share one instance and one starting state (the
    // standard initialization), differing only in their random streams;
    // each keeps its full trace from the first iteration.
    let seed0 = trial_seed(cfg, cell.m, cell.sigma_z2, 0);
    let inst = synthesize(
        &cell.model,
        &cell.hyper,
        &SynthOverrides::default(),
        derive_seed(seed0, &[STREAM_SYNTH]),
    )?;
    let chain_traces: Vec<Vec<DVector<f64>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| -> Result<Vec<DVector<f64>>> {
            let mut gc = gibbs_config(cfg);
            gc.burn_in = 0;
            gc.iterations = total;
            gc.store_trace = true;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed0, &[STREAM_GIBBS, c as u64]));
            let out = run_chain(&inst.y, &cell.model, &cell.hyper, &gc, &mut rng)?;
            Ok(out
                .trace
                .expect("trace was requested")
                .iter()
                .map(|s| s.to_combined_vector())
                .collect())
        })
        .collect::<Result<_>>()?;
    let traces = ChainTraces::new(chain_traces)?;
    let mut psrf_sqrt = Vec::new();
    let mut vnorm = Vec::new();
    let mut i = PSRF_CHECKPOINT_STEP;
    while i <= total {
        let p = traces.psrf(i)?;
        psrf_sqrt.push((i, p.r_hat.sqrt()));
        vnorm.push((i, p.v_norm));
        i += PSRF_CHECKPOINT_STEP;
    }
    let v_final = vnorm.last().expect("at least one checkpoint").1;
    let vnorm_sqrt_normalized = vnorm.into_iter().map(|(i, v)| (i, v / v_final)).collect();

    // Estimate quality versus averaging length over fresh trials,
    // normalized to the final checkpoint.
    let checkpoints = mse_checkpoints(cfg.iterations);
    let per_trial: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<f64>> {
            let seed = trial_seed(cfg, cell.m, cell.sigma_z2, t);
            let inst = synthesize(
                &cell.model,
                &cell.hyper,
                &SynthOverrides::default(),
                derive_seed(seed, &[STREAM_SYNTH]),
            )?;
            let mut gc = gibbs_config(cfg);
            gc.store_trace = true;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_GIBBS]));
            let out = run_chain(&inst.y, &cell.model, &cell.hyper, &gc, &mut rng)?;
            let trace = out.trace.expect("trace was requested");
            let mut sum = DVector::zeros(cfg.k);
            let mut ses = Vec::with_capacity(checkpoints.len());
            let mut next = 0;
            for (j, state) in trace[cfg.burn_in..].iter().enumerate() {
                sum += &state.x;
                if next < checkpoints.len() && j + 1 == checkpoints[next] {
                    ses.push((&sum / (j + 1) as f64 - &inst.x_true).norm_squared());
                    next += 1;
                }
            }
            Ok(ses)
        })
        .collect::<Result<_>>()?;
    let trials = cfg.trials as f64;
    let final_mean: f64 = per_trial
        .iter()
        .map(|s| s[checkpoints.len() - 1])
        .sum::<f64>()
        / trials;
    let mse_vs_i_db = checkpoints
        .iter()
        .enumerate()
        .map(|(ci, &i)| {
            let mean: f64 = per_trial.iter().map(|s| s[ci]).sum::<f64>() / trials;
            (i, 10.0 * (mean / final_mean).log10())
        })
        .collect();

    Ok(ConvergeOutput {
        psrf_sqrt,
        vnorm_sqrt_normalized,
        mse_vs_i_db,
    })
}

/// Mean normalized squared error of one initialization preset, in dB
/// relative to the no-jitter-LMMSE-initialized run of the same trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetAggregate {
    pub method: String,
    pub m: usize,
    pub e_sigma_z: f64,
    pub mean_norm_db: f64,
}

pub const PRESET_AGGREGATE_CSV_HEADER: &str = "method,m,e_sigma_z,mean_norm_db";

#[derive(Debug, Clone)]
pub struct InitSensitivityOutput {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<PresetAggregate>,
}

/// The reference preset every other preset is normalized against.
pub const PRESET_REFERENCE: &str = "gibbs-lmmse0";

fn preset_list() -> Vec<(InitPreset, String)> {
    let mut presets = vec![
        (InitPreset::Zeros, "gibbs-zeros".to_string()),
        (InitPreset::NoJitterLmmse, PRESET_REFERENCE.to_string()),
        (InitPreset::Truth, "gibbs-truth".to_string()),
    ];
    for i in 1..=7 {
        presets.push((InitPreset::RandomPrior, format!("gibbs-random{i}")));
    }
    presets
}

pub fn run_init_sensitivity(cfg: &ExperimentConfig) -> Result<InitSensitivityOutput> {
    if cfg.m_list.len() != 1 {
        return Err(Error::Config(
            "init-sensitivity sweeps jitter only; give a single m".into(),
        ));
    }
    let cells = build_cells(cfg)?;
    let presets = preset_list();
    let records = run_grid(cfg, &cells, |cell, trial| {
        let seed = trial_seed(cfg, cell.m, cell.sigma_z2, trial);
        let inst = synthesize(
            &cell.model,
            &cell.hyper,
            &SynthOverrides::default(),
            derive_seed(seed, &[STREAM_SYNTH]),
        )?;
        let sigma_z = cell.sigma_z2.sqrt();
        let sigma_w = cfg.e_sigma_w2.sqrt();
        let mut rows = Vec::with_capacity(presets.len());
        for (p, (preset, name)) in presets.iter().enumerate() {
            let mut init_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_INIT, p as u64]));
            let init = preset_state(
                *preset,
                &inst.y,
                Some(&inst),
                &cell.model,
                &cell.hyper,
                &mut init_rng,
            )?;
            let mut gc = gibbs_config(cfg);
            gc.init = Some(init);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_GIBBS, p as u64]));
            let t0 = Instant::now();
            let (se, flags) = match run_chain(&inst.y, &cell.model, &cell.hyper, &gc, &mut rng) {
                Ok(out) => ((out.x_hat - &inst.x_true).norm_squared(), String::new()),
                Err(e) => (f64::NAN, format!("error:{e}")),
            };
            rows.push(TrialRecord {
                trial,
                method: name.clone(),
                m: cell.m,
                e_sigma_z: sigma_z,
                e_sigma_w: sigma_w,
                squared_error: se,
                wall_time_ms: ms(t0),
                seed,
                flags,
            });
        }
        Ok(rows)
    })?;
    let aggregates = preset_aggregates(&records);
    Ok(InitSensitivityOutput {
        records,
        aggregates,
    })
}

fn preset_aggregates(records: &[TrialRecord]) -> Vec<PresetAggregate> {
    use std::collections::HashMap;
    let mut refs: HashMap<(usize, u64, usize), f64> = HashMap::new();
    for r in records {
        if r.method == PRESET_REFERENCE && r.squared_error.is_finite() {
            refs.insert((r.m, r.e_sigma_z.to_bits(), r.trial), r.squared_error);
        }
    }
    let mut groups: Vec<(String, usize, f64, Vec<f64>)> = Vec::new();
    for r in records {
        let Some(&reference) = refs.get(&(r.m, r.e_sigma_z.to_bits(), r.trial)) else {
            continue;
        };
        if !r.squared_error.is_finite() || !(reference > 0.0) {
            continue;
        }
        let ratio = r.squared_error / reference;
        match groups
            .iter_mut()
            .find(|(name, m, sz, _)| name == &r.method && *m == r.m && *sz == r.e_sigma_z)
        {
            Some((_, _, _, v)) => v.push(ratio),
            None => groups.push((r.method.clone(), r.m, r.e_sigma_z, vec![ratio])),
        }
    }
    groups
        .into_iter()
        .map(|(method, m, e_sigma_z, v)| PresetAggregate {
            method,
            m,
            e_sigma_z,
            mean_norm_db: mse_db(v.iter().sum::<f64>() / v.len() as f64),
        })
        .collect()
}

/// Histogram-versus-quadrature comparison summary for one sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidateRow {
    pub n: usize,
    pub branch: &'static str,
    pub sup_rel_dev: f64,
    pub integral: f64,
}

/// One point of a quadrature density curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub n: usize,
    pub y: f64,
    pub quad_density: f64,
}

pub const VALIDATE_CSV_HEADER: &str = "n,branch,sup_rel_dev,integral";
pub const VALIDATE_CURVE_CSV_HEADER: &str = "n,y,quad_density";

#[derive(Debug, Clone)]
pub struct ValidateOutput {
    pub rows: Vec<ValidateRow>,
    pub curves: Vec<CurveRow>,
    pub worst_n: usize,
}

pub fn run_validate_likelihood(cfg: &ExperimentConfig) -> Result<ValidateOutput> {
    if cfg.m_list.len() != 1 || cfg.e_sigma_z2.len() != 1 {
        return Err(Error::Config(
            "validate-likelihood runs a single (m, e_sigma_z2) setting".into(),
        ));
    }
    let sigma_z2 = cfg.e_sigma_z2[0];
    let model = ModelConfig::new(cfg.k, cfg.m_list[0], Generator::Sinc)?;
    let hyper = hyperparams_from_expected(cfg.k, model.n(), sigma_z2, cfg.e_sigma_w2)?;
    let branch = if sigma_z2 < HERMITE_BRANCH_THRESHOLD {
        "hermite"
    } else {
        "legendre"
    };

    // One fixed signal for every draw; unit variance is the prior mean of
    // the coefficient variance.
    let mut x_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SIGNAL]));
    let x = DVector::from_fn(cfg.k, |_, _| x_rng.sample::<f64, _>(StandardNormal));

    let per_n: Vec<(ValidateRow, Vec<CurveRow>)> = (0..model.n())
        .into_par_iter()
        .map(|n| -> Result<(ValidateRow, Vec<CurveRow>)> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_HISTOGRAM, n as u64]));
            let z_prior = InverseGammaParams::new(hyper.alpha_z, hyper.beta_z)?;
            let w_prior = InverseGammaParams::new(hyper.alpha_w, hyper.beta_w)?;
            let mut draws = Vec::with_capacity(cfg.mc_draws);
            for _ in 0..cfg.mc_draws {
                let sz2 = sample_inverse_gamma(&z_prior, &mut rng);
                let sw2 = sample_inverse_gamma(&w_prior, &mut rng);
                let z = sz2.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let w = sw2.sqrt() * rng.sample::<f64, _>(StandardNormal);
                draws.push(model.h_dot(n, z, &x) + w);
            }
            let (lo, hi) = draws
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| {
                    (l.min(y), h.max(y))
                });
            let ev = MarginalEvaluator::new(&x, n, &hyper, &model, &cfg.quad)?;

            // Histogram density against the quadrature value at each bin
            // center, restricted to bins carrying real mass.
            let width = (hi - lo) / cfg.hist_bins as f64;
            let mut counts = vec![0usize; cfg.hist_bins];
            for &y in &draws {
                let b = (((y - lo) / width) as usize).min(cfg.hist_bins - 1);
                counts[b] += 1;
            }
            let hist: Vec<f64> = counts
                .iter()
                .map(|&c| c as f64 / (cfg.mc_draws as f64 * width))
                .collect();
            let max_hist = hist.iter().fold(0.0f64, |a, &b| a.max(b));
            // The histogram estimates the bin-averaged density, so the fair
            // comparison is the bin average of the quadrature density. The
            // density has structure down to the additive-noise scale, so
            // the composite Simpson step inside each bin resolves that
            // scale.
            let steps = ((width / (cfg.e_sigma_w2.sqrt() / 6.0)).ceil() as usize).clamp(8, 128);
            let steps = steps + steps % 2;
            let mut sup = 0.0f64;
            for (b, &h) in hist.iter().enumerate() {
                if h <= 0.1 * max_hist {
                    continue;
                }
                let left = lo + b as f64 * width;
                let dx = width / steps as f64;
                let mut simpson = 0.0;
                for s in 0..=steps {
                    let coeff = if s == 0 || s == steps {
                        1.0
                    } else if s % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    simpson += coeff * ev.log_likelihood(left + s as f64 * dx).exp();
                }
                let q = simpson * dx / (3.0 * width);
                sup = sup.max((q - h).abs() / h);
            }

            // Density curve on a padded grid; trapezoid normalization check.
            let span = hi - lo;
            let (glo, ghi) = (lo - 0.15 * span, hi + 0.15 * span);
            let step = (ghi - glo) / (cfg.grid_points - 1) as f64;
            let mut curves = Vec::with_capacity(cfg.grid_points);
            let mut integral = 0.0;
            let mut prev = 0.0;
            for g in 0..cfg.grid_points {
                let y = glo + g as f64 * step;
                let q = ev.log_likelihood(y).exp();
                if g > 0 {
                    integral += 0.5 * (q + prev) * step;
                }
                prev = q;
                curves.push(CurveRow {
                    n,
                    y,
                    quad_density: q,
                });
            }
            Ok((
                ValidateRow {
                    n,
                    branch,
                    sup_rel_dev: sup,
                    integral,
                },
                curves,
            ))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(per_n.len());
    let mut curves = Vec::new();
    for (row, c) in per_n {
        rows.push(row);
        curves.extend(c);
    }
    let worst_n = rows
        .iter()
        .max_by(|a, b| a.sup_rel_dev.total_cmp(&b.sup_rel_dev))
        .expect("at least one sample")
        .n;
    Ok(ValidateOutput {
        rows,
        curves,
        worst_n,
    })
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, header: &str, lines: I) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for line in lines {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn sibling_csv(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

/// Path of the aggregated plot table next to the main output.
pub fn plotdata_path(out: &Path) -> PathBuf {
    sibling_csv(out, "plot")
}

/// Path of the improvement-factor table next to the main output.
pub fn factors_path(out: &Path) -> PathBuf {
    sibling_csv(out, "factors")
}

/// Runs the configured experiment and writes its output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.experiment {
        ExperimentKind::Compare => {
            let out = run_compare(cfg)?;
            write_trial_csv(&cfg.out, &out.records)?;
            if cfg.emit_plotdata {
                write_aggregate_csv(&plotdata_path(&cfg.out), &out.aggregates)?;
            }
        }
        ExperimentKind::Improve => {
            let out = run_improve(cfg)?;
            write_trial_csv(&cfg.out, &out.records)?;
            write_lines(
                &factors_path(&cfg.out),
                FACTOR_CSV_HEADER,
                out.factors.iter().map(FactorRow::csv_line),
            )?;
            if cfg.emit_plotdata {
                write_aggregate_csv(&plotdata_path(&cfg.out), &out.aggregates)?;
            }
        }
        ExperimentKind::Converge => {
            let out = run_converge(cfg)?;
            write_lines(
                &cfg.out,
                CONVERGE_CSV_HEADER,
                out.rows()
                    .iter()
                    .map(|r| format!("{},{},{}", r.metric, r.iteration, r.value)),
            )?;
        }
        ExperimentKind::InitSensitivity => {
            let out = run_init_sensitivity(cfg)?;
            write_trial_csv(&cfg.out, &out.records)?;
            if cfg.emit_plotdata {
                write_lines(
                    &plotdata_path(&cfg.out),
                    PRESET_AGGREGATE_CSV_HEADER,
                    out.aggregates.iter().map(|a| {
                        format!("{},{},{},{}", a.method, a.m, a.e_sigma_z, a.mean_norm_db)
                    }),
                )?;
            }
        }
        ExperimentKind::ValidateLikelihood => {
            let out = run_validate_likelihood(cfg)?;
            write_lines(
                &cfg.out,
                VALIDATE_CSV_HEADER,
                out.rows
                    .iter()
                    .map(|r| format!("{},{},{},{}", r.n, r.branch, r.sup_rel_dev, r.integral)),
            )?;
            if cfg.emit_plotdata {
                write_lines(
                    &plotdata_path(&cfg.out),
                    VALIDATE_CURVE_CSV_HEADER,
                    out.curves
                        .iter()
                        .map(|c| format!("{},{},{}", c.n, c.y, c.quad_density)),
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: ExperimentKind, text: &str) -> ExperimentConfig {
        ExperimentConfig::from_str(text, kind).unwrap()
    }

    fn masked(records: &[TrialRecord]) -> Vec<TrialRecord> {
        records
            .iter()
            .map(|r| TrialRecord {
                wall_time_ms: 0.0,
                ..r.clone()
            })
            .collect()
    }

    const COMPARE_TEXT: &str = "\
k = 4
m = 2
e_sigma_z2 = 0.0625, 0.25
e_sigma_w2 = 0.01
j1 = 5
j2 = 5
j3 = 17
iterations = 40
burn_in = 20
trials = 3
seed = 11
";

    #[test]
    fn compare_is_deterministic_and_ordered() {
        let cfg = config(ExperimentKind::Compare, COMPARE_TEXT);
        let a = run_compare(&cfg).unwrap();
        let b = run_compare(&cfg).unwrap();
        assert_eq!(masked(&a.records), masked(&b.records));
        assert_eq!(a.records.len(), 2 * 3 * 4);
        let first: Vec<&str> = a.records[..4].iter().map(|r| r.method.as_str()).collect();
        assert_eq!(first, vec!["lmmse0", "lmmse", "em", "gibbs"]);
        assert!(a
            .records
            .iter()
            .all(|r| r.flags.is_empty() || r.flags == "nonconverged"));
        assert_eq!(a.aggregates.len(), 2 * 4);
    }

    #[test]
    fn trial_subsets_reproduce_their_rows() {
        let cfg3 = config(ExperimentKind::Compare, COMPARE_TEXT);
        let mut cfg2 = cfg3.clone();
        cfg2.trials = 2;
        let full = run_compare(&cfg3).unwrap();
        let sub = run_compare(&cfg2).unwrap();
        let filtered: Vec<TrialRecord> = full.records.into_iter().filter(|r| r.trial < 2).collect();
        assert_eq!(masked(&filtered), masked(&sub.records));
    }

    #[test]
    fn converge_covers_checkpoints_and_normalizes() {
        let cfg = config(
            ExperimentKind::Converge,
            "k = 4\nm = 2\ne_sigma_z2 = 0.0625\ne_sigma_w2 = 0.01\nj1 = 5\nj2 = 5\nj3 = 17\n\
             iterations = 60\nburn_in = 40\ntrials = 2\nchains = 3\nseed = 5\n",
        );
        let out = run_converge(&cfg).unwrap();
        let psrf_iters: Vec<usize> = out.psrf_sqrt.iter().map(|&(i, _)| i).collect();
        assert_eq!(psrf_iters, vec![50, 100]);
        assert!(out.psrf_sqrt.iter().all(|&(_, v)| v.is_finite() && v > 0.0));
        assert_eq!(out.vnorm_sqrt_normalized.last().unwrap().1, 1.0);
        let (last_i, last_db) = *out.mse_vs_i_db.last().unwrap();
        assert_eq!(last_i, 60);
        assert_eq!(last_db, 0.0);
        assert_eq!(
            out.mse_vs_i_db.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
            vec![1, 2, 5, 10, 20, 50, 60]
        );
    }

    #[test]
    fn init_sensitivity_reference_preset_is_zero_db() {
        let cfg = config(
            ExperimentKind::InitSensitivity,
            "k = 4\nm = 2\ne_sigma_z2 = 0.0625\ne_sigma_w2 = 0.01\nj1 = 5\nj2 = 5\nj3 = 17\n\
             iterations = 30\nburn_in = 15\ntrials = 2\nseed = 21\n",
        );
        let out = run_init_sensitivity(&cfg).unwrap();
        assert_eq!(out.records.len(), 2 * 10);
        let names: Vec<&str> = out.records[..10]
            .iter()
            .map(|r| r.method.as_str())
            .collect();
        assert_eq!(names[0], "gibbs-zeros");
        assert_eq!(names[1], PRESET_REFERENCE);
        assert_eq!(names[2], "gibbs-truth");
        assert_eq!(names[9], "gibbs-random7");
        let reference = out
            .aggregates
            .iter()
            .find(|a| a.method == PRESET_REFERENCE)
            .unwrap();
        assert_eq!(reference.mean_norm_db, 0.0);
        assert_eq!(out.aggregates.len(), 10);
    }

    #[test]
    fn validate_likelihood_densities_normalize() {
        let cfg = config(
            ExperimentKind::ValidateLikelihood,
            "k = 4\nm = 2\ne_sigma_z2 = 0.09\ne_sigma_w2 = 0.01\nj1 = 5\nj2 = 5\nj3 = 33\n\
             mc_draws = 4000\ngrid_points = 60\nhist_bins = 12\nseed = 31\n",
        );
        let out = run_validate_likelihood(&cfg).unwrap();
        assert_eq!(out.rows.len(), 8);
        for row in &out.rows {
            assert_eq!(row.branch, "legendre");
            assert!(row.sup_rel_dev.is_finite());
            assert!(
                (row.integral - 1.0).abs() < 0.05,
                "integral {} at n={}",
                row.integral,
                row.n
            );
        }
        assert_eq!(out.curves.len(), 8 * 60);
        assert!(out.rows.iter().any(|r| r.n == out.worst_n));
    }

    #[test]
    fn improve_emits_factor_rows() {
        let cfg = config(
            ExperimentKind::Improve,
            "k = 4\nm_list = 2\ne_sigma_z2 = 0.04, 0.09, 0.25\ne_sigma_w2 = 0.01\n\
             j1 = 5\nj2 = 5\nj3 = 17\niterations = 40\nburn_in = 20\ntrials = 6\nseed = 41\n",
        );
        let out = run_improve(&cfg).unwrap();
        assert_eq!(out.records.len(), 3 * 6 * 4);
        assert_eq!(out.factors.len(), 2);
        for f in &out.factors {
            assert_eq!(f.m, 2);
            assert!(
                f.factor.is_finite() && f.factor > 0.0,
                "factor {}",
                f.factor
            );
            assert!(f.sigma_z_star > 0.0);
        }
        assert_eq!(out.factors[0].method, METHOD_EM);
        assert_eq!(out.factors[1].method, METHOD_GIBBS);
    }

    #[test]
    fn run_experiment_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(ExperimentKind::Compare, COMPARE_TEXT);
        cfg.trials = 2;
        cfg.out = dir.path().join("compare.csv");
        cfg.emit_plotdata = true;
        run_experiment(&cfg).unwrap();
        let main = std::fs::read_to_string(&cfg.out).unwrap();
        assert!(main.starts_with(super::super::records::TRIAL_CSV_HEADER));
        assert_eq!(main.lines().count(), 1 + 2 * 2 * 4);
        let plot = std::fs::read_to_string(plotdata_path(&cfg.out)).unwrap();
        assert!(plot.starts_with(super::super::records::AGGREGATE_CSV_HEADER));
    }
}
