//! Experiment selection and the flat key-value configuration file.
//!
//! The file format is one `key = value` pair per line, `#` comments, and
//! nothing else. Unknown and duplicate keys are errors so typos fail fast
//! instead of silently running defaults.

use std::path::PathBuf;

use crate::quadrature::QuadSpec;
use crate::{Error, Result};

/// The five runnable experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ValidateLikelihood,
    Converge,
    InitSensitivity,
    Compare,
    Improve,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "validate-likelihood" => Ok(Self::ValidateLikelihood),
            "converge" => Ok(Self::Converge),
            "init-sensitivity" => Ok(Self::InitSensitivity),
            "compare" => Ok(Self::Compare),
            "improve" => Ok(Self::Improve),
            other => Err(Error::Config(format!(
                "unknown experiment {other:?}; expected validate-likelihood, \
                 converge, init-sensitivity, compare, or improve"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ValidateLikelihood => "validate-likelihood",
            Self::Converge => "converge",
            Self::InitSensitivity => "init-sensitivity",
            Self::Compare => "compare",
            Self::Improve => "improve",
        }
    }
}

/// How the EM estimator treats the variances in `compare`-style runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmMode {
    /// True per-instance variances (the simulation proxy).
    Known,
    /// Variances integrated under their priors.
    Random,
}

/// Fully resolved settings for one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub k: usize,
    /// Oversampling factors; one entry except for the `improve` sweep.
    pub m_list: Vec<usize>,
    /// Expected jitter variances, one sweep point each.
    pub e_sigma_z2: Vec<f64>,
    pub e_sigma_w2: f64,
    pub quad: QuadSpec,
    pub tau: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub mc_draws: usize,
    pub grid_points: usize,
    pub hist_bins: usize,
    pub em_mode: EmMode,
    pub emit_plotdata: bool,
}

/// Parsed-but-unresolved configuration: every field optional so command-line
/// overrides can land before defaults and validation.
#[derive(Debug, Clone, Default)]
pub struct ConfigDraft {
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub m_list: Option<Vec<usize>>,
    pub e_sigma_z2: Option<Vec<f64>>,
    pub e_sigma_w2: Option<f64>,
    pub j1: Option<usize>,
    pub j2: Option<usize>,
    pub j3: Option<usize>,
    pub legendre_half_width: Option<f64>,
    pub tau: Option<f64>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub chains: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mc_draws: Option<usize>,
    pub grid_points: Option<usize>,
    pub hist_bins: Option<usize>,
    pub em_mode: Option<EmMode>,
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|item| parse_scalar(key, item.trim()))
        .collect()
}

impl ConfigDraft {
    pub fn parse(text: &str) -> Result<Self> {
        let mut draft = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            match key {
                "k" => draft.k = Some(parse_scalar(key, value)?),
                "m" => draft.m = Some(parse_scalar(key, value)?),
                "m_list" => draft.m_list = Some(parse_list(key, value)?),
                "e_sigma_z2" => draft.e_sigma_z2 = Some(parse_list(key, value)?),
                "e_sigma_w2" => draft.e_sigma_w2 = Some(parse_scalar(key, value)?),
                "j1" => draft.j1 = Some(parse_scalar(key, value)?),
                "j2" => draft.j2 = Some(parse_scalar(key, value)?),
                "j3" => draft.j3 = Some(parse_scalar(key, value)?),
                "legendre_half_width" => {
                    draft.legendre_half_width = Some(parse_scalar(key, value)?)
                }
                "tau" => draft.tau = Some(parse_scalar(key, value)?),
                "iterations" => draft.iterations = Some(parse_scalar(key, value)?),
                "burn_in" => draft.burn_in = Some(parse_scalar(key, value)?),
                "chains" => draft.chains = Some(parse_scalar(key, value)?),
                "trials" => draft.trials = Some(parse_scalar(key, value)?),
                "seed" => draft.seed = Some(parse_scalar(key, value)?),
                "out" => draft.out = Some(PathBuf::from(value)),
                "mc_draws" => draft.mc_draws = Some(parse_scalar(key, value)?),
                "grid_points" => draft.grid_points = Some(parse_scalar(key, value)?),
                "hist_bins" => draft.hist_bins = Some(parse_scalar(key, value)?),
                "em_mode" => {
                    draft.em_mode = Some(match value {
                        "known" => EmMode::Known,
                        "random" => EmMode::Random,
                        other => {
                            return Err(Error::Config(format!(
                                "key em_mode: expected known or random, got {other:?}"
                            )))
                        }
                    })
                }
                other => return Err(Error::Config(format!("unknown key {other}"))),
            }
        }
        Ok(draft)
    }

    /// Restores the publication-scale workload knobs.
    pub fn apply_paper_scale(&mut self) {
        self.trials = Some(1000);
        self.chains = Some(100);
        self.mc_draws = Some(100_000);
    }

    /// Applies defaults and validates into a runnable configuration.
    pub fn build(self, experiment: ExperimentKind) -> Result<ExperimentConfig> {
        let k = self
            .k
            .ok_or_else(|| Error::Config("missing key k".into()))?;
        let m_list = match (self.m, self.m_list) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either m or m_list, not both".into()))
            }
            (Some(m), None) => vec![m],
            (None, Some(list)) => list,
            (None, None) => return Err(Error::Config("missing key m (or m_list)".into())),
        };
        let e_sigma_z2 = self
            .e_sigma_z2
            .ok_or_else(|| Error::Config("missing key e_sigma_z2".into()))?;
        let e_sigma_w2 = self
            .e_sigma_w2
            .ok_or_else(|| Error::Config("missing key e_sigma_w2".into()))?;
        let seed = self.seed.ok_or_else(|| {
            Error::Config("missing key seed (wall-clock seeding is not supported)".into())
        })?;

        let cfg = ExperimentConfig {
            experiment,
            k,
            m_list,
            e_sigma_z2,
            e_sigma_w2,
            quad: QuadSpec {
                j1: self.j1.unwrap_or(9),
                j2: self.j2.unwrap_or(9),
                j3: self.j3.unwrap_or(129),
                legendre_half_width: self
                    .legendre_half_width
                    .unwrap_or(crate::quadrature::DEFAULT_LEGENDRE_HALF_WIDTH),
            },
            tau: self.tau.unwrap_or(25.0),
            iterations: self.iterations.unwrap_or(500),
            burn_in: self.burn_in.unwrap_or(500),
            chains: self.chains.unwrap_or(20),
            trials: self.trials.unwrap_or(200),
            seed,
            out: self
                .out
                .unwrap_or_else(|| PathBuf::from(format!("{}.csv", experiment.name()))),
            mc_draws: self.mc_draws.unwrap_or(20_000),
            grid_points: self.grid_points.unwrap_or(200),
            hist_bins: self.hist_bins.unwrap_or(25),
            em_mode: self.em_mode.unwrap_or(EmMode::Known),
            emit_plotdata: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path, experiment: ExperimentKind) -> Result<Self> {
        ConfigDraft::parse(&std::fs::read_to_string(path)?)?.build(experiment)
    }

    pub fn from_str(text: &str, experiment: ExperimentKind) -> Result<Self> {
        ConfigDraft::parse(text)?.build(experiment)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.m_list.is_empty() || self.m_list.contains(&0) {
            return Err(Error::Config(
                "oversampling factors must be positive".into(),
            ));
        }
        if self.e_sigma_z2.is_empty() {
            return Err(Error::Config("e_sigma_z2 sweep list is empty".into()));
        }
        if self
            .e_sigma_z2
            .iter()
            .any(|&v| !(v > 0.0) || !v.is_finite())
        {
            return Err(Error::Config(
                "e_sigma_z2 values must be positive and finite".into(),
            ));
        }
        if !(self.e_sigma_w2 > 0.0) || !self.e_sigma_w2.is_finite() {
            return Err(Error::Config(
                "e_sigma_w2 must be positive and finite".into(),
            ));
        }
        self.quad.validate().map_err(|e| match e {
            Error::InvalidParameter(msg) => Error::Config(msg),
            other => other,
        })?;
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "tau must be nonnegative and finite, got {}",
                self.tau
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.mc_draws == 0 || self.grid_points < 2 || self.hist_bins == 0 {
            return Err(Error::Config(
                "mc_draws, grid_points, and hist_bins must be usable sizes".into(),
            ));
        }
        Ok(())
    }
}
