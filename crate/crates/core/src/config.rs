//! Experiment configuration: a TOML file with `[model]`, `[decision]`,
//! `[optimizer]`, `[evaluation]` and `[run]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decisions::LossSpec;
use crate::error::{LcviError, Result};
use crate::optimize::{OptimizerConfig, Regime};

pub const CODE_VERSION: &str = concat!("lcvi ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    EightSchools {
        /// CSV with header `school,y,sigma`; the bundled data when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<PathBuf>,
    },
    /// Matrix factorization on a matrix cache written by `ingest`.
    Pmf {
        data: PathBuf,
        k: usize,
        #[serde(default = "default_sigma")]
        sigma_y: f64,
        #[serde(default = "default_sigma")]
        sigma_w: f64,
        #[serde(default = "default_sigma")]
        sigma_z: f64,
    },
    /// Matrix factorization on a generated low-rank matrix.
    SyntheticPmf {
        n_users: usize,
        n_items: usize,
        k: usize,
        #[serde(default = "default_sigma")]
        sigma_y: f64,
        #[serde(default = "default_sigma")]
        sigma_w: f64,
        #[serde(default = "default_sigma")]
        sigma_z: f64,
        k_true: usize,
        /// Standard deviation of the generating factors.
        factor_sd: f64,
        /// Noise standard deviation of the generated matrix.
        data_sigma_y: f64,
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_sigma() -> f64 {
    10.0
}

/// How the loss enters the calibrated bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// `u = M - l` with the linearized estimator.
    Linearized,
    /// `u = exp(-l / M)` with the naive estimator.
    Exponential,
    /// `u = exp(-(h - y)²)` with the naive estimator; requires the
    /// `exp_squared_complement` loss for evaluation.
    Native,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionConfig {
    pub loss: LossSpec,
    pub transform: Transform,
    /// Quantile of the standard-VI training losses used as `M`.
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    /// Factor applied to the empirical quantile.
    #[serde(default = "one")]
    pub m_multiplier: f64,
    /// Predictive draws per target when computing the calibration losses.
    #[serde(default = "default_calib_s_theta")]
    pub calib_s_theta: usize,
    #[serde(default = "default_calib_s_y")]
    pub calib_s_y: usize,
}

fn default_quantile() -> f64 {
    0.9
}
fn one() -> f64 {
    1.0
}
fn default_calib_s_theta() -> usize {
    100
}
fn default_calib_s_y() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub s_theta: usize,
    pub s_y: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { s_theta: 200, s_y: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Epochs of the standard-VI warm start; defaults to `optimizer.epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vi_epochs: Option<usize>,
    /// Write measured seconds into the trace; when false the column is `0`
    /// and traces are bit-reproducible.
    #[serde(default = "yes")]
    pub wall_clock: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub decision: DecisionConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LcviError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LcviError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LcviError::Config(e.to_string()))
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.model {
            ModelConfig::EightSchools { data: Some(p) } => fix(p),
            ModelConfig::Pmf { data, .. } => fix(data),
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(LcviError::Config("at least one seed is required".into()));
        }
        self.optimizer.validate()?;
        self.decision.loss.validate()?;
        let d = &self.decision;
        if !(d.quantile > 0.0 && d.quantile <= 1.0) {
            return Err(LcviError::Config(format!("quantile must lie in (0, 1], got {}", d.quantile)));
        }
        if !(d.m_multiplier > 0.0) {
            return Err(LcviError::Config("m_multiplier must be positive".into()));
        }
        if d.calib_s_theta == 0 || d.calib_s_y == 0 || self.evaluation.s_theta == 0 || self.evaluation.s_y == 0 {
            return Err(LcviError::Config("sample counts must be at least 1".into()));
        }
        if d.transform == Transform::Native && d.loss != LossSpec::ExpSquaredComplement {
            return Err(LcviError::Config(
                "the native transform is evaluated with the exp_squared_complement loss".into(),
            ));
        }
        if matches!(self.optimizer.regime, Regime::EmClosedForm) && !d.loss.has_closed_form() {
            return Err(LcviError::Config(format!(
                "em_closed_form needs a loss with a closed-form Bayes estimator, got {}",
                d.loss.name()
            )));
        }
        match &self.model {
            ModelConfig::EightSchools { .. } => {}
            ModelConfig::Pmf {
                k,
                sigma_y,
                sigma_w,
                sigma_z,
                ..
            } => check_pmf(*k, *sigma_y, *sigma_w, *sigma_z)?,
            ModelConfig::SyntheticPmf {
                n_users,
                n_items,
                k,
                k_true,
                sigma_y,
                sigma_w,
                sigma_z,
                factor_sd,
                data_sigma_y,
                ..
            } => {
                check_pmf(*k, *sigma_y, *sigma_w, *sigma_z)?;
                if *n_users == 0 || *n_items == 0 || *k_true == 0 {
                    return Err(LcviError::Config("synthetic matrix dimensions must be at least 1".into()));
                }
                if !(*factor_sd > 0.0) || !(*data_sigma_y >= 0.0) {
                    return Err(LcviError::Config("synthetic scales must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn vi_epochs(&self) -> usize {
        self.run.vi_epochs.unwrap_or(self.optimizer.epochs)
    }
}

fn check_pmf(k: usize, sy: f64, sw: f64, sz: f64) -> Result<()> {
    if k == 0 {
        return Err(LcviError::Config("k must be at least 1".into()));
    }
    if !(sy > 0.0 && sw > 0.0 && sz > 0.0) {
        return Err(LcviError::Config("PMF standard deviations must be positive".into()));
    }
    Ok(())
}
