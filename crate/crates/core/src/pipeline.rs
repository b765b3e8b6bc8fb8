//! End-to-end experiment: per seed, a standard-VI warm start, calibration of
//! the robust maximum on its training losses, a loss-calibrated run from the
//! VI solution, and held-out risk of both approximations. Also sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::UtilityObjective;
use crate::config::{ExperimentConfig, ModelConfig, Transform, CODE_VERSION};
use crate::decisions::{calibration_losses, empirical_quantile_m, UtilitySpec};
use crate::error::{LcviError, Result};
use crate::evaluate::{evaluate_risk, mean_std, risk_reduction, RiskReport, RunTrace, TraceRow, TRACE_HEADER};
use crate::ingest::read_matrix_cache;
use crate::meanfield::VariationalParams;
use crate::models::SyntheticMatrix;
use crate::models::{EightSchools, EightSchoolsData, Model, Pmf, PmfPriors};
use crate::optimize::{run_em, run_joint_lcvi, run_standard_vi, FitResult, OptimizerConfig, Regime};
use crate::reparam::RngState;

const KEY_VI: u64 = 11;
const KEY_CALIBRATION: u64 = 12;
const KEY_LCVI: u64 = 13;
const KEY_EVALUATION: u64 = 14;

pub enum LoadedModel {
    EightSchools(EightSchools<f64>),
    Pmf(Pmf<f64>),
}

impl LoadedModel {
    pub fn as_model(&self) -> &dyn Model<f64> {
        match self {
            LoadedModel::EightSchools(m) => m,
            LoadedModel::Pmf(m) => m,
        }
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<LoadedModel> {
    Ok(match cfg {
        ModelConfig::EightSchools { data } => {
            let data = match data {
                Some(p) => EightSchoolsData::from_csv_path(p)?,
                None => EightSchoolsData::canonical(),
            };
            LoadedModel::EightSchools(EightSchools::new(data))
        }
        ModelConfig::Pmf {
            data,
            k,
            sigma_y,
            sigma_w,
            sigma_z,
        } => {
            let matrix = read_matrix_cache(data)?;
            let priors = PmfPriors {
                sigma_y: *sigma_y,
                sigma_w: *sigma_w,
                sigma_z: *sigma_z,
            };
            LoadedModel::Pmf(Pmf::new(matrix.data, *k, priors)?)
        }
        ModelConfig::SyntheticPmf {
            n_users,
            n_items,
            k,
            sigma_y,
            sigma_w,
            sigma_z,
            k_true,
            factor_sd,
            data_sigma_y,
            data_seed,
        } => {
            let data = SyntheticMatrix {
                n_users: *n_users,
                n_items: *n_items,
                k_true: *k_true,
                factor_sd: *factor_sd,
                sigma_y: *data_sigma_y,
            }
            .generate(*data_seed)?;
            let priors = PmfPriors {
                sigma_y: *sigma_y,
                sigma_w: *sigma_w,
                sigma_z: *sigma_z,
            };
            LoadedModel::Pmf(Pmf::new(data, *k, priors)?)
        }
    })
}

fn derived_seed(seed: u64, key: u64) -> u64 {
    RngState::seed(seed).split(key).seed_value()
}

/// Everything produced for one seed.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Robust maximum used by the calibrated run; absent for standard VI.
    pub m: Option<f64>,
    pub er_vi: f64,
    pub er_lcvi: f64,
    pub improvement: f64,
    pub per_target_losses: Vec<f64>,
    pub vi_seconds: f64,
    pub lcvi_seconds: f64,
    pub lambda_vi: VariationalParams<f64>,
    pub lambda_lcvi: VariationalParams<f64>,
    /// VI rows followed by the calibrated run's rows, epochs continuing.
    pub trace: RunTrace,
}

/// The objective implied by the decision block for robust maximum `m`.
pub fn objective_for(cfg: &ExperimentConfig, m: f64) -> Result<UtilityObjective> {
    let loss = cfg.decision.loss;
    Ok(match cfg.decision.transform {
        Transform::Linearized => UtilityObjective::Linearized { loss, m },
        Transform::Exponential => UtilityObjective::naive(UtilitySpec::ExpTransform { gamma: 1.0 / m, loss }),
        Transform::Native => UtilityObjective::naive(UtilitySpec::NativeExpSquared),
    })
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

/// The standard-VI warm start of one seed. Its variational parameters do not
/// depend on the decision block, so it can be shared between configs that
/// differ only there.
#[derive(Clone, Debug)]
pub struct ViStage {
    pub seed: u64,
    pub fit: FitResult<f64>,
    pub seconds: f64,
    pub epochs: usize,
}

pub fn run_vi_stage(cfg: &ExperimentConfig, model: &dyn Model<f64>, seed: u64) -> Result<ViStage> {
    let vi_cfg = OptimizerConfig {
        regime: Regime::StandardVi,
        epochs: cfg.vi_epochs(),
        seed: derived_seed(seed, KEY_VI),
        ..cfg.optimizer.clone()
    };
    let t0 = Instant::now();
    let fit = stage("standard_vi", run_standard_vi(model, &vi_cfg, None, Some(&cfg.decision.loss)))?;
    Ok(ViStage {
        seed,
        fit,
        seconds: t0.elapsed().as_secs_f64(),
        epochs: vi_cfg.epochs,
    })
}

/// Runs the whole procedure for one seed without touching the filesystem.
pub fn run_seed(cfg: &ExperimentConfig, model: &dyn Model<f64>, seed: u64) -> Result<SeedOutcome> {
    let vi = run_vi_stage(cfg, model, seed)?;
    run_seed_from_vi(cfg, model, &vi)
}

/// Everything after the warm start: calibration, the calibrated run and evaluation.
pub fn run_seed_from_vi(cfg: &ExperimentConfig, model: &dyn Model<f64>, vi_stage: &ViStage) -> Result<SeedOutcome> {
    let seed = vi_stage.seed;
    let loss = cfg.decision.loss;
    let vi = vi_stage.fit.clone();
    let vi_seconds = vi_stage.seconds;
    let eval_rng = RngState::seed(derived_seed(seed, KEY_EVALUATION));
    let (s_theta, s_y) = (cfg.evaluation.s_theta, cfg.evaluation.s_y);
    let eval_vi = stage(
        "evaluate",
        evaluate_risk(model, &vi.lambda, &loss, s_theta, s_y, &mut eval_rng.clone()),
    )?;

    if cfg.optimizer.regime == Regime::StandardVi {
        return Ok(SeedOutcome {
            seed,
            m: None,
            er_vi: eval_vi.risk,
            er_lcvi: eval_vi.risk,
            improvement: 0.0,
            per_target_losses: eval_vi.per_target_losses,
            vi_seconds,
            lcvi_seconds: 0.0,
            lambda_lcvi: vi.lambda.clone(),
            lambda_vi: vi.lambda,
            trace: vi.trace,
        });
    }

    let mut calib_rng = RngState::seed(derived_seed(seed, KEY_CALIBRATION));
    let m = stage("calibrate", {
        let d = &cfg.decision;
        calibration_losses(model, &vi.lambda, &loss, d.calib_s_theta, d.calib_s_y, &mut calib_rng)
            .and_then(|losses| empirical_quantile_m(&losses, d.quantile))
            .and_then(|mq| {
                let m = mq * d.m_multiplier;
                if m > 0.0 {
                    Ok(m)
                } else {
                    Err(LcviError::InvalidParameter(format!(
                        "robust maximum {m} is not positive; training losses at quantile {} vanish",
                        d.quantile
                    )))
                }
            })
    })?;
    let objective = stage("calibrate", objective_for(cfg, m))?;

    let lcvi_cfg = OptimizerConfig {
        seed: derived_seed(seed, KEY_LCVI),
        ..cfg.optimizer.clone()
    };
    let init = vi.lambda.clone();
    let t1 = Instant::now();
    let fit = stage(
        "lcvi",
        match cfg.optimizer.regime {
            Regime::JointLcvi => run_joint_lcvi(model, &lcvi_cfg, &objective, init, Some(&loss)),
            Regime::EmClosedForm => run_em(model, &lcvi_cfg, &objective, true, init, Some(&loss)),
            Regime::EmNumerical => run_em(model, &lcvi_cfg, &objective, false, init, Some(&loss)),
            Regime::StandardVi => unreachable!("handled above"),
        },
    )?;
    let lcvi_seconds = t1.elapsed().as_secs_f64();

    let eval_lcvi = stage(
        "evaluate",
        evaluate_risk(model, &fit.lambda, &loss, s_theta, s_y, &mut eval_rng.clone()),
    )?;
    let improvement = stage("evaluate", risk_reduction(eval_vi.risk, eval_lcvi.risk))?;

    let mut trace = vi.trace;
    let offset = vi_stage.epochs;
    for row in fit.trace.rows {
        trace.push(TraceRow {
            epoch: row.epoch + offset,
            wall_seconds: row.wall_seconds + vi_seconds,
            ..row
        })?;
    }
    Ok(SeedOutcome {
        seed,
        m: Some(m),
        er_vi: eval_vi.risk,
        er_lcvi: eval_lcvi.risk,
        improvement,
        per_target_losses: eval_lcvi.per_target_losses,
        vi_seconds,
        lcvi_seconds,
        lambda_vi: vi.lambda,
        lambda_lcvi: fit.lambda,
        trace,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub m: Option<f64>,
    pub er_vi: f64,
    pub er_lcvi: f64,
    pub improvement: f64,
    pub vi_seconds: f64,
    pub lcvi_seconds: f64,
    pub trace_file: String,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Means over seeds; `per_target_losses` are the calibrated run's,
    /// averaged over seeds.
    pub report: RiskReport,
    pub improvement_std: f64,
    pub mean_lcvi_seconds: f64,
    pub per_seed: Vec<SeedSummary>,
}

pub struct PipelineResult {
    pub report: PipelineReport,
    pub outcomes: Vec<SeedOutcome>,
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

fn echo_lines(cfg: &ExperimentConfig) -> Result<String> {
    let mut s = format!("# {CODE_VERSION}\n");
    for line in cfg.to_toml()?.lines().filter(|l| !l.trim().is_empty()) {
        let _ = writeln!(s, "# config {line}");
    }
    Ok(s)
}

/// Trace CSV text: config echo as `#` comments, then the trace table.
pub fn render_trace(cfg: &ExperimentConfig, seed: u64, trace: &RunTrace) -> Result<String> {
    let mut out = echo_lines(cfg)?;
    let _ = writeln!(out, "# seed {seed}");
    let mut t = trace.clone();
    if !cfg.run.wall_clock {
        t.rows.iter_mut().for_each(|r| r.wall_seconds = 0.0);
    }
    let mut buf = Vec::new();
    t.write_csv(&mut buf)?;
    out.push_str(std::str::from_utf8(&buf).expect("ascii trace"));
    Ok(out)
}

fn summarize(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Result<PipelineReport> {
    let n = outcomes.len();
    let avg = |f: &dyn Fn(&SeedOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n as f64;
    let improvements: Vec<f64> = outcomes.iter().map(|o| o.improvement).collect();
    let (mean_improvement, improvement_std) = mean_std(&improvements);
    let n_targets = outcomes[0].per_target_losses.len();
    let per_target = (0..n_targets)
        .map(|t| outcomes.iter().map(|o| o.per_target_losses[t]).sum::<f64>() / n as f64)
        .collect();
    let clock = |x: f64| if cfg.run.wall_clock { x } else { 0.0 };
    Ok(PipelineReport {
        code_version: CODE_VERSION.to_string(),
        config: cfg.clone(),
        seeds: cfg.run.seeds.clone(),
        report: RiskReport {
            er_vi: avg(&|o| o.er_vi),
            er_lcvi: avg(&|o| o.er_lcvi),
            improvement: mean_improvement,
            per_target_losses: per_target,
            seed_count: n,
        },
        improvement_std,
        mean_lcvi_seconds: clock(avg(&|o| o.lcvi_seconds)),
        per_seed: outcomes
            .iter()
            .map(|o| SeedSummary {
                seed: o.seed,
                m: o.m,
                er_vi: o.er_vi,
                er_lcvi: o.er_lcvi,
                improvement: o.improvement,
                vi_seconds: clock(o.vi_seconds),
                lcvi_seconds: clock(o.lcvi_seconds),
                trace_file: trace_file_name(o.seed),
            })
            .collect(),
    })
}

fn render_summary(cfg: &ExperimentConfig, report: &PipelineReport) -> Result<String> {
    let mut out = echo_lines(cfg)?;
    out.push_str("seed,m,er_vi,er_lcvi,improvement,vi_seconds,lcvi_seconds\n");
    for s in &report.per_seed {
        let m = s.m.map(|m| format!("{m:e}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{m},{:e},{:e},{:e},{:e},{:e}",
            s.seed, s.er_vi, s.er_lcvi, s.improvement, s.vi_seconds, s.lcvi_seconds
        );
    }
    let r = &report.report;
    let _ = writeln!(
        out,
        "mean,,{:e},{:e},{:e},,{:e}",
        r.er_vi, r.er_lcvi, r.improvement, report.mean_lcvi_seconds
    );
    let _ = writeln!(out, "std,,,,{:e},,", report.improvement_std);
    Ok(out)
}

/// Runs every seed and writes `trace_seed<N>.csv` per seed, `summary.csv`
/// and `report.json` into `run.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    stage("config", cfg.validate())?;
    let loaded = stage("model", build_model(&cfg.model))?;
    let model = loaded.as_model();
    let dir = &cfg.run.output_dir;
    stage("output", std::fs::create_dir_all(dir).map_err(LcviError::from))?;

    let mut outcomes = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let outcome = run_seed(cfg, model, seed)?;
        let text = render_trace(cfg, seed, &outcome.trace)?;
        stage("output", std::fs::write(dir.join(trace_file_name(seed)), text).map_err(LcviError::from))?;
        outcomes.push(outcome);
    }
    let report = summarize(cfg, &outcomes)?;
    stage("output", write_outputs(dir, cfg, &report))?;
    Ok(PipelineResult { report, outcomes })
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, report: &PipelineReport) -> Result<()> {
    std::fs::write(dir.join("summary.csv"), render_summary(cfg, report)?)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Values `q` or `q*multiplier`.
    Quantile,
    /// Values `S_theta x S_y`, e.g. `30x10`.
    SampleBudget,
    /// Values are regime names such as `joint_lcvi`.
    Regime,
}

impl std::str::FromStr for SweepAxis {
    type Err = LcviError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(SweepAxis::Quantile),
            "sample_budget" => Ok(SweepAxis::SampleBudget),
            "regime" => Ok(SweepAxis::Regime),
            other => Err(LcviError::Config(format!(
                "unknown sweep axis `{other}` (quantile, sample_budget, regime)"
            ))),
        }
    }
}

fn bad_value(axis: SweepAxis, v: &str) -> LcviError {
    LcviError::Config(format!("invalid {axis:?} sweep value `{v}`"))
}

/// The config of one sweep cell: `base` with the axis set to `value` and
/// outputs directed to a per-cell subdirectory.
pub fn sweep_cell_config(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Quantile => {
            let (q, mult) = match value.split_once('*') {
                Some((q, m)) => (q, m.parse::<f64>().map_err(|_| bad_value(axis, value))?),
                None => (value, 1.0),
            };
            cfg.decision.quantile = q.parse().map_err(|_| bad_value(axis, value))?;
            cfg.decision.m_multiplier = mult;
        }
        SweepAxis::SampleBudget => {
            let (a, b) = value.split_once('x').ok_or_else(|| bad_value(axis, value))?;
            cfg.optimizer.s_theta = a.parse().map_err(|_| bad_value(axis, value))?;
            cfg.optimizer.s_y = b.parse().map_err(|_| bad_value(axis, value))?;
        }
        SweepAxis::Regime => {
            cfg.optimizer.regime = serde_json::from_value(serde_json::Value::String(value.to_string()))
                .map_err(|_| bad_value(axis, value))?;
        }
    }
    let safe: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
        .collect();
    cfg.run.output_dir = base.run.output_dir.join(format!("{axis:?}_{safe}").to_lowercase());
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub mean_improvement: f64,
    pub std_improvement: f64,
    pub mean_wall_seconds: f64,
}

pub fn sweep_file(base: &ExperimentConfig) -> PathBuf {
    base.run.output_dir.join("sweep.csv")
}

fn write_sweep(base: &ExperimentConfig, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let mut out = echo_lines(base)?;
    let _ = writeln!(out, "# axis {axis:?}");
    out.push_str("value,mean_improvement,std_improvement,mean_wall_seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e}",
            r.value, r.mean_improvement, r.std_improvement, r.mean_wall_seconds
        );
    }
    std::fs::create_dir_all(&base.run.output_dir)?;
    std::fs::write(sweep_file(base), out)?;
    Ok(())
}

/// Runs the pipeline once per value. The combined `sweep.csv` is rewritten
/// after every cell so a failing cell leaves the finished rows on disk.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(LcviError::Config("a sweep needs at least one value".into()));
    }
    let cells = values
        .iter()
        .map(|v| sweep_cell_config(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&cells) {
        let result = run_pipeline(cfg).map_err(|e| {
            LcviError::Config(format!("sweep cell `{value}` failed ({} rows kept): {e}", rows.len()))
        })?;
        let times: Vec<f64> = result.outcomes.iter().map(|o| o.vi_seconds + o.lcvi_seconds).collect();
        rows.push(SweepRow {
            value: value.clone(),
            mean_improvement: result.report.report.improvement,
            std_improvement: result.report.improvement_std,
            mean_wall_seconds: if base.run.wall_clock { mean_std(&times).0 } else { 0.0 },
        });
        write_sweep(base, axis, &rows)?;
    }
    Ok(rows)
}

/// Reads the trace table of a pipeline trace file, skipping the echo.
pub fn read_trace_file(path: impl AsRef<Path>) -> Result<RunTrace> {
    let text = std::fs::read_to_string(path)?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    if !body.starts_with(TRACE_HEADER) {
        return Err(LcviError::Parse {
            line: 1,
            message: "missing trace header".into(),
        });
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut trace = RunTrace::default();
    for row in rdr.deserialize() {
        trace.push(row?)?;
    }
    Ok(trace)
}
