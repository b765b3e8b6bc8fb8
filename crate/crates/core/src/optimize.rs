//! Adam-driven maximization of the ELBO (standard VI), of `ELBO + U` jointly
//! over `(lambda, {h})`, and EM-style alternation with closed-form or
//! numerical M-steps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrated_bound, DecisionSet, UtilityObjective};
use crate::decisions::{bayes_estimator, loss_optimal_decisions, predictive_samples, LossSpec};
use crate::error::{LcviError, Result};
use crate::evaluate::{evaluate_risk, RunTrace, TraceRow};
use crate::meanfield::{estimate_elbo, VariationalParams};
use crate::models::{Batch, Model, TargetSet};
use crate::reparam::RngState;
use crate::scalar::Scalar;

/// Bias-corrected Adam, used for ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon_hat: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dim: usize, learning_rate: T) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![T::zero(); dim],
            second_moment: vec![T::zero(); dim],
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon_hat: T::lit(1e-8),
        }
    }

    /// One ascent step on every coordinate.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        self.step_masked(params, grad, |_| true)
    }

    /// One ascent step touching only coordinates where `active(i)` holds;
    /// the moments of inactive coordinates are left as they are.
    pub fn step_masked(&mut self, params: &mut [T], grad: &[T], active: impl Fn(usize) -> bool) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grad.len() != n {
            return Err(LcviError::DimensionMismatch {
                expected: n,
                actual: params.len().min(grad.len()),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(LcviError::NonFinite {
                context: format!("gradient coordinate {i}"),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for i in 0..n {
            if !active(i) {
                continue;
            }
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (one - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (one - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            params[i] = params[i] + self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon_hat);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(state: &AdamState<T>, params: &[T], grad: &[T]) -> Result<(AdamState<T>, Vec<T>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step(&mut p, grad)?;
    Ok((s, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    StandardVi,
    JointLcvi,
    EmClosedForm,
    EmNumerical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_rows: usize,
    pub learning_rate: f64,
    pub s_theta: usize,
    pub s_y: usize,
    pub seed: u64,
    /// Epochs of E-step between consecutive M-steps.
    pub e_steps_per_m: usize,
    /// Adam steps on `{h}` per numerical M-step.
    pub m_step_iters: usize,
    /// Record a trace row every this many epochs (and at the final epoch).
    pub trace_every: usize,
    /// Predictive draws used for the empirical risk column of the trace.
    pub trace_s_theta: usize,
    pub trace_s_y: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            regime: Regime::JointLcvi,
            epochs: 1000,
            batch_rows: 100,
            learning_rate: 0.01,
            s_theta: 30,
            s_y: 10,
            seed: 0,
            e_steps_per_m: 1,
            m_step_iters: 10,
            trace_every: 10,
            trace_s_theta: 20,
            trace_s_y: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_rows", self.batch_rows),
            ("s_theta", self.s_theta),
            ("s_y", self.s_y),
            ("e_steps_per_m", self.e_steps_per_m),
            ("m_step_iters", self.m_step_iters),
            ("trace_every", self.trace_every),
            ("trace_s_theta", self.trace_s_theta),
            ("trace_s_y", self.trace_s_y),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LcviError::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(LcviError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one optimization run.
#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub lambda: VariationalParams<T>,
    pub decisions: DecisionSet<T>,
    pub trace: RunTrace,
}

const STREAM_BATCH: u64 = 1;
const STREAM_ELBO: u64 = 2;
const STREAM_UTILITY: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_MSTEP: u64 = 5;
const STREAM_INIT: u64 = 6;

#[derive(Clone, Copy, PartialEq)]
enum DecisionUpdate {
    Joint,
    EmClosedForm,
    EmNumerical,
}

fn batches<T: Scalar>(n_rows: usize, batch_rows: usize, rng: &mut RngState) -> Vec<Batch<T>> {
    if batch_rows >= n_rows {
        return vec![Batch::full(n_rows)];
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_rows)
        .map(|c| Batch::from_rows(c.to_vec(), n_rows))
        .collect()
}

/// Bayes-optimal training decisions under `lambda` for the objective's loss.
pub fn initial_decisions<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    objective: &UtilityObjective,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<DecisionSet<T>> {
    let n = model.n_targets(TargetSet::Train);
    let Some(loss) = objective.decision_loss() else {
        return Ok(DecisionSet::zeros(n));
    };
    let targets: Vec<usize> = (0..n).collect();
    let values = loss_optimal_decisions(model, lambda, &loss, TargetSet::Train, &targets, s_theta, s_y, rng)?;
    Ok(DecisionSet::new(values))
}

struct Runner<'a, T, M: ?Sized> {
    model: &'a M,
    config: &'a OptimizerConfig,
    objective: &'a UtilityObjective,
    eval_loss: Option<&'a LossSpec>,
    update: DecisionUpdate,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar, M: Model<T> + ?Sized> Runner<'_, T, M> {
    fn run(&self, init_lambda: VariationalParams<T>, init_decisions: DecisionSet<T>) -> Result<FitResult<T>> {
        let cfg = self.config;
        cfg.validate()?;
        let model = self.model;
        let dim = model.latent_dim();
        if init_lambda.dim() != dim {
            return Err(LcviError::DimensionMismatch {
                expected: dim,
                actual: init_lambda.dim(),
            });
        }
        let n_h = model.n_targets(TargetSet::Train);
        let root = RngState::seed(cfg.seed);
        let mut batch_rng = root.split(STREAM_BATCH);
        let mut elbo_rng = root.split(STREAM_ELBO);
        let mut u_rng = root.split(STREAM_UTILITY);
        let eval_rng = root.split(STREAM_EVAL);
        let mut mstep_rng = root.split(STREAM_MSTEP);

        let mut params = init_lambda.to_flat();
        params.extend_from_slice(&init_decisions.values);
        let mut adam = AdamState::new(params.len(), T::lit(cfg.learning_rate));
        let mut h_adam = AdamState::new(n_h, T::lit(cfg.learning_rate));
        let mut in_batch = vec![false; n_h];
        let mut grad = vec![T::zero(); params.len()];
        let mut trace = RunTrace::default();
        let start = Instant::now();

        for epoch in 1..=cfg.epochs {
            let (mut elbo_sum, mut u_sum, mut n_batches) = (0.0, 0.0, 0usize);
            for batch in batches::<T>(model.n_rows(), cfg.batch_rows, &mut batch_rng) {
                let lambda = VariationalParams::from_flat(&params[..2 * dim])?;
                let decisions = DecisionSet::new(params[2 * dim..].to_vec());
                let elbo = estimate_elbo(model, &batch, &lambda, cfg.s_theta, &mut elbo_rng)?;
                let u = self
                    .objective
                    .estimate(model, &batch, &lambda, &decisions, cfg.s_theta, cfg.s_y, &mut u_rng)?;
                let bound = calibrated_bound(&elbo, &u)?;
                grad[..dim].copy_from_slice(&bound.grad_means);
                grad[dim..2 * dim].copy_from_slice(&bound.grad_log_scales);
                grad[2 * dim..].copy_from_slice(&bound.grad_h);

                in_batch.iter_mut().for_each(|b| *b = false);
                if self.update == DecisionUpdate::Joint {
                    for t in model.train_targets_in_rows(&batch.rows) {
                        in_batch[t] = true;
                    }
                }
                adam.step_masked(&mut params, &grad, |i| i < 2 * dim || in_batch[i - 2 * dim])?;
                elbo_sum += elbo.value.to_f64_lossy();
                u_sum += u.value.to_f64_lossy();
                n_batches += 1;
            }

            if self.update != DecisionUpdate::Joint && epoch % cfg.e_steps_per_m == 0 {
                let lambda = VariationalParams::from_flat(&params[..2 * dim])?;
                let h = self.m_step(&lambda, &params[2 * dim..], &mut h_adam, &mut mstep_rng)?;
                params[2 * dim..].copy_from_slice(&h);
            }

            if epoch % cfg.trace_every == 0 || epoch == cfg.epochs {
                let lambda = VariationalParams::from_flat(&params[..2 * dim])?;
                let risk = match self.eval_loss {
                    Some(l) => {
                        let mut r = eval_rng.split(epoch as u64);
                        evaluate_risk(model, &lambda, l, cfg.trace_s_theta, cfg.trace_s_y, &mut r)?
                            .risk
                            .to_f64_lossy()
                    }
                    None => f64::NAN,
                };
                let nb = n_batches.max(1) as f64;
                trace.push(TraceRow {
                    epoch,
                    elbo: elbo_sum / nb,
                    u_term: u_sum / nb,
                    empirical_risk: risk,
                    wall_seconds: start.elapsed().as_secs_f64(),
                })?;
            }
        }

        Ok(FitResult {
            lambda: VariationalParams::from_flat(&params[..2 * dim])?,
            decisions: DecisionSet::new(params[2 * dim..].to_vec()),
            trace,
        })
    }

    fn m_step(
        &self,
        lambda: &VariationalParams<T>,
        current: &[T],
        h_adam: &mut AdamState<T>,
        rng: &mut RngState,
    ) -> Result<Vec<T>> {
        let cfg = self.config;
        let model = self.model;
        match self.update {
            DecisionUpdate::EmClosedForm => {
                let loss = self.closed_form_loss()?;
                let targets: Vec<usize> = (0..current.len()).collect();
                let samples = predictive_samples(model, lambda, TargetSet::Train, &targets, cfg.s_theta, cfg.s_y, rng)?;
                samples.iter().map(|s| bayes_estimator(&loss, s)).collect()
            }
            DecisionUpdate::EmNumerical => {
                let mut h = current.to_vec();
                let full = Batch::full(model.n_rows());
                for _ in 0..cfg.m_step_iters {
                    let d = DecisionSet::new(h.clone());
                    let u = self.objective.estimate(model, &full, lambda, &d, cfg.s_theta, cfg.s_y, rng)?;
                    h_adam.step(&mut h, &u.grad_h)?;
                }
                Ok(h)
            }
            DecisionUpdate::Joint => Ok(current.to_vec()),
        }
    }

    fn closed_form_loss(&self) -> Result<LossSpec> {
        match self.objective.decision_loss() {
            Some(l) if l.has_closed_form() => Ok(l),
            Some(l) => Err(LcviError::NoClosedForm(l.name())),
            None => Err(LcviError::Unsupported("EM needs a loss-based utility".into())),
        }
    }
}

/// Maximizes the ELBO alone. `eval_loss` only feeds the trace's risk column.
pub fn run_standard_vi<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    config: &OptimizerConfig,
    init_lambda: Option<VariationalParams<T>>,
    eval_loss: Option<&LossSpec>,
) -> Result<FitResult<T>> {
    let init = init_lambda.unwrap_or_else(|| VariationalParams::standard_init(model.latent_dim()));
    let n_h = model.n_targets(TargetSet::Train);
    Runner {
        model,
        config,
        objective: &UtilityObjective::Zero,
        eval_loss,
        update: DecisionUpdate::Joint,
        _marker: Default::default(),
    }
    .run(init, DecisionSet::zeros(n_h))
}

/// Joint Adam ascent on `ELBO + U` over the concatenation `(lambda, {h})`.
/// Decisions start at the Bayes-optimal values under `init_lambda`.
pub fn run_joint_lcvi<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    config: &OptimizerConfig,
    objective: &UtilityObjective,
    init_lambda: VariationalParams<T>,
    eval_loss: Option<&LossSpec>,
) -> Result<FitResult<T>> {
    let mut init_rng = RngState::seed(config.seed).split(STREAM_INIT);
    let h0 = initial_decisions(model, &init_lambda, objective, config.s_theta, config.s_y, &mut init_rng)?;
    Runner {
        model,
        config,
        objective,
        eval_loss,
        update: DecisionUpdate::Joint,
        _marker: Default::default(),
    }
    .run(init_lambda, h0)
}

/// EM alternation: `e_steps_per_m` epochs of Adam on `lambda` at fixed `{h}`,
/// then an M-step over every decision.
pub fn run_em<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    config: &OptimizerConfig,
    objective: &UtilityObjective,
    closed_form: bool,
    init_lambda: VariationalParams<T>,
    eval_loss: Option<&LossSpec>,
) -> Result<FitResult<T>> {
    let runner = Runner {
        model,
        config,
        objective,
        eval_loss,
        update: if closed_form {
            DecisionUpdate::EmClosedForm
        } else {
            DecisionUpdate::EmNumerical
        },
        _marker: Default::default(),
    };
    if closed_form {
        runner.closed_form_loss()?;
    }
    let mut init_rng = RngState::seed(config.seed).split(STREAM_INIT);
    let h0 = initial_decisions(model, &init_lambda, objective, config.s_theta, config.s_y, &mut init_rng)?;
    runner.run(init_lambda, h0)
}

/// Closed-form M-step on explicit predictive samples: one Bayes estimate per row.
pub fn closed_form_m_step<T: Scalar>(loss: &LossSpec, samples: &[Vec<T>]) -> Result<Vec<T>> {
    samples.iter().map(|s| bayes_estimator(loss, s)).collect()
}
