//! The utility-dependent term `U(lambda, {h}) = E_q[log E_{y|theta}[u(y, h)]]`,
//! estimated by nested Monte Carlo over doubly reparameterized draws
//! `theta = f(eps, lambda)`, `y = g(delta, theta, x)`.
//!
//! Two estimators are provided:
//!
//! * naive: `(1/S_theta) sum_eps log((1/S_y) sum_delta u(g(delta, f(eps)), h))`,
//!   slightly biased through the log of an inner average;
//! * linearized: `-(1/(M S_theta S_y)) sum_eps sum_delta l(g(delta, f(eps)), h)`,
//!   unbiased for the first-order expansion of `log(M - l)` around `M`.
//!
//! Both return gradients w.r.t. `(mu, rho)` and every decision `h_i`. Per-batch
//! sums are rescaled to dataset size with the batch scale.

use serde::{Deserialize, Serialize};

use crate::decisions::{loss_with_grad, AffineUtility, LossSpec, Utility, UtilitySpec};
use crate::error::{LcviError, Result};
use crate::meanfield::{ElboEstimate, SampleWorkspace, VariationalParams};
use crate::models::{Batch, Model, TargetSet};
use crate::reparam::RngState;
use crate::scalar::Scalar;

/// One decision per training target, index-aligned with the model's train targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionSet<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> DecisionSet<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    Linearized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityTermEstimate<T> {
    pub value: T,
    pub grad_means: Vec<T>,
    pub grad_log_scales: Vec<T>,
    /// Full length of the decision set; zero outside the batch.
    pub grad_h: Vec<T>,
    pub estimator_kind: EstimatorKind,
    pub s_theta: usize,
    pub s_y: usize,
}

impl<T: Scalar> UtilityTermEstimate<T> {
    pub fn zero(dim: usize, n_decisions: usize, kind: EstimatorKind) -> Self {
        Self {
            value: T::zero(),
            grad_means: vec![T::zero(); dim],
            grad_log_scales: vec![T::zero(); dim],
            grad_h: vec![T::zero(); n_decisions],
            estimator_kind: kind,
            s_theta: 0,
            s_y: 0,
        }
    }
}

fn check_inputs<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    decisions: &DecisionSet<T>,
    s_theta: usize,
    s_y: usize,
) -> Result<()> {
    if s_theta == 0 || s_y == 0 {
        return Err(LcviError::InvalidParameter("s_theta and s_y must be at least 1".into()));
    }
    if lambda.dim() != model.latent_dim() {
        return Err(LcviError::DimensionMismatch {
            expected: model.latent_dim(),
            actual: lambda.dim(),
        });
    }
    let n = model.n_targets(TargetSet::Train);
    if decisions.len() != n {
        return Err(LcviError::DimensionMismatch {
            expected: n,
            actual: decisions.len(),
        });
    }
    if decisions.values.iter().any(|h| !h.is_finite()) {
        return Err(LcviError::NonFinite {
            context: "decisions".into(),
        });
    }
    Ok(())
}

/// `(1/S_y) sum_delta u(g(delta, theta, x_target), h)` at a fixed constrained latent.
#[allow(clippy::too_many_arguments)]
pub fn inner_expected_utility<T: Scalar, M: Model<T> + ?Sized, U: Utility<T> + ?Sized>(
    model: &M,
    theta: &[T],
    set: TargetSet,
    target: usize,
    h: T,
    utility: &U,
    s_y: usize,
    rng: &mut RngState,
) -> Result<T> {
    if s_y == 0 {
        return Err(LcviError::InvalidParameter("s_y must be at least 1".into()));
    }
    let (loc, scale) = model.predictive_loc_scale(theta, set, target);
    let mut sum = T::zero();
    for _ in 0..s_y {
        let d: T = rng.standard_normal();
        sum = sum + utility.eval(loc + scale * d, h);
    }
    let avg = sum / T::from_usize_lossy(s_y);
    if !avg.is_finite() {
        return Err(LcviError::NonFinite {
            context: format!("utility of target {target}"),
        });
    }
    Ok(avg)
}

/// Naive nested estimator of `U`. The utility must be strictly positive.
#[allow(clippy::too_many_arguments)]
pub fn estimate_u_naive<T: Scalar, M: Model<T> + ?Sized, U: Utility<T> + ?Sized>(
    model: &M,
    batch: &Batch<T>,
    lambda: &VariationalParams<T>,
    decisions: &DecisionSet<T>,
    utility: &U,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<UtilityTermEstimate<T>> {
    check_inputs(model, lambda, decisions, s_theta, s_y)?;
    if !utility.strictly_positive() {
        return Err(LcviError::Unsupported(
            "the naive estimator needs a strictly positive utility; use the linearized estimator for M - loss".into(),
        ));
    }
    let dim = model.latent_dim();
    let targets = model.train_targets_in_rows(&batch.rows);
    let mut est = UtilityTermEstimate::zero(dim, decisions.len(), EstimatorKind::Naive);
    est.s_theta = s_theta;
    est.s_y = s_y;
    let mut ws = SampleWorkspace::new(dim);
    let mut deltas = vec![T::zero(); s_y];
    let outer = batch.scale / T::from_usize_lossy(s_theta);
    let inv_sy = T::from_usize_lossy(s_y).recip();
    let mut total = T::zero();

    for _ in 0..s_theta {
        ws.draw(model, lambda, rng)?;
        ws.grad_c.iter_mut().for_each(|g| *g = T::zero());
        for &t in &targets {
            let h = decisions.values[t];
            let (loc, scale) = model.predictive_loc_scale(&ws.theta_c, TargetSet::Train, t);
            rng.fill_standard_normal(&mut deltas);
            let (mut sum_u, mut d_loc, mut d_scale, mut d_h) = (T::zero(), T::zero(), T::zero(), T::zero());
            for &d in &deltas {
                let (u, du_dy, du_dh) = utility.eval_with_grads(loc + scale * d, h);
                sum_u = sum_u + u;
                d_loc = d_loc + du_dy;
                d_scale = d_scale + du_dy * d;
                d_h = d_h + du_dh;
            }
            let avg = sum_u * inv_sy;
            if !(avg > T::zero()) || !avg.is_finite() {
                return Err(LcviError::NonPositiveUtility {
                    target: t,
                    value: avg.to_f64_lossy(),
                });
            }
            total = total + avg.ln();
            // d log(avg) = d avg / avg, and d avg = inv_sy * sum of per-draw derivatives.
            let c = inv_sy / avg;
            model.predictive_backward(&ws.theta_c, TargetSet::Train, t, c * d_loc, c * d_scale, &mut ws.grad_c);
            est.grad_h[t] = est.grad_h[t] + outer * c * d_h;
        }
        ws.backprop(model, lambda, outer, false, &mut est.grad_means, &mut est.grad_log_scales);
    }
    est.value = total * outer;
    Ok(est)
}

/// Linearized estimator of `U` for a loss and robust maximum `M`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_u_linearized<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    batch: &Batch<T>,
    lambda: &VariationalParams<T>,
    decisions: &DecisionSet<T>,
    loss: &LossSpec,
    m: T,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<UtilityTermEstimate<T>> {
    check_inputs(model, lambda, decisions, s_theta, s_y)?;
    loss.validate()?;
    if !(m > T::zero()) {
        return Err(LcviError::InvalidParameter(format!("M must be positive, got {m}")));
    }
    let dim = model.latent_dim();
    let targets = model.train_targets_in_rows(&batch.rows);
    let mut est = UtilityTermEstimate::zero(dim, decisions.len(), EstimatorKind::Linearized);
    est.s_theta = s_theta;
    est.s_y = s_y;
    let mut ws = SampleWorkspace::new(dim);
    let mut deltas = vec![T::zero(); s_y];
    // Every (eps, delta) pair contributes -coef * l.
    let coef = batch.scale / (m * T::from_usize_lossy(s_theta) * T::from_usize_lossy(s_y));
    let mut total = T::zero();

    for _ in 0..s_theta {
        ws.draw(model, lambda, rng)?;
        ws.grad_c.iter_mut().for_each(|g| *g = T::zero());
        for &t in &targets {
            let h = decisions.values[t];
            let (loc, scale) = model.predictive_loc_scale(&ws.theta_c, TargetSet::Train, t);
            rng.fill_standard_normal(&mut deltas);
            let (mut sum_l, mut d_loc, mut d_scale, mut d_h) = (T::zero(), T::zero(), T::zero(), T::zero());
            for &d in &deltas {
                let (l, dl_dh) = loss_with_grad(loss, loc + scale * d, h);
                sum_l = sum_l + l;
                // dl/dy = -dl/dh
                d_loc = d_loc - dl_dh;
                d_scale = d_scale - dl_dh * d;
                d_h = d_h + dl_dh;
            }
            if !sum_l.is_finite() {
                return Err(LcviError::NonFinite {
                    context: format!("loss of target {t}"),
                });
            }
            total = total + sum_l;
            model.predictive_backward(&ws.theta_c, TargetSet::Train, t, -d_loc, -d_scale, &mut ws.grad_c);
            est.grad_h[t] = est.grad_h[t] - coef * d_h;
        }
        ws.backprop(model, lambda, coef, false, &mut est.grad_means, &mut est.grad_log_scales);
    }
    est.value = -coef * total;
    Ok(est)
}

/// Which estimate of `U` an optimizer adds to the ELBO.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum UtilityObjective {
    /// `U = 0`: plain variational inference.
    Zero,
    Naive { utility: AffineUtility },
    Linearized { loss: LossSpec, m: f64 },
}

impl UtilityObjective {
    pub fn naive(utility: UtilitySpec) -> Self {
        UtilityObjective::Naive {
            utility: AffineUtility {
                base: utility,
                alpha: 1.0,
                beta: 0.0,
            },
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            UtilityObjective::Linearized { .. } => EstimatorKind::Linearized,
            _ => EstimatorKind::Naive,
        }
    }

    /// The loss whose Bayes-optimal decision maximizes this objective's
    /// inner expected utility, used to initialize decisions.
    pub fn decision_loss(&self) -> Option<LossSpec> {
        match self {
            UtilityObjective::Zero => None,
            UtilityObjective::Linearized { loss, .. } => Some(*loss),
            UtilityObjective::Naive { utility } => match utility.base {
                UtilitySpec::RobustMax { loss, .. } | UtilitySpec::ExpTransform { loss, .. } => Some(loss),
                UtilitySpec::NativeExpSquared => Some(LossSpec::ExpSquaredComplement),
            },
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn estimate<T: Scalar, M: Model<T> + ?Sized>(
        &self,
        model: &M,
        batch: &Batch<T>,
        lambda: &VariationalParams<T>,
        decisions: &DecisionSet<T>,
        s_theta: usize,
        s_y: usize,
        rng: &mut RngState,
    ) -> Result<UtilityTermEstimate<T>> {
        match self {
            UtilityObjective::Zero => Ok(UtilityTermEstimate::zero(
                model.latent_dim(),
                decisions.len(),
                EstimatorKind::Naive,
            )),
            // log(alpha u) = log alpha + log u: the scale only shifts the value.
            UtilityObjective::Naive { utility } if utility.beta == 0.0 => {
                let mut est = estimate_u_naive(model, batch, lambda, decisions, &utility.base, s_theta, s_y, rng)?;
                if utility.alpha != 1.0 {
                    let n = T::from_usize_lossy(model.train_targets_in_rows(&batch.rows).len());
                    est.value = est.value + batch.scale * n * T::lit(utility.alpha.ln());
                }
                Ok(est)
            }
            UtilityObjective::Naive { utility } => {
                estimate_u_naive(model, batch, lambda, decisions, utility, s_theta, s_y, rng)
            }
            UtilityObjective::Linearized { loss, m } => {
                estimate_u_linearized(model, batch, lambda, decisions, loss, T::lit(*m), s_theta, s_y, rng)
            }
        }
    }
}

/// `ELBO + U` with the joint gradient over `(lambda, {h})`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedBound<T> {
    pub value: T,
    pub grad_means: Vec<T>,
    pub grad_log_scales: Vec<T>,
    pub grad_h: Vec<T>,
}

pub fn calibrated_bound<T: Scalar>(elbo: &ElboEstimate<T>, u_term: &UtilityTermEstimate<T>) -> Result<CalibratedBound<T>> {
    if elbo.grad_means.len() != u_term.grad_means.len() || elbo.grad_log_scales.len() != u_term.grad_log_scales.len() {
        return Err(LcviError::DimensionMismatch {
            expected: elbo.grad_means.len(),
            actual: u_term.grad_means.len(),
        });
    }
    let add = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| *x + *y).collect::<Vec<T>>();
    Ok(CalibratedBound {
        value: elbo.value + u_term.value,
        grad_means: add(&elbo.grad_means, &u_term.grad_means),
        grad_log_scales: add(&elbo.grad_log_scales, &u_term.grad_log_scales),
        grad_h: u_term.grad_h.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ConjugateNormal;

    struct Constant(f64);
    impl Utility<f64> for Constant {
        fn eval_with_grads(&self, _y: f64, _h: f64) -> (f64, f64, f64) {
            (self.0, 0.0, 0.0)
        }
        fn strictly_positive(&self) -> bool {
            self.0 > 0.0
        }
    }

    fn toy() -> ConjugateNormal<f64> {
        ConjugateNormal::new(vec![0.5, -1.0, 2.0], 1.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn inner_average_of_constant_is_exact() {
        let m = toy();
        let v = inner_expected_utility(&m, &[0.3], TargetSet::Train, 0, 1.0, &Constant(0.25), 7, &mut RngState::seed(1)).unwrap();
        assert_eq!(v, 0.25);
    }

    #[test]
    fn deterministic_predictive_at_its_value_has_unit_utility() {
        let m = toy().with_predictive_sd(0.0);
        let v = inner_expected_utility(&m, &[1.4], TargetSet::Train, 0, 1.4, &UtilitySpec::NativeExpSquared, 5, &mut RngState::seed(2))
            .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn naive_with_constant_utility() {
        let m = toy();
        let lam = VariationalParams::new(vec![0.2], vec![-0.3]).unwrap();
        let d = DecisionSet::new(vec![0.0, 1.0, -1.0]);
        let est = estimate_u_naive(&m, &Batch::full(3), &lam, &d, &Constant(2.5), 4, 3, &mut RngState::seed(3)).unwrap();
        assert!((est.value - 3.0 * 2.5f64.ln()).abs() < 1e-12);
        assert!(est.grad_means.iter().chain(&est.grad_log_scales).chain(&est.grad_h).all(|g| *g == 0.0));
    }

    #[test]
    fn naive_refuses_robust_max() {
        let m = toy();
        let lam = VariationalParams::new(vec![0.2], vec![-0.3]).unwrap();
        let u = UtilitySpec::RobustMax {
            m: 1.0,
            loss: LossSpec::Squared,
        };
        let err = estimate_u_naive(&m, &Batch::full(3), &lam, &DecisionSet::zeros(3), &u, 2, 2, &mut RngState::seed(0));
        assert!(matches!(err, Err(LcviError::Unsupported(_))));
    }

    #[test]
    fn naive_reports_the_target_whose_utility_vanishes() {
        let m = toy();
        let lam = VariationalParams::new(vec![0.0], vec![-5.0]).unwrap();
        let u = UtilitySpec::ExpTransform {
            gamma: 1.0,
            loss: LossSpec::Squared,
        };
        let d = DecisionSet::new(vec![0.0, 1e3, 0.0]);
        let err = estimate_u_naive(&m, &Batch::full(3), &lam, &d, &u, 2, 2, &mut RngState::seed(0));
        assert!(matches!(err, Err(LcviError::NonPositiveUtility { target: 1, .. })));
    }

    #[test]
    fn linearized_with_zero_loss_spread() {
        // Deterministic predictive at h: squared loss is zero everywhere.
        let m = toy().with_predictive_sd(0.0);
        let lam = VariationalParams::new(vec![0.7], vec![-40.0]).unwrap();
        let d = DecisionSet::new(vec![0.7; 3]);
        let est = estimate_u_linearized(&m, &Batch::full(3), &lam, &d, &LossSpec::Squared, 2.0, 3, 3, &mut RngState::seed(1)).unwrap();
        assert!(est.value.abs() < 1e-20);
    }

    #[test]
    fn linearized_decision_gradient_for_squared_loss() {
        let m = toy().with_predictive_sd(0.0);
        let theta = 0.4;
        let lam = VariationalParams::new(vec![theta], vec![-200.0]).unwrap();
        let d = DecisionSet::new(vec![1.0, -2.0, 0.4]);
        let est = estimate_u_linearized(&m, &Batch::full(3), &lam, &d, &LossSpec::Squared, 1.0, 50, 2, &mut RngState::seed(4)).unwrap();
        for (g, h) in est.grad_h.iter().zip(&d.values) {
            assert!((g + 2.0 * (h - theta)).abs() < 1e-12);
        }
        let expected: f64 = -d.values.iter().map(|h| (h - theta).powi(2)).sum::<f64>();
        assert!((est.value - expected).abs() < 1e-12);
    }

    #[test]
    fn bound_is_sum_of_parts() {
        let elbo = ElboEstimate {
            value: -3.0,
            grad_means: vec![1.0, 2.0],
            grad_log_scales: vec![0.5, -0.5],
            n_samples: 1,
        };
        let mut u = UtilityTermEstimate::zero(2, 3, EstimatorKind::Linearized);
        let b0 = calibrated_bound(&elbo, &u).unwrap();
        assert_eq!(b0.value, -3.0);
        assert_eq!(b0.grad_means, elbo.grad_means);
        assert_eq!(b0.grad_log_scales, elbo.grad_log_scales);
        u.value = -1.5;
        u.grad_means = vec![0.25, -1.0];
        u.grad_log_scales = vec![1.0, 1.0];
        u.grad_h = vec![0.1, 0.2, 0.3];
        let b = calibrated_bound(&elbo, &u).unwrap();
        assert_eq!(b.value, -4.5);
        assert_eq!(b.grad_means, vec![1.25, 1.0]);
        assert_eq!(b.grad_log_scales, vec![1.5, 0.5]);
        assert_eq!(b.grad_h, u.grad_h);
    }
}
