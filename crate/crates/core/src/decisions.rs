//! Loss families, their Bayes estimators, loss-to-utility transforms and the
//! quantile-based choice of the robust maximum `M_q`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{LcviError, Result};
use crate::meanfield::VariationalParams;
use crate::models::{Model, TargetSet};
use crate::reparam::{constrain_into, RngState};
use crate::scalar::{log_mean_exp, Scalar};

/// Loss `l(y, h) >= 0`. Every family depends on `h - y` only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossSpec {
    Squared,
    Absolute,
    /// Pinball loss: `q |h - y|` when `y >= h`, `(1 - q) |h - y|` otherwise.
    Tilted { q: f64 },
    /// `exp(c (h - y)) - c (h - y) - 1`.
    #[serde(rename = "linex")]
    LinEx { c: f64 },
    /// `1 - exp(-(h - y)²)`, the loss counterpart of [`UtilitySpec::NativeExpSquared`].
    ExpSquaredComplement,
}

impl LossSpec {
    pub fn tilted(q: f64) -> Result<Self> {
        let l = LossSpec::Tilted { q };
        l.validate()?;
        Ok(l)
    }

    pub fn linex(c: f64) -> Result<Self> {
        let l = LossSpec::LinEx { c };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Tilted { q } if !(q > 0.0 && q < 1.0) => {
                Err(LcviError::InvalidParameter(format!("tilted loss needs q in (0, 1), got {q}")))
            }
            LossSpec::LinEx { c } if c == 0.0 || !c.is_finite() => {
                Err(LcviError::InvalidParameter(format!("linex loss needs a nonzero finite c, got {c}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            LossSpec::Squared => "squared".into(),
            LossSpec::Absolute => "absolute".into(),
            LossSpec::Tilted { q } => format!("tilted(q={q})"),
            LossSpec::LinEx { c } => format!("linex(c={c})"),
            LossSpec::ExpSquaredComplement => "exp_squared_complement".into(),
        }
    }

    pub fn has_closed_form(&self) -> bool {
        !matches!(self, LossSpec::ExpSquaredComplement)
    }

    /// Loss as a function of `d = h - y` and its derivative in `d`. At the kink
    /// of absolute and tilted losses the derivative is `0`.
    #[inline]
    fn of_diff<T: Scalar>(&self, d: T) -> (T, T) {
        match *self {
            LossSpec::Squared => (d * d, T::lit(2.0) * d),
            LossSpec::Absolute => (d.abs(), sign(d)),
            LossSpec::Tilted { q } => {
                let q = T::lit(q);
                if d <= T::zero() {
                    (-q * d, if d < T::zero() { -q } else { T::zero() })
                } else {
                    ((T::one() - q) * d, T::one() - q)
                }
            }
            LossSpec::LinEx { c } => {
                let c = T::lit(c);
                let e = (c * d).exp();
                (e - c * d - T::one(), c * e - c)
            }
            LossSpec::ExpSquaredComplement => {
                let e = (-d * d).exp();
                (T::one() - e, T::lit(2.0) * d * e)
            }
        }
    }
}

#[inline]
fn sign<T: Scalar>(d: T) -> T {
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub fn loss<T: Scalar>(spec: &LossSpec, y: T, h: T) -> T {
    spec.of_diff(h - y).0
}

/// `d l / d h`; `0` at the kinks of absolute and tilted losses.
#[inline]
pub fn loss_subgradient_h<T: Scalar>(spec: &LossSpec, y: T, h: T) -> T {
    spec.of_diff(h - y).1
}

/// `(l, d l/d h)`. Since every loss depends on `h - y`, `d l/d y = -d l/d h`.
#[inline]
pub fn loss_with_grad<T: Scalar>(spec: &LossSpec, y: T, h: T) -> (T, T) {
    spec.of_diff(h - y)
}

fn sort_total<T: Scalar>(xs: &mut [T]) {
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
}

/// Nearest-rank rank `ceil(q n)` as a zero-based index.
fn nearest_rank_index(q: f64, n: usize) -> usize {
    let rank = (q * n as f64 - 1e-9).ceil() as usize;
    rank.clamp(1, n) - 1
}

fn order_statistic<T: Scalar>(samples: &[T], q: f64) -> T {
    let mut v = samples.to_vec();
    let idx = nearest_rank_index(q, v.len());
    let (_, x, _) = v.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    *x
}

/// Closed-form Bayes estimator evaluated on predictive samples: mean, median,
/// `q`-quantile, or `-(1/c) log mean exp(-c y)`.
pub fn bayes_estimator<T: Scalar>(spec: &LossSpec, predictive_samples: &[T]) -> Result<T> {
    if predictive_samples.is_empty() {
        return Err(LcviError::Empty("predictive samples"));
    }
    spec.validate()?;
    match *spec {
        LossSpec::Squared => {
            let n = T::from_usize_lossy(predictive_samples.len());
            Ok(predictive_samples.iter().copied().sum::<T>() / n)
        }
        LossSpec::Absolute => Ok(order_statistic(predictive_samples, 0.5)),
        LossSpec::Tilted { q } => Ok(order_statistic(predictive_samples, q)),
        LossSpec::LinEx { c } => {
            let c = T::lit(c);
            let scaled: Vec<T> = predictive_samples.iter().map(|&y| -c * y).collect();
            Ok(-log_mean_exp(&scaled) / c)
        }
        LossSpec::ExpSquaredComplement => Err(LcviError::NoClosedForm(spec.name())),
    }
}

/// Sample-average loss of decision `h`.
pub fn average_loss<T: Scalar>(spec: &LossSpec, samples: &[T], h: T) -> T {
    samples.iter().map(|&y| loss(spec, y, h)).sum::<T>() / T::from_usize_lossy(samples.len())
}

/// Bayes-optimal decision for `spec` on predictive samples: closed form where
/// one exists, otherwise a grid search over the sample range refined by golden
/// section search.
pub fn optimal_decision<T: Scalar>(spec: &LossSpec, samples: &[T]) -> Result<T> {
    if spec.has_closed_form() {
        return bayes_estimator(spec, samples);
    }
    if samples.is_empty() {
        return Err(LcviError::Empty("predictive samples"));
    }
    let objective = |h: f64| average_loss(spec, samples, T::lit(h)).to_f64_lossy();
    let lo = samples.iter().copied().fold(T::infinity(), T::min).to_f64_lossy();
    let hi = samples.iter().copied().fold(T::neg_infinity(), T::max).to_f64_lossy();
    Ok(T::lit(minimize_1d(objective, lo, hi, 128)))
}

/// Grid search with `n_grid` intervals on `[lo, hi]` followed by golden section
/// refinement inside the best cell's neighbourhood.
pub(crate) fn minimize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n_grid: usize) -> f64 {
    if hi <= lo {
        return lo;
    }
    let step = (hi - lo) / n_grid as f64;
    let (mut best_i, mut best) = (0, f64::INFINITY);
    for i in 0..=n_grid {
        let v = f(lo + step * i as f64);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let mut a = lo + step * (best_i as f64 - 1.0).max(0.0);
    let mut b = (lo + step * (best_i as f64 + 1.0)).min(hi);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (a + b);
    let grid_x = lo + step * best_i as f64;
    if f(x) <= best {
        x
    } else {
        grid_x
    }
}

/// Utility `u(y, h)`, either derived from a loss or given natively.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilitySpec {
    /// `M - l(y, h)`; may be negative.
    RobustMax { m: f64, loss: LossSpec },
    /// `exp(-gamma l(y, h))`, in `(0, 1]`.
    ExpTransform { gamma: f64, loss: LossSpec },
    /// `exp(-(h - y)²)`.
    NativeExpSquared,
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            UtilitySpec::RobustMax { m, loss } => {
                if !(*m > 0.0) {
                    return Err(LcviError::InvalidParameter(format!("robust maximum must be positive, got {m}")));
                }
                loss.validate()
            }
            UtilitySpec::ExpTransform { gamma, loss } => {
                if !(*gamma > 0.0) {
                    return Err(LcviError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
                }
                loss.validate()
            }
            UtilitySpec::NativeExpSquared => Ok(()),
        }
    }
}

/// `u' = alpha u + beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineUtility {
    pub base: UtilitySpec,
    pub alpha: f64,
    pub beta: f64,
}

impl AffineUtility {
    pub fn new(base: UtilitySpec, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta >= 0.0) {
            return Err(LcviError::InvalidParameter(format!(
                "affine utility needs alpha > 0 and beta >= 0, got alpha={alpha}, beta={beta}"
            )));
        }
        base.validate()?;
        Ok(Self { base, alpha, beta })
    }
}

/// A utility usable inside the nested estimators.
pub trait Utility<T: Scalar> {
    /// `(u, du/dy, du/dh)`.
    fn eval_with_grads(&self, y: T, h: T) -> (T, T, T);

    fn eval(&self, y: T, h: T) -> T {
        self.eval_with_grads(y, h).0
    }

    /// Whether `u > 0` everywhere, which the logarithm in the naive estimator needs.
    fn strictly_positive(&self) -> bool;
}

impl<T: Scalar> Utility<T> for UtilitySpec {
    #[inline]
    fn eval_with_grads(&self, y: T, h: T) -> (T, T, T) {
        match self {
            UtilitySpec::RobustMax { m, loss } => {
                let (l, dl) = loss.of_diff(h - y);
                (T::lit(*m) - l, dl, -dl)
            }
            UtilitySpec::ExpTransform { gamma, loss } => {
                let g = T::lit(*gamma);
                let (l, dl) = loss.of_diff(h - y);
                let u = (-g * l).exp();
                (u, g * u * dl, -g * u * dl)
            }
            UtilitySpec::NativeExpSquared => {
                let d = h - y;
                let u = (-d * d).exp();
                let du_dh = -T::lit(2.0) * d * u;
                (u, -du_dh, du_dh)
            }
        }
    }

    fn strictly_positive(&self) -> bool {
        !matches!(self, UtilitySpec::RobustMax { .. })
    }
}

impl<T: Scalar> Utility<T> for AffineUtility {
    #[inline]
    fn eval_with_grads(&self, y: T, h: T) -> (T, T, T) {
        let (u, dy, dh) = Utility::<T>::eval_with_grads(&self.base, y, h);
        let a = T::lit(self.alpha);
        (a * u + T::lit(self.beta), a * dy, a * dh)
    }

    fn strictly_positive(&self) -> bool {
        Utility::<T>::strictly_positive(&self.base) || self.beta > 0.0
    }
}

pub fn to_utility<T: Scalar>(spec: &UtilitySpec, y: T, h: T) -> T {
    Utility::<T>::eval(spec, y, h)
}

/// `gamma = 1 / M_q`.
pub fn gamma_from_quantile(m_q: f64) -> Result<f64> {
    if !(m_q > 0.0) || !m_q.is_finite() {
        return Err(LcviError::InvalidParameter(format!("M_q must be positive, got {m_q}")));
    }
    Ok(m_q.recip())
}

/// Nearest-rank quantile: the `ceil(q N)`-th smallest loss.
pub fn empirical_quantile_m<T: Scalar>(losses: &[T], q: f64) -> Result<T> {
    if losses.is_empty() {
        return Err(LcviError::Empty("losses"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(LcviError::InvalidParameter(format!("quantile must lie in (0, 1], got {q}")));
    }
    let mut v = losses.to_vec();
    sort_total(&mut v);
    Ok(v[nearest_rank_index(q, v.len())])
}

/// Predictive draws `y = g(delta, f(eps, lambda), x)` for every target of
/// `set`: `s_theta` latent draws, each followed by `s_y` fresh `delta` draws
/// per target. Row `t` of the result holds target `t`'s `s_theta * s_y` samples.
pub fn predictive_samples<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    set: TargetSet,
    targets: &[usize],
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<T>>> {
    let dim = model.latent_dim();
    let mut eps = vec![T::zero(); dim];
    let mut theta_u = vec![T::zero(); dim];
    let mut theta_c = vec![T::zero(); dim];
    let mut out = vec![Vec::with_capacity(s_theta * s_y); targets.len()];
    for _ in 0..s_theta {
        rng.fill_standard_normal(&mut eps);
        crate::reparam::reparameterize_into(&eps, lambda, &mut theta_u)?;
        constrain_into(&theta_u, model.support(), &mut theta_c)?;
        for (row, &t) in out.iter_mut().zip(targets) {
            let (loc, scale) = model.predictive_loc_scale(&theta_c, set, t);
            for _ in 0..s_y {
                let d: T = rng.standard_normal();
                row.push(loc + scale * d);
            }
        }
    }
    Ok(out)
}

/// `E_y l(y, h)` for `y ~ N(loc, scale²)` where it has a simple closed form.
/// Only provided for the loss without a closed-form Bayes estimator.
fn gaussian_expected_loss(spec: &LossSpec, h: f64, loc: f64, scale: f64) -> Option<f64> {
    match spec {
        LossSpec::ExpSquaredComplement => {
            let v = 1.0 + 2.0 * scale * scale;
            Some(1.0 - (-(h - loc).powi(2) / v).exp() / v.sqrt())
        }
        _ => None,
    }
}

/// Loss-optimal decision for every target in `targets` under the predictive
/// of `lambda`.
///
/// Losses with a closed-form Bayes estimator use `s_theta * s_y` predictive
/// samples. For the others the expected loss under each Gaussian component
/// `p(y | theta)` is integrated exactly and averaged over `s_theta * s_y`
/// latent draws before numerical minimization.
#[allow(clippy::too_many_arguments)]
pub fn loss_optimal_decisions<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    loss_spec: &LossSpec,
    set: TargetSet,
    targets: &[usize],
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<Vec<T>> {
    let probe = gaussian_expected_loss(loss_spec, 0.0, 0.0, 1.0);
    if loss_spec.has_closed_form() || probe.is_none() {
        let samples = predictive_samples(model, lambda, set, targets, s_theta, s_y, rng)?;
        return samples.iter().map(|s| optimal_decision(loss_spec, s)).collect();
    }
    let comps = predictive_components(model, lambda, set, targets, s_theta * s_y, rng)?;
    Ok(comps
        .iter()
        .map(|c| {
            let objective = |h: f64| {
                c.iter()
                    .map(|&(l, s)| gaussian_expected_loss(loss_spec, h, l, s).unwrap_or(f64::NAN))
                    .sum::<f64>()
            };
            let lo = c.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
            let hi = c.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            T::lit(minimize_1d(objective, lo, hi, 128))
        })
        .collect())
}

/// `(loc, scale)` of `p(y | theta)` for each target over `s_theta` latent draws.
pub fn predictive_components<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    set: TargetSet,
    targets: &[usize],
    s_theta: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let dim = model.latent_dim();
    let mut eps = vec![T::zero(); dim];
    let mut theta_u = vec![T::zero(); dim];
    let mut theta_c = vec![T::zero(); dim];
    let mut out = vec![Vec::with_capacity(s_theta); targets.len()];
    for _ in 0..s_theta {
        rng.fill_standard_normal(&mut eps);
        crate::reparam::reparameterize_into(&eps, lambda, &mut theta_u)?;
        constrain_into(&theta_u, model.support(), &mut theta_c)?;
        for (row, &t) in out.iter_mut().zip(targets) {
            let (loc, scale) = model.predictive_loc_scale(&theta_c, set, t);
            row.push((loc.to_f64_lossy(), scale.to_f64_lossy()));
        }
    }
    Ok(out)
}

/// Per-target realized losses of the Bayes-optimal decisions under `lambda`,
/// measured against the observed training values.
pub fn calibration_losses<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    loss_spec: &LossSpec,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<Vec<T>> {
    let targets: Vec<usize> = (0..model.n_targets(TargetSet::Train)).collect();
    let decisions = loss_optimal_decisions(model, lambda, loss_spec, TargetSet::Train, &targets, s_theta, s_y, rng)?;
    Ok(decisions
        .iter()
        .zip(&targets)
        .map(|(&h, &t)| loss(loss_spec, model.observed(TargetSet::Train, t), h))
        .collect())
}

/// Robust maximum `M_q` from a converged standard-VI approximation.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_m<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda_converged: &VariationalParams<T>,
    loss_spec: &LossSpec,
    q: f64,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<T> {
    let losses = calibration_losses(model, lambda_converged, loss_spec, s_theta, s_y, rng)?;
    let m = empirical_quantile_m(&losses, q)?;
    if !(m > T::zero()) {
        return Err(LcviError::InvalidParameter(format!(
            "calibrated robust maximum is {m}; it must be positive"
        )));
    }
    Ok(m)
}
