//! Mean-field Gaussian family `q(theta) = prod_j N(theta_j | mu_j, exp(rho_j)²)`
//! over unconstrained latents, and the reparameterized ELBO estimator.

use serde::{Deserialize, Serialize};

use crate::error::{LcviError, Result};
use crate::models::{Batch, Model};
use crate::reparam::{constrain_into, RngState};
use crate::scalar::Scalar;

/// Per-latent `(mean, log-scale)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams<T> {
    pub means: Vec<T>,
    pub log_scales: Vec<T>,
}

impl<T: Scalar> VariationalParams<T> {
    pub fn new(means: Vec<T>, log_scales: Vec<T>) -> Result<Self> {
        if means.len() != log_scales.len() {
            return Err(LcviError::DimensionMismatch {
                expected: means.len(),
                actual: log_scales.len(),
            });
        }
        if means.iter().chain(&log_scales).any(|v| !v.is_finite()) {
            return Err(LcviError::NonFinite {
                context: "variational parameters".into(),
            });
        }
        Ok(Self { means, log_scales })
    }

    /// Means `0`, scales `0.1`.
    pub fn standard_init(dim: usize) -> Self {
        Self {
            means: vec![T::zero(); dim],
            log_scales: vec![T::lit(0.1).ln(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn scales(&self) -> Vec<T> {
        self.log_scales.iter().map(|r| r.exp()).collect()
    }

    /// `[means, log_scales]`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = self.means.clone();
        v.extend_from_slice(&self.log_scales);
        v
    }

    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(LcviError::InvalidParameter("flat parameter vector has odd length".into()));
        }
        let d = flat.len() / 2;
        Self::new(flat[..d].to_vec(), flat[d..].to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> VariationalParams<U> {
        VariationalParams {
            means: self.means.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            log_scales: self.log_scales.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// `sum_j log N(theta_j | mu_j, exp(rho_j)²)`.
pub fn log_q<T: Scalar>(theta: &[T], lambda: &VariationalParams<T>) -> Result<T> {
    if theta.len() != lambda.dim() {
        return Err(LcviError::DimensionMismatch {
            expected: lambda.dim(),
            actual: theta.len(),
        });
    }
    Ok(theta
        .iter()
        .zip(&lambda.means)
        .zip(&lambda.log_scales)
        .map(|((&t, &mu), &rho)| {
            let z = (t - mu) / rho.exp();
            -T::half_ln_2pi() - rho - T::lit(0.5) * z * z
        })
        .sum())
}

/// Closed-form entropy `sum_j (rho_j + ½ log(2πe))`.
pub fn entropy<T: Scalar>(lambda: &VariationalParams<T>) -> T {
    let per = T::half_ln_2pi() + T::lit(0.5);
    lambda.log_scales.iter().map(|&rho| rho + per).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate<T> {
    pub value: T,
    pub grad_means: Vec<T>,
    pub grad_log_scales: Vec<T>,
    pub n_samples: usize,
}

/// Buffers reused across the samples of one estimate.
pub(crate) struct SampleWorkspace<T> {
    pub eps: Vec<T>,
    pub theta_u: Vec<T>,
    pub theta_c: Vec<T>,
    pub grad_c: Vec<T>,
}

impl<T: Scalar> SampleWorkspace<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            eps: vec![T::zero(); dim],
            theta_u: vec![T::zero(); dim],
            theta_c: vec![T::zero(); dim],
            grad_c: vec![T::zero(); dim],
        }
    }

    /// Draws `eps`, fills `theta_u = f(eps, lambda)` and `theta_c`; returns the log-Jacobian.
    pub fn draw<M: Model<T> + ?Sized>(&mut self, model: &M, lambda: &VariationalParams<T>, rng: &mut RngState) -> Result<T> {
        rng.fill_standard_normal(&mut self.eps);
        for j in 0..self.eps.len() {
            self.theta_u[j] = lambda.means[j] + lambda.log_scales[j].exp() * self.eps[j];
        }
        constrain_into(&self.theta_u, model.support(), &mut self.theta_c)
    }

    /// Pulls `grad_c` (w.r.t. constrained latents) back to `(mu, rho)` and adds
    /// `weight` times the result into the accumulators. When
    /// `with_log_jacobian` is set, the log-Jacobian's gradient is included.
    pub fn backprop<M: Model<T> + ?Sized>(
        &self,
        model: &M,
        lambda: &VariationalParams<T>,
        weight: T,
        with_log_jacobian: bool,
        grad_means: &mut [T],
        grad_log_scales: &mut [T],
    ) {
        for (j, t) in model.support().iter().enumerate() {
            let mut gu = self.grad_c[j] * t.derivative(self.theta_u[j]);
            if with_log_jacobian {
                gu = gu + t.log_jacobian_grad();
            }
            let gu = weight * gu;
            grad_means[j] = grad_means[j] + gu;
            grad_log_scales[j] = grad_log_scales[j] + gu * lambda.log_scales[j].exp() * self.eps[j];
        }
    }
}

/// Reparameterized Monte Carlo ELBO with gradients w.r.t. `(mu, rho)`.
///
/// The minibatch log-likelihood is multiplied by `batch.scale`; the prior and
/// the entropy are not.
pub fn estimate_elbo<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    batch: &Batch<T>,
    lambda: &VariationalParams<T>,
    s_theta: usize,
    rng: &mut RngState,
) -> Result<ElboEstimate<T>> {
    if s_theta == 0 {
        return Err(LcviError::InvalidParameter("s_theta must be at least 1".into()));
    }
    let dim = model.latent_dim();
    if lambda.dim() != dim {
        return Err(LcviError::DimensionMismatch {
            expected: dim,
            actual: lambda.dim(),
        });
    }
    let mut ws = SampleWorkspace::new(dim);
    let mut grad_means = vec![T::zero(); dim];
    let mut grad_log_scales = vec![T::zero(); dim];
    let weight = T::from_usize_lossy(s_theta).recip();
    let mut total = T::zero();
    for _ in 0..s_theta {
        let log_jac = ws.draw(model, lambda, rng)?;
        ws.grad_c.iter_mut().for_each(|g| *g = T::zero());
        let lp = model.log_prior(&ws.theta_c, Some(&mut ws.grad_c))
            + model.log_likelihood(&ws.theta_c, &batch.rows, batch.scale, Some(&mut ws.grad_c));
        if !lp.is_finite() {
            return Err(LcviError::NonFiniteLogJoint {
                theta: ws.theta_c.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
        total = total + lp + log_jac;
        ws.backprop(model, lambda, weight, true, &mut grad_means, &mut grad_log_scales);
    }
    for g in grad_log_scales.iter_mut() {
        *g = *g + T::one();
    }
    Ok(ElboEstimate {
        value: total * weight + entropy(lambda),
        grad_means,
        grad_log_scales,
        n_samples: s_theta,
    })
}
