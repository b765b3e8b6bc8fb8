use crate::error::{LcviError, Result};
use crate::reparam::SupportTransform;
use crate::scalar::{normal_log_pdf, Scalar};

use super::{Model, TargetSet};

/// `y_i ~ N(theta, noise_sd²)`, `theta ~ N(prior_mean, prior_sd²)`.
///
/// One latent scalar, one row and one target per observation. Training and
/// evaluation targets coincide. The predictive scale can differ from the
/// likelihood noise, which allows a deterministic predictive (`0`).
#[derive(Clone, Debug)]
pub struct ConjugateNormal<T> {
    pub observations: Vec<T>,
    pub noise_sd: T,
    pub prior_mean: T,
    pub prior_sd: T,
    pub predictive_sd: T,
    support: [SupportTransform; 1],
}

impl<T: Scalar> ConjugateNormal<T> {
    pub fn new(observations: Vec<T>, noise_sd: T, prior_mean: T, prior_sd: T) -> Result<Self> {
        if !(noise_sd > T::zero()) || !(prior_sd > T::zero()) {
            return Err(LcviError::InvalidParameter("standard deviations must be positive".into()));
        }
        Ok(Self {
            observations,
            noise_sd,
            prior_mean,
            prior_sd,
            predictive_sd: noise_sd,
            support: [SupportTransform::Identity],
        })
    }

    pub fn with_predictive_sd(mut self, sd: T) -> Self {
        self.predictive_sd = sd;
        self
    }

    /// Exact posterior `(mean, sd)`.
    pub fn posterior(&self) -> (T, T) {
        let n = T::from_usize_lossy(self.observations.len());
        let prior_prec = (self.prior_sd * self.prior_sd).recip();
        let noise_prec = (self.noise_sd * self.noise_sd).recip();
        let prec = prior_prec + n * noise_prec;
        let sum: T = self.observations.iter().copied().sum();
        let mean = (prior_prec * self.prior_mean + noise_prec * sum) / prec;
        (mean, prec.recip().sqrt())
    }
}

impl<T: Scalar> Model<T> for ConjugateNormal<T> {
    fn latent_dim(&self) -> usize {
        1
    }

    fn support(&self) -> &[SupportTransform] {
        &self.support
    }

    fn n_rows(&self) -> usize {
        self.observations.len()
    }

    fn log_prior(&self, theta: &[T], grad: Option<&mut [T]>) -> T {
        if let Some(g) = grad {
            g[0] = g[0] - (theta[0] - self.prior_mean) / (self.prior_sd * self.prior_sd);
        }
        normal_log_pdf(theta[0], self.prior_mean, self.prior_sd)
    }

    fn log_likelihood(&self, theta: &[T], rows: &[usize], scale: T, grad: Option<&mut [T]>) -> T {
        let var = self.noise_sd * self.noise_sd;
        let mut total = T::zero();
        let mut d = T::zero();
        for &r in rows {
            let y = self.observations[r];
            total = total + normal_log_pdf(y, theta[0], self.noise_sd);
            d = d + (y - theta[0]) / var;
        }
        if let Some(g) = grad {
            g[0] = g[0] + scale * d;
        }
        scale * total
    }

    fn n_targets(&self, _set: TargetSet) -> usize {
        self.observations.len()
    }

    fn train_targets_in_rows(&self, rows: &[usize]) -> Vec<usize> {
        let mut t = rows.to_vec();
        t.sort_unstable();
        t
    }

    fn observed(&self, _set: TargetSet, target: usize) -> T {
        self.observations[target]
    }

    fn predictive_loc_scale(&self, theta: &[T], _set: TargetSet, _target: usize) -> (T, T) {
        (theta[0], self.predictive_sd)
    }

    fn predictive_backward(&self, _theta: &[T], _set: TargetSet, _target: usize, d_loc: T, _d_scale: T, grad: &mut [T]) {
        grad[0] = grad[0] + d_loc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_of_single_unit_observation() {
        let m = ConjugateNormal::new(vec![2.0_f64], 1.0, 0.0, 1.0).unwrap();
        let (mean, sd) = m.posterior();
        assert!((mean - 1.0).abs() < 1e-15);
        assert!((sd - 0.5_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = ConjugateNormal::new(vec![2.0_f64, -0.5, 1.0], 0.7, 0.3, 2.0).unwrap();
        for &t in &[-1.0, 0.2, 3.0] {
            let mut g = [0.0];
            m.log_joint_grad(&[t], &mut g);
            let h = 1e-5;
            let fd = (m.log_joint(&[t + h]) - m.log_joint(&[t - h])) / (2.0 * h);
            assert!((fd - g[0]).abs() < 1e-6 * g[0].abs().max(1.0));
        }
    }
}
