//! Seeded base-distribution sampling, the location-scale reparameterization
//! `theta = mu + exp(rho) * eps`, and support transforms for constrained latents.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LcviError, Result};
use crate::meanfield::VariationalParams;
use crate::scalar::Scalar;

/// Deterministic random stream. Each state can be split into independent
/// substreams keyed by an integer, so sample evaluation can be fanned out
/// without changing results.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn seed(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed_value(&self) -> u64 {
        self.seed
    }

    /// Independent substream derived from this state's seed and `key`. Does
    /// not advance `self`.
    pub fn split(&self, key: u64) -> Self {
        let derived = mix64(self.seed ^ mix64(key.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self::seed(derived)
    }

    #[inline]
    pub fn standard_normal<T: Scalar>(&mut self) -> T {
        let z: f64 = self.rng.sample(StandardNormal);
        T::lit(z)
    }

    pub fn fill_standard_normal<T: Scalar>(&mut self, buf: &mut [T]) {
        for slot in buf.iter_mut() {
            *slot = self.standard_normal();
        }
    }

    pub fn noise<T: Scalar>(&mut self, dim: usize) -> NoiseDraw<T> {
        let mut values = vec![T::zero(); dim];
        self.fill_standard_normal(&mut values);
        NoiseDraw { values }
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.rng);
    }
}

/// A vector of standard normal draws (`eps ~ q0` or `delta ~ p0`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Maps an unconstrained coordinate onto the latent's support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportTransform {
    Identity,
    /// `v -> exp(v)`, log-Jacobian `v`.
    ExpPositive,
}

impl SupportTransform {
    #[inline]
    pub fn forward<T: Scalar>(self, v: T) -> T {
        match self {
            SupportTransform::Identity => v,
            SupportTransform::ExpPositive => v.exp(),
        }
    }

    /// `d forward / dv`.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            SupportTransform::Identity => T::one(),
            SupportTransform::ExpPositive => v.exp(),
        }
    }

    #[inline]
    pub fn log_jacobian<T: Scalar>(self, v: T) -> T {
        match self {
            SupportTransform::Identity => T::zero(),
            SupportTransform::ExpPositive => v,
        }
    }

    /// `d log_jacobian / dv`.
    #[inline]
    pub fn log_jacobian_grad<T: Scalar>(self) -> T {
        match self {
            SupportTransform::Identity => T::zero(),
            SupportTransform::ExpPositive => T::one(),
        }
    }
}

/// `theta_j = mu_j + exp(rho_j) * eps_j`.
pub fn reparameterize<T: Scalar>(eps: &NoiseDraw<T>, lambda: &VariationalParams<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); lambda.dim()];
    reparameterize_into(&eps.values, lambda, &mut out)?;
    Ok(out)
}

pub fn reparameterize_into<T: Scalar>(eps: &[T], lambda: &VariationalParams<T>, out: &mut [T]) -> Result<()> {
    if eps.len() != lambda.dim() {
        return Err(LcviError::DimensionMismatch {
            expected: lambda.dim(),
            actual: eps.len(),
        });
    }
    if out.len() != lambda.dim() {
        return Err(LcviError::DimensionMismatch {
            expected: lambda.dim(),
            actual: out.len(),
        });
    }
    for (((o, &e), &mu), &rho) in out.iter_mut().zip(eps).zip(&lambda.means).zip(&lambda.log_scales) {
        *o = mu + rho.exp() * e;
    }
    Ok(())
}

/// Applies per-coordinate support transforms; returns the constrained vector
/// and the summed log-Jacobian.
pub fn constrain<T: Scalar>(theta_unconstrained: &[T], transforms: &[SupportTransform]) -> Result<(Vec<T>, T)> {
    let mut out = vec![T::zero(); theta_unconstrained.len()];
    let lj = constrain_into(theta_unconstrained, transforms, &mut out)?;
    Ok((out, lj))
}

pub fn constrain_into<T: Scalar>(
    theta_unconstrained: &[T],
    transforms: &[SupportTransform],
    out: &mut [T],
) -> Result<T> {
    if transforms.len() != theta_unconstrained.len() {
        return Err(LcviError::DimensionMismatch {
            expected: theta_unconstrained.len(),
            actual: transforms.len(),
        });
    }
    let mut log_jac = T::zero();
    for ((o, &v), &t) in out.iter_mut().zip(theta_unconstrained).zip(transforms) {
        *o = t.forward(v);
        log_jac = log_jac + t.log_jacobian(v);
    }
    Ok(log_jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lambda(means: Vec<f64>, log_scales: Vec<f64>) -> VariationalParams<f64> {
        VariationalParams::new(means, log_scales).unwrap()
    }

    #[test]
    fn equal_seeds_give_identical_streams() {
        let mut a = RngState::seed(42);
        let mut b = RngState::seed(42);
        for _ in 0..1000 {
            assert_eq!(a.standard_normal::<f64>().to_bits(), b.standard_normal::<f64>().to_bits());
        }
    }

    #[test]
    fn different_seeds_diverge_early() {
        let mut a = RngState::seed(1);
        let mut b = RngState::seed(2);
        let differs = (0..100).any(|_| a.standard_normal::<f64>() != b.standard_normal::<f64>());
        assert!(differs);
    }

    #[test]
    fn standard_normal_mean_is_near_zero() {
        let mut rng = RngState::seed(7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| rng.standard_normal::<f64>()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn split_is_pure_and_independent_of_parent_position() {
        let mut parent = RngState::seed(3);
        let s1 = parent.split(9);
        let _ = parent.standard_normal::<f64>();
        let s2 = parent.split(9);
        let (mut s1, mut s2) = (s1, s2);
        assert_eq!(s1.standard_normal::<f64>(), s2.standard_normal::<f64>());
        let mut other = parent.split(10);
        let mut s3 = parent.split(9);
        assert_ne!(other.standard_normal::<f64>(), s3.standard_normal::<f64>());
    }

    #[test]
    fn reparameterize_examples() {
        let t = reparameterize(&NoiseDraw::new(vec![0.5]), &lambda(vec![1.0], vec![0.0])).unwrap();
        assert_eq!(t, vec![1.5]);
        let t = reparameterize(&NoiseDraw::new(vec![-1.0]), &lambda(vec![0.0], vec![2f64.ln()])).unwrap();
        assert!((t[0] + 2.0).abs() < 1e-15);
        let t = reparameterize(&NoiseDraw::new(vec![0.0, 0.0]), &lambda(vec![3.0, -4.0], vec![1.3, -0.2])).unwrap();
        assert_eq!(t, vec![3.0, -4.0]);
    }

    #[test]
    fn reparameterize_rejects_dimension_mismatch() {
        let err = reparameterize(&NoiseDraw::new(vec![0.0]), &lambda(vec![0.0, 0.0], vec![0.0, 0.0]));
        assert!(matches!(err, Err(LcviError::DimensionMismatch { .. })));
    }

    #[test]
    fn constrain_examples() {
        let id = [SupportTransform::Identity, SupportTransform::Identity];
        assert_eq!(constrain(&[3.0, -1.0], &id).unwrap(), (vec![3.0, -1.0], 0.0));
        assert_eq!(constrain(&[0.0], &[SupportTransform::ExpPositive]).unwrap(), (vec![1.0], 0.0));
        let (v, lj) = constrain(&[2.0], &[SupportTransform::ExpPositive]).unwrap();
        assert_eq!(v, vec![2f64.exp()]);
        assert_eq!(lj, 2.0);
    }

    #[test]
    fn exp_positive_log_jacobian_is_exact() {
        for v in [-3.0_f64, -0.5, 0.0, 0.7, 4.2] {
            let t = SupportTransform::ExpPositive;
            assert_eq!(t.log_jacobian(v), v);
            assert!((t.derivative(v).ln() - v).abs() <= 4.0 * f64::EPSILON * v.abs().max(1.0));
        }
    }

    #[test]
    fn reparameterize_gradient_matches_finite_differences() {
        let mut rng = RngState::seed(11);
        for _ in 0..100 {
            let mu: f64 = rng.standard_normal();
            let rho: f64 = 0.5 * rng.standard_normal::<f64>();
            let eps: f64 = rng.standard_normal();
            let f = |mu: f64, rho: f64| mu + rho.exp() * eps;
            let h = 1e-6;
            let d_mu = (f(mu + h, rho) - f(mu - h, rho)) / (2.0 * h);
            let d_rho = (f(mu, rho + h) - f(mu, rho - h)) / (2.0 * h);
            assert!((d_mu - 1.0).abs() < 1e-6);
            let analytic = rho.exp() * eps;
            assert!((d_rho - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3));
        }
    }

    #[test]
    fn reparameterized_samples_have_target_moments() {
        let lam = lambda(vec![1.5, -2.0], vec![0.3, -1.0]);
        let mut rng = RngState::seed(5);
        let n = 100_000;
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut theta = vec![0.0; 2];
        let mut eps = vec![0.0; 2];
        for _ in 0..n {
            rng.fill_standard_normal(&mut eps);
            reparameterize_into(&eps, &lam, &mut theta).unwrap();
            for j in 0..2 {
                sums[j] += theta[j];
                sq[j] += theta[j] * theta[j];
            }
        }
        for j in 0..2 {
            let mean = sums[j] / n as f64;
            let sd = (sq[j] / n as f64 - mean * mean).sqrt();
            let sigma = lam.log_scales[j].exp();
            assert!((mean - lam.means[j]).abs() < 3.0 * sigma / (n as f64).sqrt());
            assert!((sd / sigma - 1.0).abs() < 0.05);
        }
    }
}
