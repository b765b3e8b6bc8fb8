//! Differentiable models: log joint density over constrained latents, a
//! Gaussian predictive reparameterization `y = g(delta, theta, x)`, and their
//! partial derivatives.

mod conjugate;
mod eight_schools;
mod pmf;
mod synthetic;

pub use conjugate::ConjugateNormal;
pub use eight_schools::{EightSchools, EightSchoolsData};
pub use pmf::{MatrixData, Pmf, PmfPriors};
pub use synthetic::{generate_synthetic_matrix, SyntheticMatrix};

use crate::reparam::SupportTransform;
use crate::scalar::Scalar;

/// Which collection of prediction targets an operation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSet {
    /// Targets whose observations enter the likelihood; decisions `{h}` are
    /// learned for these.
    Train,
    /// Targets used to measure empirical risk.
    Test,
}

/// Rows of the dataset visited by one optimization step, and the factor that
/// rescales their log-likelihood to full-dataset size.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub rows: Vec<usize>,
    pub scale: T,
}

impl<T: Scalar> Batch<T> {
    pub fn full(n_rows: usize) -> Self {
        Self {
            rows: (0..n_rows).collect(),
            scale: T::one(),
        }
    }

    pub fn from_rows(rows: Vec<usize>, n_rows: usize) -> Self {
        let scale = T::from_usize_lossy(n_rows) / T::from_usize_lossy(rows.len().max(1));
        Self { rows, scale }
    }
}

/// A probabilistic model usable by the estimators.
///
/// Latent vectors passed to the density methods are in constrained space;
/// support transforms and their Jacobians are applied by the callers.
/// Gradient methods add into `grad`, they never overwrite it.
pub trait Model<T: Scalar> {
    fn latent_dim(&self) -> usize;

    fn support(&self) -> &[SupportTransform];

    /// Number of minibatch units.
    fn n_rows(&self) -> usize;

    /// All terms of the log joint that do not belong to a row.
    fn log_prior(&self, theta: &[T], grad: Option<&mut [T]>) -> T;

    /// `scale * sum_{r in rows} log p(data_r | theta)`; gradients are scaled too.
    fn log_likelihood(&self, theta: &[T], rows: &[usize], scale: T, grad: Option<&mut [T]>) -> T;

    fn n_targets(&self, set: TargetSet) -> usize;

    /// Indices of training targets whose data lives in `rows`, ascending.
    fn train_targets_in_rows(&self, rows: &[usize]) -> Vec<usize>;

    fn observed(&self, set: TargetSet, target: usize) -> T;

    /// Location and scale of the Gaussian predictive so that
    /// `g(delta, theta, x) = loc + scale * delta`.
    fn predictive_loc_scale(&self, theta: &[T], set: TargetSet, target: usize) -> (T, T);

    /// Adds `d_loc * d loc/d theta + d_scale * d scale/d theta` into `grad`.
    fn predictive_backward(&self, theta: &[T], set: TargetSet, target: usize, d_loc: T, d_scale: T, grad: &mut [T]);

    fn log_joint(&self, theta: &[T]) -> T {
        let rows: Vec<usize> = (0..self.n_rows()).collect();
        self.log_prior(theta, None) + self.log_likelihood(theta, &rows, T::one(), None)
    }

    fn log_joint_grad(&self, theta: &[T], grad: &mut [T]) -> T {
        let rows: Vec<usize> = (0..self.n_rows()).collect();
        let lp = self.log_prior(theta, Some(&mut *grad));
        lp + self.log_likelihood(theta, &rows, T::one(), Some(grad))
    }

    /// `g(delta, theta, x)`.
    fn predict(&self, delta: T, theta: &[T], set: TargetSet, target: usize) -> T {
        let (loc, scale) = self.predictive_loc_scale(theta, set, target);
        loc + scale * delta
    }

    /// Returns `d g / d delta` and adds `d g / d theta` into `grad_theta`.
    fn predict_partials(&self, delta: T, theta: &[T], set: TargetSet, target: usize, grad_theta: &mut [T]) -> T {
        let (_, scale) = self.predictive_loc_scale(theta, set, target);
        self.predictive_backward(theta, set, target, T::one(), delta, grad_theta);
        scale
    }
}
