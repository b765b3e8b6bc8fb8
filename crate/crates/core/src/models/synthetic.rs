use serde::{Deserialize, Serialize};

use crate::error::{LcviError, Result};
use crate::reparam::RngState;
use crate::scalar::Scalar;

use super::MatrixData;

/// Generator for low-rank matrices with Gaussian noise and a random 50/50
/// train/held-out cell split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMatrix {
    pub n_users: usize,
    pub n_items: usize,
    pub k_true: usize,
    /// Standard deviation of the true factor entries.
    pub factor_sd: f64,
    pub sigma_y: f64,
}

impl SyntheticMatrix {
    pub fn generate<T: Scalar>(&self, seed: u64) -> Result<MatrixData<T>> {
        if self.n_users == 0 || self.n_items == 0 || self.k_true == 0 {
            return Err(LcviError::InvalidParameter("synthetic matrix dimensions must be at least 1".into()));
        }
        let mut rng = RngState::seed(seed);
        let (n, m, k) = (self.n_users, self.n_items, self.k_true);
        let z: Vec<f64> = (0..n * k).map(|_| self.factor_sd * rng.standard_normal::<f64>()).collect();
        let w: Vec<f64> = (0..k * m).map(|_| self.factor_sd * rng.standard_normal::<f64>()).collect();
        let mut values = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let signal: f64 = (0..k).map(|l| z[i * k + l] * w[l * m + j]).sum();
                values.push(T::lit(signal + self.sigma_y * rng.standard_normal::<f64>()));
            }
        }
        let mask: Vec<bool> = (0..n * m).map(|_| rng.uniform() < 0.5).collect();
        let test_mask = mask.iter().map(|b| !b).collect();
        MatrixData::new(n, m, values, mask, test_mask)
    }
}

/// Draws `Z` (`n_users × k_true`) and `W` (`k_true × n_items`) with standard
/// normal entries, sets `Y = ZW + sigma_y * noise` and assigns every cell to
/// train or held-out with probability one half.
pub fn generate_synthetic_matrix<T: Scalar>(
    n_users: usize,
    n_items: usize,
    k_true: usize,
    sigma_y: f64,
    seed: u64,
) -> Result<MatrixData<T>> {
    SyntheticMatrix {
        n_users,
        n_items,
        k_true,
        factor_sd: 1.0,
        sigma_y,
    }
    .generate(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_exhaustive_and_balanced() {
        let d: MatrixData<f64> = generate_synthetic_matrix(60, 40, 3, 1.0, 17).unwrap();
        let total = 60 * 40;
        assert_eq!(d.n_train() + d.n_test(), total);
        let frac = d.n_train() as f64 / total as f64;
        assert!((frac - 0.5).abs() < 3.0 * (0.25 / total as f64).sqrt());
    }

    #[test]
    fn same_seed_same_matrix() {
        let a: MatrixData<f64> = generate_synthetic_matrix(10, 7, 2, 0.5, 3).unwrap();
        let b: MatrixData<f64> = generate_synthetic_matrix(10, 7, 2, 0.5, 3).unwrap();
        assert_eq!(a, b);
        let c: MatrixData<f64> = generate_synthetic_matrix(10, 7, 2, 0.5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(generate_synthetic_matrix::<f64>(0, 7, 2, 0.5, 3).is_err());
    }
}
