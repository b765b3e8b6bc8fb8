//! Probabilistic matrix factorization `Y ~ N(ZW, sigma_y²)` with independent
//! normal priors on the factors. `Z` is `n_users × k`, `W` is `k × n_items`.
//! Latents are laid out as `Z` (row-major) followed by `W` (row-major).
//! Rows for minibatching are users.

use crate::error::{LcviError, Result};
use crate::reparam::SupportTransform;
use crate::scalar::{normal_log_pdf, Scalar};

use super::{Model, TargetSet};

/// Dense real matrix with disjoint train and held-out cell masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixData<T> {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major values.
    pub values: Vec<T>,
    pub mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl<T: Scalar> MatrixData<T> {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<T>, mask: Vec<bool>, test_mask: Vec<bool>) -> Result<Self> {
        let n = n_rows * n_cols;
        if values.len() != n || mask.len() != n || test_mask.len() != n {
            return Err(LcviError::DimensionMismatch {
                expected: n,
                actual: values.len().min(mask.len()).min(test_mask.len()),
            });
        }
        if mask.iter().zip(&test_mask).any(|(a, b)| *a && *b) {
            return Err(LcviError::InvalidParameter("train and test masks overlap".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
            mask,
            test_mask,
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n_cols + j]
    }

    pub fn n_train(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn n_test(&self) -> usize {
        self.test_mask.iter().filter(|m| **m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmfPriors<T> {
    pub sigma_y: T,
    pub sigma_w: T,
    pub sigma_z: T,
}

impl<T: Scalar> PmfPriors<T> {
    pub fn uniform(sigma: T) -> Self {
        Self {
            sigma_y: sigma,
            sigma_w: sigma,
            sigma_z: sigma,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pmf<T> {
    pub data: MatrixData<T>,
    pub k: usize,
    pub priors: PmfPriors<T>,
    support: Vec<SupportTransform>,
    train_cells: Vec<(usize, usize)>,
    /// `train_cells[row_start[i]..row_start[i + 1]]` are user `i`'s cells.
    row_start: Vec<usize>,
    test_cells: Vec<(usize, usize)>,
}

impl<T: Scalar> Pmf<T> {
    pub fn new(data: MatrixData<T>, k: usize, priors: PmfPriors<T>) -> Result<Self> {
        if k == 0 || data.n_rows == 0 || data.n_cols == 0 {
            return Err(LcviError::InvalidParameter("matrix dimensions and k must be at least 1".into()));
        }
        if !(priors.sigma_y > T::zero() && priors.sigma_w > T::zero() && priors.sigma_z > T::zero()) {
            return Err(LcviError::InvalidParameter("PMF standard deviations must be positive".into()));
        }
        let mut train_cells = Vec::new();
        let mut test_cells = Vec::new();
        let mut row_start = Vec::with_capacity(data.n_rows + 1);
        for i in 0..data.n_rows {
            row_start.push(train_cells.len());
            for j in 0..data.n_cols {
                let c = i * data.n_cols + j;
                if data.mask[c] {
                    train_cells.push((i, j));
                }
                if data.test_mask[c] {
                    test_cells.push((i, j));
                }
            }
        }
        row_start.push(train_cells.len());
        let dim = k * (data.n_rows + data.n_cols);
        Ok(Self {
            data,
            k,
            priors,
            support: vec![SupportTransform::Identity; dim],
            train_cells,
            row_start,
            test_cells,
        })
    }

    pub fn n_users(&self) -> usize {
        self.data.n_rows
    }

    pub fn n_items(&self) -> usize {
        self.data.n_cols
    }

    #[inline]
    pub fn z_index(&self, user: usize, l: usize) -> usize {
        user * self.k + l
    }

    #[inline]
    pub fn w_index(&self, l: usize, item: usize) -> usize {
        self.data.n_rows * self.k + l * self.data.n_cols + item
    }

    #[inline]
    fn product(&self, theta: &[T], i: usize, j: usize) -> T {
        let mut m = T::zero();
        for l in 0..self.k {
            m = m + theta[self.z_index(i, l)] * theta[self.w_index(l, j)];
        }
        m
    }

    fn cell(&self, set: TargetSet, target: usize) -> (usize, usize) {
        match set {
            TargetSet::Train => self.train_cells[target],
            TargetSet::Test => self.test_cells[target],
        }
    }

    pub fn train_cells(&self) -> &[(usize, usize)] {
        &self.train_cells
    }

    pub fn test_cells(&self) -> &[(usize, usize)] {
        &self.test_cells
    }
}

impl<T: Scalar> Model<T> for Pmf<T> {
    fn latent_dim(&self) -> usize {
        self.support.len()
    }

    fn support(&self) -> &[SupportTransform] {
        &self.support
    }

    fn n_rows(&self) -> usize {
        self.data.n_rows
    }

    fn log_prior(&self, theta: &[T], grad: Option<&mut [T]>) -> T {
        let split = self.data.n_rows * self.k;
        let (sz, sw) = (self.priors.sigma_z, self.priors.sigma_w);
        let mut lp = T::zero();
        for &z in &theta[..split] {
            lp = lp + normal_log_pdf(z, T::zero(), sz);
        }
        for &w in &theta[split..] {
            lp = lp + normal_log_pdf(w, T::zero(), sw);
        }
        if let Some(g) = grad {
            let (pz, pw) = ((sz * sz).recip(), (sw * sw).recip());
            for (gi, &z) in g[..split].iter_mut().zip(&theta[..split]) {
                *gi = *gi - z * pz;
            }
            for (gi, &w) in g[split..].iter_mut().zip(&theta[split..]) {
                *gi = *gi - w * pw;
            }
        }
        lp
    }

    fn log_likelihood(&self, theta: &[T], rows: &[usize], scale: T, mut grad: Option<&mut [T]>) -> T {
        let sy = self.priors.sigma_y;
        let prec = (sy * sy).recip();
        let mut total = T::zero();
        for &i in rows {
            for &(_, j) in &self.train_cells[self.row_start[i]..self.row_start[i + 1]] {
                let y = self.data.get(i, j);
                let m = self.product(theta, i, j);
                total = total + normal_log_pdf(y, m, sy);
                if let Some(g) = grad.as_deref_mut() {
                    let r = scale * (y - m) * prec;
                    for l in 0..self.k {
                        let (zi, wi) = (self.z_index(i, l), self.w_index(l, j));
                        let (z, w) = (theta[zi], theta[wi]);
                        g[zi] = g[zi] + r * w;
                        g[wi] = g[wi] + r * z;
                    }
                }
            }
        }
        scale * total
    }

    fn n_targets(&self, set: TargetSet) -> usize {
        match set {
            TargetSet::Train => self.train_cells.len(),
            TargetSet::Test => self.test_cells.len(),
        }
    }

    fn train_targets_in_rows(&self, rows: &[usize]) -> Vec<usize> {
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        sorted
            .into_iter()
            .flat_map(|i| self.row_start[i]..self.row_start[i + 1])
            .collect()
    }

    fn observed(&self, set: TargetSet, target: usize) -> T {
        let (i, j) = self.cell(set, target);
        self.data.get(i, j)
    }

    fn predictive_loc_scale(&self, theta: &[T], set: TargetSet, target: usize) -> (T, T) {
        let (i, j) = self.cell(set, target);
        (self.product(theta, i, j), self.priors.sigma_y)
    }

    fn predictive_backward(&self, theta: &[T], set: TargetSet, target: usize, d_loc: T, _d_scale: T, grad: &mut [T]) {
        let (i, j) = self.cell(set, target);
        for l in 0..self.k {
            let (zi, wi) = (self.z_index(i, l), self.w_index(l, j));
            let (z, w) = (theta[zi], theta[wi]);
            grad[zi] = grad[zi] + d_loc * w;
            grad[wi] = grad[wi] + d_loc * z;
        }
    }
}
