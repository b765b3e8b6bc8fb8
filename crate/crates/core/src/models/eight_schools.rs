//! Hierarchical eight-schools model with a log-transformed group scale.
//!
//! Latent layout: `[mu, log tau, theta_1, ..., theta_8]`.
//!
//! ```text
//! y_j     ~ N(theta_j, sigma_j²)
//! theta_j ~ N(mu, tau²)
//! mu      ~ N(0, 5²)
//! tau     ~ HalfCauchy(0, 5)
//! ```
//!
//! `tau` is optimized as `log tau`; the mean-field normal over `log tau` is an
//! implementation choice for handling the positive support.

use std::path::Path;

use serde::Deserialize;

use crate::error::{LcviError, Result};
use crate::reparam::SupportTransform;
use crate::scalar::{normal_log_pdf, Scalar};

use super::{Model, TargetSet};

pub const N_SCHOOLS: usize = 8;
const MU_PRIOR_SD: f64 = 5.0;
const TAU_PRIOR_SCALE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EightSchoolsData<T> {
    pub names: Vec<String>,
    pub effects: Vec<T>,
    pub std_errors: Vec<T>,
}

#[derive(Deserialize)]
struct SchoolRow {
    school: String,
    y: f64,
    sigma: f64,
}

impl<T: Scalar> EightSchoolsData<T> {
    pub fn new(names: Vec<String>, effects: Vec<T>, std_errors: Vec<T>) -> Result<Self> {
        if effects.len() != N_SCHOOLS || std_errors.len() != N_SCHOOLS || names.len() != N_SCHOOLS {
            return Err(LcviError::InvalidParameter(format!(
                "eight schools data needs {N_SCHOOLS} rows, got {}",
                effects.len()
            )));
        }
        if std_errors.iter().any(|s| !(*s > T::zero())) {
            return Err(LcviError::InvalidParameter("school standard errors must be positive".into()));
        }
        Ok(Self {
            names,
            effects,
            std_errors,
        })
    }

    /// The classic SAT coaching data.
    pub fn canonical() -> Self {
        Self::from_csv_str(include_str!("../../data/eight_schools.csv")).expect("bundled data is valid")
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["school", "y", "sigma"] {
            return Err(LcviError::Parse {
                line: 1,
                message: "expected header `school,y,sigma`".into(),
            });
        }
        let (mut names, mut effects, mut std_errors) = (vec![], vec![], vec![]);
        for (i, row) in rdr.deserialize::<SchoolRow>().enumerate() {
            let row = row.map_err(|e| LcviError::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            names.push(row.school);
            effects.push(T::lit(row.y));
            std_errors.push(T::lit(row.sigma));
        }
        Self::new(names, effects, std_errors)
    }
}

#[derive(Clone, Debug)]
pub struct EightSchools<T> {
    pub data: EightSchoolsData<T>,
    support: Vec<SupportTransform>,
}

impl<T: Scalar> EightSchools<T> {
    pub const MU: usize = 0;
    pub const LOG_TAU: usize = 1;
    pub const THETA0: usize = 2;

    pub fn new(data: EightSchoolsData<T>) -> Self {
        let mut support = vec![SupportTransform::Identity; N_SCHOOLS + 2];
        support[Self::LOG_TAU] = SupportTransform::ExpPositive;
        Self { data, support }
    }

    pub fn canonical() -> Self {
        Self::new(EightSchoolsData::canonical())
    }

    /// `log HalfCauchy(tau | 0, s)` for `tau > 0`.
    pub fn half_cauchy_log_pdf(tau: T, scale: T) -> T {
        let z = tau / scale;
        (T::lit(2.0) / (T::PI() * scale)).ln() - (T::one() + z * z).ln()
    }
}

impl<T: Scalar> Model<T> for EightSchools<T> {
    fn latent_dim(&self) -> usize {
        N_SCHOOLS + 2
    }

    fn support(&self) -> &[SupportTransform] {
        &self.support
    }

    fn n_rows(&self) -> usize {
        N_SCHOOLS
    }

    fn log_prior(&self, theta: &[T], grad: Option<&mut [T]>) -> T {
        let mu = theta[Self::MU];
        let tau = theta[Self::LOG_TAU];
        let mu_sd = T::lit(MU_PRIOR_SD);
        let tau_scale = T::lit(TAU_PRIOR_SCALE);

        let mut lp = normal_log_pdf(mu, T::zero(), mu_sd) + Self::half_cauchy_log_pdf(tau, tau_scale);
        for j in 0..N_SCHOOLS {
            lp = lp + normal_log_pdf(theta[Self::THETA0 + j], mu, tau);
        }

        if let Some(g) = grad {
            let tau2 = tau * tau;
            let mut d_mu = -mu / (mu_sd * mu_sd);
            let mut d_tau = -T::lit(2.0) * tau / (tau_scale * tau_scale + tau2);
            for j in 0..N_SCHOOLS {
                let r = theta[Self::THETA0 + j] - mu;
                d_mu = d_mu + r / tau2;
                d_tau = d_tau - tau.recip() + r * r / (tau2 * tau);
                g[Self::THETA0 + j] = g[Self::THETA0 + j] - r / tau2;
            }
            g[Self::MU] = g[Self::MU] + d_mu;
            g[Self::LOG_TAU] = g[Self::LOG_TAU] + d_tau;
        }
        lp
    }

    fn log_likelihood(&self, theta: &[T], rows: &[usize], scale: T, mut grad: Option<&mut [T]>) -> T {
        let mut total = T::zero();
        for &j in rows {
            let (y, s) = (self.data.effects[j], self.data.std_errors[j]);
            let th = theta[Self::THETA0 + j];
            total = total + normal_log_pdf(y, th, s);
            if let Some(g) = grad.as_deref_mut() {
                g[Self::THETA0 + j] = g[Self::THETA0 + j] + scale * (y - th) / (s * s);
            }
        }
        scale * total
    }

    fn n_targets(&self, _set: TargetSet) -> usize {
        N_SCHOOLS
    }

    fn train_targets_in_rows(&self, rows: &[usize]) -> Vec<usize> {
        let mut t = rows.to_vec();
        t.sort_unstable();
        t
    }

    fn observed(&self, _set: TargetSet, target: usize) -> T {
        self.data.effects[target]
    }

    fn predictive_loc_scale(&self, theta: &[T], _set: TargetSet, target: usize) -> (T, T) {
        (theta[Self::THETA0 + target], self.data.std_errors[target])
    }

    fn predictive_backward(&self, _theta: &[T], _set: TargetSet, target: usize, d_loc: T, _d_scale: T, grad: &mut [T]) {
        grad[Self::THETA0 + target] = grad[Self::THETA0 + target] + d_loc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numerical_gradient};
    use crate::reparam::{constrain, RngState};

    fn hand_coded_log_joint(y: &[f64], s: &[f64], theta: &[f64]) -> f64 {
        let ln_norm = |x: f64, m: f64, sd: f64| {
            -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - (x - m).powi(2) / (2.0 * sd * sd)
        };
        let (mu, tau) = (theta[0], theta[1]);
        let mut lp = ln_norm(mu, 0.0, 5.0);
        lp += (2.0 / (std::f64::consts::PI * 5.0)).ln() - (1.0 + (tau / 5.0).powi(2)).ln();
        for j in 0..8 {
            lp += ln_norm(theta[2 + j], mu, tau);
            lp += ln_norm(y[j], theta[2 + j], s[j]);
        }
        lp
    }

    fn random_point(rng: &mut RngState) -> Vec<f64> {
        let mut v: Vec<f64> = (0..10).map(|_| 5.0 * rng.standard_normal::<f64>()).collect();
        v[1] = 0.8 * rng.standard_normal::<f64>() + 1.0;
        v
    }

    #[test]
    fn canonical_data_loads() {
        let d = EightSchoolsData::<f64>::canonical();
        assert_eq!(d.effects, vec![28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0]);
        assert_eq!(d.std_errors, vec![15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0]);
    }

    #[test]
    fn bad_header_is_rejected() {
        let err = EightSchoolsData::<f64>::from_csv_str("name,y,s\nA,1,1\n");
        assert!(matches!(err, Err(LcviError::Parse { line: 1, .. })));
    }

    #[test]
    fn log_joint_matches_hand_coded_density() {
        let m = EightSchools::<f64>::canonical();
        let mut rng = RngState::seed(8);
        for _ in 0..20 {
            let u = random_point(&mut rng);
            let (c, _) = constrain(&u, m.support()).unwrap();
            let oracle = hand_coded_log_joint(&m.data.effects, &m.data.std_errors, &c);
            assert!((m.log_joint(&c) - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn log_joint_gradient_matches_finite_differences() {
        let m = EightSchools::<f64>::canonical();
        let mut rng = RngState::seed(9);
        for _ in 0..50 {
            let u = random_point(&mut rng);
            let (c, _) = constrain(&u, m.support()).unwrap();
            let mut g = vec![0.0; 10];
            m.log_joint_grad(&c, &mut g);
            let fd = numerical_gradient(|x| m.log_joint(x), &c, 1e-4);
            let err = max_relative_error(&fd, &g, 1e-3);
            assert!(err < 1e-6, "max rel err {err}: fd {fd:?} analytic {g:?}");
        }
    }

    #[test]
    fn predictive_at_zero_noise_is_theta() {
        let m = EightSchools::<f64>::canonical();
        let theta: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        for j in 0..8 {
            assert_eq!(m.predict(0.0, &theta, TargetSet::Train, j), theta[2 + j]);
        }
    }

    #[test]
    fn log_tau_shift_moves_jacobian_by_shift() {
        let m = EightSchools::<f64>::canonical();
        let u = vec![0.3_f64; 10];
        let mut shifted = u.clone();
        shifted[1] += 1.7;
        let (_, a) = constrain(&u, m.support()).unwrap();
        let (_, b) = constrain(&shifted, m.support()).unwrap();
        assert!((b - a - 1.7).abs() < 1e-15);
    }
}
