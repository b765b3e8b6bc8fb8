//! Empirical risk, the relative risk reduction of a calibrated approximation
//! over standard VI, and per-epoch run traces.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::DecisionSet;
use crate::decisions::{loss, loss_optimal_decisions, LossSpec};
use crate::error::{LcviError, Result};
use crate::meanfield::VariationalParams;
use crate::models::{Model, TargetSet};
use crate::reparam::RngState;
use crate::scalar::Scalar;

pub const TRACE_HEADER: &str = "epoch,elbo,u_term,empirical_risk,wall_seconds";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub elbo: f64,
    pub u_term: f64,
    pub empirical_risk: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(LcviError::InvalidParameter(format!(
                    "trace epochs must increase: {} after {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                r.epoch, r.elbo, r.u_term, r.empirical_risk, r.wall_seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut trace = RunTrace::default();
        for row in rdr.deserialize() {
            trace.push(row?)?;
        }
        Ok(trace)
    }
}

/// Mean per-target loss of `decisions` against `observed`.
pub fn empirical_risk<T: Scalar>(loss_spec: &LossSpec, decisions: &DecisionSet<T>, observed: &[T]) -> Result<T> {
    Ok(mean(&per_target_losses(loss_spec, decisions, observed)?))
}

pub fn per_target_losses<T: Scalar>(loss_spec: &LossSpec, decisions: &DecisionSet<T>, observed: &[T]) -> Result<Vec<T>> {
    if decisions.is_empty() {
        return Err(LcviError::Empty("decisions"));
    }
    if decisions.len() != observed.len() {
        return Err(LcviError::DimensionMismatch {
            expected: decisions.len(),
            actual: observed.len(),
        });
    }
    Ok(decisions
        .values
        .iter()
        .zip(observed)
        .map(|(&h, &y)| loss(loss_spec, y, h))
        .collect())
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// `(er_vi - er_lcvi) / er_vi`.
pub fn risk_reduction(er_vi: f64, er_lcvi: f64) -> Result<f64> {
    if !(er_vi > 0.0) {
        return Err(LcviError::InvalidParameter(format!(
            "baseline empirical risk must be positive, got {er_vi}"
        )));
    }
    Ok((er_vi - er_lcvi) / er_vi)
}

/// Loss-optimal decisions for every target of `set` under the predictive of `lambda`.
pub fn bayes_decisions<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    loss_spec: &LossSpec,
    set: TargetSet,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<DecisionSet<T>> {
    let targets: Vec<usize> = (0..model.n_targets(set)).collect();
    let values = loss_optimal_decisions(model, lambda, loss_spec, set, &targets, s_theta, s_y, rng)?;
    Ok(DecisionSet::new(values))
}

pub fn observed_values<T: Scalar, M: Model<T> + ?Sized>(model: &M, set: TargetSet) -> Vec<T> {
    (0..model.n_targets(set)).map(|t| model.observed(set, t)).collect()
}

/// Evaluation of one approximation: its loss-optimal decisions on the
/// evaluation targets and their realized losses.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskEvaluation<T> {
    pub risk: T,
    pub decisions: DecisionSet<T>,
    pub per_target_losses: Vec<T>,
}

pub fn evaluate_risk<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    lambda: &VariationalParams<T>,
    loss_spec: &LossSpec,
    s_theta: usize,
    s_y: usize,
    rng: &mut RngState,
) -> Result<RiskEvaluation<T>> {
    let decisions = bayes_decisions(model, lambda, loss_spec, TargetSet::Test, s_theta, s_y, rng)?;
    let observed = observed_values(model, TargetSet::Test);
    let per_target_losses = per_target_losses(loss_spec, &decisions, &observed)?;
    Ok(RiskEvaluation {
        risk: mean(&per_target_losses),
        decisions,
        per_target_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub er_vi: f64,
    pub er_lcvi: f64,
    pub improvement: f64,
    pub per_target_losses: Vec<f64>,
    pub seed_count: usize,
}

impl RiskReport {
    pub fn new(er_vi: f64, er_lcvi: f64, per_target_losses: Vec<f64>) -> Result<Self> {
        Ok(Self {
            er_vi,
            er_lcvi,
            improvement: risk_reduction(er_vi, er_lcvi)?,
            per_target_losses,
            seed_count: 1,
        })
    }
}

/// Sample mean and (n-1) standard deviation; `std` is `0` for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_decisions_have_zero_risk() {
        let y = vec![1.0, -2.0, 3.5];
        for l in [LossSpec::Squared, LossSpec::Absolute, LossSpec::Tilted { q: 0.3 }, LossSpec::LinEx { c: 0.5 }] {
            assert_eq!(empirical_risk(&l, &DecisionSet::new(y.clone()), &y).unwrap(), 0.0);
        }
    }

    #[test]
    fn squared_risk_example() {
        let r = empirical_risk(&LossSpec::Squared, &DecisionSet::new(vec![0.0, 0.0]), &[1.0, 3.0]).unwrap();
        assert_eq!(r, 5.0);
    }

    #[test]
    fn risk_input_errors() {
        assert!(empirical_risk::<f64>(&LossSpec::Squared, &DecisionSet::new(vec![]), &[]).is_err());
        assert!(empirical_risk(&LossSpec::Squared, &DecisionSet::new(vec![1.0]), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn risk_reduction_examples() {
        assert!((risk_reduction(1.0, 0.96).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(risk_reduction(2.5, 2.5).unwrap(), 0.0);
        assert!((risk_reduction(1.0, 1.2).unwrap() + 0.2).abs() < 1e-15);
        assert!(risk_reduction(0.0, 1.0).is_err());
    }

    #[test]
    fn trace_rejects_non_increasing_epochs() {
        let row = |epoch| TraceRow {
            epoch,
            elbo: 0.0,
            u_term: 0.0,
            empirical_risk: 0.0,
            wall_seconds: 0.0,
        };
        let mut t = RunTrace::default();
        t.push(row(1)).unwrap();
        t.push(row(5)).unwrap();
        assert!(t.push(row(5)).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let mut t = RunTrace::default();
        t.push(TraceRow {
            epoch: 10,
            elbo: -12.25,
            u_term: -0.125,
            empirical_risk: 3.5,
            wall_seconds: 0.01,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.save_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(TRACE_HEADER));
        assert_eq!(RunTrace::read_csv(&p).unwrap(), t);
    }

    #[test]
    fn mean_std_are_sample_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn risk_matches_naive_loop(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50), q in 0.05f64..0.95) {
            let l = LossSpec::Tilted { q };
            let (h, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mut acc = 0.0;
            for i in 0..h.len() {
                let d = h[i] - y[i];
                acc += if y[i] >= h[i] { q * d.abs() } else { (1.0 - q) * d.abs() };
            }
            let oracle = acc / h.len() as f64;
            let got = empirical_risk(&l, &DecisionSet::new(h), &y).unwrap();
            prop_assert!((got - oracle).abs() < 1e-12);
        }
    }
}
