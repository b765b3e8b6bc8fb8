//! Loss-calibrated variational inference for continuous decisions.
//!
//! A mean-field Gaussian approximation is fitted by maximizing `ELBO + U`,
//! where `U` is the expected log of the predictive expected utility of a set
//! of per-target decisions `{h}`. `U` is estimated by nested Monte Carlo over
//! doubly reparameterized draws, and the decisions are learned jointly with
//! the variational parameters (or by EM).
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*F64` aliases below name the double-precision instantiations used by the
//! experiment pipeline.

pub mod calibration;
pub mod config;
pub mod decisions;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod ingest;
pub mod meanfield;
pub mod models;
pub mod optimize;
pub mod pipeline;
pub mod reparam;
pub mod scalar;

pub use calibration::{
    calibrated_bound, estimate_u_linearized, estimate_u_naive, inner_expected_utility, CalibratedBound, DecisionSet,
    EstimatorKind, UtilityObjective, UtilityTermEstimate,
};
pub use decisions::{
    bayes_estimator, calibrate_m, empirical_quantile_m, gamma_from_quantile, loss, loss_subgradient_h, to_utility,
    AffineUtility, LossSpec, Utility, UtilitySpec,
};
pub use error::{LcviError, Result};
pub use evaluate::{empirical_risk, risk_reduction, RiskReport, RunTrace, TraceRow};
pub use meanfield::{entropy, estimate_elbo, log_q, ElboEstimate, VariationalParams};
pub use models::{Batch, ConjugateNormal, EightSchools, MatrixData, Model, Pmf, PmfPriors, TargetSet};
pub use optimize::{adam_step, run_em, run_joint_lcvi, run_standard_vi, AdamState, FitResult, OptimizerConfig, Regime};
pub use reparam::{constrain, reparameterize, NoiseDraw, RngState, SupportTransform};
pub use scalar::Scalar;

pub type VariationalParamsF64 = VariationalParams<f64>;
pub type VariationalParamsF32 = VariationalParams<f32>;
pub type DecisionSetF64 = DecisionSet<f64>;
pub type ElboEstimateF64 = ElboEstimate<f64>;
pub type UtilityTermEstimateF64 = UtilityTermEstimate<f64>;
pub type MatrixDataF64 = MatrixData<f64>;
pub type EightSchoolsF64 = EightSchools<f64>;
pub type PmfF64 = Pmf<f64>;
pub type FitResultF64 = FitResult<f64>;
