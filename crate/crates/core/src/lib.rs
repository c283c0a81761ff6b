//! Estimation of (possibly time-varying) relative-risk coefficients under
//! right censoring, with estimating equations weighted by a marginal
//! survival curve.
//!
//! Three estimators share one weighted-score machinery:
//!
//! - the partial-likelihood estimator (constant weights),
//! - the Kaplan-Meier weighted estimator, whose weights are the increments
//!   of the left-continuous product-limit curve,
//! - the parametric-marginal estimator, whose weights come from a fitted
//!   (or externally supplied) marginal survival curve.
//!
//! Under non-proportional hazards the two weighted estimators converge to a
//! failure-time averaged effect that does not depend on the censoring
//! distribution, while the partial-likelihood estimator drifts with it.
//!
//! Modules:
//!
//! - [`dataset`]: right-censored data, CSV ingestion and risk-set moments.
//! - [`marginal`]: Kaplan-Meier, parametric marginal fits, external curves.
//! - [`estimate`]: weighted scores, Newton solver, variances.
//! - [`simulate`]: data generation, censoring calibration, simulation
//!   studies and population-level oracles.
//! - [`efficiency`]: asymptotic relative efficiency by quadrature.
//! - [`resample`]: random-weight resampling and the bootstrap.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod efficiency;
pub mod error;
pub mod estimate;
pub mod marginal;
pub mod quadrature;
pub mod resample;
pub mod rng;
pub mod simulate;

pub use dataset::{RiskSetStats, Subject, SurvivalDataset};
pub use error::{Error, Result};
pub use estimate::{FitResult, TieMethod, VarianceMethod, WeightScheme};
pub use marginal::{MarginalModel, ParametricFamily, StepSurvival};

/// The 42-subject leukemia remission data (6-MP vs placebo) bundled with
/// the crate. `z1` is 1 for the placebo arm.
pub const FREIREICH_CSV: &str = include_str!("../data/freireich.csv");

/// Parses [`FREIREICH_CSV`].
pub fn freireich() -> SurvivalDataset {
    SurvivalDataset::from_reader(FREIREICH_CSV.as_bytes())
        .expect("bundled freireich.csv is valid")
}
