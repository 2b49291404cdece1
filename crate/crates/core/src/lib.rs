//! Covariate-dependent stacking (CDST).
//!
//! Base regressors are combined as `g(x) = sum_j w_j(x~) f_j(x)` where each
//! weight is a basis expansion `w_j(x~) = mu_j + E(x~)' gamma_j` over a set of
//! weight covariates `x~`. The coefficients are fitted on out-of-fold
//! predictions by an EM algorithm for a Gaussian random-effects working model,
//! which doubles as automatic selection of the ridge penalties
//! `lambda_j = sigma^2 / tau_j^2`.
//!
//! The crate also ships the comparison ensembles (vanilla stacking, simple
//! averaging, smoothed AIC), synthetic scenario generators and a Monte Carlo
//! benchmark harness.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base_models;
pub mod baselines;
pub mod basis;
pub mod bench;
pub mod cv;
pub mod dataset;
pub mod em_stacker;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod synth;

pub use base_models::{BaseModelSpec, FittedBaseModel, Learner, ModelKind, Predictor};
pub use baselines::{ConstantWeights, WeightMethod};
pub use basis::{BasisEvaluator, BasisSpec, Placement};
pub use bench::{BenchPlan, Method};
pub use cv::{FoldPlan, OofMatrix};
pub use dataset::{ColumnRoles, Dataset, SplitPlan};
pub use em_stacker::{CdstModel, EmConfig, EmFit, EmMode, PosteriorGamma, StackParams};
pub use error::{CdstError, Result};
pub use synth::{Family, ScenarioSpec, SimulatedData};
