//! Base regressors with a uniform fit/predict contract.
//!
//! All linear kinds append an unpenalized intercept and solve the (ridge)
//! normal equations by Cholesky with diagonal jitter escalation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CdstError, Result};
use crate::linalg::{select_columns, select_entries, select_rows, spd_solve, JitterSchedule};

/// Which side of the threshold a regional model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `x[column] < threshold`
    Below,
    /// `x[column] >= threshold`
    AtOrAbove,
}

impl Side {
    fn contains(self, v: f64, threshold: f64) -> bool {
        match self {
            Side::Below => v < threshold,
            Side::AtOrAbove => v >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Ols,
    Ridge {
        alpha: f64,
    },
    /// OLS fitted on the rows where `x[column]` lies on `side` of
    /// `threshold`; predicts everywhere.
    RegionalOls {
        column: usize,
        threshold: f64,
        side: Side,
    },
    Knn {
        k: usize,
    },
    /// Ridge on all monomials of the features up to total `degree`.
    PolyRidge {
        degree: usize,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelSpec {
    pub model: ModelKind,
    /// Columns of the dataset's feature matrix the model sees.
    pub features: Vec<usize>,
}

impl BaseModelSpec {
    pub fn new(model: ModelKind, features: Vec<usize>) -> Self {
        BaseModelSpec { model, features }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(invalid("base model needs at least one feature column"));
        }
        match self.model {
            ModelKind::Ridge { alpha } | ModelKind::PolyRidge { alpha, .. }
                if !(alpha >= 0.0 && alpha.is_finite()) =>
            {
                Err(invalid("ridge alpha must be >= 0"))
            }
            ModelKind::Knn { k: 0 } => Err(invalid("knn needs k >= 1")),
            ModelKind::PolyRidge { degree: 0, .. } => Err(invalid("poly degree must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match &self.model {
            ModelKind::Ols => "ols".into(),
            ModelKind::Ridge { alpha } => format!("ridge({alpha})"),
            ModelKind::RegionalOls {
                column,
                threshold,
                side,
            } => {
                let op = match side {
                    Side::Below => "<",
                    Side::AtOrAbove => ">=",
                };
                format!("regional_ols(x{column}{op}{threshold})")
            }
            ModelKind::Knn { k } => format!("knn({k})"),
            ModelKind::PolyRidge { degree, alpha } => format!("poly_ridge({degree},{alpha})"),
        }
    }

    pub fn has_likelihood(&self) -> bool {
        !matches!(self.model, ModelKind::Knn { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedState {
    /// Intercept first, then one coefficient per design column.
    Linear {
        coefficients: Vec<f64>,
    },
    Knn {
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBaseModel {
    pub spec: BaseModelSpec,
    /// Width of the feature matrix seen at fit time.
    pub input_dim: usize,
    pub state: FittedState,
    pub training_rss: f64,
    pub parameter_count: usize,
    pub n_train: usize,
}

/// Something that can be trained on `(x, y)`.
pub trait Learner: Sync {
    type Fitted: Predictor + Send;

    fn fit(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self::Fitted>;

    fn label(&self) -> String;
}

pub trait Predictor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>>;
}

impl Learner for BaseModelSpec {
    type Fitted = FittedBaseModel;

    fn fit(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<FittedBaseModel> {
        fit(self, x, y)
    }

    fn label(&self) -> String {
        BaseModelSpec::label(self)
    }
}

impl Predictor for FittedBaseModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        predict(self, x)
    }
}

/// Exponent vectors of every monomial with total degree in `1..=degree`,
/// graded then lexicographic.
pub fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(vars: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == vars {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(vars, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 1..=degree {
        rec(vars, d, &mut Vec::new(), &mut out);
    }
    out
}

fn design(spec: &BaseModelSpec, x: &DMatrix<f64>) -> DMatrix<f64> {
    let sub = select_columns(x, &spec.features);
    let body = match spec.model {
        ModelKind::PolyRidge { degree, .. } => {
            let terms = monomials(sub.ncols(), degree);
            DMatrix::from_fn(sub.nrows(), terms.len(), |i, t| {
                terms[t]
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| sub[(i, j)].powi(e as i32))
                    .product()
            })
        }
        _ => sub,
    };
    let mut z = DMatrix::from_element(body.nrows(), body.ncols() + 1, 1.0);
    z.view_mut((0, 1), (body.nrows(), body.ncols()))
        .copy_from(&body);
    z
}

fn solve_ridge(z: &DMatrix<f64>, y: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    let mut a = z.transpose() * z;
    for i in 1..a.nrows() {
        a[(i, i)] += alpha;
    }
    let b = z.transpose() * y;
    spd_solve(
        &a,
        &b,
        JitterSchedule::NORMAL_EQUATIONS,
        "base-model normal equations",
    )
}

fn check_inputs(spec: &BaseModelSpec, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    spec.validate()?;
    if x.nrows() != y.len() {
        return Err(CdstError::DimensionMismatch {
            context: "base model fit rows",
            expected: y.len(),
            found: x.nrows(),
        });
    }
    if y.is_empty() {
        return Err(CdstError::EmptyData);
    }
    if let Some(&c) = spec.features.iter().find(|&&c| c >= x.ncols()) {
        return Err(invalid(format!("feature column {c} out of range")));
    }
    if let ModelKind::RegionalOls { column, .. } = spec.model {
        if column >= x.ncols() {
            return Err(invalid(format!("region column {column} out of range")));
        }
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(CdstError::NonFinite("base model training data".into()));
    }
    Ok(())
}

pub fn fit(spec: &BaseModelSpec, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<FittedBaseModel> {
    check_inputs(spec, x, y)?;
    let (state, parameter_count) = match spec.model {
        ModelKind::Knn { .. } => {
            let sub = select_columns(x, &spec.features);
            let rows = (0..sub.nrows())
                .map(|i| sub.row(i).iter().copied().collect())
                .collect();
            (
                FittedState::Knn {
                    x: rows,
                    y: y.iter().copied().collect(),
                },
                1,
            )
        }
        ModelKind::RegionalOls {
            column,
            threshold,
            side,
        } => {
            let rows: Vec<usize> = (0..x.nrows())
                .filter(|&i| side.contains(x[(i, column)], threshold))
                .collect();
            if rows.is_empty() {
                return Err(invalid(format!(
                    "regional model {} has no training rows",
                    spec.label()
                )));
            }
            let z = design(spec, &select_rows(x, &rows));
            let beta = solve_ridge(&z, &select_entries(y, &rows), 0.0)?;
            let p = beta.len();
            (
                FittedState::Linear {
                    coefficients: beta.iter().copied().collect(),
                },
                p,
            )
        }
        ModelKind::Ols | ModelKind::Ridge { .. } | ModelKind::PolyRidge { .. } => {
            let alpha = match spec.model {
                ModelKind::Ridge { alpha } | ModelKind::PolyRidge { alpha, .. } => alpha,
                _ => 0.0,
            };
            let beta = solve_ridge(&design(spec, x), y, alpha)?;
            let p = beta.len();
            (
                FittedState::Linear {
                    coefficients: beta.iter().copied().collect(),
                },
                p,
            )
        }
    };
    let mut model = FittedBaseModel {
        spec: spec.clone(),
        input_dim: x.ncols(),
        state,
        training_rss: 0.0,
        parameter_count,
        n_train: y.len(),
    };
    let fitted = predict(&model, x)?;
    model.training_rss = match spec.model {
        // Likelihood of a regional model refers to its own region.
        ModelKind::RegionalOls {
            column,
            threshold,
            side,
        } => (0..x.nrows())
            .filter(|&i| side.contains(x[(i, column)], threshold))
            .map(|i| (y[i] - fitted[i]).powi(2))
            .sum(),
        _ => (y - fitted).norm_squared(),
    };
    if !model.training_rss.is_finite() {
        return Err(CdstError::NonFinite(format!(
            "{} training residuals",
            spec.label()
        )));
    }
    Ok(model)
}

pub fn predict(model: &FittedBaseModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != model.input_dim {
        return Err(CdstError::DimensionMismatch {
            context: "base model predict columns",
            expected: model.input_dim,
            found: x.ncols(),
        });
    }
    match &model.state {
        FittedState::Linear { coefficients } => {
            let z = design(&model.spec, x);
            Ok(z * DVector::from_column_slice(coefficients))
        }
        FittedState::Knn {
            x: train_x,
            y: train_y,
        } => {
            let k = match model.spec.model {
                ModelKind::Knn { k } => k.min(train_y.len()),
                _ => unreachable!("knn state with non-knn spec"),
            };
            let sub = select_columns(x, &model.spec.features);
            let mut out = DVector::zeros(x.nrows());
            let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train_y.len());
            for i in 0..sub.nrows() {
                dist.clear();
                for (t, row) in train_x.iter().enumerate() {
                    let d: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(j, v)| (v - sub[(i, j)]).powi(2))
                        .sum();
                    dist.push((d, t));
                }
                // ties go to the smaller training row index
                dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                out[i] = dist[..k].iter().map(|&(_, t)| train_y[t]).sum::<f64>() / k as f64;
            }
            Ok(out)
        }
    }
}

/// Gaussian AIC up to an additive constant:
/// `n log(rss/n) + 2 (parameter_count + 1)`.
pub fn aic(model: &FittedBaseModel, n: usize) -> Result<f64> {
    if !model.spec.has_likelihood() {
        return Err(CdstError::Unsupported(format!(
            "AIC for {} (no likelihood)",
            model.spec.label()
        )));
    }
    if n == 0 {
        return Err(invalid("AIC needs n >= 1"));
    }
    if !(model.training_rss > 0.0) {
        return Err(CdstError::Unsupported(
            "AIC with zero residual sum of squares".into(),
        ));
    }
    let n = n as f64;
    Ok(n * (model.training_rss / n).ln() + 2.0 * (model.parameter_count as f64 + 1.0))
}

/// Number of training rows whose likelihood a model's RSS covers.
pub fn likelihood_rows(model: &FittedBaseModel, x: &DMatrix<f64>) -> usize {
    match model.spec.model {
        ModelKind::RegionalOls {
            column,
            threshold,
            side,
        } => (0..x.nrows())
            .filter(|&i| side.contains(x[(i, column)], threshold))
            .count(),
        _ => x.nrows(),
    }
}
