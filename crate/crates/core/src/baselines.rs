//! Constant-weight comparison ensembles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CdstError, Result};
use crate::linalg::{spd_solve, JitterSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    Stacking,
    SimpleAverage,
    Saic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantWeights {
    pub weights: Vec<f64>,
    pub method: WeightMethod,
    /// Models left out of an SAIC softmax for lack of a likelihood.
    pub excluded: Vec<usize>,
}

impl ConstantWeights {
    /// `sum_j w_j preds[:, j]`.
    pub fn combine(&self, preds: &DMatrix<f64>) -> Result<DVector<f64>> {
        if preds.ncols() != self.weights.len() {
            return Err(CdstError::DimensionMismatch {
                context: "constant weights",
                expected: self.weights.len(),
                found: preds.ncols(),
            });
        }
        Ok(preds * DVector::from_column_slice(&self.weights))
    }
}

/// Unconstrained least squares of `y` on the out-of-fold columns.
///
/// Solved by QR; a rank-deficient `F` falls back to jittered normal
/// equations.
pub fn vanilla_stack(y: &DVector<f64>, f: &DMatrix<f64>) -> Result<ConstantWeights> {
    if f.nrows() != y.len() {
        return Err(CdstError::DimensionMismatch {
            context: "vanilla_stack rows",
            expected: y.len(),
            found: f.nrows(),
        });
    }
    if f.ncols() == 0 {
        return Err(invalid("need at least one base model"));
    }
    let mut w = None;
    if f.nrows() >= f.ncols() {
        let qr = f.clone().qr();
        let r = qr.r();
        let tiny = r.diagonal().amax() * 1e-12;
        if r.diagonal().iter().all(|d| d.abs() > tiny) {
            let qty = qr.q().transpose() * y;
            w = r.solve_upper_triangular(&qty);
        }
    }
    let w = match w {
        Some(w) => w,
        None => spd_solve(
            &(f.transpose() * f),
            &(f.transpose() * y),
            JitterSchedule::NORMAL_EQUATIONS,
            "stacking normal equations",
        )?,
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CdstError::NonFinite("stacking weights".into()));
    }
    Ok(ConstantWeights {
        weights: w.iter().copied().collect(),
        method: WeightMethod::Stacking,
        excluded: Vec::new(),
    })
}

pub fn simple_average(j: usize) -> Result<ConstantWeights> {
    if j == 0 {
        return Err(invalid("simple average of zero models"));
    }
    Ok(ConstantWeights {
        weights: vec![1.0 / j as f64; j],
        method: WeightMethod::SimpleAverage,
        excluded: Vec::new(),
    })
}

/// Akaike weights `exp(-(AIC_j - min AIC)/2)`, normalized.
pub fn saic(aics: &[f64]) -> Result<ConstantWeights> {
    let opt: Vec<Option<f64>> = aics.iter().copied().map(Some).collect();
    saic_partial(&opt)
}

/// Akaike weights over the models that have an AIC; the rest get weight 0
/// and are listed in `excluded`.
pub fn saic_partial(aics: &[Option<f64>]) -> Result<ConstantWeights> {
    let present: Vec<f64> = aics.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(invalid("SAIC needs at least one AIC value"));
    }
    if present.iter().any(|a| !a.is_finite()) {
        return Err(CdstError::NonFinite("AIC values".into()));
    }
    let min = present.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = aics
        .iter()
        .map(|a| a.map_or(0.0, |a| (-(a - min) / 2.0).exp()))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(ConstantWeights {
        weights: raw.iter().map(|r| r / total).collect(),
        method: WeightMethod::Saic,
        excluded: aics
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(j, _)| j)
            .collect(),
    })
}
