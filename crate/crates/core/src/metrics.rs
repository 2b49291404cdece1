//! Prediction accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CdstError, Result};

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(CdstError::DimensionMismatch {
            context: "metric inputs",
            expected: y.len(),
            found: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(CdstError::EmptyData);
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y.len() as f64)
}

/// Absolute percentage error `100 |y - yhat| / y`; requires `y > 0`.
pub fn ape(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    check_lengths(y, yhat)?;
    y.iter()
        .zip(yhat)
        .enumerate()
        .map(|(i, (&a, &b))| {
            if a > 0.0 {
                Ok(100.0 * (a - b).abs() / a)
            } else {
                Err(CdstError::Domain {
                    row: i + 1,
                    message: format!("APE needs a positive response, got {a}"),
                })
            }
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub method: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub sd: f64,
    pub count: usize,
    pub failures: usize,
}

impl ReplicationSummary {
    pub fn new(method: impl Into<String>, values: Vec<f64>, failures: usize) -> Result<Self> {
        if values.is_empty() && failures == 0 {
            return Err(invalid("summary of zero replications"));
        }
        let count = values.len();
        let (m, sd) = if count == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let m = mean(&values);
            let sd = if count > 1 {
                (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            (m, sd)
        };
        Ok(ReplicationSummary {
            method: method.into(),
            values,
            mean: m,
            sd,
            count,
            failures,
        })
    }
}
