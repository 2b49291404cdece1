//! Small dense helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CdstError, Result};

/// Jitter schedule for a symmetric positive-definite factorization: the first
/// attempt is unjittered, then `start * trace/dim` is added to the diagonal,
/// growing by 10x per attempt up to `max * trace/dim`.
#[derive(Debug, Clone, Copy)]
pub struct JitterSchedule {
    pub start: f64,
    pub max: f64,
}

impl JitterSchedule {
    pub const NORMAL_EQUATIONS: JitterSchedule = JitterSchedule {
        start: 1e-8,
        max: 1e-2,
    };
    pub const POSTERIOR: JitterSchedule = JitterSchedule {
        start: 1e-10,
        max: 1e-4,
    };
}

/// Cholesky factor plus the absolute jitter that was needed to obtain it.
pub struct SpdFactor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl SpdFactor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Inverse, symmetrized to remove round-off asymmetry.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    pub fn ln_determinant(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

pub fn spd_factor(a: &DMatrix<f64>, schedule: JitterSchedule, what: &str) -> Result<SpdFactor> {
    let dim = a.nrows();
    if dim != a.ncols() {
        return Err(CdstError::DimensionMismatch {
            context: "spd_factor",
            expected: dim,
            found: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CdstError::NonFinite(format!(
            "{what}: matrix has non-finite entries"
        )));
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(SpdFactor { chol, jitter: 0.0 });
    }
    let scale = (a.trace() / dim.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = schedule.start;
    while rel <= schedule.max * (1.0 + 1e-12) {
        let jitter = rel * scale;
        let mut m = a.clone();
        for i in 0..dim {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok(SpdFactor { chol, jitter });
        }
        rel *= 10.0;
    }
    Err(CdstError::Singular(what.to_string()))
}

/// Solve `A x = b` for symmetric positive (semi)definite `A`.
pub fn spd_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    schedule: JitterSchedule,
    what: &str,
) -> Result<DVector<f64>> {
    Ok(spd_factor(a, schedule, what)?.solve(b))
}

/// Copy the listed rows of `m` into a new matrix.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[(i, j)]).collect()
}
