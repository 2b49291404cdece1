//! Tabular data model, CSV ingestion and train/test splitting.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CdstError, Result};
use crate::linalg::{select_entries, select_rows};

/// Which CSV columns play which role. Weight columns may repeat feature
/// columns (the internal-covariate setting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRoles {
    pub response: String,
    pub features: Vec<String>,
    pub weights: Vec<String>,
}

/// Rows of feature covariates `x`, weight covariates `x~` and response `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    xtilde: DMatrix<f64>,
    y: DVector<f64>,
    roles: ColumnRoles,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        xtilde: DMatrix<f64>,
        y: DVector<f64>,
        roles: ColumnRoles,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(CdstError::EmptyData);
        }
        if x.ncols() == 0 || xtilde.ncols() == 0 {
            return Err(invalid("need at least one feature and one weight column"));
        }
        for (m, ctx) in [(&x, "dataset x rows"), (&xtilde, "dataset xtilde rows")] {
            if m.nrows() != n {
                return Err(CdstError::DimensionMismatch {
                    context: ctx,
                    expected: n,
                    found: m.nrows(),
                });
            }
        }
        if roles.features.len() != x.ncols() || roles.weights.len() != xtilde.ncols() {
            return Err(invalid("column names do not match matrix widths"));
        }
        if x.iter()
            .chain(xtilde.iter())
            .chain(y.iter())
            .any(|v| !v.is_finite())
        {
            return Err(CdstError::NonFinite("dataset entries".into()));
        }
        Ok(Dataset {
            x,
            xtilde,
            y,
            roles,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn xtilde(&self) -> &DMatrix<f64> {
        &self.xtilde
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn roles(&self) -> &ColumnRoles {
        &self.roles
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_weight_covariates(&self) -> usize {
        self.xtilde.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(invalid(format!("row index {bad} out of range")));
        }
        Dataset::new(
            select_rows(&self.x, idx),
            select_rows(&self.xtilde, idx),
            select_entries(&self.y, idx),
            self.roles.clone(),
        )
    }

    /// Write as CSV: response first, then the distinct feature and weight
    /// columns, then any `extra` columns. Reals use Rust's shortest
    /// round-trip representation, so reading back is exact.
    pub fn write_csv(&self, path: &Path, extra: &[(&str, &[f64])]) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_csv_string(extra)?.as_bytes())?;
        Ok(())
    }

    pub fn to_csv_string(&self, extra: &[(&str, &[f64])]) -> Result<String> {
        let mut header: Vec<String> = vec![self.roles.response.clone()];
        let mut sources: Vec<(bool, usize)> = Vec::new();
        for (j, name) in self.roles.features.iter().enumerate() {
            if !header.contains(name) {
                header.push(name.clone());
                sources.push((false, j));
            }
        }
        for (j, name) in self.roles.weights.iter().enumerate() {
            if !header.contains(name) {
                header.push(name.clone());
                sources.push((true, j));
            }
        }
        for (name, col) in extra {
            if col.len() != self.n() {
                return Err(CdstError::DimensionMismatch {
                    context: "extra CSV column",
                    expected: self.n(),
                    found: col.len(),
                });
            }
            header.push(name.to_string());
        }
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.n() {
            let mut cells = vec![format!("{}", self.y[i])];
            for &(weight, j) in &sources {
                let v = if weight {
                    self.xtilde[(i, j)]
                } else {
                    self.x[(i, j)]
                };
                cells.push(format!("{v}"));
            }
            for (_, col) in extra {
                cells.push(format!("{}", col[i]));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// A fully numeric CSV table held column-wise.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<CsvTable> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<CsvTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); header.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, name) in header.iter().enumerate() {
                let cell = record.get(j).unwrap_or("");
                let cell_err = |message: &str| CdstError::Cell {
                    row: row + 1,
                    column: name.clone(),
                    message: message.to_string(),
                };
                if cell.is_empty() {
                    return Err(cell_err("missing value"));
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| cell_err(&format!("non-numeric value '{cell}'")))?;
                if !v.is_finite() {
                    return Err(cell_err("non-finite value"));
                }
                columns[j].push(v);
            }
        }
        if columns.first().is_none_or(Vec::is_empty) {
            return Err(CdstError::EmptyData);
        }
        Ok(CsvTable { header, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.header
            .iter()
            .position(|h| h == name)
            .map(|j| self.columns[j].as_slice())
            .ok_or_else(|| CdstError::UnknownColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.header.iter().any(|h| h == name)
    }

    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let cols: Vec<&[f64]> = names
            .iter()
            .map(|n| self.column(n))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(self.n_rows(), cols.len(), |i, j| {
            cols[j][i]
        }))
    }

    pub fn to_dataset(&self, roles: &ColumnRoles) -> Result<Dataset> {
        if roles.features.is_empty() || roles.weights.is_empty() {
            return Err(invalid(
                "roles need at least one feature and one weight column",
            ));
        }
        let y = DVector::from_column_slice(self.column(&roles.response)?);
        Dataset::new(
            self.matrix(&roles.features)?,
            self.matrix(&roles.weights)?,
            y,
            roles.clone(),
        )
    }
}

pub fn read_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    CsvTable::read(path)?.to_dataset(roles)
}

/// Disjoint train/test row indices, both sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded random split with `|train| = round(train_fraction * n)`.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if n < 2 {
        return Err(invalid("split needs n >= 2"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid("train_fraction must lie in (0, 1)"));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(invalid(format!(
            "train_fraction {train_fraction} leaves an empty side for n = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan { train, test, seed })
}

/// Build roles from `name=role` pairs, e.g. `y=response`, `x1=both`.
pub fn roles_from_pairs(pairs: &[(String, String)]) -> Result<ColumnRoles> {
    let mut response = None;
    let mut features = Vec::new();
    let mut weights = Vec::new();
    let mut seen = HashMap::new();
    for (name, role) in pairs {
        if seen.insert(name.clone(), ()).is_some() {
            return Err(invalid(format!("column '{name}' listed twice")));
        }
        match role.as_str() {
            "response" => {
                if response.replace(name.clone()).is_some() {
                    return Err(invalid("more than one response column"));
                }
            }
            "feature" => features.push(name.clone()),
            "weight" => weights.push(name.clone()),
            "both" => {
                features.push(name.clone());
                weights.push(name.clone());
            }
            other => return Err(invalid(format!("unknown role '{other}'"))),
        }
    }
    Ok(ColumnRoles {
        response: response.ok_or_else(|| invalid("no response column"))?,
        features,
        weights,
    })
}
