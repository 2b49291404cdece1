//! Covariate-dependent stacking fitted by EM.
//!
//! Working model, with `F` the `n x J` out-of-fold predictions and `W` the
//! `n x JM` design whose row `i` is `(E(x_i) F[i][0], ..., E(x_i) F[i][J-1])`:
//!
//! ```text
//! y | gamma ~ N(F mu + W gamma, sigma2 I),   gamma_j ~ N(0, tau2_j I_M)
//! ```
//!
//! The E-step is the Gaussian posterior of `gamma`; the M-step updates
//! `(mu, sigma2, tau2)` in closed form. At a fixed point `(mu, m_gamma)`
//! minimizes the ridge-penalized cross-validation criterion with
//! `lambda_j = sigma2 / tau2_j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::base_models::{BaseModelSpec, FittedBaseModel, Learner, Predictor};
use crate::basis::{build_basis, BasisEvaluator, BasisSpec};
use crate::cv::{build_oof, FoldPlan, OofMatrix};
use crate::dataset::{ColumnRoles, Dataset};
use crate::error::{invalid, CdstError, Result};
use crate::linalg::{spd_factor, JitterSchedule};

pub const TAU2_FLOOR: f64 = 1e-12;
/// Relative to the mean square of `y`.
pub const SIGMA2_FLOOR: f64 = 1e-12;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackParams {
    pub mu: Vec<f64>,
    pub tau2: Vec<f64>,
    pub sigma2: f64,
}

impl StackParams {
    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.tau2.len() {
            return Err(invalid("mu and tau2 lengths differ"));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(CdstError::NonFinite("mu".into()));
        }
        if self.tau2.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("tau2 entries must be positive and finite"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(invalid("sigma2 must be positive and finite"));
        }
        Ok(())
    }

    /// `||a - b||_1` over `(mu, tau2, sigma2)`.
    pub fn l1_distance(&self, other: &StackParams) -> f64 {
        let mu: f64 = self
            .mu
            .iter()
            .zip(&other.mu)
            .map(|(a, b)| (a - b).abs())
            .sum();
        let tau: f64 = self
            .tau2
            .iter()
            .zip(&other.tau2)
            .map(|(a, b)| (a - b).abs())
            .sum();
        mu + tau + (self.sigma2 - other.sigma2).abs()
    }

    fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.tau2).all(|v| v.is_finite()) && self.sigma2.is_finite()
    }

    /// Ridge penalties `sigma2 / tau2_j` implied by the working model.
    pub fn lambdas(&self) -> Vec<f64> {
        self.tau2.iter().map(|t| self.sigma2 / t).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmMode {
    /// The sigma2 update uses the plug-in residuals only.
    #[default]
    Paper,
    /// The sigma2 update also carries the posterior-variance term
    /// `(1/n) sum_i w_i' S w_i`, which makes this a true EM (monotone
    /// marginal likelihood).
    Exact,
}

fn default_tol() -> f64 {
    1e-5
}

fn default_max_iter() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub mode: EmMode,
    /// `None` starts from the simple average.
    #[serde(default)]
    pub init: Option<StackParams>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: default_tol(),
            max_iter: default_max_iter(),
            mode: EmMode::Paper,
            init: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid("EM tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(invalid("EM max_iter must be >= 1"));
        }
        Ok(())
    }
}

/// Posterior `N(mean, cov)` of the stacked basis coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGamma {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `log |S|`, kept for the marginal likelihood.
    pub ln_det_cov: f64,
}

impl PosteriorGamma {
    /// Mean block of model `j`.
    pub fn block_mean(&self, j: usize, m: usize) -> DVector<f64> {
        self.mean.rows(j * m, m).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub params: StackParams,
    /// L1 step from the previous iterate.
    pub step: f64,
    /// Marginal log-likelihood at the parameters that entered this
    /// iteration's E-step.
    pub log_likelihood: f64,
    pub tau2_floor_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub params: StackParams,
    pub gamma: DVector<f64>,
    pub n_basis: usize,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
    /// Marginal log-likelihood at the returned parameters.
    pub log_likelihood: f64,
}

/// Row `i` is `E[i, :] * F[i][j]` concatenated over `j`.
pub fn design_matrix(f: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f.nrows() != e.nrows() {
        return Err(CdstError::DimensionMismatch {
            context: "design_matrix rows",
            expected: f.nrows(),
            found: e.nrows(),
        });
    }
    let (n, jn, m) = (f.nrows(), f.ncols(), e.ncols());
    Ok(DMatrix::from_fn(n, jn * m, |i, c| {
        e[(i, c % m)] * f[(i, c / m)]
    }))
}

fn check_shapes(y: &DVector<f64>, f: &DMatrix<f64>, w: &DMatrix<f64>, j: usize) -> Result<usize> {
    let n = y.len();
    for (rows, ctx) in [(f.nrows(), "F rows"), (w.nrows(), "W rows")] {
        if rows != n {
            return Err(CdstError::DimensionMismatch {
                context: ctx,
                expected: n,
                found: rows,
            });
        }
    }
    if f.ncols() != j {
        return Err(CdstError::DimensionMismatch {
            context: "F columns vs params",
            expected: j,
            found: f.ncols(),
        });
    }
    if j == 0 || !w.ncols().is_multiple_of(j) {
        return Err(invalid("W width must be a multiple of the model count"));
    }
    Ok(w.ncols() / j)
}

/// Cross products of the fixed design, reused by every EM iteration.
struct Moments {
    wtw: DMatrix<f64>,
    wty: DVector<f64>,
    wtf: DMatrix<f64>,
    ftf: DMatrix<f64>,
}

impl Moments {
    fn new(y: &DVector<f64>, f: &DMatrix<f64>, w: &DMatrix<f64>) -> Self {
        let wt = w.transpose();
        Moments {
            wtw: &wt * w,
            wty: &wt * y,
            wtf: &wt * f,
            ftf: f.transpose() * f,
        }
    }
}

fn posterior(mo: &Moments, p: &StackParams, m: usize) -> Result<PosteriorGamma> {
    let jm = mo.wtw.nrows();
    if jm == 0 {
        return Ok(PosteriorGamma {
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
            ln_det_cov: 0.0,
        });
    }
    let mut a = &mo.wtw / p.sigma2;
    for c in 0..jm {
        a[(c, c)] += 1.0 / p.tau2[c / m];
    }
    let factor = spd_factor(&a, JitterSchedule::POSTERIOR, "posterior precision")?;
    let mu = DVector::from_column_slice(&p.mu);
    let wtr = &mo.wty - &mo.wtf * mu;
    let mean = factor.solve(&wtr) / p.sigma2;
    Ok(PosteriorGamma {
        mean,
        cov: factor.inverse(),
        ln_det_cov: -factor.ln_determinant(),
    })
}

/// `S = (W'W / sigma2 + D (x) I_M)^-1`, `m = S W' (y - F mu) / sigma2`.
pub fn e_step(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    p: &StackParams,
) -> Result<PosteriorGamma> {
    p.validate()?;
    let m = check_shapes(y, f, w, p.mu.len())?;
    posterior(&Moments::new(y, f, w), p, m)
}

fn maximize(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    mo: &Moments,
    post: &PosteriorGamma,
    prev_tau2: &[f64],
    mode: EmMode,
) -> Result<(StackParams, bool)> {
    let n = y.len() as f64;
    let j = f.ncols();
    let m = w.ncols() / j;

    let y_star = if w.ncols() > 0 {
        y - w * &post.mean
    } else {
        y.clone()
    };
    let mu = crate::linalg::spd_solve(
        &mo.ftf,
        &(f.transpose() * &y_star),
        JitterSchedule::NORMAL_EQUATIONS,
        "sum F_i F_i'",
    )?;
    let resid = &y_star - f * &mu;
    let mut sigma2 = resid.norm_squared() / n;
    if mode == EmMode::Exact && w.ncols() > 0 {
        // (1/n) sum_i w_i' S w_i = tr(S W'W) / n
        sigma2 += post.cov.component_mul(&mo.wtw).sum() / n;
    }
    let floor = SIGMA2_FLOOR * (y.norm_squared() / n).max(f64::MIN_POSITIVE);
    sigma2 = sigma2.max(floor);

    let mut floor_hit = false;
    let tau2 = if m == 0 {
        prev_tau2.to_vec()
    } else {
        (0..j)
            .map(|jj| {
                let block = post.mean.rows(jj * m, m);
                let tr: f64 = (jj * m..(jj + 1) * m).map(|c| post.cov[(c, c)]).sum();
                let t = (block.norm_squared() + tr) / m as f64;
                if t < TAU2_FLOOR {
                    floor_hit = true;
                    TAU2_FLOOR
                } else {
                    t
                }
            })
            .collect()
    };
    Ok((
        StackParams {
            mu: mu.iter().copied().collect(),
            tau2,
            sigma2,
        },
        floor_hit,
    ))
}

/// Closed-form maximization of the expected complete-data log-likelihood.
pub fn m_step(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    post: &PosteriorGamma,
    mode: EmMode,
) -> Result<StackParams> {
    let j = f.ncols();
    let m = check_shapes(y, f, w, j)?;
    if post.mean.len() != j * m {
        return Err(CdstError::DimensionMismatch {
            context: "posterior length",
            expected: j * m,
            found: post.mean.len(),
        });
    }
    let mo = Moments::new(y, f, w);
    // With no basis functions tau2 is irrelevant; keep it at 1.
    let (p, _) = maximize(y, f, w, &mo, post, &vec![1.0; j], mode)?;
    Ok(p)
}

fn log_likelihood_from(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    mo: &Moments,
    p: &StackParams,
    post: &PosteriorGamma,
    m: usize,
) -> f64 {
    // Woodbury / determinant lemma for V = sigma2 I + W (D^-1 (x) I) W'.
    let n = y.len() as f64;
    let r = y - f * DVector::from_column_slice(&p.mu);
    let rr = r.norm_squared();
    let (quad, ln_det) = if mo.wtw.nrows() == 0 {
        (rr / p.sigma2, n * p.sigma2.ln())
    } else {
        let wtr = &mo.wty - &mo.wtf * DVector::from_column_slice(&p.mu);
        let s_wtr = &post.cov * &wtr;
        let quad = rr / p.sigma2 - wtr.dot(&s_wtr) / (p.sigma2 * p.sigma2);
        let ln_prior: f64 = p.tau2.iter().map(|t| m as f64 * t.ln()).sum();
        (quad, n * p.sigma2.ln() + ln_prior - post.ln_det_cov)
    };
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
}

/// Marginal log-likelihood of the working model,
/// `y ~ N(F mu, sigma2 I + W (D^-1 (x) I_M) W')`.
pub fn marginal_log_likelihood(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    p: &StackParams,
) -> Result<f64> {
    p.validate()?;
    let m = check_shapes(y, f, w, p.mu.len())?;
    let mo = Moments::new(y, f, w);
    let post = posterior(&mo, p, m)?;
    Ok(log_likelihood_from(y, f, &mo, p, &post, m))
}

/// Simple-average start: `mu_j = 1/J`, `tau2_j = 1`, `sigma2` the sample
/// variance of the simple-average residual.
pub fn default_init(y: &DVector<f64>, f: &DMatrix<f64>) -> StackParams {
    let j = f.ncols();
    let n = y.len();
    let avg = f.column_sum() / j as f64;
    let r = y - avg;
    let mean = r.mean();
    let var = if n > 1 {
        r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let floor = SIGMA2_FLOOR * (y.norm_squared() / n as f64).max(f64::MIN_POSITIVE);
    StackParams {
        mu: vec![1.0 / j as f64; j],
        tau2: vec![1.0; j],
        sigma2: var.max(floor),
    }
}

/// Alternate E- and M-steps until `||Psi_r - Psi_{r-1}||_1 < tol` or
/// `max_iter`. The returned `gamma` is the posterior mean recomputed at the
/// final parameters.
pub fn fit_em(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    e: &DMatrix<f64>,
    cfg: &EmConfig,
) -> Result<EmFit> {
    cfg.validate()?;
    let (n, j) = (f.nrows(), f.ncols());
    if j == 0 {
        return Err(invalid("need at least one base model"));
    }
    if n < j + 1 {
        return Err(invalid(format!(
            "need n >= J + 1 rows, have n = {n}, J = {j}"
        )));
    }
    if y.len() != n {
        return Err(CdstError::DimensionMismatch {
            context: "y length",
            expected: n,
            found: y.len(),
        });
    }
    if y.iter()
        .chain(f.iter())
        .chain(e.iter())
        .any(|v| !v.is_finite())
    {
        return Err(CdstError::NonFinite("EM inputs".into()));
    }
    let w = design_matrix(f, e)?;
    let m = e.ncols();
    let mo = Moments::new(y, f, &w);

    let mut params = match &cfg.init {
        Some(p) => {
            p.validate()?;
            if p.mu.len() != j {
                return Err(invalid("init params have the wrong model count"));
            }
            p.clone()
        }
        None => default_init(y, f),
    };

    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 1..=cfg.max_iter {
        let post = posterior(&mo, &params, m)?;
        let ll = log_likelihood_from(y, f, &mo, &params, &post, m);
        let (next, floor_hit) = maximize(y, f, &w, &mo, &post, &params.tau2, cfg.mode)?;
        if !next.is_finite() || !ll.is_finite() {
            return Err(CdstError::Diverged { iteration });
        }
        let step = next.l1_distance(&params);
        trace.push(IterationRecord {
            iteration,
            params: next.clone(),
            step,
            log_likelihood: ll,
            tau2_floor_hit: floor_hit,
        });
        params = next;
        if step < cfg.tol {
            converged = true;
            break;
        }
    }

    let post = posterior(&mo, &params, m)?;
    let log_likelihood = log_likelihood_from(y, f, &mo, &params, &post, m);
    if post.mean.iter().any(|v| !v.is_finite()) {
        return Err(CdstError::Diverged {
            iteration: trace.len(),
        });
    }
    Ok(EmFit {
        params,
        gamma: post.mean,
        n_basis: m,
        iterations: trace.len(),
        trace,
        converged,
        log_likelihood,
    })
}

/// Fitted covariate-dependent stack:
/// `g(x) = sum_j (mu_j + E(x~)' gamma_j) f_j(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdstModel {
    pub params: StackParams,
    /// `J * M` coefficients, model-major.
    pub gamma: Vec<f64>,
    pub basis: BasisEvaluator,
    pub models: Vec<FittedBaseModel>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub trace: Vec<IterationRecord>,
}

impl CdstModel {
    pub fn from_fit(
        fit: EmFit,
        basis: BasisEvaluator,
        models: Vec<FittedBaseModel>,
    ) -> Result<Self> {
        if fit.n_basis != basis.len() {
            return Err(CdstError::DimensionMismatch {
                context: "basis size",
                expected: fit.n_basis,
                found: basis.len(),
            });
        }
        if models.len() != fit.params.mu.len() {
            return Err(CdstError::DimensionMismatch {
                context: "fitted model count",
                expected: fit.params.mu.len(),
                found: models.len(),
            });
        }
        Ok(CdstModel {
            params: fit.params,
            gamma: fit.gamma.iter().copied().collect(),
            basis,
            models,
            converged: fit.converged,
            iterations: fit.iterations,
            trace: fit.trace,
        })
    }

    pub fn n_models(&self) -> usize {
        self.params.mu.len()
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.params.lambdas()
    }

    /// `m x J` matrix of `mu_j + E(x~_i)' gamma_j`.
    pub fn weights_at(&self, xtilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let e = self.basis.eval(xtilde)?;
        let (j, m) = (self.n_models(), self.n_basis());
        Ok(DMatrix::from_fn(xtilde.nrows(), j, |i, jj| {
            let field: f64 = (0..m).map(|c| e[(i, c)] * self.gamma[jj * m + c]).sum();
            self.params.mu[jj] + field
        }))
    }

    /// `n x J` predictions of the full-data base models.
    pub fn base_predictions(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.n_models());
        for (j, model) in self.models.iter().enumerate() {
            out.set_column(j, &model.predict(x)?);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &DMatrix<f64>, xtilde: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.nrows() != xtilde.nrows() {
            return Err(CdstError::DimensionMismatch {
                context: "predict rows",
                expected: x.nrows(),
                found: xtilde.nrows(),
            });
        }
        let w = self.weights_at(xtilde)?;
        let f = self.base_predictions(x)?;
        Ok(w.component_mul(&f).column_sum())
    }
}

/// Build the basis on the training weight covariates (or none), returning
/// the evaluator and the `n x M` basis matrix.
pub fn prepare_basis(
    spec: Option<&BasisSpec>,
    xtilde: &DMatrix<f64>,
) -> Result<(BasisEvaluator, DMatrix<f64>)> {
    let ev = match spec {
        Some(s) => build_basis(s, xtilde)?,
        None => BasisEvaluator::empty(xtilde.ncols()),
    };
    let e = ev.eval(xtilde)?;
    Ok((ev, e))
}

/// Fit from an already assembled out-of-fold matrix and refit the base
/// models on all of `data`.
pub fn fit_cdst_from_oof(
    data: &Dataset,
    specs: &[BaseModelSpec],
    oof: &OofMatrix,
    basis: Option<&BasisSpec>,
    cfg: &EmConfig,
) -> Result<CdstModel> {
    let (ev, e) = prepare_basis(basis, data.xtilde())?;
    let fit = fit_em(data.y(), &oof.values, &e, cfg)?;
    let models = specs
        .iter()
        .map(|s| s.fit(data.x(), data.y()))
        .collect::<Result<Vec<_>>>()?;
    CdstModel::from_fit(fit, ev, models)
}

/// Out-of-fold predictions, basis, EM, then full-data refits.
pub fn fit_cdst(
    data: &Dataset,
    specs: &[BaseModelSpec],
    basis: Option<&BasisSpec>,
    folds: &FoldPlan,
    cfg: &EmConfig,
) -> Result<CdstModel> {
    let oof = build_oof(specs, data, folds)?;
    fit_cdst_from_oof(data, specs, &oof, basis, cfg)
}

/// On-disk model document. Field order is fixed by declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub columns: ColumnRoles,
    pub model: CdstModel,
}

impl ModelDocument {
    pub fn new(columns: ColumnRoles, model: CdstModel) -> Self {
        ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            columns,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported model schema version {}",
                doc.schema_version
            )));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_models::ModelKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(mu: &[f64], tau2: &[f64], sigma2: f64) -> StackParams {
        StackParams {
            mu: mu.to_vec(),
            tau2: tau2.to_vec(),
            sigma2,
        }
    }

    #[test]
    fn design_matrix_reductions() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            design_matrix(&f, &DMatrix::from_element(3, 1, 1.0)).unwrap(),
            f
        );
        let e = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(
            design_matrix(&DMatrix::from_element(3, 1, 1.0), &e).unwrap(),
            e
        );
    }

    #[test]
    fn design_matrix_elementwise() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let w = design_matrix(&f, &e).unwrap();
        let want = DMatrix::from_row_slice(2, 4, &[5.0, 6.0, 10.0, 12.0, 21.0, 24.0, 28.0, 32.0]);
        assert_eq!(w, want);
        assert!(design_matrix(&f, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn scalar_e_step() {
        let y = DVector::from_element(1, 1.0);
        let f = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        let post = e_step(&y, &f, &w, &params(&[0.0], &[1.0], 1.0)).unwrap();
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.mean[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_prior_shrinks_posterior() {
        let y = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let w = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.2, 0.3, 0.9, 0.1]);
        let post = e_step(&y, &f, &w, &params(&[0.0], &[1e-12], 1.0)).unwrap();
        assert!(post.mean.norm() < 1e-6);
        assert!((post.cov[(0, 0)] - 1e-12).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_mean() {
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let y = f.column(0) * 0.7;
        let w = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.2, 0.3, 0.9, 0.1]);
        let post = e_step(&y, &f, &w, &params(&[0.7], &[2.0], 0.3)).unwrap();
        assert!(post.mean.amax() < 1e-13);
    }

    #[test]
    fn m_step_constant_column() {
        let y = DVector::from_column_slice(&[1.0, 4.0, -2.0, 3.0]);
        let f = DMatrix::from_element(4, 1, 1.0);
        let w = DMatrix::from_element(4, 1, 0.5);
        let post = PosteriorGamma {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 0.25),
            ln_det_cov: 0.25f64.ln(),
        };
        let p = m_step(&y, &f, &w, &post, EmMode::Paper).unwrap();
        assert!((p.mu[0] - 1.5).abs() < 1e-14);
        let pop_var = y.iter().map(|v| (v - 1.5).powi(2)).sum::<f64>() / 4.0;
        assert!((p.sigma2 - pop_var).abs() < 1e-14);
        // prior fixed point: m = 0, S = tau2_old I
        assert!((p.tau2[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn m_step_scalar_oracle_both_modes() {
        // n = 2, J = 1, M = 1, hand-evaluated.
        let y = DVector::from_column_slice(&[3.0, 1.0]);
        let f = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let w = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let post = PosteriorGamma {
            mean: DVector::from_element(1, 1.0),
            cov: DMatrix::from_element(1, 1, 0.5),
            ln_det_cov: 0.5f64.ln(),
        };
        // y* = (2, 0); mu = (1*2 + 2*0) / (1 + 4) = 0.4
        // resid = (2 - 0.4, 0 - 0.8) = (1.6, -0.8); sigma2 = (2.56 + 0.64) / 2 = 1.6
        // tau2 = (1 + 0.5) / 1 = 1.5; exact adds (1*0.5*1 + 1*0.5*1) / 2 = 0.5
        let p = m_step(&y, &f, &w, &post, EmMode::Paper).unwrap();
        assert!((p.mu[0] - 0.4).abs() < 1e-14);
        assert!((p.sigma2 - 1.6).abs() < 1e-14);
        assert!((p.tau2[0] - 1.5).abs() < 1e-14);
        let q = m_step(&y, &f, &w, &post, EmMode::Exact).unwrap();
        assert!((q.sigma2 - 2.1).abs() < 1e-14);
        assert_eq!(q.mu, p.mu);
    }

    fn random_instance(
        seed: u64,
        n: usize,
        j: usize,
        m: usize,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(n, j, |_, _| rng.random_range(-2.0..2.0));
        let e = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.05..1.0));
        let y = DVector::from_fn(n, |i, _| {
            (0..j).map(|jj| f[(i, jj)] * (0.5 + e[(i, 0)])).sum::<f64>()
                + rng.random_range(-0.3..0.3)
        });
        (y, f, e)
    }

    #[test]
    fn marginal_likelihood_matches_dense() {
        let (y, f, e) = random_instance(3, 12, 2, 3);
        let w = design_matrix(&f, &e).unwrap();
        let p = params(&[0.3, 0.6], &[0.5, 2.0], 0.4);
        let fast = marginal_log_likelihood(&y, &f, &w, &p).unwrap();
        let mut lam = DMatrix::zeros(6, 6);
        for c in 0..6 {
            lam[(c, c)] = p.tau2[c / 3];
        }
        let v = DMatrix::identity(12, 12) * p.sigma2 + &w * lam * w.transpose();
        let r = &y - &f * DVector::from_column_slice(&p.mu);
        let chol = v.clone().cholesky().unwrap();
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = r.dot(&chol.solve(&r));
        let dense = -0.5 * (12.0 * (2.0 * std::f64::consts::PI).ln() + ln_det + quad);
        assert!((fast - dense).abs() < 1e-9 * dense.abs());
    }

    #[test]
    fn exact_fit_recovers_unit_weight() {
        let (_, f, e) = random_instance(5, 25, 1, 3);
        let y = f.column(0).into_owned();
        let fit = fit_em(&y, &f, &e, &EmConfig::default()).unwrap();
        assert!((fit.params.mu[0] - 1.0).abs() < 1e-3);
        assert!(fit.gamma.norm() < 1e-3);
    }

    #[test]
    fn no_basis_reduces_to_least_squares() {
        let (y, f, _) = random_instance(8, 20, 3, 1);
        let e = DMatrix::zeros(20, 0);
        let fit = fit_em(&y, &f, &e, &EmConfig::default()).unwrap();
        let ls = (f.transpose() * &f)
            .cholesky()
            .unwrap()
            .solve(&(f.transpose() * &y));
        for (a, b) in fit.params.mu.iter().zip(ls.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn too_few_rows_errors() {
        let f = DMatrix::from_element(2, 2, 1.0);
        let y = DVector::from_element(2, 1.0);
        assert!(fit_em(&y, &f, &DMatrix::zeros(2, 1), &EmConfig::default()).is_err());
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let (y, f, e) = random_instance(2, 30, 2, 3);
        let cfg = EmConfig {
            max_iter: 2,
            tol: 1e-300,
            ..EmConfig::default()
        };
        let fit = fit_em(&y, &f, &e, &cfg).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 2);
    }

    #[test]
    fn convergence_flag_matches_last_step() {
        for seed in 0..5 {
            let (y, f, e) = random_instance(seed, 30, 2, 3);
            let cfg = EmConfig {
                max_iter: 40,
                ..EmConfig::default()
            };
            let fit = fit_em(&y, &f, &e, &cfg).unwrap();
            let last = fit.trace.last().unwrap().step;
            assert_eq!(fit.converged, last < cfg.tol);
        }
    }

    fn toy_model() -> CdstModel {
        let basis = BasisEvaluator::isotropic(vec![vec![0.0], vec![1.0]], 1, 1.0).unwrap();
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_column_slice(&[1.0, 3.0, 5.0]);
        let models = vec![
            BaseModelSpec::new(ModelKind::Ols, vec![0])
                .fit(&x, &y)
                .unwrap(),
            BaseModelSpec::new(ModelKind::Knn { k: 1 }, vec![0])
                .fit(&x, &y)
                .unwrap(),
        ];
        CdstModel {
            params: params(&[0.5, 0.5], &[1.0, 1.0], 1.0),
            gamma: vec![0.0; 4],
            basis,
            models,
            converged: true,
            iterations: 1,
            trace: Vec::new(),
        }
    }

    #[test]
    fn zero_field_gives_simple_average_and_mu_weights() {
        let model = toy_model();
        let x = DMatrix::from_row_slice(2, 1, &[0.4, 1.7]);
        let p = model.predict(&x, &x).unwrap();
        let f = model.base_predictions(&x).unwrap();
        for i in 0..2 {
            assert!((p[i] - (f[(i, 0)] + f[(i, 1)]) / 2.0).abs() < 1e-14);
        }
        let w = model.weights_at(&x).unwrap();
        assert!(w.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weight_at_center_adds_gamma() {
        let mut model = toy_model();
        model.gamma = vec![0.0, 0.0, 0.0, 0.8];
        let w = model.weights_at(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((w[(0, 1)] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn predict_two_point_oracle() {
        let mut model = toy_model();
        model.params.mu = vec![0.2, 0.9];
        model.gamma = vec![0.5, -0.25, 1.0, 0.1];
        let xq = DMatrix::from_row_slice(2, 1, &[0.5, 1.5]);
        let p = model.predict(&xq, &xq).unwrap();
        for (i, &x) in [0.5f64, 1.5].iter().enumerate() {
            let phi0 = (-(x * x) / 2.0).exp();
            let phi1 = (-((x - 1.0) * (x - 1.0)) / 2.0).exp();
            let w1 = 0.2 + 0.5 * phi0 - 0.25 * phi1;
            let w2 = 0.9 + 1.0 * phi0 + 0.1 * phi1;
            let f1 = 1.0 + 2.0 * x;
            // knn(1) on training x = {0, 1, 2}; y = {1, 3, 5}; ties go to the earlier row
            let f2 = if x < 1.0 { 1.0 } else { 3.0 };
            assert!((p[i] - (w1 * f1 + w2 * f2)).abs() < 1e-10);
        }
    }

    #[test]
    fn model_document_round_trip() {
        let doc = ModelDocument::new(
            ColumnRoles {
                response: "y".into(),
                features: vec!["x".into()],
                weights: vec!["x".into()],
            },
            toy_model(),
        );
        let text = doc.to_json().unwrap();
        assert_eq!(ModelDocument::from_json(&text).unwrap(), doc);
        assert!(ModelDocument::from_json(
            &text.replace("\"schema_version\": 1", "\"schema_version\": 9")
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn basis_rescaling_leaves_weights_unchanged(c in 0.1f64..10.0, g0 in -2.0f64..2.0, g1 in -2.0f64..2.0) {
            let mut a = toy_model();
            a.gamma = vec![g0, g1, -g1, g0];
            let mut b = a.clone();
            b.basis = b.basis.clone().with_amplitude(c);
            b.gamma = a.gamma.iter().map(|g| g / c).collect();
            let xq = DMatrix::from_row_slice(3, 1, &[-0.5, 0.3, 2.2]);
            let wa = a.weights_at(&xq).unwrap();
            let wb = b.weights_at(&xq).unwrap();
            for (u, v) in wa.iter().zip(wb.iter()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }

        #[test]
        fn posterior_covariance_is_symmetric_pd(seed in 0u64..500) {
            let (y, f, e) = random_instance(seed, 15, 2, 3);
            let w = design_matrix(&f, &e).unwrap();
            let post = e_step(&y, &f, &w, &params(&[0.4, 0.4], &[0.7, 1.3], 0.2)).unwrap();
            let asym = (&post.cov - post.cov.transpose()).amax();
            prop_assert!(asym <= 1e-10 * post.cov.amax());
            prop_assert!(post.cov.clone().cholesky().is_some());
        }
    }
}
