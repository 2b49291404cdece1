//! Monte Carlo benchmark harness over the synthetic scenarios.
//!
//! Replication `r` uses seed `master_seed + r` for data generation and
//! fixed salts of it for the split, folds and k-means, so a replication's
//! result does not depend on which other replications run or on the worker
//! count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_models::{aic, likelihood_rows, BaseModelSpec, ModelKind, Side};
use crate::baselines::{saic_partial, simple_average, vanilla_stack};
use crate::basis::BasisSpec;
use crate::cv::{build_oof, make_folds};
use crate::dataset::split;
use crate::em_stacker::{fit_em, prepare_basis, CdstModel, EmConfig};
use crate::error::{invalid, CdstError, Result};
use crate::metrics::{mse, ReplicationSummary};
use crate::synth::{generate, Family, ScenarioSpec};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REPLICATIONS: usize = 20;
pub const DEFAULT_MASTER_SEED: u64 = 20240401;

const SPLIT_SALT: u64 = 0x5851_F42D_4C95_7F2D;
const FOLD_SALT: u64 = 0x1405_7B7E_F767_814F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cdst,
    St,
    Sa,
    Saic,
    /// One base model of the roster, refitted on the full training split.
    Single(usize),
}

impl Method {
    pub fn name(&self, roster: &[BaseModelSpec]) -> String {
        match self {
            Method::Cdst => "CDST".into(),
            Method::St => "ST".into(),
            Method::Sa => "SA".into(),
            Method::Saic => "SAIC".into(),
            Method::Single(j) => format!(
                "M{}:{}",
                j + 1,
                roster.get(*j).map_or("?".to_string(), |s| s.label())
            ),
        }
    }
}

fn default_train_fraction() -> f64 {
    0.75
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_master_seed() -> u64 {
    DEFAULT_MASTER_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    pub schema_version: u32,
    /// Template; its seed is replaced per replication.
    pub scenario: ScenarioSpec,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub models: Vec<BaseModelSpec>,
    /// `None` fits constant weights through the CDST path.
    pub basis: Option<BasisSpec>,
    /// Fold count; `None` is leave-one-out.
    #[serde(default)]
    pub folds: Option<usize>,
    #[serde(default)]
    pub em: EmConfig,
    pub methods: Vec<Method>,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
}

/// Stand-in rosters. Covariate family: linear model, quadratic surface,
/// nearest neighbours on all features and on the weight covariates.
/// Spatial family: quadratic surface in the covariates, nearest neighbours
/// in space, and a linear model with a location trend.
pub fn default_roster(family: Family) -> Vec<BaseModelSpec> {
    match family {
        Family::Covariate => vec![
            BaseModelSpec::new(ModelKind::Ols, vec![0, 1, 2, 3, 4]),
            BaseModelSpec::new(
                ModelKind::PolyRidge {
                    degree: 2,
                    alpha: 1e-3,
                },
                vec![0, 1, 2, 3, 4],
            ),
            BaseModelSpec::new(ModelKind::Knn { k: 10 }, vec![0, 1, 2, 3, 4]),
            BaseModelSpec::new(ModelKind::Knn { k: 10 }, vec![0, 1]),
        ],
        Family::Spatial => vec![
            BaseModelSpec::new(
                ModelKind::PolyRidge {
                    degree: 2,
                    alpha: 1e-3,
                },
                vec![0, 1, 2, 3, 4],
            ),
            BaseModelSpec::new(ModelKind::Knn { k: 10 }, vec![5, 6]),
            BaseModelSpec::new(ModelKind::Ols, vec![0, 1, 2, 3, 4, 5, 6]),
        ],
    }
}

/// Two OLS fits, one per side of `x[column] = 0`.
pub fn regional_pair(column: usize, features: Vec<usize>) -> Vec<BaseModelSpec> {
    [Side::Below, Side::AtOrAbove]
        .into_iter()
        .map(|side| {
            BaseModelSpec::new(
                ModelKind::RegionalOls {
                    column,
                    threshold: 0.0,
                    side,
                },
                features.clone(),
            )
        })
        .collect()
}

impl BenchPlan {
    /// Desk-scale default: n = 400, 300/100 split, leave-one-out, ten
    /// k-means RBF centers with unit bandwidth.
    pub fn standard(family: Family, scenario: u8) -> Self {
        let roster = default_roster(family);
        let mut methods = vec![Method::Cdst, Method::St, Method::Sa, Method::Saic];
        methods.extend((0..roster.len()).map(Method::Single));
        BenchPlan {
            schema_version: PLAN_SCHEMA_VERSION,
            scenario: ScenarioSpec::new(family, scenario, 400, 0),
            replications: DEFAULT_REPLICATIONS,
            train_fraction: default_train_fraction(),
            models: roster,
            basis: Some(BasisSpec::kmeans(10, 1.0, 0)),
            folds: None,
            em: EmConfig::default(),
            methods,
            master_seed: DEFAULT_MASTER_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported plan schema version {}",
                self.schema_version
            )));
        }
        if self.replications == 0 {
            return Err(invalid("replications must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("plan lists no methods"));
        }
        if self.models.is_empty() {
            return Err(invalid("plan lists no base models"));
        }
        for m in &self.methods {
            if let Method::Single(j) = m {
                if *j >= self.models.len() {
                    return Err(invalid(format!("single-model method {j} out of range")));
                }
            }
        }
        for s in &self.models {
            s.validate()?;
        }
        self.em.validate()?;
        self.scenario.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: BenchPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub replication: usize,
    pub method: String,
    pub outcome: std::result::Result<f64, String>,
}

/// Everything one replication produces, including fitted CDST models for
/// callers that inspect weight fields.
pub struct ReplicationRun {
    pub results: Vec<MethodResult>,
    pub cdst: Option<CdstModel>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub family: Family,
    pub scenario: u8,
    pub results: Vec<MethodResult>,
    pub summaries: Vec<ReplicationSummary>,
}

impl BenchReport {
    /// `family,scenario,replication,method,mse` for every successful fit.
    pub fn results_csv(&self) -> String {
        let mut out = String::from("family,scenario,replication,method,mse\n");
        for r in &self.results {
            if let Ok(v) = r.outcome {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    self.family.name(),
                    self.scenario,
                    r.replication,
                    r.method,
                    v
                ));
            }
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>12} {:>12} {:>6} {:>8}\n",
            "method", "mean_mse", "sd", "n", "failed"
        );
        for s in &self.summaries {
            out.push_str(&format!(
                "{:<28} {:>12.6} {:>12.6} {:>6} {:>8}\n",
                s.method, s.mean, s.sd, s.count, s.failures
            ));
        }
        out
    }

    pub fn summary(&self, method: &str) -> Option<&ReplicationSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn failures(&self) -> impl Iterator<Item = &MethodResult> {
        self.results.iter().filter(|r| r.outcome.is_err())
    }
}

/// Run one replication of `plan`.
pub fn run_replication(plan: &BenchPlan, replication: usize) -> ReplicationRun {
    let names: Vec<String> = plan.methods.iter().map(|m| m.name(&plan.models)).collect();
    match replication_inner(plan, replication) {
        Ok((scores, cdst)) => ReplicationRun {
            results: names
                .into_iter()
                .zip(scores)
                .map(|(method, outcome)| MethodResult {
                    replication,
                    method,
                    outcome: outcome.map_err(|e| e.to_string()),
                })
                .collect(),
            cdst,
        },
        Err(e) => ReplicationRun {
            results: names
                .into_iter()
                .map(|method| MethodResult {
                    replication,
                    method,
                    outcome: Err(e.to_string()),
                })
                .collect(),
            cdst: None,
        },
    }
}

type Scores = Vec<Result<f64>>;

fn replication_inner(plan: &BenchPlan, replication: usize) -> Result<(Scores, Option<CdstModel>)> {
    let seed = plan.master_seed.wrapping_add(replication as u64);
    let mut spec = plan.scenario.clone();
    spec.seed = seed;
    let sim = generate(&spec)?;
    let plan_split = split(sim.dataset.n(), plan.train_fraction, seed ^ SPLIT_SALT)?;
    let train = sim.dataset.subset(&plan_split.train)?;
    let test = sim.dataset.subset(&plan_split.test)?;
    let k = plan.folds.unwrap_or(train.n());
    let folds = make_folds(train.n(), k, seed ^ FOLD_SALT)?;

    let oof = build_oof(&plan.models, &train, &folds)?;
    let full = plan
        .models
        .iter()
        .map(|s| crate::base_models::fit(s, train.x(), train.y()))
        .collect::<Result<Vec<_>>>()?;
    let mut test_preds = DMatrix::zeros(test.n(), full.len());
    for (j, m) in full.iter().enumerate() {
        test_preds.set_column(j, &crate::base_models::predict(m, test.x())?);
    }
    let y_test: Vec<f64> = test.y().iter().copied().collect();
    let score = |pred: &nalgebra::DVector<f64>| mse(&y_test, pred.as_slice());

    let mut cdst_model = None;
    let mut scores = Vec::with_capacity(plan.methods.len());
    for method in &plan.methods {
        let s = match method {
            Method::Cdst => (|| {
                let basis = plan.basis.as_ref().map(|b| {
                    let mut b = b.clone();
                    b.kmeans_seed = b.kmeans_seed.wrapping_add(seed);
                    b
                });
                let (ev, e) = prepare_basis(basis.as_ref(), train.xtilde())?;
                let fit = fit_em(train.y(), &oof.values, &e, &plan.em)?;
                let model = CdstModel::from_fit(fit, ev, full.clone())?;
                let pred = model.predict(test.x(), test.xtilde())?;
                cdst_model = Some(model);
                score(&pred)
            })(),
            Method::St => vanilla_stack(train.y(), &oof.values)
                .and_then(|w| w.combine(&test_preds))
                .and_then(|p| score(&p)),
            Method::Sa => simple_average(full.len())
                .and_then(|w| w.combine(&test_preds))
                .and_then(|p| score(&p)),
            Method::Saic => (|| {
                let aics: Vec<Option<f64>> = full
                    .iter()
                    .map(|m| {
                        if m.spec.has_likelihood() {
                            aic(m, likelihood_rows(m, train.x())).map(Some)
                        } else {
                            Ok(None)
                        }
                    })
                    .collect::<Result<_>>()?;
                let w = saic_partial(&aics)?;
                score(&w.combine(&test_preds)?)
            })(),
            Method::Single(j) => score(&test_preds.column(*j).into_owned()),
        };
        scores.push(s);
    }
    Ok((scores, cdst_model))
}

/// Run every replication on a pool of `workers` threads (`None` uses the
/// global pool) and aggregate in replication order.
pub fn run_bench(plan: &BenchPlan, workers: Option<usize>) -> Result<BenchReport> {
    plan.validate()?;
    let run = || -> Vec<MethodResult> {
        (0..plan.replications)
            .into_par_iter()
            .map(|r| run_replication(plan, r).results)
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CdstError::InvalidArgument(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut summaries = Vec::new();
    for m in &plan.methods {
        let name = m.name(&plan.models);
        let mine = results.iter().filter(|r| r.method == name);
        let values: Vec<f64> = mine
            .clone()
            .filter_map(|r| r.outcome.clone().ok())
            .collect();
        let failures = mine.filter(|r| r.outcome.is_err()).count();
        summaries.push(ReplicationSummary::new(name, values, failures)?);
    }
    Ok(BenchReport {
        family: plan.scenario.family,
        scenario: plan.scenario.scenario,
        results,
        summaries,
    })
}

/// Evaluate the weight field of `model` on a regular grid over `[lo, hi]^2`
/// in the first two weight-covariate dimensions.
pub fn weight_grid(
    model: &CdstModel,
    lo: f64,
    hi: f64,
    per_axis: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if model.basis.dim() != 2 {
        return Err(invalid("weight_grid needs a two-dimensional weight space"));
    }
    let step = |t: usize| lo + (hi - lo) * t as f64 / (per_axis - 1).max(1) as f64;
    let grid = DMatrix::from_fn(per_axis * per_axis, 2, |i, c| {
        if c == 0 {
            step(i / per_axis)
        } else {
            step(i % per_axis)
        }
    });
    let w = model.weights_at(&grid)?;
    Ok((grid, w))
}

/// Mean of column `j` of `values` over grid rows whose first coordinate
/// satisfies `pred`.
pub fn masked_mean(
    grid: &DMatrix<f64>,
    values: &DMatrix<f64>,
    j: usize,
    pred: impl Fn(f64) -> bool,
) -> f64 {
    let picked: Vec<f64> = (0..grid.nrows())
        .filter(|&i| pred(grid[(i, 0)]))
        .map(|i| values[(i, j)])
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}
