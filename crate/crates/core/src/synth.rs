//! Synthetic scenarios: covariate-driven and spatially driven weight fields.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnRoles, Dataset};
use crate::error::{invalid, Result};
use crate::linalg::{spd_factor, JitterSchedule, SpdFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Weights vary with the features themselves; scenarios 1-2.
    Covariate,
    /// Weights vary with location; scenarios 1-4.
    Spatial,
}

impl Family {
    pub fn scenario_count(self) -> u8 {
        match self {
            Family::Covariate => 2,
            Family::Spatial => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Covariate => "covariate",
            Family::Spatial => "spatial",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = crate::error::CdstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariate" => Ok(Family::Covariate),
            "spatial" => Ok(Family::Spatial),
            other => Err(invalid(format!("unknown family '{other}'"))),
        }
    }
}

fn default_noise_sd() -> f64 {
    0.7
}
fn default_gp_range() -> f64 {
    0.5
}
fn default_rho() -> f64 {
    0.2
}
fn default_effect_range() -> f64 {
    0.3
}
fn default_effect_sd() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub family: Family,
    pub scenario: u8,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Range of the covariate process `z1, z2`.
    #[serde(default = "default_gp_range")]
    pub gp_range: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Range of the spatial random effect `w`.
    #[serde(default = "default_effect_range")]
    pub effect_range: f64,
    #[serde(default = "default_effect_sd")]
    pub effect_sd: f64,
}

impl ScenarioSpec {
    pub fn new(family: Family, scenario: u8, n: usize, seed: u64) -> Self {
        ScenarioSpec {
            family,
            scenario,
            n,
            seed,
            noise_sd: default_noise_sd(),
            gp_range: default_gp_range(),
            rho: default_rho(),
            effect_range: default_effect_range(),
            effect_sd: default_effect_sd(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario == 0 || self.scenario > self.family.scenario_count() {
            return Err(invalid(format!(
                "scenario {} not defined for the {} family",
                self.scenario,
                self.family.name()
            )));
        }
        if self.n < 2 {
            return Err(invalid("scenario needs n >= 2"));
        }
        if !(self.noise_sd > 0.0) {
            return Err(invalid("noise_sd must be > 0"));
        }
        if !(self.gp_range > 0.0 && self.effect_range > 0.0 && self.effect_sd > 0.0) {
            return Err(invalid("kernel ranges and scales must be > 0"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Exponential covariance `variance * exp(-d / range)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpKernelSpec {
    pub variance: f64,
    pub range: f64,
}

impl GpKernelSpec {
    pub fn new(variance: f64, range: f64) -> Result<Self> {
        if !(variance > 0.0 && range > 0.0) {
            return Err(invalid("GP variance and range must be > 0"));
        }
        Ok(GpKernelSpec { variance, range })
    }

    pub fn cov(&self, d: f64) -> f64 {
        self.variance * (-d / self.range).exp()
    }
}

/// Factorized GP prior over fixed locations; draws are `L z`.
pub struct GpSampler {
    factor: SpdFactor,
}

impl GpSampler {
    pub fn new(locations: &DMatrix<f64>, kernel: GpKernelSpec) -> Result<Self> {
        let m = locations.nrows();
        if m == 0 {
            return Err(invalid("GP sampling needs at least one location"));
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::CdstError::NonFinite("GP locations".into()));
        }
        let mut sigma = DMatrix::from_fn(m, m, |i, j| {
            let d = (locations.row(i) - locations.row(j)).norm();
            kernel.cov(d)
        });
        for i in 0..m {
            sigma[(i, i)] += 1e-8 * kernel.variance;
        }
        let factor = spd_factor(&sigma, JitterSchedule::POSTERIOR, "GP covariance")?;
        Ok(GpSampler { factor })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let m = self.factor.chol.l_dirty().nrows();
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        self.factor.chol.l() * z
    }

    pub fn sample(&self, seed: u64) -> DVector<f64> {
        self.draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

pub fn gp_sample(
    locations: &DMatrix<f64>,
    kernel: GpKernelSpec,
    seed: u64,
) -> Result<DVector<f64>> {
    Ok(GpSampler::new(locations, kernel)?.sample(seed))
}

/// A generated dataset plus the noiseless mean (and spatial effect).
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub mu: Vec<f64>,
    pub effect: Option<Vec<f64>>,
}

impl SimulatedData {
    /// Hidden truth columns for CSV export.
    pub fn hidden_columns(&self) -> Vec<(&str, &[f64])> {
        let mut cols: Vec<(&str, &[f64])> = vec![("_mu", &self.mu)];
        if let Some(w) = &self.effect {
            cols.push(("_w", w));
        }
        cols
    }
}

pub fn covariate_mean(scenario: u8, x: &[f64]) -> f64 {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    match scenario {
        1 => {
            if x1 < 0.0 {
                2.0 * (x1 + x2)
            } else {
                4.0 * x2 * x2 - x1
            }
        }
        2 => 2.0 * (1.0 + x1) * x2 + (1.0 - x1) * x3 * x3,
        _ => f64::NAN,
    }
}

/// `x = (x1..x5)`, `s = (s1, s2)`, `w` the spatial effect.
pub fn spatial_mean(scenario: u8, x: &[f64], s: &[f64], w: f64) -> f64 {
    let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
    let (s1, s2) = (s[0], s[1]);
    match scenario {
        1 => w + x3 * x3 * (-0.3 * (s1 * s1 + s2 * s2)).exp() + s2 * (2.0 * x2).sin(),
        2 => {
            2.0 * w
                + 0.5 * (std::f64::consts::PI * x1 * x2).sin()
                + (x3 - 0.5).powi(2)
                + 0.5 * x4
                + 0.25 * x5
        }
        3 => 2.0 * w + (s1 + 1.0) * x1 + (1.0 - s1) * x3 * x3,
        4 => 2.0 * (s1 + 1.0) * w + x1 + (1.0 - s1) * x3 * x3,
        _ => f64::NAN,
    }
}

fn names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// Features `x1..x5` with `x1, x2 ~ U[-1,1]`, `x3..x5 ~ N(0,1)`; weight
/// covariates `(x1, x2)`.
pub fn gen_covariate_case(spec: &ScenarioSpec) -> Result<SimulatedData> {
    spec.validate()?;
    if spec.family != Family::Covariate {
        return Err(invalid("gen_covariate_case needs the covariate family"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let mut x = DMatrix::zeros(n, 5);
    let mut mu = Vec::with_capacity(n);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        x[(i, 0)] = rng.random_range(-1.0..1.0);
        x[(i, 1)] = rng.random_range(-1.0..1.0);
        for j in 2..5 {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let m = covariate_mean(spec.scenario, &row);
        let eps: f64 = StandardNormal.sample(&mut rng);
        mu.push(m);
        y[i] = m + spec.noise_sd * eps;
    }
    let xtilde = x.columns(0, 2).into_owned();
    let features = names("x", 5);
    let roles = ColumnRoles {
        response: "y".into(),
        weights: features[..2].to_vec(),
        features,
    };
    Ok(SimulatedData {
        dataset: Dataset::new(x, xtilde, y, roles)?,
        mu,
        effect: None,
    })
}

/// Locations `s ~ U[-1,1]^2`; `x1 = z1`, `x2 = rho z1 + sqrt(1-rho^2) z2`
/// with `z1, z2` exponential-kernel GPs; `x3..x5 ~ N(0,1)`; spatial effect
/// `w` from a GP with variance `effect_sd^2` and range `effect_range`.
///
/// Features are `(x1..x5, s1, s2)` so spatially aware base models can use
/// the locations; weight covariates are `(s1, s2)`.
pub fn gen_spatial_case(spec: &ScenarioSpec) -> Result<SimulatedData> {
    spec.validate()?;
    if spec.family != Family::Spatial {
        return Err(invalid("gen_spatial_case needs the spatial family"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let s = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));

    let cov_gp = GpSampler::new(&s, GpKernelSpec::new(1.0, spec.gp_range)?)?;
    let z1 = cov_gp.draw(&mut rng);
    let z2 = cov_gp.draw(&mut rng);
    let effect_gp = GpSampler::new(
        &s,
        GpKernelSpec::new(spec.effect_sd * spec.effect_sd, spec.effect_range)?,
    )?;
    let w = effect_gp.draw(&mut rng);

    let mut x = DMatrix::zeros(n, 7);
    let mut mu = Vec::with_capacity(n);
    let mut y = DVector::zeros(n);
    let rho_c = (1.0 - spec.rho * spec.rho).sqrt();
    for i in 0..n {
        x[(i, 0)] = z1[i];
        x[(i, 1)] = spec.rho * z1[i] + rho_c * z2[i];
        for j in 2..5 {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
        x[(i, 5)] = s[(i, 0)];
        x[(i, 6)] = s[(i, 1)];
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let m = spatial_mean(spec.scenario, &row[..5], &row[5..], w[i]);
        let eps: f64 = StandardNormal.sample(&mut rng);
        mu.push(m);
        y[i] = m + spec.noise_sd * eps;
    }
    let mut features = names("x", 5);
    features.extend(["s1".to_string(), "s2".to_string()]);
    let roles = ColumnRoles {
        response: "y".into(),
        features,
        weights: vec!["s1".into(), "s2".into()],
    };
    Ok(SimulatedData {
        dataset: Dataset::new(x, s, y, roles)?,
        mu,
        effect: Some(w.iter().copied().collect()),
    })
}

pub fn generate(spec: &ScenarioSpec) -> Result<SimulatedData> {
    match spec.family {
        Family::Covariate => gen_covariate_case(spec),
        Family::Spatial => gen_spatial_case(spec),
    }
}
