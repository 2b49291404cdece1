use std::path::{Path, PathBuf};

use cdst::{BaseModelSpec, BasisSpec, ColumnRoles, EmConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FOLD_SEED: u64 = 20240401;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    #[serde(default = "default_fold_seed")]
    pub seed: u64,
}

fn default_fold_seed() -> u64 {
    DEFAULT_FOLD_SEED
}

/// Everything `fit` needs besides flags. Paths given on the command line
/// take precedence over the ones here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub columns: ColumnRoles,
    pub models: Vec<BaseModelSpec>,
    /// `null` fits constant weights (plain least-squares stacking).
    pub basis: Option<BasisSpec>,
    /// Fold count; absent means leave-one-out.
    #[serde(default)]
    pub folds: Option<usize>,
    #[serde(default = "default_fold_seed")]
    pub fold_seed: u64,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub model_out: Option<PathBuf>,
    #[serde(default)]
    pub oof_out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(format!(
                "unsupported config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.models.is_empty() {
            return Err("config lists no base models".into());
        }
        let n_features = self.columns.features.len();
        for (j, m) in self.models.iter().enumerate() {
            m.validate().map_err(|e| format!("model {}: {e}", j + 1))?;
            if let Some(&c) = m.features.iter().find(|&&c| c >= n_features) {
                return Err(format!(
                    "model {} uses feature index {c}, but only {n_features} features are declared",
                    j + 1
                ));
            }
        }
        if self.columns.weights.is_empty() {
            return Err("config declares no weight columns".into());
        }
        if matches!(self.folds, Some(k) if k < 2) {
            return Err("folds must be >= 2".into());
        }
        if let Some(s) = &self.split {
            if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
                return Err("split.train_fraction must lie in (0, 1)".into());
            }
        }
        self.em.validate().map_err(|e| e.to_string())
    }
}
