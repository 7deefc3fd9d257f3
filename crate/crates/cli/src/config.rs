//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::Path;

use foresee::baseline::BoostParams;
use foresee::classifiers::{ClassifierKind, ClassifierParams, Metric};
use foresee::fairness::OddsAggregation;
use foresee::foresee::ForestParams;
use foresee::profile::DEFAULT_FRACTION;
use foresee::synthetic;
use foresee::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitigationSettings {
    pub epsilon: f64,
    pub grid_step: f64,
    pub validation_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSettings {
    pub seeds: usize,
    pub n: usize,
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the split and every estimator.
    pub seed: u64,
    pub lambda: f64,
    pub split_ratio: f64,
    pub format: Format,
    pub metric: Metric,
    pub odds: OddsAggregation,
    /// Top-γ subset added to evaluation reports when set.
    pub gamma: Option<f64>,
    pub models: Vec<ClassifierKind>,
    pub forest: ForestParams,
    pub baseline: BoostParams,
    pub classifiers: ClassifierParams,
    pub mitigation: MitigationSettings,
    pub simulate: SimulateSettings,
    pub profile_fraction: f64,
}

impl RunConfig {
    /// Defaults for `subcommand`. `simulate` uses the synthetic-bench forest.
    pub fn defaults(subcommand: &str) -> Self {
        RunConfig {
            seed: 0,
            lambda: 0.5,
            split_ratio: 0.7,
            format: Format::Csv,
            metric: Metric::F1,
            odds: OddsAggregation::Mean,
            gamma: None,
            models: ClassifierKind::ALL.to_vec(),
            forest: if subcommand == "simulate" {
                synthetic::default_foresee_params()
            } else {
                ForestParams::default()
            },
            baseline: BoostParams::default(),
            classifiers: ClassifierParams::default(),
            mitigation: MitigationSettings {
                epsilon: 0.02,
                grid_step: 0.01,
                validation_fraction: 0.2,
            },
            simulate: SimulateSettings {
                seeds: 20,
                n: 5000,
                baseline: true,
            },
            profile_fraction: DEFAULT_FRACTION,
        }
    }

    /// Defaults overlaid with the file at `path`, key by key.
    pub fn load(subcommand: &str, path: Option<&Path>) -> Result<Self> {
        let defaults = Self::defaults(subcommand);
        let Some(path) = path else {
            return Ok(defaults);
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let over: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let mut base =
            toml::Table::try_from(&defaults).map_err(|e| Error::Schema(e.to_string()))?;
        merge(&mut base, over);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Schema(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Propagates the run seed to every component.
    pub fn seed_components(&mut self) {
        self.forest.seed = self.seed;
        self.baseline.seed = self.seed;
        self.classifiers.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            ));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("gamma must lie in (0, 1], got {g}"));
            }
        }
        if self.models.is_empty() {
            return bad("at least one classifier is required".into());
        }
        self.forest.validate()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
