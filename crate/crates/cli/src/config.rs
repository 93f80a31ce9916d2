//! Run configuration: a single JSON document validated strictly (unknown
//! keys rejected). CLI flags may override top-level scalars through
//! `--set path=value`. The canonical-JSON hash of the effective config is
//! embedded in fitted models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use otbary::bench::BenchConfig;
use otbary::data::{generate, load_csv, Dataset, Schema};
use otbary::otdensity::ReferenceSpec;
use otbary::solver::{SolverConfig, SpaceSpec, StagePairSpec};
use otbary::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSource {
    Generator {
        name: String,
        #[serde(default = "default_params")]
        params: serde_json::Value,
    },
    Csv {
        path: String,
        schema: Schema,
        outcome_columns: Vec<String>,
    },
}

fn default_params() -> serde_json::Value {
    serde_json::json!({})
}

/// Settings for the internal transport fits behind density estimation and
/// Bayesian inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub g: SpaceSpec,
    pub reference: ReferenceSpec,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self { g: SpaceSpec::kernel(40, 1.0), reference: ReferenceSpec::MomentMatched }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub stages: Vec<StagePairSpec>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Load, apply `--set` overrides and an optional seed override, then
    /// validate.
    pub fn load(path: &Path, sets: &[String], seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        for s in sets {
            apply_set(&mut value, s)?;
        }
        if let Some(seed) = seed_override {
            value["seed"] = serde_json::json!(seed);
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        // The top-level seed governs every stream.
        config.solver.seed = config.seed;
        config.solver.validate()?;
        for pair in &config.stages {
            pair.f.validate()?;
            pair.g.validate()?;
        }
        config.density.g.validate()?;
        Ok(config)
    }

    pub fn hash(&self) -> Result<String> {
        otbary::serialize::config_hash(self)
    }

    /// Materialize the dataset this config describes.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Generator { name, params } => generate(name, params, self.seed),
            DatasetSource::Csv { path, schema, outcome_columns } => {
                load_csv(path, schema, outcome_columns)
            }
        }
    }
}

/// Apply one `--set path=value` override: dotted path into the JSON tree,
/// value parsed as JSON when possible, as a string otherwise.
fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{spec}'")))?;
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                _ => return Err(Error::Config(format!("cannot set '{path}': not an object"))),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::json!({})),
            serde_json::Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("bad array index '{part}' in '{path}'")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range in '{path}'")))?
            }
            _ => return Err(Error::Config(format!("cannot descend into '{part}' in '{path}'"))),
        };
    }
    Ok(())
}
