//! Run configuration. Precedence, lowest first: built-in defaults, the
//! dataset profile's published settings, the `--config` JSON file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use hman::{EvalSettings, Hyperparams, SyntheticSpec};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub precision: Option<u32>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub embed_dim: Option<usize>,
    /// Partial `SyntheticSpec`, overlaid on the chosen preset.
    pub spec: Option<Value>,
    /// Partial `Hyperparams`, overlaid on the profile defaults.
    pub hyper: Option<Value>,
    /// Partial `EvalSettings`.
    pub eval: Option<Value>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn hyper(&self, base: &Hyperparams) -> CliResult<Hyperparams> {
        overlay(base, self.hyper.as_ref(), "hyper")
    }

    pub fn spec(&self, base: &SyntheticSpec) -> CliResult<SyntheticSpec> {
        overlay(base, self.spec.as_ref(), "spec")
    }

    pub fn eval(&self) -> CliResult<EvalSettings> {
        overlay(&EvalSettings::default(), self.eval.as_ref(), "eval")
    }
}

/// Replaces the fields of `base` named in `patch`.
fn overlay<T>(base: &T, patch: Option<&Value>, section: &str) -> CliResult<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut merged = serde_json::to_value(base).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(patch) = patch {
        let Value::Object(fields) = patch else {
            return Err(CliError::Usage(format!("config section `{section}` must be an object")));
        };
        let Value::Object(target) = &mut merged else {
            return Err(CliError::Internal(format!("`{section}` defaults are not an object")));
        };
        for (k, v) in fields {
            if !target.contains_key(k) {
                return Err(CliError::Usage(format!("unknown field `{section}.{k}` in config")));
            }
            target.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config section `{section}`: {e}")))
}
