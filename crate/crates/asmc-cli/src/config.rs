//! Experiment configuration: a single JSON file, with command-line
//! overrides applied on top (flags > file > defaults).

use anyhow::{anyhow, bail, Context, Result};
use asmc::model::AdaptivityMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSelector {
    /// `"gaussian-bench"`: the built-in Gaussian bridging benchmark.
    Name(String),
    /// `{"discrete-file": "model.json"}`: a finite model loaded from disk.
    DiscreteFile {
        #[serde(rename = "discrete-file")]
        discrete_file: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceBlock {
    /// Independent nonadaptive runs used for the crude Monte Carlo
    /// reference variance.
    pub replicates: u64,
    #[serde(rename = "N")]
    pub n_particles: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianKnobs {
    pub dimension: usize,
    pub metropolis_sweeps: usize,
    /// Proposal covariance scale; `null` selects `2.38^2 / dimension`.
    pub proposal_scale: Option<f64>,
}

impl Default for GaussianKnobs {
    fn default() -> Self {
        Self {
            dimension: 10,
            metropolis_sweeps: 4,
            proposal_scale: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSelector,
    #[serde(rename = "N")]
    pub particle_counts: Vec<usize>,
    #[serde(rename = "n")]
    pub n_levels: usize,
    pub modes: Vec<AdaptivityMode>,
    pub replicates: u64,
    #[serde(default)]
    pub lags: Vec<usize>,
    pub seed: u64,
    /// `"default"`, `"coordinate:k"` (Gaussian), `"state-value"` or
    /// `"indicator:s"` (discrete).
    #[serde(default = "default_test_function")]
    pub test_function: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub term_by_term: bool,
    #[serde(default)]
    pub reference: Option<ReferenceBlock>,
    /// Discrete models only: add exact-value rows to the aggregate.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub gaussian: GaussianKnobs,
}

fn default_test_function() -> String {
    "default".into()
}

impl ExperimentConfig {
    /// Load a config file and apply overrides. Each override is
    /// `key=value` with dotted key paths into the JSON document; values
    /// parse as JSON where possible and fall back to strings.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut doc: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for entry in overrides {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| anyhow!("override {entry:?} is not of the form key=value"))?;
            let parsed: serde_json::Value = serde_json::from_str(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for part in &parts[..parts.len() - 1] {
                slot = slot
                    .as_object_mut()
                    .ok_or_else(|| anyhow!("override path {key:?} crosses a non-object"))?
                    .entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()));
            }
            slot.as_object_mut()
                .ok_or_else(|| anyhow!("override path {key:?} crosses a non-object"))?
                .insert(parts[parts.len() - 1].to_string(), parsed);
        }
        let config: ExperimentConfig =
            serde_json::from_value(doc).context("config does not match the expected schema")?;
        config.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(config)
    }

    fn validate(&self, base: &Path) -> Result<()> {
        if self.particle_counts.is_empty() {
            bail!("N must list at least one particle count");
        }
        if let Some(&bad) = self.particle_counts.iter().find(|&&n| n < 2) {
            bail!("particle counts must be at least 2, got {bad}");
        }
        if self.replicates == 0 {
            bail!("replicates must be at least 1");
        }
        if self.modes.is_empty() {
            bail!("modes must list at least one of adaptive, nonadaptive");
        }
        if let Some(&bad) = self.lags.iter().find(|&&h| h > self.n_levels) {
            bail!("lag {bad} exceeds n = {}", self.n_levels);
        }
        match &self.model {
            ModelSelector::Name(name) if name == "gaussian-bench" => {}
            ModelSelector::Name(name) => bail!("unknown model {name:?}"),
            ModelSelector::DiscreteFile { discrete_file } => {
                let resolved = self.resolve_model_path(base, discrete_file);
                if !resolved.is_file() {
                    bail!("discrete model file {} not found", resolved.display());
                }
            }
        }
        if let Some(reference) = &self.reference {
            if reference.n_particles < 2 || reference.replicates < 2 {
                bail!("reference block needs N >= 2 and replicates >= 2");
            }
        }
        Ok(())
    }

    /// Model paths are resolved relative to the config file.
    pub fn resolve_model_path(&self, base: &Path, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            base.join(file)
        }
    }
}
