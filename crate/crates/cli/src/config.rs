// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use tracedit_core::data::{CorpusSpec, PromptTemplate};
use tracedit_core::harness::ExperimentSpec;
use tracedit_core::model::{BaseTrainConfig, ModelConfig};
use tracedit_core::trace::NoiseSpec;

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: CorpusSpec,
    pub template: PromptTemplate,
    /// Model shape; `vocab_size` is replaced by the built vocabulary's size.
    pub model: Option<ModelConfig>,
    pub base: BaseTrainConfig,
    pub noise: NoiseSpec,
    pub trace_samples: usize,
    pub experiment: ExperimentSpec,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            corpus: CorpusSpec::default(),
            template: PromptTemplate::default(),
            model: None,
            base: BaseTrainConfig::default(),
            noise: NoiseSpec::default(),
            trace_samples: 400,
            experiment: ExperimentSpec::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::usage(format!("parsing {}: {e}", path.display())))
    }
}

/// `manifest.json`: the resolved settings of every command run into an
/// output directory, keyed by command name.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
