//! The run configuration: one JSON document holding every setting of a
//! command. Unknown keys are rejected and missing keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data_io::{SplitProtocol, SynthSpec};
use crate::dsp::PreprocessConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub bank: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. [`RunConfig::resolved`] copies it into the training and
    /// synthetic-data seeds.
    pub seed: u64,
    /// Split protocol name, see [`SplitProtocol::by_name`].
    pub protocol: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            protocol: "ratio:0.6".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Propagates the master seed and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.synth.validate()?;
        self.preprocess.validate()?;
        self.eval.validate()?;
        self.split_protocol()?;
        Ok(self)
    }

    pub fn split_protocol(&self) -> Result<SplitProtocol> {
        SplitProtocol::by_name(&self.protocol)
    }

    /// Canonical JSON: fields in declaration order, floats in shortest
    /// round-trip form.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serialises")
    }

    /// Canonical JSON without the paths, which name where a run reads and
    /// writes but not what it computes.
    pub fn fingerprint_json(&self) -> String {
        Self {
            paths: Paths::default(),
            ..self.clone()
        }
        .canonical_json()
    }
}
