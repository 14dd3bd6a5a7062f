//! One JSON document describing a whole run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode_eval::DecodeConfig;
use crate::error::{EivenError, Result};
use crate::model::{EivenModel, ModelConfig};
use crate::synthdata::DatasetConfig;
use crate::task::Modalities;
use crate::train::{Checkpoint, TrainConfig};

/// Component switches for ablations. The comparison strategy is
/// `train.lbc_strategy`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Extract `[cls]` states from every configured layer; when off only the
    /// last layer is used.
    pub use_mgvf: bool,
    pub drop_image: bool,
    pub drop_text: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_mgvf: true,
            drop_image: false,
            drop_text: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `manifest.jsonl` and `images/`.
    pub dir: Option<PathBuf>,
    /// Used by `gen-data`.
    pub generate: DatasetConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EivenError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.data.generate.validate()?;
        if self.ablation.drop_image && self.ablation.drop_text {
            return Err(EivenError::config(
                "ablation",
                "drop_image and drop_text together leave nothing to train on",
            ));
        }
        Ok(())
    }

    /// Model config with the ablation switches applied.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.ablation.use_mgvf {
            m.vision.extraction_layers = vec![m.vision.layers];
        }
        m
    }

    pub fn modalities(&self) -> Modalities {
        Modalities {
            drop_image: self.ablation.drop_image,
            drop_text: self.ablation.drop_text,
        }
    }

    /// Seeds training and decoding; the backbone and data seeds stay put.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.decode.seed = seed;
        self
    }

    /// Fresh model for this run: frozen backbones from the backbone seed,
    /// trainable parts from `train.seed`.
    pub fn build_model(&self) -> Result<EivenModel<f32>> {
        EivenModel::new(&self.resolved_model(), self.train.seed)
    }

    /// Checkpoint of `model` carrying this config.
    pub fn save_checkpoint(&self, model: &EivenModel<f32>, path: &Path) -> Result<()> {
        let mut run = self.clone();
        run.model = model.config.clone();
        let meta = serde_json::json!({ "run": run.resolved_json(), "seed": self.train.seed });
        Checkpoint::from_named(&model.checkpoint_tensors(), meta).save(path)
    }

    /// Rebuilds the model a checkpoint was saved from.
    pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, EivenModel<f32>)> {
        let ckpt = Checkpoint::load(path)?;
        let run = ckpt
            .config
            .get("run")
            .cloned()
            .ok_or_else(|| EivenError::Checkpoint(format!("{} carries no run config", path.display())))?;
        let run: RunConfig = serde_json::from_value(run)?;
        run.model.validate()?;
        let mut model = run.build_model()?;
        model.load_state(&ckpt)?;
        Ok((run, model))
    }

    /// The config as actually used, for embedding into outputs.
    pub fn resolved_json(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.model = self.resolved_model();
        serde_json::to_value(&c).expect("config serializes")
    }
}
