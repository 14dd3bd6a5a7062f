//! Vision encoder, projection and language model wired together.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::error::Result;
use crate::lm::{AdapterSpec, DecoderConfig, DecoderLm, VisualTokens};
use crate::nn::{count, digest, Init, Named};
use crate::projection::{ProjectionConfig, ProjectionNet};
use crate::train::Checkpoint;
use crate::vision::{MgvfEmbedding, VisionConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: DecoderConfig,
    pub projection: ProjectionConfig,
    pub adapter: AdapterSpec,
    /// Seed of the frozen backbones. Kept apart from the training seed so
    /// that runs with different seeds share one backbone.
    pub backbone_seed: u64,
    /// Linear adapters have been folded into the attention projections; the
    /// folded projections then travel with the checkpoint.
    pub merged: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision: VisionConfig::default(),
            lm: DecoderConfig::default(),
            projection: ProjectionConfig::default(),
            adapter: AdapterSpec::default(),
            backbone_seed: 0,
            merged: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        self.adapter.validate(self.lm.width)?;
        if self.projection.hidden == 0 {
            return Err(crate::EivenError::config("projection.hidden", "must be at least 1"));
        }
        Ok(())
    }
}

const VISION_STREAM: u64 = 0x5649_5349_4f4e;
const LM_STREAM: u64 = 0x4c41_4e47;

#[derive(Clone, Debug)]
pub struct EivenModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub vision: VisionEncoder<T>,
    pub projection: ProjectionNet<T>,
    pub lm: DecoderLm<T>,
}

impl<T: Scalar> EivenModel<T> {
    /// Frozen backbones come from `config.backbone_seed`; the projection and
    /// adapters are initialized from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vision = VisionEncoder::new(&config.vision, config.backbone_seed ^ VISION_STREAM)?;
        let mut init = Init::new(seed);
        let projection = ProjectionNet::new(
            &mut init,
            config.vision.width,
            config.projection.hidden,
            config.lm.width,
        );
        let mut lm = DecoderLm::new(&config.lm, config.backbone_seed ^ LM_STREAM)?;
        if !config.merged {
            lm = lm.with_adapters(&config.adapter, seed.wrapping_add(1))?;
        }
        Ok(EivenModel {
            config: config.clone(),
            vision,
            projection,
            lm,
        })
    }

    /// Projects one or more stacked embeddings into visual tokens.
    pub fn visual_tokens(&self, images: &[&MgvfEmbedding<T>]) -> Result<VisualTokens<T>> {
        if images.is_empty() {
            return Ok(VisualTokens::None);
        }
        Ok(VisualTokens::Tokens(
            self.projection.project(&MgvfEmbedding::stack(images))?,
        ))
    }

    pub fn trainable_tensors(&self) -> Vec<Named<T>> {
        let mut out = self.projection.named_tensors();
        out.extend(self.lm.adapter_tensors());
        out
    }

    /// Tensors stored in a checkpoint: the trainable ones, plus the folded
    /// attention projections of a merged model.
    pub fn checkpoint_tensors(&self) -> Vec<Named<T>> {
        let mut out = self.trainable_tensors();
        if self.config.merged {
            out.extend(self.merged_projections());
        }
        out
    }

    fn merged_projections(&self) -> Vec<Named<T>> {
        let mut out = Vec::new();
        for (i, b) in self.lm.blocks.iter().enumerate() {
            b.qkv.collect(&format!("lm.block{i}.attn.qkv"), &mut out);
        }
        out
    }

    /// Loads checkpoint values into this model. Folded projections of a
    /// merged model replace the seed-derived ones.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore(&self.trainable_tensors())?;
        if self.config.merged {
            for i in 0..self.lm.blocks.len() {
                let fetch = |suffix: &str| -> Result<Tensor<T>> {
                    let name = format!("lm.block{i}.attn.qkv.{suffix}");
                    let t = ckpt
                        .get(&name)
                        .ok_or_else(|| crate::EivenError::Checkpoint(format!("merged checkpoint lacks {name}")))?;
                    Tensor::frozen(t.data.iter().map(|&v| T::of(v as f64)).collect(), &t.shape)
                };
                let weight = fetch("weight")?;
                let bias = fetch("bias")?;
                let qkv = &mut self.lm.blocks[i].qkv;
                if weight.shape() != qkv.weight.shape() {
                    return Err(crate::EivenError::Checkpoint(format!(
                        "block {i}: folded projection has shape {:?}, expected {:?}",
                        weight.shape(),
                        qkv.weight.shape()
                    )));
                }
                qkv.weight = weight;
                qkv.bias = Some(bias);
            }
        }
        Ok(())
    }

    /// Adapter-free copy with linear adapters folded into the base weights.
    pub fn merged(&self) -> Result<Self> {
        let mut config = self.config.clone();
        config.merged = true;
        Ok(EivenModel {
            config,
            vision: self.vision.clone(),
            projection: self.projection.clone(),
            lm: crate::lm::merge_linear_adapter(&self.lm)?,
        })
    }

    pub fn frozen_tensors(&self) -> Vec<Named<T>> {
        let mut out = self.vision.named_tensors();
        out.extend(self.lm.base_tensors());
        out
    }

    pub fn lm_digest(&self) -> String {
        digest(&self.lm.base_tensors())
    }

    pub fn vision_digest(&self) -> String {
        digest(&self.vision.named_tensors())
    }

    pub fn total_parameters(&self) -> usize {
        count(&self.trainable_tensors()) + count(&self.frozen_tensors())
    }

    pub fn count_trainable(&self) -> usize {
        count_trainable(&self.lm, Some(&self.projection))
    }
}

/// Number of scalars that receive gradients: adapter and projection weights.
pub fn count_trainable<T: Scalar>(lm: &DecoderLm<T>, projection: Option<&ProjectionNet<T>>) -> usize {
    let mut tensors: Vec<(String, Tensor<T>)> = lm.base_tensors();
    tensors.extend(lm.adapter_tensors());
    if let Some(p) = projection {
        tensors.extend(p.named_tensors());
    }
    tensors
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.numel())
        .sum()
}
