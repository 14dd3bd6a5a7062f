//! Frozen-backbone training of the projection and adapters.

mod checkpoint;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, StoredTensor, MAGIC, VERSION};
pub use optim::{AdamW, AdamWConfig};

use crate::autograd::{self as ag, Scalar, Tensor};
use crate::decode_eval::DecodeConfig;
use crate::error::{EivenError, Result};
use crate::lbc::{sample_partner, LbcStrategy};
use crate::lm::{DecoderLm, PromptSequence};
use crate::model::EivenModel;
use crate::synthdata::Split;
use crate::task::{evaluate, train_prompt, Corpus, Modalities};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lbc_strategy: LbcStrategy,
    /// Under a pairwise strategy, the share of training instances that get a
    /// comparison prompt each epoch on top of their single-product prompt
    /// (the only form seen at test time).
    pub lbc_fraction: f64,
    /// Both must stay true; the backbones are never trained.
    pub freeze_lm: bool,
    pub freeze_vision: bool,
    /// Hard stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
    /// Score only the first `n` validation instances.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 5e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            lbc_strategy: LbcStrategy::JudgeLast,
            lbc_fraction: 0.5,
            freeze_lm: true,
            freeze_vision: true,
            max_steps: None,
            val_every: 1,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(EivenError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(EivenError::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(EivenError::config("train.lr", "must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.lbc_fraction) {
            return Err(EivenError::config("train.lbc_fraction", "must lie in [0, 1]"));
        }
        if !self.freeze_lm || !self.freeze_vision {
            return Err(EivenError::config(
                "train.freeze_lm",
                "the language model and vision encoder are always frozen",
            ));
        }
        if self.val_every == 0 {
            return Err(EivenError::config("train.val_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `1/B * sum_i 1/|R_i| * sum_t -log p(R_t | X, R_<t)`, with the closing EOS
/// counted as part of each answer.
pub fn batch_loss<T: Scalar>(lm: &DecoderLm<T>, batch: &[PromptSequence<T>]) -> Result<Tensor<T>> {
    if batch.is_empty() {
        return Err(EivenError::Input("empty batch".into()));
    }
    let refs: Vec<&PromptSequence<T>> = batch.iter().collect();
    let hidden = lm.forward_hidden(&refs)?;
    let b = T::of(batch.len() as f64);
    let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (seq, seg) in batch.iter().zip(&hidden.segments) {
        let t = seq.loss_targets();
        if t.is_empty() {
            return Err(EivenError::DegenerateLoss);
        }
        let w = T::one() / (b * T::of(t.len() as f64));
        for (pos, id) in t {
            rows.push(seg.start + pos);
            targets.push(id as usize);
            weights.push(w);
        }
    }
    let logits = lm.logits_at(&hidden, &rows)?;
    ag::cross_entropy_weighted(&logits, &targets, &weights)
}

/// Backward plus one AdamW update. Aborts on a non-finite loss before
/// touching any weight.
pub fn train_step<T: Scalar>(loss: &Tensor<T>, opt: &mut AdamW<T>) -> Result<f64> {
    let value = loss.item().f64();
    if !value.is_finite() {
        return Err(EivenError::NonFiniteLoss {
            step: opt.steps() as usize + 1,
            lr: opt.config.lr,
        });
    }
    opt.zero_grad();
    loss.backward()?;
    opt.step()?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_micro_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_val_micro_f1: f64,
    pub wall_clock_seconds: f64,
    pub lm_digest: String,
    pub vision_digest: String,
}

/// Everything `fit` needs besides the model.
pub struct FitInput<'a, T: Scalar> {
    pub corpus: &'a Corpus<T>,
    pub modalities: Modalities,
    pub decode: &'a DecodeConfig,
}

/// Indices of instances in `split`.
pub fn split_indices<T: Scalar>(corpus: &Corpus<T>, split: Split) -> Vec<usize> {
    (0..corpus.len())
        .filter(|&i| corpus.instances[i].split == split)
        .collect()
}

/// Trains the model in place. On return the model holds the weights of the
/// best validation epoch; `on_epoch` sees every epoch as it completes.
pub fn fit<T: Scalar>(
    model: &mut EivenModel<T>,
    input: &FitInput<'_, T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitReport> {
    cfg.validate()?;
    let start = Instant::now();
    let corpus = input.corpus;
    let train = split_indices(corpus, Split::Train);
    let mut val = split_indices(corpus, Split::Val);
    if train.is_empty() {
        return Err(EivenError::config("data", "training split is empty"));
    }
    if val.is_empty() {
        return Err(EivenError::config("data", "validation split is empty"));
    }
    if let Some(n) = cfg.val_limit {
        val.truncate(n.max(1));
    }
    let mut by_attribute: Vec<(String, Vec<usize>)> = Vec::new();
    for &i in &train {
        let a = &corpus.instances[i].attribute;
        match by_attribute.iter_mut().find(|(name, _)| name == a) {
            Some((_, v)) => v.push(i),
            None => by_attribute.push((a.clone(), vec![i])),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.trainable_tensors(), cfg.adamw())?;
    let mut best: Option<(f64, usize, Vec<Vec<T>>)> = None;
    let mut epochs = Vec::new();
    let mut steps = 0usize;
    'outer: for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        // Every instance keeps its single-product prompt; a pairwise strategy
        // adds comparison prompts with partners drawn afresh each epoch.
        let mut items: Vec<(usize, Option<usize>)> = train.iter().map(|&i| (i, None)).collect();
        if cfg.lbc_strategy.is_pairwise() {
            for &i in &train {
                if !rng.gen_bool(cfg.lbc_fraction) {
                    continue;
                }
                let pool = &by_attribute
                    .iter()
                    .find(|(a, _)| *a == corpus.instances[i].attribute)
                    .expect("every training attribute is indexed")
                    .1;
                match sample_partner(i, pool, &mut rng) {
                    Ok(j) => items.push((i, Some(j))),
                    // Lone instances just keep their single prompt.
                    Err(EivenError::PairingUnavailable(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        items.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in items.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch = chunk
                .iter()
                .map(|&(i, partner)| train_prompt(model, corpus, i, partner, cfg.lbc_strategy, input.modalities))
                .collect::<Result<Vec<_>>>()?;
            let loss = batch_loss(&model.lm, &batch)?;
            loss_sum += train_step(&loss, &mut opt)?;
            loss_n += 1;
            steps += 1;
        }
        let stop = cfg.max_steps.is_some_and(|m| steps >= m);
        let last = epoch == cfg.epochs || stop;
        let val_f1 = if epoch % cfg.val_every == 0 || last {
            let (report, _, _) = evaluate(model, corpus, &val, input.modalities, input.decode)?;
            Some(report.overall.f1)
        } else {
            None
        };
        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                let snapshot = model.trainable_tensors().iter().map(|(_, t)| t.to_vec()).collect();
                best = Some((f1, epoch, snapshot));
            }
        }
        let log = EpochLog {
            epoch,
            steps,
            train_loss: if loss_n == 0 {
                f64::NAN
            } else {
                loss_sum / loss_n as f64
            },
            val_micro_f1: val_f1,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        epochs.push(log);
        if stop {
            break 'outer;
        }
    }
    let (best_f1, best_epoch, snapshot) = best.expect("the final epoch is always validated");
    for ((_, t), values) in model.trainable_tensors().iter().zip(&snapshot) {
        t.assign(values)?;
    }
    Ok(FitReport {
        epochs,
        steps,
        best_epoch,
        best_val_micro_f1: best_f1,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        lm_digest: model.lm_digest(),
        vision_digest: model.vision_digest(),
    })
}

/// Writes the trainable tensors and `config` to `path`.
pub fn save_model<T: Scalar>(model: &EivenModel<T>, path: &Path, config: serde_json::Value) -> Result<()> {
    Checkpoint::from_named(&model.checkpoint_tensors(), config).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::VOCAB_SIZE;
    use crate::lm::{DecoderConfig, VisualTokens};

    /// One-block model whose frozen head is zero, so every prediction is uniform.
    fn uniform_lm() -> DecoderLm<f64> {
        let mut lm = DecoderLm::<f64>::new(
            &DecoderConfig {
                layers: 1,
                ..DecoderConfig::default()
            },
            0,
        )
        .unwrap();
        lm.head.weight = Tensor::frozen(vec![0.0; 128 * VOCAB_SIZE], &[128, VOCAB_SIZE]).unwrap();
        lm
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let lm = uniform_lm();
        let eos_only = PromptSequence::training(VisualTokens::None, vec![1, 2, 3], &[]);
        assert!((batch_loss(&lm, &[eos_only]).unwrap().item() - (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
        let one = PromptSequence::training(VisualTokens::None, vec![1, 2, 3], &[70]);
        assert!((batch_loss(&lm, &[one]).unwrap().item() - (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let lm = uniform_lm();
        let a = PromptSequence::training(VisualTokens::Zeros(2), vec![5, 6, 7], &[65, 66]);
        let b = PromptSequence::training(VisualTokens::None, vec![8, 9], &[67]);
        let one = batch_loss(&lm, &[a.clone(), b.clone()]).unwrap().item();
        let two = batch_loss(&lm, &[a.clone(), b.clone(), a, b]).unwrap().item();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_zero_epochs_and_unfrozen_backbone() {
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            freeze_lm: false,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn nan_loss_aborts_with_step_and_lr() {
        let w = Tensor::<f64>::parameter(vec![1.0], &[1]).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), w.clone())], TrainConfig::default().adamw()).unwrap();
        let nan = ag::scale(&ag::sum(&w), f64::NAN);
        match train_step(&nan, &mut opt) {
            Err(EivenError::NonFiniteLoss { step, lr }) => assert_eq!((step, lr), (1, 5e-3)),
            other => panic!("{other:?}"),
        }
        assert_eq!(w.to_vec(), vec![1.0]);
    }
}
