//! Temperature plus nucleus (top-p) sampling and batched generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Scalar};
use crate::error::{EivenError, Result};
use crate::lm::tokenizer::{detokenize_lossy, EOS};
use crate::lm::{DecoderLm, PromptSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 0.1,
            top_p: 0.75,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(EivenError::config("decode.temperature", "must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(EivenError::config("decode.top_p", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Tokens of the nucleus with their renormalized probabilities, most likely
/// first. Ties keep the lower token id first.
pub fn nucleus<T: Scalar>(logits: &[T], cfg: &DecodeConfig) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if logits.is_empty() {
        return Err(EivenError::Decode("empty logit vector".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.f64().is_finite()) {
        return Err(EivenError::Decode(format!("non-finite logit at token {i}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.f64() / cfg.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let mut order: Vec<usize> = (0..exp.len()).collect();
    order.sort_by(|&a, &b| exp[b].total_cmp(&exp[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += exp[i] / z;
        if mass >= cfg.top_p {
            break;
        }
    }
    let kept_z: f64 = kept.iter().map(|&i| exp[i]).sum();
    Ok(kept.into_iter().map(|i| (i, exp[i] / kept_z)).collect())
}

pub fn top_p_sample<T: Scalar>(logits: &[T], cfg: &DecodeConfig, rng: &mut impl Rng) -> Result<u32> {
    let nuc = nucleus(logits, cfg)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in &nuc {
        acc += p;
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok(nuc.last().expect("nucleus holds at least one token").0 as u32)
}

/// Per-query sampler; query `i` always uses the same stream whatever the
/// batch composition.
pub fn query_rng(seed: u64, query: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query as u64);
    rng
}

pub fn generate<T: Scalar>(lm: &DecoderLm<T>, prompt: &PromptSequence<T>, cfg: &DecodeConfig) -> Result<String> {
    Ok(generate_batch(lm, std::slice::from_ref(prompt), cfg)?
        .pop()
        .unwrap_or_default())
}

/// Samples continuations of every prompt until EOS or `max_new_tokens`,
/// running the still-active prompts together in one packed forward pass
/// per step.
pub fn generate_batch<T: Scalar>(
    lm: &DecoderLm<T>,
    prompts: &[PromptSequence<T>],
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    generate_batch_offset(lm, prompts, cfg, 0)
}

/// As [`generate_batch`], with prompt `i` sampled as query `offset + i`.
pub fn generate_batch_offset<T: Scalar>(
    lm: &DecoderLm<T>,
    prompts: &[PromptSequence<T>],
    cfg: &DecodeConfig,
    offset: usize,
) -> Result<Vec<String>> {
    cfg.validate()?;
    for (i, p) in prompts.iter().enumerate() {
        if p.len() + cfg.max_new_tokens > lm.config.context {
            return Err(EivenError::Length {
                length: p.len() + cfg.max_new_tokens,
                window: lm.config.context,
                detail: format!(
                    "prompt {i} has {} positions plus {} new tokens",
                    p.len(),
                    cfg.max_new_tokens
                ),
            });
        }
    }
    let mut seqs: Vec<PromptSequence<T>> = prompts.to_vec();
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); prompts.len()];
    let mut rngs: Vec<ChaCha8Rng> = (0..prompts.len()).map(|i| query_rng(cfg.seed, offset + i)).collect();
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..cfg.max_new_tokens {
        if active.is_empty() {
            break;
        }
        let logits = no_grad(|| -> Result<Vec<T>> {
            let batch: Vec<&PromptSequence<T>> = active.iter().map(|&i| &seqs[i]).collect();
            let hidden = lm.forward_hidden(&batch)?;
            let last: Vec<usize> = hidden.segments.iter().map(|s| s.end - 1).collect();
            Ok(lm.logits_at(&hidden, &last)?.to_vec())
        })?;
        let v = logits.len() / active.len();
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let tok = top_p_sample(&logits[row * v..(row + 1) * v], cfg, &mut rngs[i])?;
            if tok == EOS {
                continue;
            }
            out[i].push(tok);
            seqs[i].token_ids.push(tok);
            still.push(i);
        }
        active = still;
    }
    Ok(out.iter().map(|ids| detokenize_lossy(ids)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_of_point_eight_is_the_top_token() {
        let logits = [0.8f64.ln(), 0.2f64.ln()];
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_p: 0.75,
            ..DecodeConfig::default()
        };
        assert_eq!(nucleus(&logits, &cfg).unwrap(), vec![(0, 1.0)]);
        let mut rng = query_rng(1, 0);
        assert!((0..1000).all(|_| top_p_sample(&logits, &cfg, &mut rng).unwrap() == 0));
    }

    #[test]
    fn tiny_top_p_is_argmax() {
        let logits = [0.1f32, 2.0, 1.9, -3.0];
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_p: 1e-9,
            ..DecodeConfig::default()
        };
        let mut rng = query_rng(0, 0);
        assert!((0..200).all(|_| top_p_sample(&logits, &cfg, &mut rng).unwrap() == 1));
    }

    #[test]
    fn nan_and_bad_configs_are_rejected() {
        let cfg = DecodeConfig::default();
        let mut rng = query_rng(0, 0);
        assert!(matches!(
            top_p_sample(&[0.0f32, f32::NAN], &cfg, &mut rng),
            Err(EivenError::Decode(_))
        ));
        let zero_t = DecodeConfig {
            temperature: 0.0,
            ..cfg.clone()
        };
        assert!(zero_t.validate().is_err());
        let big_p = DecodeConfig { top_p: 1.5, ..cfg };
        assert!(big_p.validate().is_err());
    }

    #[test]
    fn zero_new_tokens_is_empty() {
        use crate::lm::{DecoderConfig, VisualTokens};
        let lm = DecoderLm::<f32>::new(
            &DecoderConfig {
                layers: 1,
                ..DecoderConfig::default()
            },
            0,
        )
        .unwrap();
        let p = PromptSequence::prompt(VisualTokens::None, vec![65, 66]);
        let cfg = DecodeConfig {
            max_new_tokens: 0,
            ..DecodeConfig::default()
        };
        assert_eq!(generate(&lm, &p, &cfg).unwrap(), "");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nucleus_is_a_minimal_prefix_of_the_ranking(
                logits in proptest::collection::vec(-6.0f64..6.0, 1..40),
                temperature in 0.05f64..3.0,
                top_p in 0.01f64..=1.0,
            ) {
                let cfg = DecodeConfig { temperature, top_p, ..DecodeConfig::default() };
                let nuc = nucleus(&logits, &cfg).unwrap();
                let total: f64 = nuc.iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                // Kept tokens outrank every dropped one.
                let lowest_kept = nuc.iter().map(|&(i, _)| logits[i]).fold(f64::INFINITY, f64::min);
                for (i, &l) in logits.iter().enumerate() {
                    if !nuc.iter().any(|&(k, _)| k == i) {
                        prop_assert!(l <= lowest_kept);
                    }
                }
                let mut rng = query_rng(0, 0);
                let tok = top_p_sample(&logits, &cfg, &mut rng).unwrap() as usize;
                prop_assert!(nuc.iter().any(|&(k, _)| k == tok));
            }
        }
    }
}
