//! Turning product instances into model inputs, and scoring generations.

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Scalar};
use crate::decode_eval::{generate_batch_offset, report, DecodeConfig, EvalReport, Judgement};
use crate::error::Result;
use crate::lbc::{build_pair, build_single, parse_answer, prompt_text, single_question, ComparisonPair, LbcStrategy};
use crate::lm::tokenizer::tokenize;
use crate::lm::{PromptSequence, VisualTokens};
use crate::model::EivenModel;
use crate::synthdata::{Dataset, ProductInstance};
use crate::vision::{ImageGrid, MgvfEmbedding, VisionEncoder};

/// Input ablations. Dropping the image keeps the same number of (zero)
/// visual tokens; dropping the text keeps an empty context line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Modalities {
    pub drop_image: bool,
    pub drop_text: bool,
}

/// Instances with their precomputed visual features. The encoder is frozen,
/// so features are computed once per dataset.
#[derive(Clone, Debug)]
pub struct Corpus<T: Scalar = f32> {
    pub instances: Vec<ProductInstance>,
    pub mgvf: Vec<MgvfEmbedding<T>>,
}

impl<T: Scalar> Corpus<T> {
    pub fn encode(vision: &VisionEncoder<T>, data: &Dataset) -> Result<Self> {
        let mut mgvf = Vec::with_capacity(data.images.len());
        no_grad(|| -> Result<()> {
            for chunk in data.images.chunks(64) {
                let refs: Vec<_> = chunk.iter().collect();
                mgvf.extend(vision.encode_batch(&refs)?);
            }
            Ok(())
        })?;
        Ok(Corpus {
            instances: data.instances.clone(),
            mgvf,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

fn visual<T: Scalar>(
    model: &EivenModel<T>,
    corpus: &Corpus<T>,
    images: &[usize],
    modalities: Modalities,
) -> Result<VisualTokens<T>> {
    if modalities.drop_image {
        let k: usize = images.iter().map(|&i| corpus.mgvf[i].k).sum();
        return Ok(VisualTokens::Zeros(k));
    }
    let feats: Vec<&MgvfEmbedding<T>> = images.iter().map(|&i| &corpus.mgvf[i]).collect();
    model.visual_tokens(&feats)
}

fn context(inst: &ProductInstance, modalities: Modalities) -> &str {
    if modalities.drop_text {
        ""
    } else {
        &inst.text_context
    }
}

/// Single-product prompt without an answer, as used at evaluation time.
pub fn eval_prompt<T: Scalar>(
    model: &EivenModel<T>,
    corpus: &Corpus<T>,
    idx: usize,
    modalities: Modalities,
) -> Result<PromptSequence<T>> {
    let inst = &corpus.instances[idx];
    let q = build_single(inst).question;
    let text = prompt_text(&q, &[context(inst, modalities)]);
    Ok(PromptSequence::prompt(
        visual(model, corpus, &[idx], modalities)?,
        tokenize(&text),
    ))
}

/// Teacher-forced training sequence; with a partner and a pairwise strategy
/// both products' images and contexts are included.
pub fn train_prompt<T: Scalar>(
    model: &EivenModel<T>,
    corpus: &Corpus<T>,
    idx: usize,
    partner: Option<usize>,
    strategy: LbcStrategy,
    modalities: Modalities,
) -> Result<PromptSequence<T>> {
    let inst = &corpus.instances[idx];
    match partner.filter(|_| strategy.is_pairwise()) {
        None => {
            let p = build_single(inst);
            let text = prompt_text(&p.question, &[context(inst, modalities)]);
            Ok(PromptSequence::training(
                visual(model, corpus, &[idx], modalities)?,
                tokenize(&text),
                &tokenize(&p.answer),
            ))
        }
        Some(j) => {
            let other = &corpus.instances[j];
            let p = build_pair(&ComparisonPair::new(inst, other)?, strategy);
            let text = prompt_text(&p.question, &[context(inst, modalities), context(other, modalities)]);
            Ok(PromptSequence::training(
                visual(model, corpus, &[idx, j], modalities)?,
                tokenize(&text),
                &tokenize(&p.answer),
            ))
        }
    }
}

/// Number of prompts decoded together.
pub const EVAL_CHUNK: usize = 64;

/// Generates answers for `indices` and scores them. Returns the report and
/// the raw generations.
pub fn evaluate<T: Scalar>(
    model: &EivenModel<T>,
    corpus: &Corpus<T>,
    indices: &[usize],
    modalities: Modalities,
    decode: &DecodeConfig,
) -> Result<(EvalReport, Vec<Judgement>, Vec<String>)> {
    let mut generations = Vec::with_capacity(indices.len());
    for (c, chunk) in indices.chunks(EVAL_CHUNK).enumerate() {
        let prompts = no_grad(|| {
            chunk
                .iter()
                .map(|&i| eval_prompt(model, corpus, i, modalities))
                .collect::<Result<Vec<_>>>()
        })?;
        generations.extend(generate_batch_offset(&model.lm, &prompts, decode, c * EVAL_CHUNK)?);
    }
    let judgements: Vec<Judgement> = indices
        .iter()
        .zip(&generations)
        .map(|(&i, g)| Judgement {
            attribute: corpus.instances[i].attribute.clone(),
            gold: corpus.instances[i].value.clone(),
            prediction: parse_answer(g),
        })
        .collect();
    Ok((report(&judgements), judgements, generations))
}

/// Answers `attribute` for a single product given its image and text.
/// Returns the raw generation and the parsed value.
pub fn predict<T: Scalar>(
    model: &EivenModel<T>,
    image: &ImageGrid,
    text: &str,
    attribute: &str,
    decode: &DecodeConfig,
) -> Result<(String, Option<String>)> {
    let prompt = no_grad(|| -> Result<PromptSequence<T>> {
        let feats = model.vision.encode_multigranular(image)?;
        let visual = model.visual_tokens(&[&feats])?;
        let text = prompt_text(&single_question(attribute), &[text]);
        Ok(PromptSequence::prompt(visual, tokenize(&text)))
    })?;
    let raw = generate_batch_offset(&model.lm, &[prompt], decode, 0)?.remove(0);
    let parsed = parse_answer(&raw);
    Ok((raw, parsed))
}
