use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::adapter::{Adapter, AdapterSpec};
use super::tokenizer::{BOS, EOS, VOCAB_SIZE};
use crate::autograd::{self as ag, Scalar, Tensor};
use crate::error::{EivenError, Result};
use crate::nn::{AttentionInputHook, Init, Kind, LayerNorm, Linear, Named, TransformerBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    /// Scale of the frozen output head, in units of `1 / sqrt(width)`.
    pub head_gain: f64,
    pub position_std: f64,
    /// Extra scale on the frozen query projections; sharper attention.
    pub query_gain: f64,
    /// Sinusoidal rather than independent normal position embeddings.
    pub sinusoidal_positions: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 128,
            layers: 4,
            heads: 4,
            mlp_hidden: 128,
            context: 512,
            head_gain: 3.0,
            position_std: 0.3,
            query_gain: 0.3,
            sinusoidal_positions: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(EivenError::config("lm.heads", "width must be divisible by heads"));
        }
        if self.layers == 0 || self.context < 2 {
            return Err(EivenError::config("lm", "need at least one layer and a context of two"));
        }
        Ok(())
    }
}

/// Visual prefix of a prompt.
#[derive(Clone, Debug)]
pub enum VisualTokens<T: Scalar> {
    None,
    /// Placeholder rows carrying only position embeddings.
    Zeros(usize),
    /// `[K x width]` projected visual tokens.
    Tokens(Tensor<T>),
}

impl<T: Scalar> VisualTokens<T> {
    pub fn count(&self) -> usize {
        match self {
            VisualTokens::None => 0,
            VisualTokens::Zeros(k) => *k,
            VisualTokens::Tokens(t) => t.rows(),
        }
    }
}

/// Model input `[BOS, visual..., Q, C, R, (EOS)]`.
///
/// `token_ids` holds `Q ++ C ++ R`; `answer_span` indexes `R` inside it and
/// always runs to the end. Training sequences are `terminated` with EOS;
/// generation prompts have an empty answer and no EOS.
#[derive(Clone, Debug)]
pub struct PromptSequence<T: Scalar = f32> {
    pub visual: VisualTokens<T>,
    pub token_ids: Vec<u32>,
    pub answer_span: Range<usize>,
    pub terminated: bool,
}

impl<T: Scalar> PromptSequence<T> {
    pub fn training(visual: VisualTokens<T>, prompt_ids: Vec<u32>, answer_ids: &[u32]) -> Self {
        let start = prompt_ids.len();
        let mut token_ids = prompt_ids;
        token_ids.extend_from_slice(answer_ids);
        let end = token_ids.len();
        PromptSequence {
            visual,
            token_ids,
            answer_span: start..end,
            terminated: true,
        }
    }

    pub fn prompt(visual: VisualTokens<T>, prompt_ids: Vec<u32>) -> Self {
        let n = prompt_ids.len();
        PromptSequence {
            visual,
            token_ids: prompt_ids,
            answer_span: n..n,
            terminated: false,
        }
    }

    pub fn num_visual(&self) -> usize {
        self.visual.count()
    }

    /// Number of positions fed to the model.
    pub fn len(&self) -> usize {
        1 + self.num_visual() + self.token_ids.len() + usize::from(self.terminated)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token id per position; `None` marks a visual slot.
    pub fn layout(&self) -> Vec<Option<u32>> {
        let mut ids = Vec::with_capacity(self.len());
        ids.push(Some(BOS));
        ids.extend(std::iter::repeat(None).take(self.num_visual()));
        ids.extend(self.token_ids.iter().map(|&t| Some(t)));
        if self.terminated {
            ids.push(Some(EOS));
        }
        ids
    }

    /// `(position, target id)` pairs whose prediction is scored: every
    /// answer token plus the closing EOS.
    pub fn loss_targets(&self) -> Vec<(usize, u32)> {
        let offset = 1 + self.num_visual();
        let mut out: Vec<(usize, u32)> = self
            .answer_span
            .clone()
            .map(|i| (offset + i - 1, self.token_ids[i]))
            .collect();
        if self.terminated {
            out.push((offset + self.token_ids.len() - 1, EOS));
        }
        out
    }

    /// Per-position mask over the model's logits, true where the next token
    /// belongs to the answer or is the closing EOS.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for (p, _) in self.loss_targets() {
            mask[p] = true;
        }
        mask
    }

    /// Next-token target per position (`EOS` padding past the end).
    pub fn next_tokens(&self) -> Vec<usize> {
        let layout = self.layout();
        (0..layout.len())
            .map(|p| layout.get(p + 1).copied().flatten().unwrap_or(EOS) as usize)
            .collect()
    }
}

/// Decoder-only transformer whose base weights are frozen; adapters, when
/// present, are the only trainable part.
#[derive(Clone, Debug)]
pub struct DecoderLm<T: Scalar = f32> {
    pub config: DecoderConfig,
    pub token_embedding: Tensor<T>,
    pub positions: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: Linear<T>,
    pub adapters: Vec<Adapter<T>>,
}

/// Packed forward result: final normalized hidden states plus the row range
/// of each input sequence.
pub struct Hidden<T: Scalar> {
    pub states: Tensor<T>,
    pub segments: Vec<Range<usize>>,
}

impl<T: Scalar> DecoderLm<T> {
    /// Base model from `seed`, without adapters.
    pub fn new(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.width;
        let token_embedding = init.normal(&[VOCAB_SIZE, d], 1.0, Kind::Frozen);
        let mut positions = init.normal(&[config.context, d], config.position_std, Kind::Frozen);
        if config.sinusoidal_positions {
            let amp = config.position_std * std::f64::consts::SQRT_2;
            let mut v = Vec::with_capacity(config.context * d);
            for pos in 0..config.context {
                for i in 0..d {
                    let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
                    let a = pos as f64 * freq;
                    v.push(T::of(amp * if i % 2 == 0 { a.sin() } else { a.cos() }));
                }
            }
            positions = Tensor::frozen(v, &[config.context, d]).expect("same shape");
        }
        let blocks = (0..config.layers)
            .map(|_| {
                let mut b: TransformerBlock<T> =
                    TransformerBlock::new(&mut init, d, config.heads, config.mlp_hidden, Kind::Frozen);
                if config.query_gain != 1.0 {
                    let mut w = b.qkv.weight.to_vec();
                    for row in w.chunks_mut(3 * d) {
                        for v in &mut row[..d] {
                            *v = T::of(v.f64() * config.query_gain);
                        }
                    }
                    b.qkv.weight = Tensor::frozen(w, &[d, 3 * d]).expect("same shape");
                }
                b
            })
            .collect();
        let final_norm = LayerNorm::new(&mut init, d, Kind::Frozen);
        let head = Linear::new(&mut init, d, VOCAB_SIZE, config.head_gain, false, Kind::Frozen);
        Ok(DecoderLm {
            config: config.clone(),
            token_embedding,
            positions,
            blocks,
            final_norm,
            head,
            adapters: Vec::new(),
        })
    }

    /// Adds one freshly initialized adapter in front of every block's attention.
    pub fn with_adapters(mut self, spec: &AdapterSpec, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        self.adapters = (0..self.config.layers)
            .map(|_| Adapter::new(&mut init, spec, self.config.width))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn without_adapters(&self) -> Self {
        DecoderLm {
            adapters: Vec::new(),
            ..self.clone()
        }
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn forward_hidden(&self, seqs: &[&PromptSequence<T>]) -> Result<Hidden<T>> {
        let d = self.width();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut total = 0;
        for (i, s) in seqs.iter().enumerate() {
            let len = s.len();
            if len > self.config.context {
                return Err(EivenError::Length {
                    length: len,
                    window: self.config.context,
                    detail: format!(
                        "sequence {i}: 1 BOS + {} visual + {} text + {} EOS",
                        s.num_visual(),
                        s.token_ids.len(),
                        usize::from(s.terminated)
                    ),
                });
            }
            segments.push(total..total + len);
            total += len;
        }
        let mut base = vec![T::zero(); total * d];
        let mut parts = Vec::new();
        {
            let (emb, pos) = (self.token_embedding.data(), self.positions.data());
            for (seq, seg) in seqs.iter().zip(&segments) {
                for (p, id) in seq.layout().into_iter().enumerate() {
                    let row = &mut base[(seg.start + p) * d..(seg.start + p + 1) * d];
                    row.copy_from_slice(&pos[p * d..(p + 1) * d]);
                    if let Some(id) = id {
                        let e = &emb[id as usize * d..(id as usize + 1) * d];
                        row.iter_mut().zip(e).for_each(|(r, &v)| *r += v);
                    }
                }
                if let VisualTokens::Tokens(t) = &seq.visual {
                    if t.rank() != 2 || t.cols() != d {
                        return Err(EivenError::Shape(format!(
                            "visual tokens {:?} do not match model width {d}",
                            t.shape()
                        )));
                    }
                    let rows = (seg.start + 1..seg.start + 1 + t.rows()).collect();
                    parts.push((t.clone(), rows));
                }
            }
        }
        let base = Tensor::constant(base, &[total, d])?;
        let mut x = if parts.is_empty() {
            base
        } else {
            ag::scatter_add_rows(&base, &parts)?
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let hook = self.adapters.get(i).map(|a| a as &dyn AttentionInputHook<T>);
            x = block.forward(&x, &segments, true, hook)?;
        }
        Ok(Hidden {
            states: self.final_norm.forward(&x)?,
            segments,
        })
    }

    /// Next-token logits for every position, `[len x V]`.
    pub fn forward(&self, seq: &PromptSequence<T>) -> Result<Tensor<T>> {
        let hidden = self.forward_hidden(&[seq])?;
        self.head.forward(&hidden.states)
    }

    /// Logits at selected packed rows only.
    pub fn logits_at(&self, hidden: &Hidden<T>, rows: &[usize]) -> Result<Tensor<T>> {
        self.head.forward(&ag::select_rows(&hidden.states, rows)?)
    }

    pub fn base_tensors(&self) -> Vec<Named<T>> {
        let mut out = vec![
            ("lm.token_embedding".to_string(), self.token_embedding.clone()),
            ("lm.positions".to_string(), self.positions.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("lm.block{i}"), &mut out);
        }
        self.final_norm.collect("lm.final_norm", &mut out);
        self.head.collect("lm.head", &mut out);
        out
    }

    pub fn adapter_tensors(&self) -> Vec<Named<T>> {
        let mut out = Vec::new();
        for (i, a) in self.adapters.iter().enumerate() {
            a.collect(&format!("lm.adapter{i}"), &mut out);
        }
        out
    }
}
