//! Layers shared by the vision encoder and the language model.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{self as ag, Scalar, Tensor};
use crate::error::Result;

/// Deterministic parameter initializer. Values are drawn in `f64` and then
/// narrowed so that `f32` and `f64` models built from one seed agree.
pub struct Init {
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Trainable,
    Frozen,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal_values(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64, kind: Kind) -> Tensor<T> {
        let n = shape.iter().product();
        let values = self.normal_values(n, std).into_iter().map(T::of).collect();
        make(values, shape, kind)
    }

    pub fn filled<T: Scalar>(&mut self, shape: &[usize], value: f64, kind: Kind) -> Tensor<T> {
        let n = shape.iter().product();
        make(vec![T::of(value); n], shape, kind)
    }
}

fn make<T: Scalar>(values: Vec<T>, shape: &[usize], kind: Kind) -> Tensor<T> {
    let t = match kind {
        Kind::Trainable => Tensor::parameter(values, shape),
        Kind::Frozen => Tensor::frozen(values, shape),
    };
    t.expect("initializer produces matching lengths")
}

/// Named tensor handle used for checkpoints, digests and optimizers.
pub type Named<T> = (String, Tensor<T>);

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Normal weights with `std = gain / sqrt(fan_in)` and a zero bias.
    pub fn new(init: &mut Init, fan_in: usize, fan_out: usize, gain: f64, bias: bool, kind: Kind) -> Self {
        let weight = init.normal(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), kind);
        let bias = bias.then(|| init.filled(&[fan_out], 0.0, kind));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ag::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named<T>>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(init: &mut Init, width: usize, kind: Kind) -> Self {
        LayerNorm {
            gain: init.filled(&[width], 1.0, kind),
            bias: init.filled(&[width], 0.0, kind),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ag::layer_norm(x, &self.gain, &self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named<T>>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Hook applied to the normalized attention input of a block.
pub trait AttentionInputHook<T: Scalar> {
    fn apply(&self, h: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Pre-norm transformer block with a gated (SiLU) feed-forward network.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T: Scalar> {
    pub attn_norm: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub mlp_norm: LayerNorm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(init: &mut Init, width: usize, heads: usize, mlp_hidden: usize, kind: Kind) -> Self {
        TransformerBlock {
            attn_norm: LayerNorm::new(init, width, kind),
            qkv: Linear::new(init, width, 3 * width, 1.0, true, kind),
            attn_out: Linear::new(init, width, width, 1.0, true, kind),
            mlp_norm: LayerNorm::new(init, width, kind),
            mlp_in: Linear::new(init, width, 2 * mlp_hidden, 1.0, true, kind),
            mlp_out: Linear::new(init, mlp_hidden, width, 1.0, true, kind),
            heads,
        }
    }

    /// `x + attn(hook(norm(x)))` followed by `x + mlp(norm(x))`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        segments: &[Range<usize>],
        causal: bool,
        hook: Option<&dyn AttentionInputHook<T>>,
    ) -> Result<Tensor<T>> {
        let mut h = self.attn_norm.forward(x)?;
        if let Some(hook) = hook {
            h = hook.apply(&h)?;
        }
        let qkv = self.qkv.forward(&h)?;
        let a = ag::attention(&qkv, segments, self.heads, causal)?;
        let x = ag::add(x, &self.attn_out.forward(&a)?)?;
        let m = self.mlp_in.forward(&self.mlp_norm.forward(&x)?)?;
        let m = self.mlp_out.forward(&ag::silu_gate(&m)?)?;
        ag::add(&x, &m)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named<T>>) {
        self.attn_norm.collect(&format!("{prefix}.attn_norm"), out);
        self.qkv.collect(&format!("{prefix}.attn.qkv"), out);
        self.attn_out.collect(&format!("{prefix}.attn.out"), out);
        self.mlp_norm.collect(&format!("{prefix}.mlp_norm"), out);
        self.mlp_in.collect(&format!("{prefix}.mlp.in"), out);
        self.mlp_out.collect(&format!("{prefix}.mlp.out"), out);
    }
}

/// SHA-256 over names, shapes and little-endian values of the given tensors.
pub fn digest<T: Scalar>(tensors: &[Named<T>]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            hasher.update(v.f64().to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn count<T: Scalar>(tensors: &[Named<T>]) -> usize {
    tensors.iter().map(|(_, t)| t.numel()).sum()
}
