//! Folding linear adapters into the attention input projection.
//!
//! A linear adapter is the affine map `h -> h A + c` with `A = I + D U` and
//! `c = b_d U + b_u`. Since it feeds straight into `qkv`, the composite is
//! `h (A W) + (c W + b)`. The products are formed in f64.

use super::adapter::Adapter;
use super::decoder::DecoderLm;
use crate::autograd::{Scalar, Tensor};
use crate::error::{EivenError, Result};
use crate::nn::Linear;

pub fn merge_linear_adapter<T: Scalar>(lm: &DecoderLm<T>) -> Result<DecoderLm<T>> {
    if let Some(a) = lm.adapters.iter().find(|a| !a.spec.kind.is_linear()) {
        return Err(EivenError::MergeUnsupported(format!(
            "{} adapters have a nonlinearity and cannot be folded into the base weights",
            a.spec.kind.name()
        )));
    }
    let mut merged = lm.without_adapters();
    for (block, adapter) in merged.blocks.iter_mut().zip(&lm.adapters) {
        block.qkv = fold(adapter, &block.qkv)?;
    }
    Ok(merged)
}

fn fold<T: Scalar>(adapter: &Adapter<T>, qkv: &Linear<T>) -> Result<Linear<T>> {
    let d = adapter.width();
    let r = adapter.spec.r;
    let out = qkv.fan_out();
    let down: Vec<f64> = adapter.down.weight.data().iter().map(|v| v.f64()).collect();
    let b_d: Vec<f64> = match &adapter.down.bias {
        Some(b) => b.data().iter().map(|v| v.f64()).collect(),
        None => vec![0.0; r],
    };
    let (up, b_u) = adapter.dense_up();

    // A = I + D U  ([d x d]) and c = b_d U + b_u  ([d]).
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        a[i * d + i] = 1.0;
        for k in 0..r {
            let dik = down[i * r + k];
            if dik != 0.0 {
                for j in 0..d {
                    a[i * d + j] += dik * up[k * d + j];
                }
            }
        }
    }
    let mut c = b_u;
    for k in 0..r {
        for j in 0..d {
            c[j] += b_d[k] * up[k * d + j];
        }
    }

    let w: Vec<f64> = qkv.weight.data().iter().map(|v| v.f64()).collect();
    let b: Vec<f64> = match &qkv.bias {
        Some(b) => b.data().iter().map(|v| v.f64()).collect(),
        None => vec![0.0; out],
    };
    let mut new_w = vec![0.0; d * out];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik != 0.0 {
                let row = &w[k * out..(k + 1) * out];
                for (o, &wv) in new_w[i * out..(i + 1) * out].iter_mut().zip(row) {
                    *o += aik * wv;
                }
            }
        }
    }
    let mut new_b = b;
    for k in 0..d {
        let ck = c[k];
        for (o, &wv) in new_b.iter_mut().zip(&w[k * out..(k + 1) * out]) {
            *o += ck * wv;
        }
    }
    Ok(Linear {
        weight: Tensor::frozen(new_w.into_iter().map(T::of).collect(), &[d, out])?,
        bias: Some(Tensor::frozen(new_b.into_iter().map(T::of).collect(), &[out])?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::adapter::{AdapterKind, AdapterSpec, UpMap};
    use crate::lm::decoder::{DecoderConfig, PromptSequence, VisualTokens};
    use crate::nn::Init;

    fn tiny(kind: AdapterKind) -> DecoderLm<f64> {
        let cfg = DecoderConfig {
            width: 16,
            layers: 2,
            heads: 2,
            mlp_hidden: 8,
            context: 64,
            ..DecoderConfig::default()
        };
        let spec = AdapterSpec { kind, r: 4, groups: 2 };
        DecoderLm::new(&cfg, 3).unwrap().with_adapters(&spec, 5).unwrap()
    }

    fn randomize(lm: &DecoderLm<f64>) {
        let mut init = Init::new(11);
        for (_, t) in lm.adapter_tensors() {
            t.assign(&init.normal_values(t.numel(), 0.3)).unwrap();
        }
    }

    #[test]
    fn zero_adapters_merge_to_base_weights() {
        let lm = tiny(AdapterKind::MlpLinearDense);
        let merged = merge_linear_adapter(&lm).unwrap();
        for (x, y) in lm.blocks.iter().zip(&merged.blocks) {
            assert_eq!(x.qkv.weight.to_vec(), y.qkv.weight.to_vec());
            assert_eq!(
                x.qkv.bias.as_ref().unwrap().to_vec(),
                y.qkv.bias.as_ref().unwrap().to_vec()
            );
        }
        assert!(merged.adapters.is_empty());
    }

    #[test]
    fn merged_logits_match_live_for_linear_kinds() {
        for kind in [AdapterKind::RepLinearSparse, AdapterKind::MlpLinearDense] {
            let lm = tiny(kind);
            randomize(&lm);
            if let UpMap::BlockDiagonal { weight, .. } = &lm.adapters[0].up {
                assert_eq!(weight.shape(), &[2, 2, 8]);
            }
            let merged = merge_linear_adapter(&lm).unwrap();
            let seq = PromptSequence::prompt(
                VisualTokens::Zeros(2),
                b"What is it?".iter().map(|&b| b as u32).collect(),
            );
            let live = lm.forward(&seq).unwrap().to_vec();
            let folded = merged.forward(&seq).unwrap().to_vec();
            let diff = live.iter().zip(&folded).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "{kind:?}: {diff}");
        }
    }

    #[test]
    fn nonlinear_adapters_refuse_to_merge() {
        let lm = tiny(AdapterKind::MlpNonlinear);
        assert!(matches!(
            merge_linear_adapter(&lm),
            Err(EivenError::MergeUnsupported(_))
        ));
    }
}
