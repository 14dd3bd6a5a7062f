//! Residual bottleneck adapters placed on the attention input of each block.

use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Scalar, Tensor};
use crate::error::{EivenError, Result};
use crate::nn::{AttentionInputHook, Init, Kind, Linear, Named};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Linear, block-diagonal up map (RepAdapter-style).
    RepLinearSparse,
    /// SiLU between down and up maps, dense.
    MlpNonlinear,
    /// No activation, dense.
    MlpLinearDense,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [
        AdapterKind::RepLinearSparse,
        AdapterKind::MlpNonlinear,
        AdapterKind::MlpLinearDense,
    ];

    pub fn is_linear(self) -> bool {
        !matches!(self, AdapterKind::MlpNonlinear)
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, AdapterKind::RepLinearSparse)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::RepLinearSparse => "rep_linear_sparse",
            AdapterKind::MlpNonlinear => "mlp_nonlinear",
            AdapterKind::MlpLinearDense => "mlp_linear_dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub r: usize,
    /// Block count of the up map; only meaningful for the sparse kind.
    pub groups: usize,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            kind: AdapterKind::RepLinearSparse,
            r: 8,
            groups: 4,
        }
    }
}

impl AdapterSpec {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.r == 0 {
            return Err(EivenError::config("adapter.r", "bottleneck width must be at least 1"));
        }
        if self.kind.is_sparse() {
            if self.groups == 0 || self.r % self.groups != 0 || width % self.groups != 0 {
                return Err(EivenError::config(
                    "adapter.groups",
                    format!(
                        "r = {} and width = {width} must both be divisible by groups = {}",
                        self.r, self.groups
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count of one adapter at the given model width.
    pub fn parameter_count(&self, width: usize) -> usize {
        let down = width * self.r + self.r;
        let up = if self.kind.is_sparse() {
            self.r * width / self.groups + width
        } else {
            self.r * width + width
        };
        down + up
    }
}

#[derive(Clone, Debug)]
pub enum UpMap<T: Scalar> {
    Dense(Linear<T>),
    /// `weight` is `[groups x r/groups x width/groups]`.
    BlockDiagonal {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
}

/// `h' = up(act(down(h))) + h`. The up map starts at zero, so a fresh adapter
/// is an exact identity.
#[derive(Clone, Debug)]
pub struct Adapter<T: Scalar = f32> {
    pub spec: AdapterSpec,
    pub down: Linear<T>,
    pub up: UpMap<T>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(init: &mut Init, spec: &AdapterSpec, width: usize) -> Result<Self> {
        spec.validate(width)?;
        let down = Linear::new(init, width, spec.r, 1.0, true, Kind::Trainable);
        let up = if spec.kind.is_sparse() {
            let g = spec.groups;
            UpMap::BlockDiagonal {
                weight: init.filled(&[g, spec.r / g, width / g], 0.0, Kind::Trainable),
                bias: init.filled(&[width], 0.0, Kind::Trainable),
            }
        } else {
            UpMap::Dense(Linear {
                weight: init.filled(&[spec.r, width], 0.0, Kind::Trainable),
                bias: Some(init.filled(&[width], 0.0, Kind::Trainable)),
            })
        };
        Ok(Adapter {
            spec: spec.clone(),
            down,
            up,
        })
    }

    pub fn width(&self) -> usize {
        self.down.fan_in()
    }

    pub fn forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        if h.rank() == 0 || h.cols() != self.width() {
            return Err(EivenError::Shape(format!(
                "adapter of width {} applied to {:?}",
                self.width(),
                h.shape()
            )));
        }
        let mut z = self.down.forward(h)?;
        if !self.spec.kind.is_linear() {
            z = ag::silu(&z);
        }
        let u = match &self.up {
            UpMap::Dense(lin) => lin.forward(&z)?,
            UpMap::BlockDiagonal { weight, bias } => ag::add_bias(&ag::block_diag_linear(&z, weight)?, bias)?,
        };
        ag::add(h, &u)
    }

    /// Dense `[r x width]` view of the up map.
    pub fn dense_up(&self) -> (Vec<f64>, Vec<f64>) {
        let (r, width) = (self.spec.r, self.width());
        match &self.up {
            UpMap::Dense(lin) => (
                lin.weight.data().iter().map(|v| v.f64()).collect(),
                lin.bias
                    .as_ref()
                    .expect("dense up has bias")
                    .data()
                    .iter()
                    .map(|v| v.f64())
                    .collect(),
            ),
            UpMap::BlockDiagonal { weight, bias } => {
                let g = self.spec.groups;
                let (gin, gout) = (r / g, width / g);
                let w = weight.data();
                let mut dense = vec![0.0; r * width];
                for gi in 0..g {
                    for i in 0..gin {
                        for o in 0..gout {
                            dense[(gi * gin + i) * width + gi * gout + o] = w[(gi * gin + i) * gout + o].f64();
                        }
                    }
                }
                (dense, bias.data().iter().map(|v| v.f64()).collect())
            }
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Named<T>>) {
        self.down.collect(&format!("{prefix}.down"), out);
        match &self.up {
            UpMap::Dense(lin) => lin.collect(&format!("{prefix}.up"), out),
            UpMap::BlockDiagonal { weight, bias } => {
                out.push((format!("{prefix}.up.weight"), weight.clone()));
                out.push((format!("{prefix}.up.bias"), bias.clone()));
            }
        }
    }
}

impl<T: Scalar> AttentionInputHook<T> for Adapter<T> {
    fn apply(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(h)
    }
}
