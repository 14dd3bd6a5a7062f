//! Trainable projection from vision features to language-model token width.

use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Scalar, Tensor};
use crate::error::{EivenError, Result};
use crate::nn::{Init, Kind, Linear, Named};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    /// Hidden width after the gate.
    pub hidden: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { hidden: 128 }
    }
}

/// `out = silu_gate(x W_d + b_d) W_u + b_u`, applied row by row.
///
/// `W_d` maps the vision width to `2 * hidden` so that the gate halves it
/// back to `hidden`.
#[derive(Clone, Debug)]
pub struct ProjectionNet<T: Scalar = f32> {
    pub down: Linear<T>,
    pub up: Linear<T>,
}

impl<T: Scalar> ProjectionNet<T> {
    pub fn new(init: &mut Init, vision_width: usize, hidden: usize, text_width: usize) -> Self {
        ProjectionNet {
            down: Linear::new(init, vision_width, 2 * hidden, 1.0, true, Kind::Trainable),
            up: Linear::new(init, hidden, text_width, 1.0, true, Kind::Trainable),
        }
    }

    pub fn input_width(&self) -> usize {
        self.down.fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.up.fan_out()
    }

    pub fn hidden(&self) -> usize {
        self.up.fan_in()
    }

    /// Maps `[K x D]` features to `[K x D_text]` visual tokens.
    pub fn project(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.rank() != 2 || features.cols() != self.input_width() {
            return Err(EivenError::Shape(format!(
                "projection expects [K x {}] features, got {:?}",
                self.input_width(),
                features.shape()
            )));
        }
        let gated = ag::silu_gate(&self.down.forward(features)?)?;
        self.up.forward(&gated)
    }

    pub fn named_tensors(&self) -> Vec<Named<T>> {
        let mut out = Vec::new();
        self.down.collect("projection.down", &mut out);
        self.up.collect("projection.up", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        crate::nn::count(&self.named_tensors())
    }
}
