//! Layers with hand-written forward/backward passes and FLOPs accounting.

pub mod arch;
mod conv;
mod flops;
mod io;
mod loss;
mod network;

pub use flops::{flops_forward, InputExtent, TRAIN_STEP_FLOPS_MULTIPLIER};
pub use io::{read_network, write_network};
pub use loss::{accuracy, softmax_cross_entropy};
pub use network::{Cache, Mode, Network};

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// BatchNorm epsilon added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    Conv2d,
    BatchNorm,
    Relu,
    MaxPool,
    /// Adds the output of layer `from` to the incoming activation.
    ResidualAdd {
        from: usize,
    },
    Flatten,
    ClassifierHead,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Linear | LayerKind::Conv2d | LayerKind::ClassifierHead
        )
    }

    pub fn code(self) -> (u32, u64) {
        match self {
            LayerKind::Linear => (0, 0),
            LayerKind::Conv2d => (1, 0),
            LayerKind::BatchNorm => (2, 0),
            LayerKind::Relu => (3, 0),
            LayerKind::MaxPool => (4, 0),
            LayerKind::ResidualAdd { from } => (5, from as u64),
            LayerKind::Flatten => (6, 0),
            LayerKind::ClassifierHead => (7, 0),
        }
    }

    pub fn from_code(code: u32, arg: u64) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Linear,
            1 => LayerKind::Conv2d,
            2 => LayerKind::BatchNorm,
            3 => LayerKind::Relu,
            4 => LayerKind::MaxPool,
            5 => LayerKind::ResidualAdd { from: arg as usize },
            6 => LayerKind::Flatten,
            7 => LayerKind::ClassifierHead,
            _ => return None,
        })
    }
}

/// Position of a layer in the growth taxonomy: input layers grow outputs
/// only, output layers grow inputs only, hidden layers grow both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRole {
    Input,
    Hidden,
    Output,
}

impl LayerRole {
    pub fn code(self) -> u32 {
        match self {
            LayerRole::Input => 0,
            LayerRole::Hidden => 1,
            LayerRole::Output => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(LayerRole::Input),
            1 => Some(LayerRole::Hidden),
            2 => Some(LayerRole::Output),
            _ => None,
        }
    }
}

/// Static description of a layer. Widths are channel (or feature) counts;
/// for `Flatten` the output width is the flattened feature count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub role: LayerRole,
}

impl LayerSpec {
    pub fn linear(in_width: usize, out_width: usize, role: LayerRole) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_width,
            out_width,
            kernel: 1,
            stride: 1,
            role,
        }
    }

    pub fn classifier(in_width: usize, out_width: usize) -> Self {
        Self {
            kind: LayerKind::ClassifierHead,
            role: LayerRole::Output,
            ..Self::linear(in_width, out_width, LayerRole::Output)
        }
    }

    pub fn conv(
        in_width: usize,
        out_width: usize,
        kernel: usize,
        stride: usize,
        role: LayerRole,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            in_width,
            out_width,
            kernel,
            stride,
            role,
        }
    }

    fn passthrough(kind: LayerKind, width: usize) -> Self {
        Self {
            kind,
            in_width: width,
            out_width: width,
            kernel: 1,
            stride: 1,
            role: LayerRole::Hidden,
        }
    }

    pub fn batchnorm(width: usize) -> Self {
        Self::passthrough(LayerKind::BatchNorm, width)
    }

    pub fn relu(width: usize) -> Self {
        Self::passthrough(LayerKind::Relu, width)
    }

    pub fn maxpool(width: usize, kernel: usize) -> Self {
        Self {
            kernel,
            stride: kernel,
            ..Self::passthrough(LayerKind::MaxPool, width)
        }
    }

    pub fn residual(width: usize, from: usize) -> Self {
        Self::passthrough(LayerKind::ResidualAdd { from }, width)
    }

    pub fn flatten(channels: usize, features: usize) -> Self {
        Self {
            out_width: features,
            ..Self::passthrough(LayerKind::Flatten, channels)
        }
    }

    /// Fan-in of one output unit (input channels times kernel area).
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.in_width * self.kernel * self.kernel,
            _ => self.in_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub const ALL: [ParamKind; 4] = [
        ParamKind::Weight,
        ParamKind::Bias,
        ParamKind::Gamma,
        ParamKind::Beta,
    ];

    pub fn code(self) -> u32 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Gamma => 2,
            ParamKind::Beta => 3,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// Identifies one trainable tensor in a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Mutable state of one layer.
///
/// `gain` is a fixed forward multiplier on the weights (the layer computes
/// `gain * W x + b`). Variance-transfer rescaling of stored weights divides
/// it back out when no BatchNorm follows, so growth never changes the
/// function. `bn_eps` starts at [`BN_EPS`] and is rescaled together with the
/// running statistics, so BatchNorm absorbs producer rescaling exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub weight: Option<Param>,
    pub bias: Option<Param>,
    pub gamma: Option<Param>,
    pub beta: Option<Param>,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    pub bn_eps: f64,
    pub gain: f64,
}

impl Default for LayerState {
    fn default() -> Self {
        Self {
            weight: None,
            bias: None,
            gamma: None,
            beta: None,
            running_mean: None,
            running_var: None,
            bn_eps: BN_EPS,
            gain: 1.0,
        }
    }
}

impl LayerState {
    pub fn batchnorm(width: usize) -> Self {
        Self {
            gamma: Some(Param::new(Tensor::full(&[width], 1.0))),
            beta: Some(Param::new(Tensor::zeros(&[width]))),
            running_mean: Some(Tensor::zeros(&[width])),
            running_var: Some(Tensor::full(&[width], 1.0)),
            ..Self::default()
        }
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Param> {
        match kind {
            ParamKind::Weight => self.weight.as_ref(),
            ParamKind::Bias => self.bias.as_ref(),
            ParamKind::Gamma => self.gamma.as_ref(),
            ParamKind::Beta => self.beta.as_ref(),
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut Param> {
        match kind {
            ParamKind::Weight => self.weight.as_mut(),
            ParamKind::Bias => self.bias.as_mut(),
            ParamKind::Gamma => self.gamma.as_mut(),
            ParamKind::Beta => self.beta.as_mut(),
        }
    }

    pub fn zero_grads(&mut self) {
        for k in ParamKind::ALL {
            if let Some(p) = self.param_mut(k) {
                p.grad.data_mut().fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub state: LayerState,
}

#[cfg(test)]
mod tests;
