//! Built-in architectures.

use super::{Layer, LayerKind, LayerRole, LayerSpec, LayerState, Network, Param};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Weighted layer with `N(0, 1/fan_in)` weights and an optional zero bias.
pub fn weighted_layer(spec: LayerSpec, bias: bool, rng: &mut Rng) -> Result<Layer> {
    let shape = match spec.kind {
        LayerKind::Conv2d => vec![spec.out_width, spec.in_width, spec.kernel, spec.kernel],
        _ => vec![spec.out_width, spec.in_width],
    };
    let w = Tensor::normal(rng, &shape, 0.0, 1.0 / spec.fan_in() as f64)?;
    let state = LayerState {
        weight: Some(Param::new(w)),
        bias: bias.then(|| Param::new(Tensor::zeros(&[spec.out_width]))),
        ..LayerState::default()
    };
    Ok(Layer { spec, state })
}

pub fn plain_layer(spec: LayerSpec) -> Layer {
    let state = match spec.kind {
        LayerKind::BatchNorm => LayerState::batchnorm(spec.in_width),
        _ => LayerState::default(),
    };
    Layer { spec, state }
}

/// Conv-BN-ReLU(-MaxPool) stack followed by a linear classifier.
/// `pools[i]` is the max-pool size after block `i` (1 for none).
pub fn cnn(
    in_channels: usize,
    image: usize,
    widths: &[usize],
    pools: &[usize],
    classes: usize,
    rng: &mut Rng,
) -> Result<Network> {
    if widths.is_empty() || widths.len() != pools.len() {
        return Err(Error::arg("cnn needs one pool size per conv width"));
    }
    let mut layers = Vec::new();
    let mut cin = in_channels;
    let mut hw = image;
    for (i, (&w, &p)) in widths.iter().zip(pools).enumerate() {
        let role = if i == 0 {
            LayerRole::Input
        } else {
            LayerRole::Hidden
        };
        layers.push(weighted_layer(
            LayerSpec::conv(cin, w, 3, 1, role),
            false,
            rng,
        )?);
        layers.push(plain_layer(LayerSpec::batchnorm(w)));
        layers.push(plain_layer(LayerSpec::relu(w)));
        if p > 1 {
            layers.push(plain_layer(LayerSpec::maxpool(w, p)));
            hw /= p;
        }
        cin = w;
    }
    layers.push(plain_layer(LayerSpec::flatten(cin, cin * hw * hw)));
    layers.push(weighted_layer(
        LayerSpec::classifier(cin * hw * hw, classes),
        true,
        rng,
    )?);
    Network::new(vec![in_channels, image, image], layers)
}

/// The 4-layer CNN on 8×8×3 inputs used by the desk-scale experiments.
pub fn cnn4(widths: [usize; 4], classes: usize, rng: &mut Rng) -> Result<Network> {
    cnn(3, 8, &widths, &[2, 2, 2, 1], classes, rng)
}

/// Fully connected ReLU network.
pub fn mlp(input: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Result<Network> {
    if hidden.is_empty() {
        return Err(Error::arg("mlp needs at least one hidden layer"));
    }
    let mut layers = Vec::new();
    let mut cin = input;
    for (i, &h) in hidden.iter().enumerate() {
        let role = if i == 0 {
            LayerRole::Input
        } else {
            LayerRole::Hidden
        };
        layers.push(weighted_layer(LayerSpec::linear(cin, h, role), true, rng)?);
        layers.push(plain_layer(LayerSpec::relu(h)));
        cin = h;
    }
    layers.push(weighted_layer(
        LayerSpec::classifier(cin, classes),
        true,
        rng,
    )?);
    Network::new(vec![input], layers)
}

/// Eight hidden layers of 500 units.
pub fn mlp_8x500(input: usize, classes: usize, rng: &mut Rng) -> Result<Network> {
    mlp(input, &[500; 8], classes, rng)
}

/// Small residual CNN: a stem conv followed by `blocks` two-conv residual blocks
/// at constant width, then flatten and a classifier.
pub fn resnet_small(
    in_channels: usize,
    image: usize,
    width: usize,
    blocks: usize,
    classes: usize,
    rng: &mut Rng,
) -> Result<Network> {
    let mut layers = vec![
        weighted_layer(
            LayerSpec::conv(in_channels, width, 3, 1, LayerRole::Input),
            false,
            rng,
        )?,
        plain_layer(LayerSpec::batchnorm(width)),
        plain_layer(LayerSpec::relu(width)),
    ];
    for _ in 0..blocks {
        let skip = layers.len() - 1;
        layers.push(weighted_layer(
            LayerSpec::conv(width, width, 3, 1, LayerRole::Hidden),
            false,
            rng,
        )?);
        layers.push(plain_layer(LayerSpec::batchnorm(width)));
        layers.push(plain_layer(LayerSpec::relu(width)));
        layers.push(weighted_layer(
            LayerSpec::conv(width, width, 3, 1, LayerRole::Hidden),
            false,
            rng,
        )?);
        layers.push(plain_layer(LayerSpec::batchnorm(width)));
        layers.push(plain_layer(LayerSpec::residual(width, skip)));
        layers.push(plain_layer(LayerSpec::relu(width)));
    }
    let features = width * image * image;
    layers.push(plain_layer(LayerSpec::flatten(width, features)));
    layers.push(weighted_layer(
        LayerSpec::classifier(features, classes),
        true,
        rng,
    )?);
    Network::new(vec![in_channels, image, image], layers)
}

/// Residual MLP without BatchNorm: input layer, two hidden layers whose sum is
/// joined back to the input layer's output, and an output layer.
pub fn residual_mlp(input: usize, width: usize, classes: usize, rng: &mut Rng) -> Result<Network> {
    let layers = vec![
        weighted_layer(LayerSpec::linear(input, width, LayerRole::Input), true, rng)?,
        plain_layer(LayerSpec::relu(width)),
        weighted_layer(
            LayerSpec::linear(width, width, LayerRole::Hidden),
            true,
            rng,
        )?,
        plain_layer(LayerSpec::relu(width)),
        weighted_layer(
            LayerSpec::linear(width, width, LayerRole::Hidden),
            true,
            rng,
        )?,
        plain_layer(LayerSpec::residual(width, 1)),
        plain_layer(LayerSpec::relu(width)),
        weighted_layer(LayerSpec::classifier(width, classes), true, rng)?,
    ];
    Network::new(vec![input], layers)
}

/// Four linear layers (1,2)/(2,2)/(2,2)/(2,1) with a skip from the first
/// layer's output to the third's, all weights one and no biases.
pub fn appendix_residual() -> Network {
    let ones = |spec: LayerSpec| {
        let shape = [spec.out_width, spec.in_width];
        Layer {
            spec,
            state: LayerState {
                weight: Some(Param::new(Tensor::full(&shape, 1.0))),
                ..LayerState::default()
            },
        }
    };
    let layers = vec![
        ones(LayerSpec::linear(1, 2, LayerRole::Input)),
        ones(LayerSpec::linear(2, 2, LayerRole::Hidden)),
        ones(LayerSpec::linear(2, 2, LayerRole::Hidden)),
        plain_layer(LayerSpec::residual(2, 0)),
        ones(LayerSpec::linear(2, 1, LayerRole::Output)),
    ];
    Network::new(vec![1], layers).expect("static architecture is consistent")
}
