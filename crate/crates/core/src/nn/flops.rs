use super::conv::out_extent;
use super::{LayerKind, LayerSpec};

/// Training step = forward + input gradient + weight gradient.
pub const TRAIN_STEP_FLOPS_MULTIPLIER: u64 = 3;

/// Batch size and spatial extent of a layer's input (1×1 for flat inputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputExtent {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl InputExtent {
    pub fn flat(batch: usize) -> Self {
        Self {
            batch,
            height: 1,
            width: 1,
        }
    }
}

/// Forward FLOPs of one layer: two per multiply-accumulate, nothing else counted.
pub fn flops_forward(spec: &LayerSpec, input: InputExtent) -> u64 {
    let b = input.batch as u64;
    match spec.kind {
        LayerKind::Linear | LayerKind::ClassifierHead => {
            2 * spec.in_width as u64 * spec.out_width as u64 * b
        }
        LayerKind::Conv2d => {
            let (ho, wo) = out_extent(input.height, input.width, spec.kernel, spec.stride);
            let k2 = (spec.kernel * spec.kernel) as u64;
            2 * k2 * spec.in_width as u64 * spec.out_width as u64 * (ho * wo) as u64 * b
        }
        _ => 0,
    }
}
