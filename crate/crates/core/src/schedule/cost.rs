//! Analytic FLOPs models for cost accounting.

use super::{baseline_flops, stage_flops, GrowthPlan};
use crate::error::Result;
use crate::nn::{Network, TRAIN_STEP_FLOPS_MULTIPLIER};

/// Forward FLOPs of an architecture as a function of its growable widths.
pub trait FlopsModel {
    /// Forward FLOPs for one sample.
    fn forward_flops(&self, widths: &[usize]) -> f64;

    fn final_widths(&self) -> Vec<usize>;

    /// Forward plus backward FLOPs of one training step.
    fn train_step_flops(&self, widths: &[usize], batch: usize) -> f64 {
        TRAIN_STEP_FLOPS_MULTIPLIER as f64 * batch as f64 * self.forward_flops(widths)
    }
}

/// Training FLOPs of `plan` as a percentage of training the final widths
/// for the same number of epochs at the base batch size.
pub fn train_cost_ratio(model: &dyn FlopsModel, plan: &GrowthPlan, dataset_size: usize) -> f64 {
    let num: f64 = (0..plan.num_stages())
        .map(|t| stage_flops(plan, model, dataset_size, t))
        .sum();
    100.0 * num / baseline_flops(plan, model, dataset_size)
}

fn conv(cin: usize, cout: usize, k: usize, hw: usize, groups: usize) -> f64 {
    2.0 * (k * k * cin * cout * hw * hw) as f64 / groups as f64
}

/// CIFAR ResNet-20 with widths per residual group (16, 32, 64 at full size)
/// and 1x1 projection shortcuts.
#[derive(Debug, Clone)]
pub struct Resnet20 {
    pub classes: usize,
}

impl FlopsModel for Resnet20 {
    fn forward_flops(&self, w: &[usize]) -> f64 {
        let (a, b, c) = (w[0], w[1], w[2]);
        let mut f = conv(3, a, 3, 32, 1);
        f += 6.0 * conv(a, a, 3, 32, 1);
        f += conv(a, b, 3, 16, 1) + conv(b, b, 3, 16, 1) + conv(a, b, 1, 16, 1);
        f += 4.0 * conv(b, b, 3, 16, 1);
        f += conv(b, c, 3, 8, 1) + conv(c, c, 3, 8, 1) + conv(b, c, 1, 8, 1);
        f += 4.0 * conv(c, c, 3, 8, 1);
        f + 2.0 * (c * self.classes) as f64
    }

    fn final_widths(&self) -> Vec<usize> {
        vec![16, 32, 64]
    }
}

/// VGG-11 on 32x32 inputs; one width per conv layer.
#[derive(Debug, Clone)]
pub struct Vgg11Cifar {
    pub classes: usize,
}

impl FlopsModel for Vgg11Cifar {
    fn forward_flops(&self, w: &[usize]) -> f64 {
        // Spatial size of each conv layer's output.
        const HW: [usize; 8] = [32, 16, 8, 8, 4, 4, 2, 2];
        let mut cin = 3;
        let mut f = 0.0;
        for (&c, &hw) in w.iter().zip(&HW) {
            f += conv(cin, c, 3, hw, 1);
            cin = c;
        }
        f + 2.0 * (cin * self.classes) as f64
    }

    fn final_widths(&self) -> Vec<usize> {
        vec![64, 128, 256, 256, 512, 512, 512, 512]
    }
}

/// MobileNetV1 for 32x32 inputs: a stride-1 stem followed by 13
/// depthwise-separable blocks; one width per pointwise output.
#[derive(Debug, Clone)]
pub struct MobileNetV1Cifar {
    pub classes: usize,
}

impl FlopsModel for MobileNetV1Cifar {
    fn forward_flops(&self, w: &[usize]) -> f64 {
        const STRIDES: [usize; 13] = [1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 2, 1];
        let mut f = conv(3, w[0], 3, 32, 1);
        let mut cin = w[0];
        let mut hw = 32;
        for (&c, &s) in w[1..].iter().zip(&STRIDES) {
            hw /= s;
            f += conv(cin, cin, 3, hw, cin);
            f += conv(cin, c, 1, hw, 1);
            cin = c;
        }
        f + 2.0 * (cin * self.classes) as f64
    }

    fn final_widths(&self) -> Vec<usize> {
        vec![
            32, 64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024,
        ]
    }
}

/// FLOPs counted on concrete networks produced by a builder.
pub struct NetworkFlops<F> {
    build: F,
    finals: Vec<usize>,
}

impl<F: Fn(&[usize]) -> Result<Network>> NetworkFlops<F> {
    pub fn new(finals: Vec<usize>, build: F) -> Self {
        Self { build, finals }
    }
}

impl<F: Fn(&[usize]) -> Result<Network>> FlopsModel for NetworkFlops<F> {
    fn forward_flops(&self, widths: &[usize]) -> f64 {
        (self.build)(widths).map_or(f64::NAN, |n| n.forward_flops(1) as f64)
    }

    fn final_widths(&self) -> Vec<usize> {
        self.finals.clone()
    }
}
