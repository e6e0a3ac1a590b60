//! Width, epoch and batch-size schedules and the stage-wise training loop.

mod cost;
mod runner;

pub use cost::{
    train_cost_ratio, FlopsModel, MobileNetV1Cifar, NetworkFlops, Resnet20, Vgg11Cifar,
};
pub use runner::{
    batch_loss, evaluate, run_stage_loop, LoopConfig, LoopPosition, LoopState, MetricsRecord,
    NoHooks, StageData, StageHooks, StepInfo,
};

use crate::error::{Error, Result};

/// Rounds to the nearest even integer; exact odd values round up.
pub fn round_even(x: f64) -> i64 {
    let lo = 2.0 * (x / 2.0).floor();
    if x - lo < lo + 2.0 - x {
        lo as i64
    } else {
        lo as i64 + 2
    }
}

/// Widths `C_0..C_{N-1}`: `C_t = C_{t-1} + round_even(p_c * C_{t-1})`, with the
/// last stage set to `c_final`. Intermediate widths never exceed `c_final`.
pub fn width_schedule(c0: usize, c_final: usize, p_c: f64, stages: usize) -> Result<Vec<usize>> {
    if stages == 0 {
        return Err(Error::arg("schedule needs at least one stage"));
    }
    if c0 == 0 || c0 > c_final {
        return Err(Error::arg(format!(
            "initial width {c0} must be in 1..={c_final}"
        )));
    }
    if !(p_c >= 0.0) {
        return Err(Error::arg("p_c must be non-negative"));
    }
    let mut out = Vec::with_capacity(stages);
    let mut c = c0;
    for t in 0..stages {
        if t == stages - 1 {
            out.push(c_final);
        } else {
            out.push(c);
            let inc = round_even(p_c * c as f64).max(0) as usize;
            c = (c + inc).min(c_final);
        }
    }
    Ok(out)
}

/// Epochs per stage: `floor(T_0 (1 + p_t)^t)` for all but the last stage,
/// which receives the remainder of `t_total`.
pub fn epoch_schedule(t0: usize, t_total: usize, p_t: f64, stages: usize) -> Result<Vec<usize>> {
    if stages == 0 || t0 == 0 {
        return Err(Error::arg(
            "epoch schedule needs T_0 >= 1 and at least one stage",
        ));
    }
    if !(p_t >= 0.0) {
        return Err(Error::arg("p_t must be non-negative"));
    }
    let mut out: Vec<usize> = (0..stages - 1)
        .map(|t| (t0 as f64 * (1.0 + p_t).powi(t as i32) + 1e-9).floor() as usize)
        .collect();
    let used: usize = out.iter().sum();
    if used >= t_total {
        return Err(Error::arg(format!(
            "epoch schedule infeasible: first {} stages use {used} of {t_total} epochs",
            stages - 1
        )));
    }
    out.push(t_total - used);
    Ok(out)
}

/// Batch sizes, built backwards from `B_{N-1} = b_base` with
/// `B_{t-1} = B_t + round(p_b * B_t)`.
pub fn batch_schedule(b_base: usize, p_b: f64, stages: usize) -> Result<Vec<usize>> {
    if stages == 0 || b_base == 0 {
        return Err(Error::arg(
            "batch schedule needs B_base >= 1 and at least one stage",
        ));
    }
    if !(p_b >= 0.0) {
        return Err(Error::arg("p_b must be non-negative"));
    }
    let mut out = vec![b_base; stages];
    for t in (0..stages - 1).rev() {
        out[t] = out[t + 1] + (p_b * out[t + 1] as f64).round() as usize;
    }
    Ok(out)
}

/// How initial widths are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum WidthPolicy {
    /// `round_even(C_final / 4)` for each layer, grown independently.
    Quarter,
    /// One schedule for the widest layer (starting at a quarter of it); every
    /// other layer keeps its final proportion to that layer.
    Proportional,
    /// Given initial widths, grown independently.
    Explicit(Vec<usize>),
}

impl WidthPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            WidthPolicy::Quarter => "quarter",
            WidthPolicy::Proportional => "proportional",
            WidthPolicy::Explicit(_) => "explicit",
        }
    }
}

/// Inputs to [`GrowthPlan::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanParams {
    pub stages: usize,
    pub p_c: f64,
    pub p_t: f64,
    pub p_b: f64,
    pub t0: usize,
    pub t_total: usize,
    pub b_base: usize,
    pub policy: WidthPolicy,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            stages: 9,
            p_c: 0.2,
            p_t: 0.2,
            p_b: 0.0,
            t0: 8,
            t_total: 160,
            b_base: 128,
            policy: WidthPolicy::Proportional,
        }
    }
}

/// Complete schedule of a growing run.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthPlan {
    pub params: PlanParams,
    /// `widths[layer][stage]`.
    pub widths: Vec<Vec<usize>>,
    pub epochs: Vec<usize>,
    pub batches: Vec<usize>,
}

impl GrowthPlan {
    pub fn build(final_widths: &[usize], params: &PlanParams) -> Result<Self> {
        let n = params.stages;
        if final_widths.is_empty() || final_widths.contains(&0) {
            return Err(Error::arg("final widths must be non-empty and positive"));
        }
        let widths = match &params.policy {
            WidthPolicy::Quarter => final_widths
                .iter()
                .map(|&c| width_schedule(quarter(c), c, params.p_c, n))
                .collect::<Result<Vec<_>>>()?,
            WidthPolicy::Explicit(c0) => {
                if c0.len() != final_widths.len() {
                    return Err(Error::arg(format!(
                        "{} initial widths for {} layers",
                        c0.len(),
                        final_widths.len()
                    )));
                }
                c0.iter()
                    .zip(final_widths)
                    .map(|(&a, &c)| width_schedule(a, c, params.p_c, n))
                    .collect::<Result<Vec<_>>>()?
            }
            WidthPolicy::Proportional => {
                let reference = *final_widths.iter().max().expect("non-empty");
                let r = width_schedule(quarter(reference), reference, params.p_c, n)?;
                final_widths
                    .iter()
                    .map(|&c| {
                        let lo = c.min(2);
                        (0..n)
                            .map(|t| {
                                if t == n - 1 {
                                    c
                                } else {
                                    let w = round_even(c as f64 * r[t] as f64 / reference as f64);
                                    (w.max(0) as usize).clamp(lo, c)
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        let plan = Self {
            params: params.clone(),
            widths,
            epochs: epoch_schedule(params.t0, params.t_total, params.p_t, n)?,
            batches: batch_schedule(params.b_base, params.p_b, n)?,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// A single-stage plan: plain training at the final widths.
    pub fn fixed(final_widths: &[usize], epochs: usize, batch: usize) -> Result<Self> {
        let params = PlanParams {
            stages: 1,
            t0: epochs,
            t_total: epochs,
            b_base: batch,
            policy: WidthPolicy::Explicit(final_widths.to_vec()),
            ..PlanParams::default()
        };
        let plan = Self {
            widths: final_widths.iter().map(|&c| vec![c]).collect(),
            epochs: vec![epochs],
            batches: vec![batch],
            params,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn num_stages(&self) -> usize {
        self.epochs.len()
    }

    pub fn stage_widths(&self, stage: usize) -> Vec<usize> {
        self.widths.iter().map(|w| w[stage]).collect()
    }

    pub fn final_widths(&self) -> Vec<usize> {
        self.stage_widths(self.num_stages() - 1)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }

    /// Checks the schedule invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.epochs.len();
        if n == 0 || self.batches.len() != n {
            return Err(Error::arg(
                "epoch and batch schedules must have one entry per stage",
            ));
        }
        if self.epochs.contains(&0) {
            return Err(Error::arg("every stage needs at least one epoch"));
        }
        if self.batches.windows(2).any(|w| w[0] < w[1]) || self.batches.contains(&0) {
            return Err(Error::arg(
                "batch sizes must be positive and non-increasing",
            ));
        }
        for (i, w) in self.widths.iter().enumerate() {
            if w.len() != n {
                return Err(Error::arg(format!(
                    "layer {i}: {} widths for {n} stages",
                    w.len()
                )));
            }
            for (t, pair) in w.windows(2).enumerate() {
                if pair[1] < pair[0] {
                    return Err(Error::arg(format!(
                        "layer {i}: width shrinks at stage {}",
                        t + 1
                    )));
                }
                if (pair[1] - pair[0]) % 2 != 0 {
                    return Err(Error::arg(format!(
                        "layer {i}: odd width increment {} -> {} at stage {}",
                        pair[0],
                        pair[1],
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fixed-width text table: stage, widths, epochs, batch and cumulative
    /// training FLOPs as a percentage of the fixed-size baseline.
    pub fn table(&self, model: &dyn FlopsModel, dataset_size: usize) -> String {
        let base = baseline_flops(self, model, dataset_size);
        let mut out = String::from("stage  epochs  batch  cum_flops_pct  widths\n");
        let mut cum = 0.0;
        for t in 0..self.num_stages() {
            cum += stage_flops(self, model, dataset_size, t);
            let widths: Vec<String> = self.stage_widths(t).iter().map(|w| w.to_string()).collect();
            out.push_str(&format!(
                "{:>5}  {:>6}  {:>5}  {:>13.4}  {}\n",
                t,
                self.epochs[t],
                self.batches[t],
                100.0 * cum / base,
                widths.join(",")
            ));
        }
        out
    }
}

fn quarter(c: usize) -> usize {
    (round_even(c as f64 / 4.0).max(0) as usize).clamp(c.min(2), c)
}

pub(crate) fn stage_flops(
    plan: &GrowthPlan,
    model: &dyn FlopsModel,
    dataset_size: usize,
    t: usize,
) -> f64 {
    let b = plan.batches[t];
    let steps = dataset_size.div_ceil(b) as f64;
    plan.epochs[t] as f64 * steps * model.train_step_flops(&plan.stage_widths(t), b)
}

pub(crate) fn baseline_flops(
    plan: &GrowthPlan,
    model: &dyn FlopsModel,
    dataset_size: usize,
) -> f64 {
    let b = plan.params.b_base;
    let steps = dataset_size.div_ceil(b) as f64;
    plan.total_epochs() as f64 * steps * model.train_step_flops(&plan.final_widths(), b)
}

#[cfg(test)]
mod tests;
