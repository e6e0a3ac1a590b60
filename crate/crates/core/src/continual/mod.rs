//! Orthogonalized SGD for growing networks trained on a growing datastream.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::growth::{embed_corner, GrowthReport};
use crate::nn::{softmax_cross_entropy, Mode, Network, ParamId};
use crate::optim::{OptimizerState, RateTrace};
use crate::schedule::{
    run_stage_loop, GrowthPlan, LoopConfig, LoopState, MetricsRecord, StageHooks, StepInfo,
};
use crate::tensor::Rng;

/// Accumulated gradient of every parameter tensor, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGradient {
    pub tensors: Vec<(ParamId, Vec<usize>, Vec<f64>)>,
}

impl ReferenceGradient {
    pub fn sum_squares(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.2.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    /// Concatenation of all tensors.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.2.iter().copied())
            .collect()
    }
}

/// Mean gradient over one pass of `data` in batches of `batch`. BatchNorm
/// uses batch statistics without updating running statistics; the network is
/// not modified.
pub fn accumulate_reference(
    net: &Network,
    data: &Dataset,
    batch: usize,
) -> Result<ReferenceGradient> {
    if data.is_empty() {
        return Err(Error::arg(
            "cannot accumulate a reference gradient over an empty dataset",
        ));
    }
    let mut work = net.clone();
    let ids = work.param_ids();
    let mut acc: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| vec![0.0; work.param(id).expect("listed").value.len()])
        .collect();
    let n = data.len() as f64;
    for (x, y) in data.batches(batch) {
        let w = y.len() as f64 / n;
        let (logits, cache) = work.forward_frozen(&x, Mode::BatchStats)?;
        let (_, dy) = softmax_cross_entropy(&logits, &y)?;
        work.backward(&cache, &dy)?;
        for (a, &id) in acc.iter_mut().zip(&ids) {
            for (s, g) in a
                .iter_mut()
                .zip(work.param(id).expect("listed").grad.data())
            {
                *s += w * g;
            }
        }
    }
    Ok(ReferenceGradient {
        tensors: ids
            .iter()
            .zip(acc)
            .map(|(&id, a)| {
                (
                    id,
                    work.param(id).expect("listed").value.shape().to_vec(),
                    a,
                )
            })
            .collect(),
    })
}

/// Zero-pads a reference gradient to the shapes after `report`'s growth step.
pub fn pad_reference(
    reference: &ReferenceGradient,
    report: &GrowthReport,
) -> Result<ReferenceGradient> {
    let mut out = reference.clone();
    for d in &report.tensors {
        let t = out
            .tensors
            .iter_mut()
            .find(|t| t.0 == d.id)
            .ok_or_else(|| {
                Error::State(format!("reference gradient has no entry for {:?}", d.id))
            })?;
        if t.1 != d.old_shape {
            return Err(Error::Dimension {
                op: "pad_reference",
                left: t.1.clone(),
                right: d.old_shape.clone(),
            });
        }
        t.2 = embed_corner(&t.2, &d.old_shape, &d.new_shape)?;
        t.1 = d.new_shape.clone();
    }
    Ok(out)
}

/// `g - lambda * (<g, p> / <p, p>) p`; `g` unchanged when `p` is zero.
pub fn osgd_project(g: &[f64], p: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if g.len() != p.len() {
        return Err(Error::Dimension {
            op: "osgd_project",
            left: vec![g.len()],
            right: vec![p.len()],
        });
    }
    let pp: f64 = p.iter().map(|x| x * x).sum();
    if pp == 0.0 {
        return Ok(g.to_vec());
    }
    let c = lambda * g.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / pp;
    Ok(g.iter().zip(p).map(|(a, b)| a - c * b).collect())
}

/// Projects the network's gradients away from `reference` in place, over the
/// whole model or tensor by tensor. Returns `<G*, P> / (|G*| |P|)` over the
/// whole model (0 when either is zero).
pub fn project_network_gradients(
    net: &mut Network,
    reference: &ReferenceGradient,
    lambda: f64,
    per_tensor: bool,
) -> Result<f64> {
    let ids = net.param_ids();
    if ids.len() != reference.tensors.len()
        || ids.iter().zip(&reference.tensors).any(|(a, b)| *a != b.0)
    {
        return Err(Error::State(
            "reference gradient does not match the network parameters".into(),
        ));
    }
    if per_tensor {
        for (&id, (_, _, p)) in ids.iter().zip(&reference.tensors) {
            let param = net.param_mut(id).expect("listed");
            let projected = osgd_project(param.grad.data(), p, lambda)?;
            param.grad.data_mut().copy_from_slice(&projected);
        }
    } else {
        let mut g = Vec::new();
        for &id in &ids {
            g.extend_from_slice(net.param(id).expect("listed").grad.data());
        }
        let projected = osgd_project(&g, &reference.flat(), lambda)?;
        let mut off = 0;
        for &id in &ids {
            let param = net.param_mut(id).expect("listed");
            let n = param.grad.len();
            param
                .grad
                .data_mut()
                .copy_from_slice(&projected[off..off + n]);
            off += n;
        }
    }
    let mut dot = 0.0;
    let mut gg = 0.0;
    for (&id, (_, _, p)) in ids.iter().zip(&reference.tensors) {
        for (a, b) in net.param(id).expect("listed").grad.data().iter().zip(p) {
            dot += a * b;
            gg += a * a;
        }
    }
    let denom = gg.sqrt() * reference.norm();
    Ok(if denom == 0.0 { 0.0 } else { dot / denom })
}

/// Projection weight over the updates of a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSchedule {
    /// Decays linearly from 1 at step 0 to 0 at `total_steps`.
    Linear {
        total_steps: u64,
    },
    Constant(f64),
}

impl LambdaSchedule {
    pub fn value(&self, step: u64) -> f64 {
        match *self {
            LambdaSchedule::Linear { total_steps } => {
                if total_steps == 0 || step >= total_steps {
                    0.0
                } else {
                    1.0 - step as f64 / total_steps as f64
                }
            }
            LambdaSchedule::Constant(l) => l,
        }
    }
}

/// How λ evolves inside each stage of an incremental run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaShape {
    Linear,
    Constant(f64),
}

/// Which data each stage trains on.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamMode {
    /// The whole dataset every stage.
    Full,
    /// `initial` classes, then `per_stage` more each stage.
    ProgressiveClass { initial: usize, per_stage: usize },
    /// A fraction of the data per stage, sampled with replacement.
    ProgressiveData { fractions: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub mode: StreamMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    PlainGrowing,
    DynamicOsgd,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain-growing" => Some(Variant::PlainGrowing),
            "dynamic-osgd" => Some(Variant::DynamicOsgd),
            _ => None,
        }
    }
}

fn stream_error(msg: impl Into<String>) -> Error {
    Error::config("stream", msg)
}

/// Per-stage datasets for a stream.
pub fn build_stream(data: &Dataset, stream: &StreamConfig, stages: usize) -> Result<Vec<Dataset>> {
    let root = Rng::new(stream.seed);
    match &stream.mode {
        StreamMode::Full => Ok(vec![data.clone(); stages]),
        StreamMode::ProgressiveClass { initial, per_stage } => {
            let last = initial + per_stage * stages.saturating_sub(1);
            if *initial == 0 || last > data.classes {
                return Err(stream_error(format!(
                    "class schedule reaches {last} classes but the dataset has {}",
                    data.classes
                )));
            }
            let mut order: Vec<usize> = (0..data.classes).collect();
            root.fork(0).shuffle(&mut order);
            Ok((0..stages)
                .map(|t| {
                    let keep = &order[..initial + per_stage * t];
                    let idx: Vec<usize> = (0..data.len())
                        .filter(|&i| keep.contains(&data.y[i]))
                        .collect();
                    data.subset(&idx)
                })
                .collect())
        }
        StreamMode::ProgressiveData { fractions } => {
            if fractions.len() != stages {
                return Err(stream_error(format!(
                    "{} fractions for {stages} stages",
                    fractions.len()
                )));
            }
            if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
                || fractions.windows(2).any(|w| w[1] < w[0])
            {
                return Err(stream_error(
                    "fractions must be non-decreasing within (0, 1]",
                ));
            }
            Ok(fractions
                .iter()
                .enumerate()
                .map(|(t, f)| {
                    let mut rng = root.fork(t as u64 + 1);
                    let m = (f * data.len() as f64).round() as usize;
                    let idx: Vec<usize> = (0..m).map(|_| rng.below(data.len())).collect();
                    data.subset(&idx)
                })
                .collect())
        }
    }
}

/// Cosine between projected gradient and reference at one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionTrace {
    pub stage: usize,
    pub step: u64,
    pub lambda: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalOutcome {
    pub records: Vec<MetricsRecord>,
    pub projections: Vec<ProjectionTrace>,
    pub stage_sizes: Vec<usize>,
}

/// Settings of [`run_incremental`] beyond the training loop's.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalConfig {
    pub stream: StreamConfig,
    pub variant: Variant,
    pub lambda: LambdaShape,
    pub per_tensor: bool,
}

struct OsgdHooks<'a> {
    inner: &'a mut dyn StageHooks,
    stages: &'a [Dataset],
    plan: &'a GrowthPlan,
    cfg: &'a IncrementalConfig,
    reference: Option<ReferenceGradient>,
    projections: Vec<ProjectionTrace>,
}

impl StageHooks for OsgdHooks<'_> {
    fn before_growth(&mut self, stage: usize, net: &Network) -> Result<()> {
        if self.cfg.variant == Variant::DynamicOsgd {
            let prev = &self.stages[stage - 1];
            self.reference = Some(accumulate_reference(
                net,
                prev,
                self.plan.batches[stage - 1],
            )?);
        }
        self.inner.before_growth(stage, net)
    }

    fn after_growth(&mut self, stage: usize, net: &Network, report: &GrowthReport) -> Result<()> {
        if let Some(r) = &self.reference {
            self.reference = Some(pad_reference(r, report)?);
        }
        self.inner.after_growth(stage, net, report)
    }

    fn transform_gradients(&mut self, net: &mut Network, info: &StepInfo) -> Result<()> {
        if let (Variant::DynamicOsgd, Some(reference)) = (self.cfg.variant, &self.reference) {
            if info.stage > 0 {
                let lambda = match self.cfg.lambda {
                    LambdaShape::Linear => LambdaSchedule::Linear {
                        total_steps: info.stage_steps,
                    },
                    LambdaShape::Constant(l) => LambdaSchedule::Constant(l),
                }
                .value(info.stage_step);
                let cosine =
                    project_network_gradients(net, reference, lambda, self.cfg.per_tensor)?;
                self.projections.push(ProjectionTrace {
                    stage: info.stage,
                    step: info.step,
                    lambda,
                    cosine,
                });
            }
        }
        self.inner.transform_gradients(net, info)
    }

    fn on_step(&mut self, info: &StepInfo, loss: f64, traces: &[RateTrace]) -> Result<()> {
        self.inner.on_step(info, loss, traces)
    }

    fn on_epoch(
        &mut self,
        r: &MetricsRecord,
        net: &Network,
        opt: &OptimizerState,
        st: &LoopState,
    ) -> Result<()> {
        self.inner.on_epoch(r, net, opt, st)
    }
}

/// Runs `plan` on a stream built from `data`: before each growth step the
/// reference gradient is accumulated over the previous stage's data, and
/// during the next stage each gradient is projected away from its padded
/// version with weight λ.
pub fn run_incremental(
    plan: &GrowthPlan,
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Dataset,
    cfg: &IncrementalConfig,
    loop_cfg: &LoopConfig<'_>,
    hooks: &mut dyn StageHooks,
) -> Result<IncrementalOutcome> {
    if loop_cfg
        .resume
        .as_ref()
        .is_some_and(|s| s.position.epoch > 0 && s.position.stage > 0)
    {
        return Err(Error::State(
            "incremental runs resume only at stage boundaries (the reference gradient is not checkpointed)".into(),
        ));
    }
    let stages = build_stream(data, &cfg.stream, plan.num_stages())?;
    let mut osgd = OsgdHooks {
        inner: hooks,
        stages: &stages,
        plan,
        cfg,
        reference: None,
        projections: Vec::new(),
    };
    let records = run_stage_loop(plan, net, opt, &stages, loop_cfg, &mut osgd)?;
    Ok(IncrementalOutcome {
        records,
        projections: osgd.projections,
        stage_sizes: stages.iter().map(Dataset::len).collect(),
    })
}
