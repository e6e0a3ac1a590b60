//! Parameter updates with stage-wise learning-rate adaptation.
//!
//! Every parameter tensor is split into stage blocks by the network's
//! [`StagePartition`]. SGD scales each block's rate by a factor derived from
//! the weight norms of its stage; Adam and AvaGrad instead keep per-stage
//! step ages and per-stage normalizers.

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::growth::{embed_corner, GrowthReport, StagePartition, TensorBlocks};
use crate::nn::{LayerKind, LayerRole, Network, ParamId, ParamKind};
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AvaGrad,
    Lars,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AvaGrad => "avagrad",
            OptimizerKind::Lars => "lars",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Sgd, Self::Adam, Self::AvaGrad, Self::Lars]
            .into_iter()
            .find(|k| k.name() == s)
    }

    /// Reset for SGD-style momentum, preserve for adaptive methods.
    pub fn default_policy(self) -> BufferPolicy {
        match self {
            OptimizerKind::Sgd | OptimizerKind::Lars => BufferPolicy::Reset,
            OptimizerKind::Adam | OptimizerKind::AvaGrad => BufferPolicy::Preserve,
        }
    }
}

/// Rate adaptation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// One rate for everything (textbook optimizer).
    Global,
    /// Stage factors from weight-norm ratios.
    StageNorm,
    /// Layer-wise trust ratio `‖W‖/‖G‖`, no stage awareness.
    Lars,
    /// Stage factors `max(1, ratio)`.
    StageMax,
}

impl RateMode {
    pub fn name(self) -> &'static str {
        match self {
            RateMode::Global => "global",
            RateMode::StageNorm => "stage-norm",
            RateMode::Lars => "lars",
            RateMode::StageMax => "stage-max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Global, Self::StageNorm, Self::Lars, Self::StageMax]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// How the output layer's `1/C_0` base factor combines with stage ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputComposition {
    Multiply,
    /// Later stages use the bare norm ratio.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferPolicy {
    Preserve,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rate: RateMode,
    pub output: OutputComposition,
    pub policy: BufferPolicy,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rate: RateMode::StageNorm,
            output: OutputComposition::Multiply,
            policy: kind.default_policy(),
        }
    }
}

/// Rate factor of stage `k` for a layer of the given role.
///
/// Stage 0 returns the base factor (`1/C_0` for output layers, else 1).
/// Later stages return `norm_k / norm_0`, times the base factor under
/// [`OutputComposition::Multiply`].
pub fn rate_factor(
    norm_k: f64,
    norm_0: f64,
    role: LayerRole,
    stage: usize,
    c0: usize,
    mode: RateMode,
    output: OutputComposition,
) -> Result<f64> {
    if matches!(mode, RateMode::Global | RateMode::Lars) {
        return Ok(1.0);
    }
    let base = if role == LayerRole::Output {
        1.0 / c0.max(1) as f64
    } else {
        1.0
    };
    if stage == 0 {
        return Ok(base);
    }
    if !(norm_0 > 0.0) {
        return Err(Error::Degenerate(
            "stage-0 reference block has zero norm".into(),
        ));
    }
    let mut ratio = norm_k / norm_0;
    if mode == RateMode::StageMax {
        ratio = ratio.max(1.0);
    }
    Ok(match output {
        OutputComposition::Multiply => ratio * base,
        OutputComposition::Replace => ratio,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct ParamState {
    id: ParamId,
    /// Momentum (SGD, LARS) or first moment (Adam, AvaGrad).
    m: Vec<f64>,
    /// Second moment (Adam, AvaGrad).
    v: Vec<f64>,
}

/// Realized rate factor of one stage block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateTrace {
    pub layer: usize,
    pub stage: usize,
    pub factor: f64,
}

/// Optimizer buffers aligned with the network's stage partition.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: OptimizerConfig,
    params: Vec<ParamState>,
    ages: Vec<u64>,
    steps: u64,
    expanded_stage: usize,
}

impl OptimizerState {
    pub fn new(net: &Network, cfg: OptimizerConfig) -> Self {
        let params = net
            .param_ids()
            .into_iter()
            .map(|id| {
                let n = net.param(id).expect("listed").value.len();
                ParamState {
                    id,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        let stages = net.partition().num_stages();
        Self {
            cfg,
            params,
            ages: vec![0; stages],
            steps: 0,
            expanded_stage: net.stage_index(),
        }
    }

    /// Steps taken by each stage's blocks.
    pub fn ages(&self) -> &[u64] {
        &self.ages
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First buffer (momentum or first moment) of a parameter.
    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|p| p.id == id)
            .map(|p| p.m.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|p| p.id == id)
            .map(|p| p.v.as_slice())
    }

    fn check(&self, net: &Network) -> Result<()> {
        let ids = net.param_ids();
        if ids.len() != self.params.len() || self.ages.len() != net.partition().num_stages() {
            return Err(Error::State(
                "optimizer state does not match the network partition".into(),
            ));
        }
        for (id, p) in ids.iter().zip(&self.params) {
            let n = net.param(*id).expect("listed").value.len();
            if p.id != *id || p.m.len() != n || p.v.len() != n {
                return Err(Error::State(format!(
                    "buffers for {id:?} do not match the parameter"
                )));
            }
        }
        Ok(())
    }

    /// Applies one update with scheduled base rate `lr` using `cfg.kind`.
    pub fn step(&mut self, net: &mut Network, lr: f64) -> Result<Vec<RateTrace>> {
        match self.cfg.kind {
            OptimizerKind::Sgd => sgd_ra_step(net, self, lr),
            OptimizerKind::Adam => adam_ra_step(net, self, lr).map(|_| Vec::new()),
            OptimizerKind::AvaGrad => avagrad_ra_step(net, self, lr).map(|_| Vec::new()),
            OptimizerKind::Lars => lars_step(net, self, lr).map(|_| Vec::new()),
        }
    }

    pub fn write<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.u64(self.steps)?;
        w.u64(self.expanded_stage as u64)?;
        w.u64(self.ages.len() as u64)?;
        for &a in &self.ages {
            w.u64(a)?;
        }
        w.u64(self.params.len() as u64)?;
        for p in &self.params {
            w.u64(p.id.layer as u64)?;
            w.u32(p.id.kind.code())?;
            w.u64(p.m.len() as u64)?;
            w.f64s(&p.m)?;
            w.f64s(&p.v)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut BinReader<R>, cfg: OptimizerConfig) -> Result<Self> {
        let steps = r.u64()?;
        let expanded_stage = r.u64()? as usize;
        let n_ages = r.count(1 << 20, "stage ages")?;
        let ages = (0..n_ages).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = r.count(1 << 20, "parameter buffers")?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = r.u64()? as usize;
            let code = r.u32()?;
            let kind = ParamKind::from_code(code)
                .ok_or_else(|| r.error(format!("unknown parameter kind {code}")))?;
            let len = r.count(1 << 32, "buffer length")?;
            let m = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let v = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(ParamState {
                id: ParamId { layer, kind },
                m,
                v,
            });
        }
        Ok(Self {
            cfg,
            params,
            ages,
            steps,
            expanded_stage,
        })
    }
}

/// Weight-stage factors for every weighted layer: `factors[layer][stage]`.
fn stage_factors(net: &Network, cfg: &OptimizerConfig) -> Result<Vec<Vec<f64>>> {
    let partition: &StagePartition = net.partition();
    let stages = partition.num_stages();
    let mut out = vec![vec![1.0; stages]; net.layers().len()];
    if matches!(cfg.rate, RateMode::Global | RateMode::Lars) {
        return Ok(out);
    }
    for (i, layer) in net.layers().iter().enumerate() {
        if !layer.spec.kind.has_weights() {
            continue;
        }
        let id = ParamId {
            layer: i,
            kind: ParamKind::Weight,
        };
        let w = &net.param(id).expect("weighted").value;
        let tb = partition
            .get(id)
            .ok_or_else(|| Error::State(format!("no partition for {id:?}")))?;
        let c0 = tb.blocks.first().map_or(1, |b| b.cols.len() * tb.inner);
        let n0 = tb.stage_sum_squares(w, 0).sqrt();
        for (k, slot) in out[i].iter_mut().enumerate() {
            let nk = tb.stage_sum_squares(w, k).sqrt();
            *slot = rate_factor(nk, n0, layer.spec.role, k, c0, cfg.rate, cfg.output)?;
        }
    }
    Ok(out)
}

fn param_factor(factors: &[Vec<f64>], net: &Network, id: ParamId, stage: usize) -> f64 {
    match id.kind {
        ParamKind::Weight | ParamKind::Bias
            if net.layer(id.layer).spec.kind != LayerKind::BatchNorm =>
        {
            factors[id.layer][stage]
        }
        _ => 1.0,
    }
}

/// Applies `f(stage, range)` to each stage block of a tensor.
fn for_blocks(tb: &TensorBlocks, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let stages: Vec<usize> = tb.stages().collect();
    let mut seen = Vec::new();
    for k in stages {
        if seen.contains(&k) {
            continue;
        }
        seen.push(k);
        for r in tb.stage_ranges(k) {
            f(k, r);
        }
    }
}

/// SGD with momentum and L2 weight decay; each stage block moves with rate
/// `lr × factor`. Returns the realized factors of weighted layers.
pub fn sgd_ra_step(
    net: &mut Network,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<Vec<RateTrace>> {
    state.check(net)?;
    let cfg = state.cfg;
    let factors = stage_factors(net, &cfg)?;
    let partition = net.partition().clone();
    for ps in &mut state.params {
        let id = ps.id;
        let tb = partition
            .get(id)
            .ok_or_else(|| Error::State(format!("no partition for {id:?}")))?;
        let fac: Vec<f64> = (0..factors[0].len())
            .map(|k| param_factor(&factors, net, id, k))
            .collect();
        let p = net.param_mut(id).expect("listed");
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for_blocks(tb, |k, r| {
            let rate = lr * fac[k];
            for j in r {
                let d = g[j] + cfg.weight_decay * w[j];
                ps.m[j] = cfg.momentum * ps.m[j] + d;
                w[j] -= rate * ps.m[j];
            }
        });
    }
    finish_step(state);
    let mut trace = Vec::new();
    if matches!(cfg.rate, RateMode::StageNorm | RateMode::StageMax) {
        for (layer, f) in factors.iter().enumerate() {
            if net.layer(layer).spec.kind.has_weights() {
                for (stage, &factor) in f.iter().enumerate() {
                    trace.push(RateTrace {
                        layer,
                        stage,
                        factor,
                    });
                }
            }
        }
    }
    Ok(trace)
}

fn finish_step(state: &mut OptimizerState) {
    state.steps += 1;
    for a in &mut state.ages {
        *a += 1;
    }
}

/// Adam with L2 weight decay. Under stage-aware rate modes each stage block
/// bias-corrects with its own age; under [`RateMode::Global`] every block
/// uses the global step count.
pub fn adam_ra_step(net: &mut Network, state: &mut OptimizerState, lr: f64) -> Result<()> {
    state.check(net)?;
    let cfg = state.cfg;
    let partition = net.partition().clone();
    let stage_aware = cfg.rate != RateMode::Global;
    let ages: Vec<u64> = state
        .ages
        .iter()
        .map(|&a| if stage_aware { a + 1 } else { state.steps + 1 })
        .collect();
    for ps in &mut state.params {
        let tb = partition
            .get(ps.id)
            .ok_or_else(|| Error::State(format!("no partition for {:?}", ps.id)))?;
        let p = net.param_mut(ps.id).expect("listed");
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for_blocks(tb, |k, r| {
            let t = ages[k] as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for j in r {
                let d = g[j] + cfg.weight_decay * w[j];
                ps.m[j] = cfg.beta1 * ps.m[j] + (1.0 - cfg.beta1) * d;
                ps.v[j] = cfg.beta2 * ps.v[j] + (1.0 - cfg.beta2) * d * d;
                let mh = ps.m[j] / bc1;
                let vh = ps.v[j] / bc2;
                w[j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        });
    }
    finish_step(state);
    Ok(())
}

/// AvaGrad: `m ← β1 m + (1−β1) g`, `η = 1/(√v_prev + ε)`, step
/// `lr · η/‖η/√d‖₂ ⊙ m`, then `v ← β2 v + (1−β2) g²`. Stage-aware modes
/// normalize each stage's parameters by their own count `d`; global mode
/// normalizes over the whole model.
pub fn avagrad_ra_step(net: &mut Network, state: &mut OptimizerState, lr: f64) -> Result<()> {
    state.check(net)?;
    let cfg = state.cfg;
    let partition = net.partition().clone();
    let stages = state.ages.len();
    let group = |k: usize| if cfg.rate == RateMode::Global { 0 } else { k };
    // per group: sum of η² and parameter count
    let mut sums = vec![(0.0f64, 0usize); stages];
    for ps in &state.params {
        let tb = partition
            .get(ps.id)
            .ok_or_else(|| Error::State(format!("no partition for {:?}", ps.id)))?;
        for_blocks(tb, |k, r| {
            let s = &mut sums[group(k)];
            for j in r {
                let eta = 1.0 / (ps.v[j].sqrt() + cfg.eps);
                s.0 += eta * eta;
                s.1 += 1;
            }
        });
    }
    // ‖η/√d‖₂ = sqrt(Σ η² / d)
    let norms: Vec<f64> = sums
        .iter()
        .map(|&(s, d)| if d > 0 { (s / d as f64).sqrt() } else { 1.0 })
        .collect();
    for ps in &mut state.params {
        let tb = partition.get(ps.id).expect("checked above");
        let p = net.param_mut(ps.id).expect("listed");
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for_blocks(tb, |k, r| {
            let norm = norms[group(k)];
            for j in r {
                let d = g[j] + cfg.weight_decay * w[j];
                ps.m[j] = cfg.beta1 * ps.m[j] + (1.0 - cfg.beta1) * d;
                let eta = 1.0 / (ps.v[j].sqrt() + cfg.eps);
                w[j] -= lr * eta / norm * ps.m[j];
                ps.v[j] = cfg.beta2 * ps.v[j] + (1.0 - cfg.beta2) * d * d;
            }
        });
    }
    finish_step(state);
    Ok(())
}

/// SGD with momentum where each tensor's rate is `lr · ‖W‖/‖G‖`. A tensor
/// with zero gradient norm is skipped; a zero-norm tensor uses ratio 1.
pub fn lars_step(net: &mut Network, state: &mut OptimizerState, lr: f64) -> Result<()> {
    state.check(net)?;
    let cfg = state.cfg;
    for ps in &mut state.params {
        let p = net.param_mut(ps.id).expect("listed");
        let (w, g) = (p.value.data_mut(), p.grad.data());
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = g
            .iter()
            .zip(w.iter())
            .map(|(g, w)| {
                let d = g + cfg.weight_decay * w;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if gn == 0.0 {
            continue;
        }
        let rate = lr * if wn > 0.0 { wn / gn } else { 1.0 };
        for j in 0..w.len() {
            let d = g[j] + cfg.weight_decay * w[j];
            ps.m[j] = cfg.momentum * ps.m[j] + d;
            w[j] -= rate * ps.m[j];
        }
    }
    finish_step(state);
    Ok(())
}

/// Trust ratio `lr · ‖W‖/‖G‖` used by [`lars_step`]; 0 when `‖G‖ = 0`.
pub fn lars_rate(lr: f64, weight_norm: f64, grad_norm: f64) -> f64 {
    if grad_norm == 0.0 {
        0.0
    } else if weight_norm == 0.0 {
        lr
    } else {
        lr * weight_norm / grad_norm
    }
}

/// Resizes buffers after a growth step. Old entries are copied (`Preserve`)
/// or everything is zeroed (`Reset`); new entries start at zero and the new
/// stage's age at 0. Must be called exactly once per growth step.
pub fn expand_optimizer_state(
    state: &mut OptimizerState,
    report: &GrowthReport,
    net: &Network,
    policy: BufferPolicy,
) -> Result<()> {
    if report.is_noop() {
        return Ok(());
    }
    if report.stage <= state.expanded_stage {
        return Err(Error::State(format!(
            "optimizer state already expanded for stage {}",
            report.stage
        )));
    }
    for d in &report.tensors {
        let ps = state
            .params
            .iter_mut()
            .find(|p| p.id == d.id)
            .ok_or_else(|| Error::State(format!("no buffers for {:?}", d.id)))?;
        ps.m = embed_corner(&ps.m, &d.old_shape, &d.new_shape)?;
        ps.v = embed_corner(&ps.v, &d.old_shape, &d.new_shape)?;
    }
    while state.ages.len() <= report.stage {
        state.ages.push(0);
    }
    if policy == BufferPolicy::Reset {
        for ps in &mut state.params {
            ps.m.iter_mut().for_each(|x| *x = 0.0);
            ps.v.iter_mut().for_each(|x| *x = 0.0);
        }
        state.ages.iter_mut().for_each(|a| *a = 0);
        state.steps = 0;
    }
    state.expanded_stage = report.stage;
    state.check(net)
}

/// Cosine annealing from `base` at epoch 0 to 0 at `total`.
pub fn cosine_lr(epoch: f64, total: f64, base: f64) -> f64 {
    if total <= 0.0 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * epoch / total).cos()) / 2.0
}

#[cfg(test)]
mod tests;
