//! The stage loop: grow, expand optimizer state, train for the stage's epochs.

use std::fmt::Write as _;

use super::GrowthPlan;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::growth::{grow_network, GrowthOptions, GrowthReport};
use crate::nn::{accuracy, softmax_cross_entropy, Mode, Network, TRAIN_STEP_FLOPS_MULTIPLIER};
use crate::optim::{cosine_lr, expand_optimizer_state, OptimizerState, RateTrace};
use crate::tensor::{Rng, Tensor};

/// Training data for each stage.
pub trait StageData {
    fn stage_data(&self, stage: usize) -> &Dataset;
}

impl StageData for Dataset {
    fn stage_data(&self, _stage: usize) -> &Dataset {
        self
    }
}

impl StageData for [Dataset] {
    fn stage_data(&self, stage: usize) -> &Dataset {
        &self[stage.min(self.len() - 1)]
    }
}

impl StageData for Vec<Dataset> {
    fn stage_data(&self, stage: usize) -> &Dataset {
        self.as_slice().stage_data(stage)
    }
}

/// Where in a plan a loop is. `epoch` is the next epoch of `stage` to run;
/// epoch 0 of a stage after the first means its growth step is still pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopPosition {
    pub stage: usize,
    pub epoch: usize,
}

/// Everything besides the network and optimizer needed to resume a loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub position: LoopPosition,
    pub global_epoch: usize,
    pub step: u64,
    pub flops: f64,
    pub shuffle_rng: (u64, u64),
    pub growth_rng: (u64, u64),
}

impl LoopState {
    pub fn start(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            position: LoopPosition { stage: 0, epoch: 0 },
            global_epoch: 0,
            step: 0,
            flops: 0.0,
            shuffle_rng: root.fork(1).state(),
            growth_rng: root.fork(2).state(),
        }
    }

    pub fn is_finished(&self, plan: &GrowthPlan) -> bool {
        self.position.stage >= plan.num_stages()
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig<'a> {
    /// Base learning rate, cosine-annealed over all epochs.
    pub lr: f64,
    pub growth: GrowthOptions,
    pub seed: u64,
    pub eval: Option<&'a Dataset>,
    /// Continue from a saved state instead of the start.
    pub resume: Option<LoopState>,
    /// Stop after this many epochs in this call.
    pub max_epochs: Option<usize>,
}

impl<'a> LoopConfig<'a> {
    pub fn new(lr: f64, seed: u64) -> Self {
        Self {
            lr,
            growth: GrowthOptions::default(),
            seed,
            eval: None,
            resume: None,
            max_epochs: None,
        }
    }
}

/// Context of a single update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub stage: usize,
    pub epoch: usize,
    /// Updates completed before this one.
    pub step: u64,
    /// Index of this update within its stage.
    pub stage_step: u64,
    pub stage_steps: u64,
    pub lr: f64,
}

/// One row of training metrics, written at the end of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub stage: usize,
    /// Global epoch index.
    pub epoch: usize,
    /// Updates completed so far.
    pub step: u64,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub lr: f64,
    pub widths: Vec<usize>,
    pub cumulative_flops: f64,
    /// Mean rate factor per stage block at the epoch's last update.
    pub rate_factors: Vec<f64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "stage,epoch,step,train_loss,eval_accuracy,lr,cumulative_flops,widths,rate_factors";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let join = |v: &mut String, xs: Vec<String>| v.push_str(&xs.join(";"));
        write!(
            s,
            "{},{},{},{},",
            self.stage, self.epoch, self.step, self.train_loss
        )
        .unwrap();
        if let Some(a) = self.eval_accuracy {
            write!(s, "{a}").unwrap();
        }
        write!(s, ",{},{},", self.lr, self.cumulative_flops).unwrap();
        join(&mut s, self.widths.iter().map(|w| w.to_string()).collect());
        s.push(',');
        join(
            &mut s,
            self.rate_factors.iter().map(|f| f.to_string()).collect(),
        );
        s
    }

    /// Inverse of [`Self::csv_row`].
    pub fn parse_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("metrics row has {} fields, expected 9", f.len()),
            });
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                offset: 0,
                msg: format!("bad metrics field `{s}`"),
            })
        }
        fn list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
            if s.is_empty() {
                Ok(Vec::new())
            } else {
                s.split(';').map(num).collect()
            }
        }
        Ok(Self {
            stage: num(f[0])?,
            epoch: num(f[1])?,
            step: num(f[2])?,
            train_loss: num(f[3])?,
            eval_accuracy: if f[4].is_empty() {
                None
            } else {
                Some(num(f[4])?)
            },
            lr: num(f[5])?,
            cumulative_flops: num(f[6])?,
            widths: list(f[7])?,
            rate_factors: list(f[8])?,
        })
    }
}

/// Callbacks invoked by [`run_stage_loop`]. All default to doing nothing.
pub trait StageHooks {
    /// Before growing into `stage`.
    fn before_growth(&mut self, _stage: usize, _net: &Network) -> Result<()> {
        Ok(())
    }

    /// After growing into `stage` and expanding the optimizer state.
    fn after_growth(
        &mut self,
        _stage: usize,
        _net: &Network,
        _report: &GrowthReport,
    ) -> Result<()> {
        Ok(())
    }

    /// After backward, before the optimizer update. May rewrite gradients.
    fn transform_gradients(&mut self, _net: &mut Network, _info: &StepInfo) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _info: &StepInfo, _loss: f64, _traces: &[RateTrace]) -> Result<()> {
        Ok(())
    }

    /// After each epoch; `state` resumes exactly after this epoch.
    fn on_epoch(
        &mut self,
        _record: &MetricsRecord,
        _net: &Network,
        _opt: &OptimizerState,
        _state: &LoopState,
    ) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl StageHooks for NoHooks {}

/// Mean cross-entropy of a batch without touching the network.
pub fn batch_loss(net: &Network, x: &Tensor, y: &[usize], mode: Mode) -> Result<f64> {
    let (logits, _) = net.forward_frozen(x, mode)?;
    Ok(softmax_cross_entropy(&logits, y)?.0)
}

/// Eval-mode accuracy over a dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let mut correct = 0.0;
    for (x, y) in data.batches(256) {
        let logits = net.predict(&x)?;
        correct += accuracy(&logits, &y) * y.len() as f64;
    }
    Ok(correct / data.len().max(1) as f64)
}

/// Runs `plan` on `net`: for every stage, grows to the stage's widths (after
/// the first), expands the optimizer state, then takes
/// `epochs[t] * (len / batches[t])` updates on shuffled batches.
/// Returns one record per epoch run in this call.
pub fn run_stage_loop(
    plan: &GrowthPlan,
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &dyn StageData,
    cfg: &LoopConfig<'_>,
    hooks: &mut dyn StageHooks,
) -> Result<Vec<MetricsRecord>> {
    plan.validate()?;
    let mut st = cfg
        .resume
        .clone()
        .unwrap_or_else(|| LoopState::start(cfg.seed));
    let total_epochs = plan.total_epochs() as f64;
    let mut records = Vec::new();
    if st.is_finished(plan) {
        return Ok(records);
    }
    let pending = st.position.stage > 0 && st.position.epoch == 0;
    let expected = plan.stage_widths(st.position.stage - usize::from(pending));
    if net.widths() != expected {
        return Err(Error::arg(format!(
            "network widths {:?} do not match the plan's {:?}",
            net.widths(),
            expected
        )));
    }
    let mut shuffle_rng = Rng::from_state(st.shuffle_rng.0, st.shuffle_rng.1);
    let mut growth_rng = Rng::from_state(st.growth_rng.0, st.growth_rng.1);
    let mut epochs_run = 0;

    while !st.is_finished(plan) {
        if cfg.max_epochs.is_some_and(|m| epochs_run >= m) {
            break;
        }
        let t = st.position.stage;
        if t > 0 && st.position.epoch == 0 {
            hooks.before_growth(t, net)?;
            let report = grow_network(net, &plan.stage_widths(t), &mut growth_rng, &cfg.growth)?;
            let policy = opt.cfg.policy;
            expand_optimizer_state(opt, &report, net, policy)?;
            hooks.after_growth(t, net, &report)?;
        }
        let stage_data = data.stage_data(t);
        let batch = plan.batches[t];
        let iters = stage_data.len() / batch;
        if iters == 0 {
            return Err(Error::arg(format!(
                "stage {t}: batch size {batch} exceeds dataset size {}",
                stage_data.len()
            )));
        }
        let stage_steps = (plan.epochs[t] * iters) as u64;
        let step_flops = (TRAIN_STEP_FLOPS_MULTIPLIER * net.forward_flops(batch)) as f64;
        let lr = cosine_lr(st.global_epoch as f64, total_epochs, cfg.lr);

        let mut order: Vec<usize> = (0..stage_data.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut last_traces = Vec::new();
        for it in 0..iters {
            let info = StepInfo {
                stage: t,
                epoch: st.global_epoch,
                step: st.step,
                stage_step: (st.position.epoch * iters + it) as u64,
                stage_steps,
                lr,
            };
            let (x, y) = stage_data.gather(&order[it * batch..(it + 1) * batch]);
            let (logits, cache) = net.forward(&x, Mode::Train)?;
            let (loss, dy) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at stage {t}, epoch {}, step {}",
                    st.global_epoch, st.step
                )));
            }
            net.backward(&cache, &dy)?;
            hooks.transform_gradients(net, &info)?;
            last_traces = opt.step(net, lr)?;
            if let Some(id) = net
                .param_ids()
                .into_iter()
                .find(|&id| !net.param(id).expect("listed").value.is_finite())
            {
                return Err(Error::Numeric(format!(
                    "non-finite {:?} of layer {} after update at stage {t}, epoch {}, step {}",
                    id.kind, id.layer, st.global_epoch, st.step
                )));
            }
            hooks.on_step(&info, loss, &last_traces)?;
            loss_sum += loss;
            st.step += 1;
            st.flops += step_flops;
        }

        let record = MetricsRecord {
            stage: t,
            epoch: st.global_epoch,
            step: st.step,
            train_loss: loss_sum / iters as f64,
            eval_accuracy: cfg.eval.map(|d| evaluate(net, d)).transpose()?,
            lr,
            widths: net.widths(),
            cumulative_flops: st.flops,
            rate_factors: mean_factors(&last_traces),
        };
        st.global_epoch += 1;
        st.position.epoch += 1;
        if st.position.epoch == plan.epochs[t] {
            st.position = LoopPosition {
                stage: t + 1,
                epoch: 0,
            };
        }
        st.shuffle_rng = shuffle_rng.state();
        st.growth_rng = growth_rng.state();
        hooks.on_epoch(&record, net, opt, &st)?;
        records.push(record);
        epochs_run += 1;
    }
    Ok(records)
}

fn mean_factors(traces: &[RateTrace]) -> Vec<f64> {
    let stages = traces.iter().map(|r| r.stage + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; stages];
    let mut n = vec![0usize; stages];
    for r in traces {
        sum[r.stage] += r.factor;
        n[r.stage] += 1;
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}
