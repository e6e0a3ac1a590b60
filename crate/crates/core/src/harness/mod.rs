//! Experiment runner: configs, datasets, metrics files, checkpoints, sweeps.

pub mod config;
pub mod dataset;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use config::{Ablation, Arch, CheckpointEvery, DataSource, ExperimentConfig};
pub use dataset::load_dataset;

use crate::binio::{BinReader, BinWriter};
use crate::continual::{run_incremental, IncrementalConfig, StreamConfig, Variant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::growth::{grow_network, GrowthOptions, VtMode};
use crate::nn::{arch, read_network, write_network, Mode, Network};
use crate::optim::{OptimizerState, RateTrace};
use crate::schedule::{
    run_stage_loop, train_cost_ratio, GrowthPlan, LoopConfig, LoopPosition, LoopState,
    MetricsRecord, NetworkFlops, StageHooks, StepInfo, WidthPolicy,
};
use crate::tensor::{Rng, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.net";
pub const STATE_FILE: &str = "checkpoint.state";

const RESNET_BLOCKS: usize = 2;
const CNN_POOLS: [usize; 4] = [2, 2, 2, 1];

/// Process exit status for an error: 2 for configuration errors, 3 for
/// numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

/// Number of growable layers and how config widths map onto them.
fn expand_widths(cfg: &ExperimentConfig, per_config: &[usize]) -> Vec<usize> {
    match cfg.arch {
        Arch::Cnn4 | Arch::Mlp => per_config.to_vec(),
        Arch::Resnet => vec![per_config[0]; 1 + 2 * RESNET_BLOCKS],
        Arch::ResidualMlp => vec![per_config[0]; 3],
    }
}

/// Builds the configured architecture at the given growable-layer widths.
pub fn build_network(
    cfg: &ExperimentConfig,
    widths: &[usize],
    sample_shape: &[usize],
    rng: &mut Rng,
) -> Result<Network> {
    let image = || -> Result<(usize, usize)> {
        match sample_shape {
            [c, h, w] if h == w => Ok((*c, *h)),
            _ => Err(Error::config(
                "arch",
                format!("needs square images, data has shape {sample_shape:?}"),
            )),
        }
    };
    let flat: usize = sample_shape.iter().product();
    match cfg.arch {
        Arch::Cnn4 => {
            let (c, hw) = image()?;
            arch::cnn(c, hw, widths, &CNN_POOLS, cfg.classes, rng)
        }
        Arch::Resnet => {
            let (c, hw) = image()?;
            arch::resnet_small(c, hw, widths[0], RESNET_BLOCKS, cfg.classes, rng)
        }
        Arch::Mlp => arch::mlp(flat, widths, cfg.classes, rng),
        Arch::ResidualMlp => arch::residual_mlp(flat, widths[0], cfg.classes, rng),
    }
}

fn flatten_if_needed(cfg: &ExperimentConfig, d: Dataset) -> Result<Dataset> {
    match cfg.arch {
        Arch::Mlp | Arch::ResidualMlp if d.x.rank() > 2 => {
            let n = d.len();
            let f = d.x.len() / n.max(1);
            Ok(Dataset {
                x: d.x.reshape(&[n, f])?,
                ..d
            })
        }
        _ => Ok(d),
    }
}

/// The growth plan of a config, for data samples of `sample_shape`.
pub fn build_plan(cfg: &ExperimentConfig, sample_shape: &[usize]) -> Result<GrowthPlan> {
    let finals = expand_widths(cfg, &cfg.widths);
    let mut params = cfg.plan_params();
    if let WidthPolicy::Explicit(c0) = &params.policy {
        if c0.len() != cfg.widths.len() {
            return Err(Error::config(
                "c0",
                format!("need {} initial widths", cfg.widths.len()),
            ));
        }
        params.policy = WidthPolicy::Explicit(expand_widths(cfg, c0));
    }
    // Sanity check that the widths fit the architecture.
    build_network(cfg, &finals, sample_shape, &mut Rng::new(0))?;
    GrowthPlan::build(&finals, &params).map_err(|e| match e {
        Error::Argument(m) => Error::config("widths", m),
        o => o,
    })
}

/// FLOPs model of the configured architecture.
pub fn flops_model<'a>(
    cfg: &'a ExperimentConfig,
    sample_shape: &'a [usize],
) -> NetworkFlops<impl Fn(&[usize]) -> Result<Network> + 'a> {
    let finals = expand_widths(cfg, &cfg.widths);
    NetworkFlops::new(finals, move |w: &[usize]| {
        build_network(cfg, w, sample_shape, &mut Rng::new(0))
    })
}

/// Plan table plus train-cost ratio for a config, without training.
pub fn plan_report(cfg: &ExperimentConfig) -> Result<(String, f64)> {
    let (train, _) = load_dataset(cfg)?;
    let train = flatten_if_needed(cfg, train)?;
    let shape = train.sample_shape().to_vec();
    let plan = build_plan(cfg, &shape)?;
    let model = flops_model(cfg, &shape);
    Ok((
        plan.table(&model, train.len()),
        train_cost_ratio(&model, &plan, train.len()),
    ))
}

/// Machine-readable result of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_train_loss: f64,
    pub final_eval_accuracy: Option<f64>,
    pub total_train_flops: f64,
    pub train_cost_ratio: f64,
    pub steps: u64,
    pub epochs: usize,
    pub stages: usize,
    pub final_widths: Vec<usize>,
}

/// A failed run together with where it stopped.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub stage: usize,
    pub step: u64,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stage {}, step {}: {}",
            self.stage, self.step, self.error
        )
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            stage: 0,
            step: 0,
        }
    }
}

struct RunHooks {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    start: Instant,
    every: CheckpointEvery,
    rows: usize,
    stage: usize,
    step: u64,
    last: Option<MetricsRecord>,
}

impl StageHooks for RunHooks {
    fn on_step(&mut self, info: &StepInfo, _loss: f64, _t: &[RateTrace]) -> Result<()> {
        self.stage = info.stage;
        self.step = info.step + 1;
        Ok(())
    }

    fn on_epoch(
        &mut self,
        r: &MetricsRecord,
        net: &Network,
        opt: &OptimizerState,
        st: &LoopState,
    ) -> Result<()> {
        writeln!(self.metrics, "{}", r.csv_row())?;
        self.metrics.flush()?;
        writeln!(
            self.timing,
            "{},{}",
            r.epoch,
            self.start.elapsed().as_secs_f64()
        )?;
        self.timing.flush()?;
        self.rows += 1;
        self.last = Some(r.clone());
        let boundary = st.position.epoch == 0;
        if self.every == CheckpointEvery::Epoch
            || (self.every == CheckpointEvery::Stage && boundary)
        {
            save_checkpoint(&self.dir, net, opt, st, self.rows)?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

const STATE_MAGIC: &[u8; 4] = b"GRST";

/// Writes the network and, in a sidecar, the optimizer and loop state.
pub fn save_checkpoint(
    dir: &Path,
    net: &Network,
    opt: &OptimizerState,
    st: &LoopState,
    rows: usize,
) -> Result<()> {
    let mut w = BinWriter::new(Vec::new());
    write_network(&mut w, net)?;
    let net_bytes = w.into_inner();
    let mut w = BinWriter::new(Vec::new());
    w.bytes(STATE_MAGIC)?;
    for v in [st.position.stage, st.position.epoch, st.global_epoch, rows] {
        w.u64(v as u64)?;
    }
    w.u64(st.step)?;
    w.f64(st.flops)?;
    for v in [
        st.shuffle_rng.0,
        st.shuffle_rng.1,
        st.growth_rng.0,
        st.growth_rng.1,
    ] {
        w.u64(v)?;
    }
    opt.write(&mut w)?;
    // The state file is renamed last: a checkpoint is complete once it exists.
    write_atomic(&dir.join(CHECKPOINT_FILE), &net_bytes)?;
    write_atomic(&dir.join(STATE_FILE), &w.into_inner())
}

/// Checkpointed run state: network, optimizer, loop state and metrics row count.
pub fn load_checkpoint(
    dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<(Network, OptimizerState, LoopState, usize)> {
    let net_bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
    let net = read_network(&mut BinReader::new(net_bytes.as_slice()))?;
    let bytes = fs::read(dir.join(STATE_FILE))?;
    let mut r = BinReader::new(bytes.as_slice());
    if r.bytes(4)? != STATE_MAGIC {
        return Err(r.error("not a training-state file"));
    }
    let mut v = [0usize; 4];
    for x in &mut v {
        *x = r.count(usize::MAX, "loop counter")?;
    }
    let step = r.u64()?;
    let flops = r.f64()?;
    let mut rngs = [0u64; 4];
    for x in &mut rngs {
        *x = r.u64()?;
    }
    let opt = OptimizerState::read(&mut r, cfg.optimizer_config())?;
    let st = LoopState {
        position: LoopPosition {
            stage: v[0],
            epoch: v[1],
        },
        global_epoch: v[2],
        step,
        flops,
        shuffle_rng: (rngs[0], rngs[1]),
        growth_rng: (rngs[2], rngs[3]),
    };
    Ok((net, opt, st, v[3]))
}

/// Keeps the header and first `rows` data lines of a text file.
fn truncate_rows(path: &Path, rows: usize) -> Result<Option<String>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().take(rows + 1).collect();
    let mut out = lines.join("\n");
    out.push('\n');
    fs::write(path, out)?;
    Ok(lines.get(rows).filter(|_| rows > 0).map(|s| s.to_string()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the checkpoint and config echo in the output directory.
    pub resume: bool,
    /// Stop after this many epochs (the summary is written only for finished runs).
    pub max_epochs: Option<usize>,
}

/// Runs a config end to end, writing into `dir`: the config echo, metrics
/// CSV, timing CSV, checkpoints and, once finished, a JSON summary.
pub fn run(
    cfg: &ExperimentConfig,
    dir: &Path,
    opts: RunOptions,
) -> std::result::Result<RunSummary, RunFailure> {
    let resume = opts.resume;
    fs::create_dir_all(dir).map_err(Error::from)?;
    let cfg = if resume {
        ExperimentConfig::load(&dir.join(CONFIG_ECHO_FILE))?
    } else {
        fs::write(dir.join(CONFIG_ECHO_FILE), cfg.echo()).map_err(Error::from)?;
        cfg.clone()
    };
    let (train, eval) = load_dataset(&cfg)?;
    let train = flatten_if_needed(&cfg, train)?;
    let eval = flatten_if_needed(&cfg, eval)?;
    let shape = train.sample_shape().to_vec();
    let plan = build_plan(&cfg, &shape)?;

    let (mut net, mut opt, start, rows, last) = if resume {
        let (net, opt, st, rows) = load_checkpoint(dir, &cfg)?;
        let last = truncate_rows(&dir.join(METRICS_FILE), rows)?
            .map(|l| MetricsRecord::parse_csv_row(&l))
            .transpose()?;
        truncate_rows(&dir.join(TIMING_FILE), rows)?;
        (net, opt, Some(st), rows, last)
    } else {
        let net = build_network(
            &cfg,
            &plan.stage_widths(0),
            &shape,
            &mut Rng::new(cfg.seed).fork(3),
        )?;
        let opt = OptimizerState::new(&net, cfg.optimizer_config());
        fs::write(
            dir.join(METRICS_FILE),
            format!("{}\n", MetricsRecord::CSV_HEADER),
        )
        .map_err(Error::from)?;
        fs::write(dir.join(TIMING_FILE), "epoch,wall_seconds\n").map_err(Error::from)?;
        (net, opt, None, 0, None)
    };
    let open = |name: &str| -> Result<BufWriter<File>> {
        Ok(BufWriter::new(
            OpenOptions::new().append(true).open(dir.join(name))?,
        ))
    };
    let mut hooks = RunHooks {
        dir: dir.to_path_buf(),
        metrics: open(METRICS_FILE)?,
        timing: open(TIMING_FILE)?,
        start: Instant::now(),
        every: cfg.checkpoint,
        rows,
        stage: start.as_ref().map_or(0, |s| s.position.stage),
        step: start.as_ref().map_or(0, |s| s.step),
        last,
    };
    let mut loop_cfg = LoopConfig::new(cfg.lr, cfg.seed);
    loop_cfg.growth = GrowthOptions {
        vt: cfg.effective_vt(),
        noise_scale: cfg.noise_scale,
        strategy: cfg.strategy,
    };
    loop_cfg.eval = if eval.is_empty() { None } else { Some(&eval) };
    loop_cfg.resume = start;
    loop_cfg.max_epochs = opts.max_epochs;

    let incremental = cfg.stream != "full" || cfg.variant == Variant::DynamicOsgd;
    let result = if incremental {
        let inc = IncrementalConfig {
            stream: StreamConfig {
                mode: cfg.stream_mode(),
                seed: cfg.seed,
            },
            variant: cfg.variant,
            lambda: cfg.lambda,
            per_tensor: cfg.osgd_per_tensor,
        };
        run_incremental(
            &plan, &mut net, &mut opt, &train, &inc, &loop_cfg, &mut hooks,
        )
        .map(|_| ())
    } else {
        run_stage_loop(&plan, &mut net, &mut opt, &train, &loop_cfg, &mut hooks).map(|_| ())
    };
    if let Err(error) = result {
        return Err(RunFailure {
            error,
            stage: hooks.stage,
            step: hooks.step,
        });
    }
    let last = hooks
        .last
        .clone()
        .ok_or_else(|| Error::State("run produced no metrics".into()))?;
    let model = flops_model(&cfg, &shape);
    let summary = RunSummary {
        final_train_loss: last.train_loss,
        final_eval_accuracy: last.eval_accuracy,
        total_train_flops: last.cumulative_flops,
        train_cost_ratio: train_cost_ratio(&model, &plan, train.len()),
        steps: last.step,
        epochs: last.epoch + 1,
        stages: plan.num_stages(),
        final_widths: last.widths.clone(),
    };
    let finished = last.epoch + 1 == plan.total_epochs();
    if finished {
        let json =
            serde_json::to_string_pretty(&summary).map_err(|e| Error::State(e.to_string()))?;
        fs::write(dir.join(SUMMARY_FILE), json + "\n").map_err(Error::from)?;
    }
    Ok(summary)
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: usize,
    pub values: Vec<String>,
    pub summary: RunSummary,
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "axis must look like key=v1,v2,..."))?;
    let key = k.trim().to_string();
    if !config::KEYS.contains(&key.as_str()) {
        return Err(Error::config(&key, "unknown key"));
    }
    let values: Vec<String> = v
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::config(&key, "axis needs at least one value"));
    }
    Ok((key, values))
}

/// Runs the cartesian product of `axes` over `base` (points in parallel),
/// each in `dir/point-NNN`. Writes `sweep.csv` in product order and
/// `pareto.csv` sorted by train cost with a non-dominated flag.
pub fn sweep(
    base: &ExperimentConfig,
    axes: &[(String, Vec<String>)],
    dir: &Path,
) -> Result<Vec<SweepRow>> {
    for (k, _) in axes {
        if !config::KEYS.contains(&k.as_str()) {
            return Err(Error::config(k, "unknown key"));
        }
    }
    let mut points: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    let configs = points
        .iter()
        .map(|p| {
            let sets: Vec<String> = axes
                .iter()
                .zip(p)
                .map(|((k, _), v)| format!("{k}={v}"))
                .collect();
            base.clone().with_overrides(&sets)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir)?;
    let rows = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let summary = run(c, &dir.join(format!("point-{i:03}")), RunOptions::default())
                .map_err(|f| f.error)?;
            Ok(SweepRow {
                point: i,
                values: points[i].clone(),
                summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let header: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    let line = |r: &SweepRow| {
        format!(
            "{},{},{},{},{}",
            r.point,
            r.values.join(","),
            r.summary
                .final_eval_accuracy
                .map_or(String::new(), |a| a.to_string()),
            r.summary.final_train_loss,
            r.summary.train_cost_ratio
        )
    };
    let head = format!(
        "point,{},final_eval_accuracy,final_train_loss,train_cost_ratio",
        header.join(",")
    );
    let mut out = format!("{head}\n");
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    fs::write(dir.join("sweep.csv"), out)?;

    let mut by_cost: Vec<&SweepRow> = rows.iter().collect();
    by_cost.sort_by(|a, b| {
        a.summary
            .train_cost_ratio
            .total_cmp(&b.summary.train_cost_ratio)
            .then(a.point.cmp(&b.point))
    });
    let score = |r: &SweepRow| {
        r.summary
            .final_eval_accuracy
            .unwrap_or(-r.summary.final_train_loss)
    };
    let mut best = f64::NEG_INFINITY;
    let mut out = format!("{head},pareto\n");
    for r in by_cost {
        let s = score(r);
        let front = s > best;
        best = best.max(s);
        out.push_str(&format!("{},{}\n", line(r), u8::from(front)));
    }
    fs::write(dir.join("pareto.csv"), out)?;
    Ok(rows)
}

/// Output of [`grow_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowCheck {
    pub old_widths: Vec<usize>,
    pub new_widths: Vec<usize>,
    pub max_abs_diff_eval: f64,
    pub max_abs_diff_batch_stats: f64,
}

/// Grows a checkpointed network by `extra` units per growable layer with
/// zero noise and measures how far its outputs move on random inputs.
pub fn grow_check(path: &Path, extra: usize, vt: VtMode, seed: u64) -> Result<GrowCheck> {
    let bytes = fs::read(path)?;
    let mut net = read_network(&mut BinReader::new(bytes.as_slice()))?;
    let mut rng = Rng::new(seed);
    let mut shape = vec![8];
    shape.extend_from_slice(net.input_shape());
    let x = Tensor::normal(&mut rng, &shape, 0.0, 1.0)?;
    let before_eval = net.predict(&x)?;
    let before_batch = net.forward_frozen(&x, Mode::BatchStats)?.0;
    let old_widths = net.widths();
    let targets: Vec<usize> = old_widths.iter().map(|w| w + 2 * extra).collect();
    let opts = GrowthOptions {
        vt,
        noise_scale: 0.0,
        ..GrowthOptions::default()
    };
    grow_network(&mut net, &targets, &mut rng, &opts)?;
    Ok(GrowCheck {
        old_widths,
        new_widths: net.widths(),
        max_abs_diff_eval: net.predict(&x)?.max_abs_diff(&before_eval)?,
        max_abs_diff_batch_stats: net
            .forward_frozen(&x, Mode::BatchStats)?
            .0
            .max_abs_diff(&before_batch)?,
    })
}
