use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grownet::growth::VtMode;
use grownet::harness::{self, ExperimentConfig, RunOptions};
use grownet::schedule::{
    train_cost_ratio, FlopsModel, GrowthPlan, MobileNetV1Cifar, Resnet20, Vgg11Cifar,
};
use grownet::Error;

#[derive(Parser)]
#[command(
    name = "grownet",
    version,
    about = "Train width-growing networks and account for their cost"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key: value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> grownet::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        base.with_overrides(&self.set)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CostModel {
    Resnet20,
    Vgg11,
    Mobilenetv1,
    /// The architecture named in the config.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum VtArg {
    Standard,
    Transfer,
    Constraint,
}

#[derive(Subcommand)]
enum Command {
    /// Print the growth schedule and its train-cost ratio.
    Plan(ConfigArgs),
    /// Train a config and write metrics, checkpoints and a summary.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, env = "GROWNET_OUT", default_value = "grownet-out")]
        out: PathBuf,
        /// Continue the run checkpointed in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Run the cartesian product of axes over a base config.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `key=v1,v2,...` (repeatable).
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long, env = "GROWNET_OUT", default_value = "grownet-out")]
        out: PathBuf,
    },
    /// Grow a checkpointed network with zero noise and report output drift.
    GrowCheck {
        checkpoint: PathBuf,
        /// Units added per growable layer is twice this.
        #[arg(long, default_value_t = 1)]
        extra: usize,
        #[arg(long, value_enum, default_value = "transfer")]
        vt: VtArg,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train-cost ratio of a schedule on an analytic FLOPs model.
    Cost {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "config")]
        model: CostModel,
        /// Training-set size used to count steps.
        #[arg(long, default_value_t = 50_000)]
        dataset_size: usize,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(harness::exit_code(e) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn execute(command: Command) -> grownet::Result<ExitCode> {
    match command {
        Command::Plan(args) => {
            let cfg = args.load()?;
            let (table, ratio) = harness::plan_report(&cfg)?;
            print!("{table}");
            println!("train_cost_ratio: {ratio:.4}");
        }
        Command::Run {
            cfg,
            out,
            resume,
            max_epochs,
        } => {
            let cfg = if resume {
                ExperimentConfig::default()
            } else {
                cfg.load()?
            };
            match harness::run(&cfg, &out, RunOptions { resume, max_epochs }) {
                Ok(s) => println!(
                    "{}",
                    serde_json::to_string_pretty(&s).expect("serializable")
                ),
                Err(f) => {
                    eprintln!("error at {f}");
                    return Ok(ExitCode::from(harness::exit_code(&f.error) as u8));
                }
            }
        }
        Command::Sweep { cfg, axes, out } => {
            let cfg = cfg.load()?;
            let axes = axes
                .iter()
                .map(|a| harness::parse_axis(a))
                .collect::<grownet::Result<Vec<_>>>()?;
            let rows = harness::sweep(&cfg, &axes, &out)?;
            println!("{} runs written to {}", rows.len(), out.display());
        }
        Command::GrowCheck {
            checkpoint,
            extra,
            vt,
            tolerance,
            seed,
        } => {
            let vt = match vt {
                VtArg::Standard => VtMode::Standard,
                VtArg::Transfer => VtMode::Transfer,
                VtArg::Constraint => VtMode::Constraint,
            };
            let g = harness::grow_check(&checkpoint, extra, vt, seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&g).expect("serializable")
            );
            if g.max_abs_diff_eval.max(g.max_abs_diff_batch_stats) > tolerance {
                eprintln!("outputs moved by more than {tolerance:e}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Cost {
            cfg,
            model,
            dataset_size,
        } => {
            let cfg = cfg.load()?;
            let ratio = match model {
                CostModel::Config => harness::plan_report(&cfg)?.1,
                m => {
                    let flops: Box<dyn FlopsModel> = match m {
                        CostModel::Resnet20 => Box::new(Resnet20 { classes: 10 }),
                        CostModel::Vgg11 => Box::new(Vgg11Cifar { classes: 10 }),
                        _ => Box::new(MobileNetV1Cifar { classes: 10 }),
                    };
                    let plan = GrowthPlan::build(&flops.final_widths(), &cfg.plan_params())?;
                    train_cost_ratio(flops.as_ref(), &plan, dataset_size)
                }
            };
            println!("{ratio:.4}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
