//! Experiment configuration: flat `key: value` text, `#` comments.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::continual::{LambdaShape, StreamMode, Variant};
use crate::error::{Error, Result};
use crate::growth::{Strategy, VtMode};
use crate::optim::{BufferPolicy, OptimizerConfig, OptimizerKind, OutputComposition, RateMode};
use crate::schedule::{PlanParams, WidthPolicy};

/// Every key accepted in a config file, in echo order.
pub const KEYS: &[&str] = &[
    "arch",
    "widths",
    "classes",
    "stages",
    "p_c",
    "p_t",
    "p_b",
    "t0",
    "t_total",
    "b_base",
    "c0_policy",
    "c0",
    "optimizer",
    "lr",
    "momentum",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "rate",
    "output_rate",
    "buffers",
    "ablation",
    "vt",
    "strategy",
    "noise_scale",
    "dataset",
    "dataset_size",
    "eval_fraction",
    "image_size",
    "data_noise",
    "seed",
    "stream",
    "stream_classes",
    "stream_fractions",
    "variant",
    "lambda",
    "osgd_per_tensor",
    "checkpoint",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Cnn4,
    Mlp,
    Resnet,
    ResidualMlp,
}

impl Arch {
    fn name(self) -> &'static str {
        match self {
            Arch::Cnn4 => "cnn4",
            Arch::Mlp => "mlp",
            Arch::Resnet => "resnet",
            Arch::ResidualMlp => "residual-mlp",
        }
    }
}

/// Ablation variants: which of variance transfer and rate adaptation are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Use the `vt` and `rate` keys as given.
    Custom,
    Growing,
    Vt,
    Ra,
    Full,
}

impl Ablation {
    fn name(self) -> &'static str {
        match self {
            Ablation::Custom => "custom",
            Ablation::Growing => "growing",
            Ablation::Vt => "vt",
            Ablation::Ra => "ra",
            Ablation::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointEvery {
    Never,
    Stage,
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    SyntheticImage,
    Synthetic2d,
    Csv(String),
    Idx { images: String, labels: String },
}

impl Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::SyntheticImage => write!(f, "synthetic-image"),
            DataSource::Synthetic2d => write!(f, "synthetic-2d"),
            DataSource::Csv(p) => write!(f, "csv:{p}"),
            DataSource::Idx { images, labels } => write!(f, "idx:{images},{labels}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: Arch,
    /// Final widths; one per growable layer (`cnn4`, `mlp`) or a single
    /// width shared by all layers (`resnet`, `residual-mlp`).
    pub widths: Vec<usize>,
    pub classes: usize,
    pub stages: usize,
    pub p_c: f64,
    pub p_t: f64,
    pub p_b: f64,
    pub t0: usize,
    pub t_total: usize,
    pub b_base: usize,
    pub c0_policy: String,
    pub c0: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rate: RateMode,
    pub output_rate: OutputComposition,
    /// `None` picks the optimizer's default policy.
    pub buffers: Option<BufferPolicy>,
    pub ablation: Ablation,
    pub vt: VtMode,
    pub strategy: Strategy,
    pub noise_scale: f64,
    pub dataset: DataSource,
    pub dataset_size: usize,
    pub eval_fraction: f64,
    pub image_size: usize,
    pub data_noise: f64,
    pub seed: u64,
    pub stream: String,
    /// Initial classes and classes added per stage.
    pub stream_classes: Vec<usize>,
    pub stream_fractions: Vec<f64>,
    pub variant: Variant,
    pub lambda: LambdaShape,
    pub osgd_per_tensor: bool,
    pub checkpoint: CheckpointEvery,
    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Cnn4,
            widths: vec![16, 32, 64, 128],
            classes: 10,
            stages: 3,
            p_c: 1.0,
            p_t: 0.0,
            p_b: 0.0,
            t0: 4,
            t_total: 12,
            b_base: 32,
            c0_policy: "quarter".into(),
            c0: Vec::new(),
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rate: RateMode::StageNorm,
            output_rate: OutputComposition::Multiply,
            buffers: None,
            ablation: Ablation::Custom,
            vt: VtMode::Transfer,
            strategy: Strategy::PlusMinus,
            noise_scale: crate::growth::DEFAULT_NOISE_SCALE,
            dataset: DataSource::SyntheticImage,
            dataset_size: 1200,
            eval_fraction: 0.2,
            image_size: 8,
            data_noise: 0.5,
            seed: 0,
            stream: "full".into(),
            stream_classes: vec![2, 2],
            stream_fractions: Vec::new(),
            variant: Variant::PlainGrowing,
            lambda: LambdaShape::Linear,
            osgd_per_tensor: false,
            checkpoint: CheckpointEvery::Stage,
            explicit: BTreeSet::new(),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::config(key, msg)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn pick<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            bad(key, format!("`{v}` is not one of {}", names.join(", ")))
        })
}

impl ExperimentConfig {
    /// Parses config text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| bad(line, format!("line {}: expected `key: value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "arch" => {
                self.arch = pick(
                    key,
                    v,
                    &[
                        ("cnn4", Arch::Cnn4),
                        ("mlp", Arch::Mlp),
                        ("resnet", Arch::Resnet),
                        ("residual-mlp", Arch::ResidualMlp),
                    ],
                )?
            }
            "widths" => self.widths = list(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "stages" | "N" => self.stages = num(key, v)?,
            "p_c" => self.p_c = num(key, v)?,
            "p_t" => self.p_t = num(key, v)?,
            "p_b" => self.p_b = num(key, v)?,
            "t0" => self.t0 = num(key, v)?,
            "t_total" => self.t_total = num(key, v)?,
            "b_base" => self.b_base = num(key, v)?,
            "c0_policy" => {
                pick(
                    key,
                    v,
                    &[("quarter", ()), ("proportional", ()), ("explicit", ())],
                )?;
                self.c0_policy = v.into();
            }
            "c0" => self.c0 = list(key, v)?,
            "optimizer" => {
                self.optimizer = OptimizerKind::parse(v)
                    .ok_or_else(|| bad(key, format!("unknown optimizer `{v}`")))?
            }
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "rate" => {
                self.rate = RateMode::parse(v)
                    .ok_or_else(|| bad(key, format!("unknown rate mode `{v}`")))?
            }
            "output_rate" => {
                self.output_rate = pick(
                    key,
                    v,
                    &[
                        ("multiply", OutputComposition::Multiply),
                        ("replace", OutputComposition::Replace),
                    ],
                )?
            }
            "buffers" => {
                self.buffers = pick(
                    key,
                    v,
                    &[
                        ("default", None),
                        ("preserve", Some(BufferPolicy::Preserve)),
                        ("reset", Some(BufferPolicy::Reset)),
                    ],
                )?
            }
            "ablation" => {
                self.ablation = pick(
                    key,
                    v,
                    &[
                        ("custom", Ablation::Custom),
                        ("growing", Ablation::Growing),
                        ("vt", Ablation::Vt),
                        ("ra", Ablation::Ra),
                        ("full", Ablation::Full),
                    ],
                )?
            }
            "vt" => {
                self.vt = pick(
                    key,
                    v,
                    &[
                        ("standard", VtMode::Standard),
                        ("transfer", VtMode::Transfer),
                        ("constraint", VtMode::Constraint),
                    ],
                )?
            }
            "strategy" => {
                self.strategy = pick(
                    key,
                    v,
                    &[
                        ("plus-minus", Strategy::PlusMinus),
                        ("replicate", Strategy::Replicate),
                    ],
                )?
            }
            "noise_scale" => self.noise_scale = num(key, v)?,
            "dataset" => {
                self.dataset = match v {
                    "synthetic-image" => DataSource::SyntheticImage,
                    "synthetic-2d" => DataSource::Synthetic2d,
                    _ => {
                        if let Some(p) = v.strip_prefix("csv:") {
                            DataSource::Csv(p.into())
                        } else if let Some(rest) = v.strip_prefix("idx:") {
                            let (images, labels) = rest.split_once(',').ok_or_else(|| {
                                bad(key, "idx source needs `idx:<images>,<labels>`")
                            })?;
                            DataSource::Idx {
                                images: images.trim().into(),
                                labels: labels.trim().into(),
                            }
                        } else {
                            return Err(bad(key, format!("unknown dataset source `{v}`")));
                        }
                    }
                }
            }
            "dataset_size" => self.dataset_size = num(key, v)?,
            "eval_fraction" => self.eval_fraction = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "data_noise" => self.data_noise = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "stream" => {
                pick(
                    key,
                    v,
                    &[
                        ("full", ()),
                        ("progressive-class", ()),
                        ("progressive-data", ()),
                    ],
                )?;
                self.stream = v.into();
            }
            "stream_classes" => self.stream_classes = list(key, v)?,
            "stream_fractions" => self.stream_fractions = list(key, v)?,
            "variant" => {
                self.variant =
                    Variant::parse(v).ok_or_else(|| bad(key, format!("unknown variant `{v}`")))?
            }
            "lambda" => {
                self.lambda = match v {
                    "linear" => LambdaShape::Linear,
                    _ => match v.strip_prefix("constant:") {
                        Some(x) => LambdaShape::Constant(num(key, x)?),
                        None => {
                            return Err(bad(
                                key,
                                format!("`{v}` is not `linear` or `constant:<value>`"),
                            ))
                        }
                    },
                }
            }
            "osgd_per_tensor" => self.osgd_per_tensor = num(key, v)?,
            "checkpoint" => {
                self.checkpoint = pick(
                    key,
                    v,
                    &[
                        ("never", CheckpointEvery::Never),
                        ("stage", CheckpointEvery::Stage),
                        ("epoch", CheckpointEvery::Epoch),
                    ],
                )?
            }
            _ => return Err(bad(key, "unknown key")),
        }
        self.explicit.insert(if key == "N" {
            "stages".into()
        } else {
            key.into()
        });
        Ok(())
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| bad(o, "override must look like key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("t0", self.t0),
            ("t_total", self.t_total),
            ("b_base", self.b_base),
            ("classes", self.classes),
            ("dataset_size", self.dataset_size),
            ("image_size", self.image_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "must be at least 1"));
            }
        }
        for (k, v) in [
            ("p_c", self.p_c),
            ("p_t", self.p_t),
            ("p_b", self.p_b),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(k, "must be a finite non-negative number"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(bad("eval_fraction", "must be in [0, 1)"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(bad("widths", "need at least one positive width"));
        }
        let need = match self.arch {
            Arch::Cnn4 => Some(4),
            Arch::Resnet | Arch::ResidualMlp => Some(1),
            Arch::Mlp => None,
        };
        if need.is_some_and(|n| n != self.widths.len()) {
            return Err(bad(
                "widths",
                format!(
                    "{} takes {} width(s), got {}",
                    self.arch.name(),
                    need.unwrap(),
                    self.widths.len()
                ),
            ));
        }
        if self.c0_policy == "explicit" && self.c0.is_empty() {
            return Err(bad("c0", "required when c0_policy is explicit"));
        }
        if self.ablation != Ablation::Custom {
            for k in ["vt", "rate"] {
                if self.explicit.contains(k) {
                    return Err(bad(
                        k,
                        format!("conflicts with ablation `{}`", self.ablation.name()),
                    ));
                }
            }
        }
        if self.stream == "progressive-class" && self.stream_classes.len() != 2 {
            return Err(bad("stream_classes", "expected `initial,per_stage`"));
        }
        if self.stream == "progressive-data" && self.stream_fractions.len() != self.stages {
            return Err(bad(
                "stream_fractions",
                format!("need one fraction for each of {} stages", self.stages),
            ));
        }
        Ok(())
    }

    /// Variance-transfer mode after applying the ablation preset.
    pub fn effective_vt(&self) -> VtMode {
        match self.ablation {
            Ablation::Custom => self.vt,
            Ablation::Growing | Ablation::Ra => VtMode::Standard,
            Ablation::Vt | Ablation::Full => VtMode::Transfer,
        }
    }

    /// Rate mode after applying the ablation preset.
    pub fn effective_rate(&self) -> RateMode {
        match self.ablation {
            Ablation::Custom => self.rate,
            Ablation::Growing | Ablation::Vt => RateMode::Global,
            Ablation::Ra | Ablation::Full => RateMode::StageNorm,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let mut c = OptimizerConfig::new(self.optimizer);
        c.momentum = self.momentum;
        c.weight_decay = self.weight_decay;
        c.beta1 = self.beta1;
        c.beta2 = self.beta2;
        c.eps = self.eps;
        c.rate = self.effective_rate();
        c.output = self.output_rate;
        if let Some(p) = self.buffers {
            c.policy = p;
        }
        c
    }

    pub fn plan_params(&self) -> PlanParams {
        PlanParams {
            stages: self.stages,
            p_c: self.p_c,
            p_t: self.p_t,
            p_b: self.p_b,
            t0: self.t0,
            t_total: self.t_total,
            b_base: self.b_base,
            policy: match self.c0_policy.as_str() {
                "quarter" => WidthPolicy::Quarter,
                "proportional" => WidthPolicy::Proportional,
                _ => WidthPolicy::Explicit(self.c0.clone()),
            },
        }
    }

    pub fn stream_mode(&self) -> StreamMode {
        match self.stream.as_str() {
            "progressive-class" => StreamMode::ProgressiveClass {
                initial: self.stream_classes[0],
                per_stage: self.stream_classes[1],
            },
            "progressive-data" => StreamMode::ProgressiveData {
                fractions: self.stream_fractions.clone(),
            },
            _ => StreamMode::Full,
        }
    }

    /// Every key with its effective value; parsing the echo gives back this config.
    pub fn echo(&self) -> String {
        let buffers = match self.buffers {
            None => "default",
            Some(BufferPolicy::Preserve) => "preserve",
            Some(BufferPolicy::Reset) => "reset",
        };
        let vt = |m: VtMode| match m {
            VtMode::Standard => "standard",
            VtMode::Transfer => "transfer",
            VtMode::Constraint => "constraint",
        };
        let rows: Vec<(&str, String)> = vec![
            ("arch", self.arch.name().into()),
            ("widths", join(&self.widths)),
            ("classes", self.classes.to_string()),
            ("stages", self.stages.to_string()),
            ("p_c", self.p_c.to_string()),
            ("p_t", self.p_t.to_string()),
            ("p_b", self.p_b.to_string()),
            ("t0", self.t0.to_string()),
            ("t_total", self.t_total.to_string()),
            ("b_base", self.b_base.to_string()),
            ("c0_policy", self.c0_policy.clone()),
            ("c0", join(&self.c0)),
            ("optimizer", self.optimizer.name().into()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("rate", self.rate.name().into()),
            (
                "output_rate",
                match self.output_rate {
                    OutputComposition::Multiply => "multiply",
                    OutputComposition::Replace => "replace",
                }
                .into(),
            ),
            ("buffers", buffers.into()),
            ("ablation", self.ablation.name().into()),
            ("vt", vt(self.vt).into()),
            (
                "strategy",
                match self.strategy {
                    Strategy::PlusMinus => "plus-minus",
                    Strategy::Replicate => "replicate",
                }
                .into(),
            ),
            ("noise_scale", self.noise_scale.to_string()),
            ("dataset", self.dataset.to_string()),
            ("dataset_size", self.dataset_size.to_string()),
            ("eval_fraction", self.eval_fraction.to_string()),
            ("image_size", self.image_size.to_string()),
            ("data_noise", self.data_noise.to_string()),
            ("seed", self.seed.to_string()),
            ("stream", self.stream.clone()),
            ("stream_classes", join(&self.stream_classes)),
            ("stream_fractions", join(&self.stream_fractions)),
            (
                "variant",
                match self.variant {
                    Variant::PlainGrowing => "plain-growing",
                    Variant::DynamicOsgd => "dynamic-osgd",
                }
                .into(),
            ),
            (
                "lambda",
                match self.lambda {
                    LambdaShape::Linear => "linear".into(),
                    LambdaShape::Constant(l) => format!("constant:{l}"),
                },
            ),
            ("osgd_per_tensor", self.osgd_per_tensor.to_string()),
            (
                "checkpoint",
                match self.checkpoint {
                    CheckpointEvery::Never => "never",
                    CheckpointEvery::Stage => "stage",
                    CheckpointEvery::Epoch => "epoch",
                }
                .into(),
            ),
        ];
        debug_assert_eq!(rows.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in rows {
            // A preset ablation owns `vt` and `rate`; echoing them would make the
            // echo conflict with itself.
            if self.ablation != Ablation::Custom && (k == "vt" || k == "rate") {
                out.push_str(&format!("# {k}: {v}\n"));
            } else {
                out.push_str(&format!("{k}: {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
        assert_eq!(
            ExperimentConfig::parse("# nothing\n\n").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::parse(
            "p_c: 0.2\nstages: 9\nc0_policy: proportional\nlambda: constant:0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.p_c, 0.2);
        let echo = cfg.echo();
        assert!(echo.contains("p_c: 0.2\n"));
        let back = ExperimentConfig::parse(&echo).unwrap();
        assert_eq!(back.echo(), echo);
        assert_eq!(back.p_c, 0.2);
        assert_eq!(back.lambda, LambdaShape::Constant(0.5));
        let preset = ExperimentConfig::parse("ablation: growing\n").unwrap();
        assert_eq!(
            ExperimentConfig::parse(&preset.echo()).unwrap().echo(),
            preset.echo()
        );
    }

    #[test]
    fn constraint_violations_name_the_key() {
        for (text, key) in [
            ("N: 0", "stages"),
            ("stages: 0", "stages"),
            ("lr: -1", "lr"),
            ("bogus: 3", "bogus"),
            ("t0: x", "t0"),
            ("arch: resnet", "widths"),
            ("ablation: full\nvt: standard", "vt"),
        ] {
            match ExperimentConfig::parse(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn ablation_presets() {
        let g = ExperimentConfig::parse("ablation: growing").unwrap();
        assert_eq!(
            (g.effective_vt(), g.effective_rate()),
            (VtMode::Standard, RateMode::Global)
        );
        let f = ExperimentConfig::parse("ablation: full").unwrap();
        assert_eq!(
            (f.effective_vt(), f.effective_rate()),
            (VtMode::Transfer, RateMode::StageNorm)
        );
        let r = ExperimentConfig::parse("ablation: ra").unwrap();
        assert_eq!(r.optimizer_config().rate, RateMode::StageNorm);
        assert_eq!(r.effective_vt(), VtMode::Standard);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["lr=0.3", "optimizer=adam", "lr=0.2"])
            .unwrap();
        assert_eq!(cfg.lr, 0.2);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert!(ExperimentConfig::default().with_overrides(&["lr"]).is_err());
    }
}
