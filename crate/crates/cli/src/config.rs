//! Experiment configuration as flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so
//! an empty file is a valid configuration; unknown or repeated keys are
//! errors. [`ExperimentConfig::to_text`] writes every key, and parsing
//! that text yields the same configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use metanorm::model::MicroNetPlan;
use metanorm::train::{SgdConfig, StepSchedule, SyntheticSpec};
use metanorm::{Activation, IlmOptions, NormKind, NormSpec, PartitionScheme};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    BatchSize(Vec<usize>),
    Activations(Vec<(Activation, Activation)>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::BatchSize(v) => v.len(),
            SweepAxis::Activations(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::BatchSize(_) => "batch_size",
            SweepAxis::Activations(_) => "activations",
        }
    }

    /// The axis values as they appear in the config file.
    pub fn value_strings(&self) -> Vec<String> {
        match self {
            SweepAxis::BatchSize(v) => v.iter().map(|b| b.to_string()).collect(),
            SweepAxis::Activations(v) => v.iter().map(|(m, g)| format!("{m}:{g}")).collect(),
        }
    }

    fn parse(axis: &str, values: &str) -> Result<Self, String> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        match axis {
            "batch_size" => items
                .iter()
                .map(|s| match s.parse::<usize>() {
                    Ok(b) if b > 0 => Ok(b),
                    _ => Err(format!("batch size `{s}` is not a positive integer")),
                })
                .collect::<Result<_, _>>()
                .map(SweepAxis::BatchSize),
            "activations" => items
                .iter()
                .map(|s| {
                    let (m, g) = s
                        .split_once(':')
                        .ok_or_else(|| format!("activation pair `{s}` must look like `tanh:sigmoid`"))?;
                    Ok((parse_value(m)?, parse_value(g)?))
                })
                .collect::<Result<_, String>>()
                .map(SweepAxis::Activations),
            other => Err(format!(
                "sweep axis must be `batch_size` or `activations`, got `{other}`"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: MicroNetPlan,
    pub norm: NormSpec,
    pub sgd: SgdConfig,
    pub schedule: StepSchedule,
    pub data_kind: DataKind,
    pub data_path: PathBuf,
    pub data_standardize: bool,
    pub synthetic: SyntheticSpec,
    pub train_samples: usize,
    pub val_samples: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub sweep: SweepAxis,
    pub gradcheck_target: String,
    pub gradcheck_shape: [usize; 4],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: MicroNetPlan::default(),
            norm: NormSpec::new(NormKind::meta(PartitionScheme::Group(32)).expect("instance-level")),
            sgd: SgdConfig::default(),
            schedule: StepSchedule {
                base_lr: 0.1,
                milestones: vec![(150, 0.1), (250, 0.1)],
            },
            data_kind: DataKind::Synthetic,
            data_path: PathBuf::from("data/cifar-10-batches-bin"),
            data_standardize: true,
            synthetic: SyntheticSpec::default(),
            train_samples: 2000,
            val_samples: 500,
            batch_size: 64,
            eval_batch_size: 100,
            epochs: 350,
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            sweep: SweepAxis::BatchSize(vec![64, 32, 16, 8, 4, 2]),
            gradcheck_target: "ilm+gn(2)".into(),
            gradcheck_shape: [2, 8, 4, 4],
        }
    }
}

fn parse_value<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_value).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{s}` is not `true` or `false`")),
    }
}

fn parse_milestones(s: &str) -> Result<Vec<(usize, f64)>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (e, m) = p
                .split_once(':')
                .ok_or_else(|| format!("milestone `{p}` must look like `epoch:multiplier`"))?;
            Ok((parse_value(e)?, parse_value(m)?))
        })
        .collect()
}

const KEYS: &[&str] = &[
    "model.stem_channels",
    "model.widths",
    "model.strides",
    "model.blocks_per_stage",
    "model.classes",
    "model.init",
    "norm.kind",
    "norm.epsilon",
    "norm.momentum",
    "ilm.key_group_size",
    "ilm.embed_dim_rule",
    "ilm.act_mu",
    "ilm.act_gamma",
    "ilm.key_source",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.weight_decay",
    "optimizer.no_decay_norm_affine",
    "schedule.milestones",
    "data.kind",
    "data.path",
    "data.standardize",
    "data.train_samples",
    "data.val_samples",
    "data.synthetic_seed",
    "data.synthetic_classes",
    "data.synthetic_noise",
    "data.synthetic_contrast_range",
    "data.synthetic_brightness",
    "train.batch_size",
    "train.eval_batch_size",
    "train.epochs",
    "train.seed",
    "train.precision",
    "output.dir",
    "sweep.axis",
    "sweep.values",
    "gradcheck.target",
    "gradcheck.shape",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut sweep_axis = cfg.sweep.name().to_string();
        let mut sweep_values = join(&cfg.sweep.value_strings());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(at(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(at(format!("key `{key}` given twice")));
            }
            match key {
                "sweep.axis" => sweep_axis = value.to_string(),
                "sweep.values" => sweep_values = value.to_string(),
                _ => cfg.set(key, value).map_err(at)?,
            }
        }
        cfg.sweep =
            SweepAxis::parse(&sweep_axis, &sweep_values).map_err(|e| CliError::Config(format!("sweep: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "model.stem_channels" => self.model.stem_channels = parse_value(v)?,
            "model.widths" => self.model.widths = parse_list(v)?,
            "model.strides" => self.model.strides = parse_list(v)?,
            "model.blocks_per_stage" => self.model.blocks_per_stage = parse_value(v)?,
            "model.classes" => self.model.classes = parse_value(v)?,
            "model.init" => self.model.init = parse_value(v)?,
            "norm.kind" => self.norm.kind = parse_value(v)?,
            "norm.epsilon" => self.norm.epsilon = parse_value(v)?,
            "norm.momentum" => self.norm.momentum = parse_value(v)?,
            "ilm.key_group_size" => self.norm.ilm.key_group_size = parse_value(v)?,
            "ilm.embed_dim_rule" => self.norm.ilm.embed_dim = parse_value(v)?,
            "ilm.act_mu" => self.norm.ilm.act_mu = parse_value(v)?,
            "ilm.act_gamma" => self.norm.ilm.act_gamma = parse_value(v)?,
            "ilm.key_source" => self.norm.ilm.key_source = parse_value(v)?,
            "optimizer.lr" => self.schedule.base_lr = parse_value(v)?,
            "optimizer.momentum" => self.sgd.momentum = parse_value(v)?,
            "optimizer.weight_decay" => self.sgd.weight_decay = parse_value(v)?,
            "optimizer.no_decay_norm_affine" => self.sgd.no_decay_norm_affine = parse_bool(v)?,
            "schedule.milestones" => self.schedule.milestones = parse_milestones(v)?,
            "data.kind" => {
                self.data_kind = match v {
                    "synthetic" => DataKind::Synthetic,
                    "cifar10" => DataKind::Cifar10,
                    _ => return Err(format!("data kind must be `synthetic` or `cifar10`, got `{v}`")),
                }
            }
            "data.path" => self.data_path = PathBuf::from(v),
            "data.standardize" => self.data_standardize = parse_bool(v)?,
            "data.train_samples" => self.train_samples = parse_value(v)?,
            "data.val_samples" => self.val_samples = parse_value(v)?,
            "data.synthetic_seed" => self.synthetic.seed = parse_value(v)?,
            "data.synthetic_classes" => self.synthetic.classes = parse_value(v)?,
            "data.synthetic_noise" => self.synthetic.noise = parse_value(v)?,
            "data.synthetic_contrast_range" => self.synthetic.contrast_range = parse_value(v)?,
            "data.synthetic_brightness" => self.synthetic.brightness = parse_value(v)?,
            "train.batch_size" => self.batch_size = parse_value(v)?,
            "train.eval_batch_size" => self.eval_batch_size = parse_value(v)?,
            "train.epochs" => self.epochs = parse_value(v)?,
            "train.seed" => self.seed = parse_value(v)?,
            "train.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("precision must be `f32` or `f64`, got `{v}`")),
                }
            }
            "output.dir" => self.out_dir = PathBuf::from(v),
            "gradcheck.target" => self.gradcheck_target = v.to_string(),
            "gradcheck.shape" => {
                let dims: Vec<usize> = parse_list(v)?;
                self.gradcheck_shape = dims
                    .try_into()
                    .map_err(|_| format!("gradcheck shape needs four extents, got `{v}`"))?;
            }
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Cross-field checks that do not need a model to be built.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.norm.epsilon > 0.0) {
            return bad(format!("norm.epsilon must be positive, got {}", self.norm.epsilon));
        }
        if self.norm.ilm.key_group_size == 0 {
            return bad("ilm.key_group_size must be positive".into());
        }
        self.sgd.validate().map_err(CliError::config)?;
        self.schedule.validate().map_err(CliError::config)?;
        self.model.specs().map_err(CliError::config)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        kv("model.stem_channels", self.model.stem_channels.to_string());
        kv("model.widths", join(&self.model.widths));
        kv("model.strides", join(&self.model.strides));
        kv("model.blocks_per_stage", self.model.blocks_per_stage.to_string());
        kv("model.classes", self.model.classes.to_string());
        kv("model.init", self.model.init.to_string());
        kv("norm.kind", self.norm.kind.to_string());
        kv("norm.epsilon", self.norm.epsilon.to_string());
        kv("norm.momentum", self.norm.momentum.to_string());
        kv("ilm.key_group_size", self.norm.ilm.key_group_size.to_string());
        kv("ilm.embed_dim_rule", self.norm.ilm.embed_dim.to_string());
        kv("ilm.act_mu", self.norm.ilm.act_mu.to_string());
        kv("ilm.act_gamma", self.norm.ilm.act_gamma.to_string());
        kv("ilm.key_source", self.norm.ilm.key_source.to_string());
        kv("optimizer.lr", self.schedule.base_lr.to_string());
        kv("optimizer.momentum", self.sgd.momentum.to_string());
        kv("optimizer.weight_decay", self.sgd.weight_decay.to_string());
        kv(
            "optimizer.no_decay_norm_affine",
            self.sgd.no_decay_norm_affine.to_string(),
        );
        kv(
            "schedule.milestones",
            self.schedule
                .milestones
                .iter()
                .map(|(e, m)| format!("{e}:{m}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "data.kind",
            match self.data_kind {
                DataKind::Synthetic => "synthetic",
                DataKind::Cifar10 => "cifar10",
            }
            .into(),
        );
        kv("data.path", self.data_path.display().to_string());
        kv("data.standardize", self.data_standardize.to_string());
        kv("data.train_samples", self.train_samples.to_string());
        kv("data.val_samples", self.val_samples.to_string());
        kv("data.synthetic_seed", self.synthetic.seed.to_string());
        kv("data.synthetic_classes", self.synthetic.classes.to_string());
        kv("data.synthetic_noise", self.synthetic.noise.to_string());
        kv(
            "data.synthetic_contrast_range",
            self.synthetic.contrast_range.to_string(),
        );
        kv("data.synthetic_brightness", self.synthetic.brightness.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.eval_batch_size", self.eval_batch_size.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.seed", self.seed.to_string());
        kv(
            "train.precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        kv("output.dir", self.out_dir.display().to_string());
        kv("sweep.axis", self.sweep.name().into());
        kv("sweep.values", join(&self.sweep.value_strings()));
        kv("gradcheck.target", self.gradcheck_target.clone());
        kv("gradcheck.shape", join(&self.gradcheck_shape));
        s
    }

    /// Synthetic task covering both splits.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            samples: self.train_samples + self.val_samples,
            image: self.model.input,
            ..self.synthetic
        }
    }

    pub fn ilm_options(&self) -> IlmOptions {
        self.norm.ilm
    }

    /// Key names accepted in config files.
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}
