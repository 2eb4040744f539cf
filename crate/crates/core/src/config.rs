//! Experiment configuration in a flat `key = value` format.
//!
//! Hyperparameter keys: `loss`,
//! `optimizer`, `momentum`, `weight_decay`, `learning_rate`, `batch_size`,
//! `max_epochs`, `early_stopping`, `embedding_size`, `knn_k`,
//! `distance_metric`. Blank lines and `#` comments are ignored.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::VoteMethod;
use crate::datasets::{ClassQuota, SynthConfig};
use crate::error::{Error, Result};
use crate::knn::DEFAULT_K;
use crate::model::ModelConfig;
use crate::tiling::GridSpec;
use crate::trainer::{TrainConfig, ValGranularity};

pub const LOSS: &str = "cross_entropy";
pub const OPTIMIZER: &str = "sgd_momentum";
pub const DISTANCE_METRIC: &str = "euclidean";

/// Independent RNG streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    Split,
    Folds,
    Synth,
    Init,
    Shuffle,
}

/// SplitMix64 of the master seed offset by a per-purpose constant.
pub fn derive_seed(master: u64, purpose: SeedPurpose) -> u64 {
    let offset: u64 = match purpose {
        SeedPurpose::Split => 1,
        SeedPurpose::Folds => 2,
        SeedPurpose::Synth => 3,
        SeedPurpose::Init => 4,
        SeedPurpose::Shuffle => 5,
    };
    let mut z = master.wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evaluator {
    #[default]
    Fc,
    Knn,
}

impl Evaluator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Evaluator::Fc => "fc",
            Evaluator::Knn => "knn",
        }
    }
}

impl FromStr for Evaluator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(Evaluator::Fc),
            "knn" => Ok(Evaluator::Knn),
            _ => Err(Error::Config(format!("evaluator must be fc or knn, got {s:?}"))),
        }
    }
}

/// Image-level aggregation, or none for per-tile metrics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    None,
    Majority,
    #[default]
    Probability,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::None => "none",
            Aggregation::Majority => "majority",
            Aggregation::Probability => "probability",
        }
    }

    pub fn method(&self) -> Option<VoteMethod> {
        match self {
            Aggregation::None => None,
            Aggregation::Majority => Some(VoteMethod::Majority),
            Aggregation::Probability => Some(VoteMethod::Probability),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Aggregation::None),
            "majority" => Ok(Aggregation::Majority),
            "probability" => Ok(Aggregation::Probability),
            _ => Err(Error::Config(format!("vote must be majority, probability or none, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub grid: GridSpec,
    pub seed: u64,
    pub evaluator: Evaluator,
    pub vote: Aggregation,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub knn_k: usize,
    pub folds: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let quota = ClassQuota::standard(110);
        Self {
            data_root: PathBuf::from("data"),
            out: PathBuf::from("runs"),
            grid: GridSpec::FULL,
            seed: 0,
            evaluator: Evaluator::Fc,
            vote: Aggregation::Probability,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            knn_k: DEFAULT_K,
            folds: 5,
            val_per_class: quota.val,
            test_per_class: quota.test,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "loss" if value == LOSS => {}
            "optimizer" if value == OPTIMIZER => {}
            "distance_metric" if value == DISTANCE_METRIC => {}
            "loss" | "optimizer" | "distance_metric" => {
                return Err(Error::Config(format!("unsupported {key} {value:?}")));
            }
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "early_stopping" => t.early_stopping = parse(key, value)?,
            "val_granularity" => {
                t.val_granularity = match value {
                    "tile" => ValGranularity::Tile,
                    "image" => ValGranularity::Image,
                    _ => return Err(Error::Config(format!("val_granularity must be tile or image, got {value:?}"))),
                }
            }
            "embedding_size" => self.model.embedding_dim = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "input_size" => self.model.input_size = parse(key, value)?,
            "stem_kernel" => self.model.stem_kernel = parse(key, value)?,
            "stem_stride" => self.model.stem_stride = parse(key, value)?,
            "widths" => self.model.widths = parse_list(key, value)?,
            "blocks_per_stage" => self.model.blocks_per_stage = parse(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "grid" => self.grid = value.parse().map_err(|_| Error::Config(format!("invalid grid {value:?}")))?,
            "seed" => self.seed = parse(key, value)?,
            "evaluator" => self.evaluator = value.parse()?,
            "vote" => self.vote = value.parse()?,
            "folds" => self.folds = parse(key, value)?,
            "val_per_class" => self.val_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "synth_height" => self.synth.height = parse(key, value)?,
            "synth_width" => self.synth.width = parse(key, value)?,
            "synth_images_per_class" => self.synth.images_per_class = parse(key, value)?,
            "synth_amplitudes" | "synth_corr_lengths" => {
                let xs: Vec<f64> = parse_list(key, value)?;
                if xs.len() != self.synth.classes.len() {
                    return Err(Error::Config(format!("{key} needs {} values", self.synth.classes.len())));
                }
                for (c, x) in self.synth.classes.iter_mut().zip(xs) {
                    if key == "synth_amplitudes" {
                        c.amplitude = x;
                    } else {
                        c.corr_length = x;
                    }
                }
            }
            "synth_illumination" => self.synth.illumination = parse(key, value)?,
            "tool_version" => {}
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.synth.validate()?;
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }

    /// Training settings with the shuffle seed derived from the master seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, SeedPurpose::Shuffle),
            ..self.train.clone()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, SeedPurpose::Synth),
            ..self.synth.clone()
        }
    }

    pub fn quota(&self) -> ClassQuota {
        ClassQuota::remainder_train(self.synth.images_per_class, self.val_per_class, self.test_per_class)
    }

    /// Every key with its resolved value, followed by the tool version.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("loss", LOSS.into());
        kv("optimizer", OPTIMIZER.into());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("early_stopping", t.early_stopping.to_string());
        kv("embedding_size", m.embedding_dim.to_string());
        kv("knn_k", self.knn_k.to_string());
        kv("distance_metric", DISTANCE_METRIC.into());
        kv(
            "val_granularity",
            match t.val_granularity {
                ValGranularity::Tile => "tile",
                ValGranularity::Image => "image",
            }
            .into(),
        );
        kv("input_size", m.input_size.to_string());
        kv("stem_kernel", m.stem_kernel.to_string());
        kv("stem_stride", m.stem_stride.to_string());
        kv("widths", join(&m.widths));
        kv("blocks_per_stage", m.blocks_per_stage.to_string());
        kv("data_root", self.data_root.display().to_string());
        kv("out", self.out.display().to_string());
        kv("grid", self.grid.to_string());
        kv("seed", self.seed.to_string());
        kv("evaluator", self.evaluator.as_str().into());
        kv("vote", self.vote.as_str().into());
        kv("folds", self.folds.to_string());
        kv("val_per_class", self.val_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        kv("synth_height", s.height.to_string());
        kv("synth_width", s.width.to_string());
        kv("synth_images_per_class", s.images_per_class.to_string());
        kv("synth_amplitudes", join(s.classes.iter().map(|c| c.amplitude)));
        kv("synth_corr_lengths", join(s.classes.iter().map(|c| c.corr_length)));
        kv("synth_illumination", s.illumination.to_string());
        kv("tool_version", crate::VERSION.into());
        out
    }

    /// Writes `config.txt` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
