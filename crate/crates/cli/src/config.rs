//! Experiment configuration: file < desk-scale preset < command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use fidel::dataset::{PreprocessConfig, DEFAULT_IMAGES_PER_CHAR, DEFAULT_PATH_PATTERN};
use fidel::episodes::{Method, MixMode};
use fidel::protonet::BackboneKind;
use fidel::training::{LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    /// 265 characters, 34 rows, 120/61/84 class split.
    #[default]
    Amharic,
    /// Shape taken from the manifest itself.
    Inferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessKind {
    Imagenet,
    Scratch,
    Identity,
}

impl PreprocessKind {
    pub fn config(self) -> PreprocessConfig {
        match self {
            PreprocessKind::Imagenet => PreprocessConfig::imagenet(),
            PreprocessKind::Scratch => PreprocessConfig::scratch(),
            PreprocessKind::Identity => PreprocessConfig::identity(),
        }
    }

    /// ImageNet statistics for the pretrained trunk, symmetric otherwise.
    pub fn for_backbone(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::ResNet18 => PreprocessKind::Imagenet,
            BackboneKind::Conv4 => PreprocessKind::Scratch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Alphabet manifest; the built-in one when absent.
    pub manifest: Option<PathBuf>,
    pub schema: SchemaKind,
    pub images_per_char: usize,
    pub path_pattern: String,
    /// Defaults to the backbone's normalization.
    pub preprocess: Option<PreprocessKind>,
    /// Preprocessed-index cache; built on first use.
    pub cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            manifest: None,
            schema: SchemaKind::Amharic,
            images_per_char: DEFAULT_IMAGES_PER_CHAR,
            path_pattern: DEFAULT_PATH_PATTERN.to_string(),
            preprocess: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub test_tasks: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_tasks: 1000,
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            shots: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let parsed = match ext.as_str() {
            "toml" => toml::from_str(&text).map_err(|e| e.to_string()),
            "json" => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => bail!(UsageError(format!(
                "config {} must end in .toml or .json",
                path.display()
            ))),
        };
        parsed.map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
        path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
    }

    /// Shortened schedule for a single-CPU smoke reproduction.
    pub fn apply_desk_scale(&mut self) {
        self.train.total_episodes = 2000;
        self.train.validation_tasks = 100;
        self.eval.test_tasks = 200;
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        self.data
            .preprocess
            .unwrap_or_else(|| PreprocessKind::for_backbone(self.train.backbone))
            .config()
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Dataset root directory.
    #[arg(long, env = "FIDEL_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// Alphabet manifest CSV (char_label,row_label,col_label,split).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub schema: Option<SchemaKind>,
    #[arg(long)]
    pub images_per_char: Option<usize>,
    /// Relative image path with {char}, {instance} and optional {ext}.
    #[arg(long)]
    pub path_pattern: Option<String>,
    #[arg(long, value_enum)]
    pub preprocess: Option<PreprocessKind>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

impl DataArgs {
    pub fn apply(&self, data: &mut DataConfig) {
        if let Some(v) = &self.data_root {
            data.root = Some(v.clone());
        }
        if let Some(v) = &self.manifest {
            data.manifest = Some(v.clone());
        }
        if let Some(v) = self.schema {
            data.schema = v;
        }
        if let Some(v) = self.images_per_char {
            data.images_per_char = v;
        }
        if let Some(v) = &self.path_pattern {
            data.path_pattern = v.clone();
        }
        if let Some(v) = self.preprocess {
            data.preprocess = Some(v);
        }
        if let Some(v) = &self.cache {
            data.cache = Some(v.clone());
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub queries_per_class: Option<usize>,
    #[arg(long)]
    pub total_episodes: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_lr_schedule)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub validation_every: Option<usize>,
    #[arg(long)]
    pub validation_tasks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// Safetensors file with initial backbone weights.
    #[arg(long)]
    pub pretrained_weights: Option<PathBuf>,
    #[arg(long)]
    pub mix_mode: Option<MixMode>,
}

fn parse_lr_schedule(s: &str) -> Result<LrSchedule, String> {
    match s.to_ascii_lowercase().as_str() {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        other => Err(format!("unknown schedule {other:?} (constant or cosine)")),
    }
}

impl TrainArgs {
    pub fn apply(&self, t: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { t.$field = v.clone(); })*
            };
        }
        set!(
            method,
            way,
            shot,
            queries_per_class,
            total_episodes,
            learning_rate,
            lr_schedule,
            validation_every,
            validation_tasks,
            seed,
            backbone,
            mix_mode
        );
        if let Some(p) = &self.pretrained_weights {
            t.pretrained_weights = Some(p.clone());
        }
    }
}

/// Reads `path` if given, then layers the preset and flags on top.
pub fn resolve(
    path: Option<&Path>,
    desk_scale: bool,
    data: &DataArgs,
    train: Option<&TrainArgs>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_or_default(path)?;
    if desk_scale {
        cfg.apply_desk_scale();
    }
    data.apply(&mut cfg.data);
    if let Some(t) = train {
        t.apply(&mut cfg.train);
    }
    cfg.train
        .validate()
        .map_err(|e| UsageError(e.to_string()))
        .context("configuration")?;
    Ok(cfg)
}
