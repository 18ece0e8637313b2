//! Flat `key = value` configuration for the whole pipeline.
//!
//! The file format is line-oriented UTF-8: one dotted key per line,
//! `#` comments and blank lines ignored, unknown keys rejected. Every
//! setting has a documented default; [`PipelineConfig::to_text`] prints
//! the complete key set, so `parse_config(cfg.to_text())` round-trips.

use std::path::Path;

use thiserror::Error;

use crate::context::{ClusterAttention, ContextConfig};
use crate::geometry::DEFAULT_NMS_IOU;
use crate::scenes::{ClassPrior, SynthConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Parse { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Validation(String),
}

/// Seed encoder settings: farthest-point sampling followed by one
/// neighborhood feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Number of seed points kept by farthest-point sampling.
    pub seeds: usize,
    /// Ball-query radius around each seed, meters.
    pub radius: f64,
    /// Neighborhood size cap per seed.
    pub neighbors: usize,
    /// Feature width D used throughout the pipeline.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            seeds: 160,
            radius: 0.3,
            neighbors: 64,
            feature_dim: 32,
        }
    }
}

/// Vote clustering settings, shared by all three primitive kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Number of clusters N per primitive kind.
    pub count: usize,
    /// Grouping radius around each cluster center, meters.
    pub radius: f64,
    /// Membership cap per cluster.
    pub neighbors: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            count: 40,
            radius: 0.2,
            neighbors: 16,
        }
    }
}

/// Refinement cascade settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Strictly ascending IoU thresholds, one refinement stage each.
    pub thresholds: Vec<f64>,
    /// Radius for re-pooling vote features around refined box centers
    /// in stages after the first, meters.
    pub repool_radius: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            thresholds: vec![0.5, 0.55, 0.6],
            repool_radius: 0.3,
        }
    }
}

impl CascadeConfig {
    pub fn stages(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.thresholds.is_empty() {
            return Err(ConfigError::Validation(
                "cascade needs at least one threshold".into(),
            ));
        }
        for (i, &u) in self.thresholds.iter().enumerate() {
            if !(0.0 < u && u < 1.0) {
                return Err(ConfigError::Validation(format!(
                    "cascade threshold {u} must lie in (0, 1)"
                )));
            }
            if i > 0 && u <= self.thresholds[i - 1] {
                return Err(ConfigError::Validation(format!(
                    "cascade thresholds must ascend strictly, got {:?}",
                    self.thresholds
                )));
            }
        }
        if !(self.repool_radius > 0.0) || !self.repool_radius.is_finite() {
            return Err(ConfigError::Validation(format!(
                "repool radius {} must be positive",
                self.repool_radius
            )));
        }
        Ok(())
    }
}

/// Training loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by
    /// `lr_decay_factor`. Empty means a flat rate throughout.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub vote_loss_weight: f64,
    pub size_loss_weight: f64,
    pub objectness_loss_weight: f64,
    /// Weight on positive proposals inside the objectness loss; 1.0 is
    /// the plain mean. Values above 1 counter the negative-heavy class
    /// balance so confident scores are reachable.
    pub objectness_positive_weight: f64,
    pub class_loss_weight: f64,
    pub residual_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 2e-3,
            lr_decay_epochs: vec![60, 85],
            lr_decay_factor: 0.1,
            batch_size: 8,
            vote_loss_weight: 1.0,
            size_loss_weight: 2.0,
            objectness_loss_weight: 1.0,
            objectness_positive_weight: 16.0,
            class_loss_weight: 1.0,
            residual_loss_weight: 1.0,
        }
    }
}

/// Everything the pipeline needs, with every default documented by
/// [`PipelineConfig::to_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Master seed: scene `i` uses stream `i + 1`, training uses
    /// stream 0.
    pub seed: u64,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub cluster: ClusterConfig,
    pub context: ContextConfig,
    pub cascade: CascadeConfig,
    pub nms_iou: f64,
    pub count_confidence: f64,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 7;
        PipelineConfig {
            seed,
            synth: SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            encoder: EncoderConfig::default(),
            cluster: ClusterConfig::default(),
            context: ContextConfig {
                // Attention over pooled cluster vectors (the module-level
                // default) erases per-cluster identity when trained at
                // this scale, so the pipeline attends within each
                // cluster's own votes instead.
                cluster_attention: ClusterAttention::WithinCluster,
                ..ContextConfig::default()
            },
            cascade: CascadeConfig::default(),
            nms_iou: DEFAULT_NMS_IOU,
            count_confidence: crate::evaluation::DEFAULT_COUNT_CONFIDENCE,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn num_classes(&self) -> usize {
        self.synth.priors.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.synth.class_names()
    }

    /// Overrides the master seed, keeping the generator in sync.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth
            .validate()
            .map_err(|e| ConfigError::Validation(e.to_string()))?;
        self.context
            .validate()
            .map_err(|e| ConfigError::Validation(e.to_string()))?;
        self.cascade.validate()?;
        if self.encoder.seeds == 0 || self.encoder.feature_dim == 0 || self.encoder.neighbors == 0
        {
            return Err(ConfigError::Validation(
                "encoder seeds, neighbors, and feature_dim must be positive".into(),
            ));
        }
        if !(self.encoder.radius > 0.0) || !self.encoder.radius.is_finite() {
            return Err(ConfigError::Validation(format!(
                "encoder radius {} must be positive",
                self.encoder.radius
            )));
        }
        if self.cluster.count == 0 || self.cluster.neighbors == 0 {
            return Err(ConfigError::Validation(
                "cluster count and neighbors must be positive".into(),
            ));
        }
        if !(self.cluster.radius > 0.0) || !self.cluster.radius.is_finite() {
            return Err(ConfigError::Validation(format!(
                "cluster radius {} must be positive",
                self.cluster.radius
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(ConfigError::Validation(format!(
                "nms.iou {} must lie in (0, 1]",
                self.nms_iou
            )));
        }
        if !(self.count_confidence > 0.0 && self.count_confidence < 1.0) {
            return Err(ConfigError::Validation(format!(
                "count.confidence {} must lie in (0, 1)",
                self.count_confidence
            )));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Validation("train.batch_size must be positive".into()));
        }
        let weights = [
            ("train.learning_rate", self.train.learning_rate),
            ("train.vote_loss_weight", self.train.vote_loss_weight),
            ("train.size_loss_weight", self.train.size_loss_weight),
            (
                "train.objectness_loss_weight",
                self.train.objectness_loss_weight,
            ),
            (
                "train.objectness_positive_weight",
                self.train.objectness_positive_weight,
            ),
            ("train.class_loss_weight", self.train.class_loss_weight),
            (
                "train.residual_loss_weight",
                self.train.residual_loss_weight,
            ),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ConfigError::Validation(format!(
                    "{name} {v} must be finite and non-negative"
                )));
            }
        }
        if !(self.train.lr_decay_factor > 0.0 && self.train.lr_decay_factor <= 1.0) {
            return Err(ConfigError::Validation(format!(
                "train.lr_decay_factor {} must lie in (0, 1]",
                self.train.lr_decay_factor
            )));
        }
        Ok(())
    }

    /// Prints every key with its current value; the output parses back
    /// to an equal config.
    pub fn to_text(&self) -> String {
        let classes: Vec<String> = self
            .synth
            .priors
            .iter()
            .map(|p| {
                format!(
                    "{}:{}x{}x{}:{}",
                    p.name, p.size[0], p.size[1], p.size[2], p.jitter
                )
            })
            .collect();
        let thresholds: Vec<String> = self
            .cascade
            .thresholds
            .iter()
            .map(|u| format!("{u}"))
            .collect();
        let scale = match self.context.attention_scale {
            None => "default".to_string(),
            Some(s) => format!("{s}"),
        };
        let cluster_attention = match self.context.cluster_attention {
            ClusterAttention::AcrossClusters => "across",
            ClusterAttention::WithinCluster => "within",
        };
        let decay_epochs: Vec<String> = self
            .train
            .lr_decay_epochs
            .iter()
            .map(|e| format!("{e}"))
            .collect();
        let decay_epochs = if decay_epochs.is_empty() {
            "none".to_string()
        } else {
            decay_epochs.join(",")
        };
        format!(
            "# Master seed: scene i uses random stream i+1, training uses stream 0.\n\
             seed = {}\n\
             \n\
             # Scene generator: class priors as name:WxLxH:jitter, comma separated.\n\
             classes = {}\n\
             synth.objects_min = {}\n\
             synth.objects_max = {}\n\
             synth.surface_density = {}\n\
             synth.clutter_fraction = {}\n\
             synth.room_extent = {}\n\
             \n\
             # Seed encoder.\n\
             encoder.seeds = {}\n\
             encoder.radius = {}\n\
             encoder.neighbors = {}\n\
             encoder.feature_dim = {}\n\
             \n\
             # Vote clustering (per primitive kind).\n\
             cluster.count = {}\n\
             cluster.radius = {}\n\
             cluster.neighbors = {}\n\
             \n\
             # Context modules; attention_scale `default` means 1/sqrt(feature_dim).\n\
             context.enable_gcm = {}\n\
             context.enable_pcm = {}\n\
             context.enable_hcm = {}\n\
             context.attention_scale = {}\n\
             context.cluster_attention = {}\n\
             \n\
             # Refinement cascade.\n\
             cascade.thresholds = {}\n\
             cascade.repool_radius = {}\n\
             \n\
             # Post-processing.\n\
             nms.iou = {}\n\
             count.confidence = {}\n\
             \n\
             # Training.\n\
             train.epochs = {}\n\
             train.learning_rate = {}\n\
             train.lr_decay_epochs = {}\n\
             train.lr_decay_factor = {}\n\
             train.batch_size = {}\n\
             train.vote_loss_weight = {}\n\
             train.size_loss_weight = {}\n\
             train.objectness_loss_weight = {}\n\
             train.objectness_positive_weight = {}\n\
             train.class_loss_weight = {}\n\
             train.residual_loss_weight = {}\n",
            self.seed,
            classes.join(","),
            self.synth.objects_min,
            self.synth.objects_max,
            self.synth.surface_density,
            self.synth.clutter_fraction,
            self.synth.room_extent,
            self.encoder.seeds,
            self.encoder.radius,
            self.encoder.neighbors,
            self.encoder.feature_dim,
            self.cluster.count,
            self.cluster.radius,
            self.cluster.neighbors,
            self.context.enable_gcm,
            self.context.enable_pcm,
            self.context.enable_hcm,
            scale,
            cluster_attention,
            thresholds.join(","),
            self.cascade.repool_radius,
            self.nms_iou,
            self.count_confidence,
            self.train.epochs,
            self.train.learning_rate,
            decay_epochs,
            self.train.lr_decay_factor,
            self.train.batch_size,
            self.train.vote_loss_weight,
            self.train.size_loss_weight,
            self.train.objectness_loss_weight,
            self.train.objectness_positive_weight,
            self.train.class_loss_weight,
            self.train.residual_loss_weight,
        )
    }
}

fn bad(line: usize, key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_classes(line: usize, key: &str, value: &str) -> Result<Vec<ClassPrior>, ConfigError> {
    let mut priors = Vec::new();
    for entry in value.split(',') {
        let parts: Vec<&str> = entry.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(
                line,
                key,
                format!("expected name:WxLxH:jitter, got {entry:?}"),
            ));
        }
        let dims: Vec<&str> = parts[1].split('x').collect();
        if dims.len() != 3 {
            return Err(bad(
                line,
                key,
                format!("expected three x-separated sizes, got {:?}", parts[1]),
            ));
        }
        let mut size = [0.0f64; 3];
        for (i, d) in dims.iter().enumerate() {
            size[i] = d
                .parse()
                .map_err(|_| bad(line, key, format!("size {d:?} is not a number")))?;
        }
        let jitter: f64 = parts[2]
            .parse()
            .map_err(|_| bad(line, key, format!("jitter {:?} is not a number", parts[2])))?;
        priors.push(ClassPrior {
            name: parts[0].to_string(),
            size,
            jitter,
        });
    }
    Ok(priors)
}

/// Parses overrides on top of the defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            text: raw.to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();

        macro_rules! num {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| bad(line, key, format!("{value:?} is not a valid number")))?
            };
        }
        let parse_bool = || -> Result<bool, ConfigError> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(line, key, format!("{value:?} is not true/false"))),
            }
        };

        match key {
            "seed" => {
                let seed = num!(u64);
                cfg.seed = seed;
                cfg.synth.seed = seed;
            }
            "classes" => cfg.synth.priors = parse_classes(line, key, value)?,
            "synth.objects_min" => cfg.synth.objects_min = num!(usize),
            "synth.objects_max" => cfg.synth.objects_max = num!(usize),
            "synth.surface_density" => cfg.synth.surface_density = num!(f64),
            "synth.clutter_fraction" => cfg.synth.clutter_fraction = num!(f64),
            "synth.room_extent" => cfg.synth.room_extent = num!(f64),
            "encoder.seeds" => cfg.encoder.seeds = num!(usize),
            "encoder.radius" => cfg.encoder.radius = num!(f64),
            "encoder.neighbors" => cfg.encoder.neighbors = num!(usize),
            "encoder.feature_dim" => cfg.encoder.feature_dim = num!(usize),
            "cluster.count" => cfg.cluster.count = num!(usize),
            "cluster.radius" => cfg.cluster.radius = num!(f64),
            "cluster.neighbors" => cfg.cluster.neighbors = num!(usize),
            "context.enable_gcm" => cfg.context.enable_gcm = parse_bool()?,
            "context.enable_pcm" => cfg.context.enable_pcm = parse_bool()?,
            "context.enable_hcm" => cfg.context.enable_hcm = parse_bool()?,
            "context.attention_scale" => {
                cfg.context.attention_scale = if value == "default" {
                    None
                } else {
                    Some(num!(f64))
                };
            }
            "context.cluster_attention" => {
                cfg.context.cluster_attention = match value {
                    "across" => ClusterAttention::AcrossClusters,
                    "within" => ClusterAttention::WithinCluster,
                    _ => {
                        return Err(bad(
                            line,
                            key,
                            format!("{value:?} is not `across` or `within`"),
                        ))
                    }
                };
            }
            "cascade.thresholds" => {
                let mut thresholds = Vec::new();
                for tok in value.split(',') {
                    thresholds.push(tok.trim().parse::<f64>().map_err(|_| {
                        bad(line, key, format!("threshold {tok:?} is not a number"))
                    })?);
                }
                cfg.cascade.thresholds = thresholds;
            }
            "cascade.repool_radius" => cfg.cascade.repool_radius = num!(f64),
            "nms.iou" => cfg.nms_iou = num!(f64),
            "count.confidence" => cfg.count_confidence = num!(f64),
            "train.epochs" => cfg.train.epochs = num!(usize),
            "train.learning_rate" => cfg.train.learning_rate = num!(f64),
            "train.lr_decay_epochs" => {
                let mut epochs = Vec::new();
                if value != "none" && !value.is_empty() {
                    for tok in value.split(',') {
                        epochs.push(tok.trim().parse::<usize>().map_err(|_| {
                            bad(line, key, format!("epoch {tok:?} is not a number"))
                        })?);
                    }
                }
                cfg.train.lr_decay_epochs = epochs;
            }
            "train.lr_decay_factor" => cfg.train.lr_decay_factor = num!(f64),
            "train.batch_size" => cfg.train.batch_size = num!(usize),
            "train.vote_loss_weight" => cfg.train.vote_loss_weight = num!(f64),
            "train.size_loss_weight" => cfg.train.size_loss_weight = num!(f64),
            "train.objectness_loss_weight" => cfg.train.objectness_loss_weight = num!(f64),
            "train.objectness_positive_weight" => {
                cfg.train.objectness_positive_weight = num!(f64)
            }
            "train.class_loss_weight" => cfg.train.class_loss_weight = num!(f64),
            "train.residual_loss_weight" => cfg.train.residual_loss_weight = num!(f64),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
