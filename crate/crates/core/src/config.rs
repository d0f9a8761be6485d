//! Flat `key=value` run configuration shared by every command.
//!
//! The echo written next to each run lists every key, so feeding it back
//! through [`RunConfig::from_text`] reproduces the run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AugmentationConfig, Layout};
use crate::error::{Error, Result};
use crate::network::{BackboneKind, NetworkConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Disjoint train and test identities, halved in sorted order.
    Open,
    /// Every identity appears in training, gallery and query.
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub toy: bool,
    pub dataset_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub distractor_root: Option<PathBuf>,
    pub backbone_weights: Option<PathBuf>,
    pub split: SplitKind,
    pub repetitions: u64,
    pub eval_batch: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            toy: false,
            dataset_root: None,
            manifest: None,
            distractor_root: None,
            backbone_weights: None,
            split: SplitKind::Open,
            repetitions: 10,
            eval_batch: 32,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "toy",
    "dataset_root",
    "manifest",
    "distractor_root",
    "backbone_weights",
    "split",
    "repetitions",
    "eval_batch",
    "backbone",
    "backbone_widths",
    "last_stride",
    "split_point",
    "kernel_size",
    "input_height",
    "input_width",
    "reduced_dim",
    "lrelu_slope",
    "dropout",
    "spatial_branch",
    "channel_branch",
    "use_rpe",
    "rpe_variant",
    "share_tail",
    "epochs",
    "batch_size",
    "base_lr",
    "warmup_start_lr",
    "warmup_epochs",
    "decays",
    "weight_decay",
    "label_smoothing",
    "smoothing",
    "backbone_lr_ratio",
    "per_iteration_warmup",
    "checkpoint_every",
    "freeze_gamma",
    "resize",
    "crop",
    "flip_p",
    "brightness",
    "contrast",
    "saturation",
    "center_crop",
    "mean",
    "std",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults for the synthetic smoke setting.
    pub fn toy() -> Self {
        RunConfig {
            toy: true,
            split: SplitKind::Closed,
            repetitions: 1,
            network: NetworkConfig::toy(crate::training::TOY_IDENTITIES),
            train: TrainConfig::toy(),
            augmentation: AugmentationConfig::toy(),
            ..Default::default()
        }
    }

    /// Set one key; unknown keys and unparsable values are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        let a = &mut self.augmentation;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "toy" => self.toy = parse_bool(key, value)?,
            "dataset_root" => self.dataset_root = parse_path(value),
            "manifest" => self.manifest = parse_path(value),
            "distractor_root" => self.distractor_root = parse_path(value),
            "backbone_weights" => self.backbone_weights = parse_path(value),
            "split" => {
                self.split = match value.trim() {
                    "open" => SplitKind::Open,
                    "closed" => SplitKind::Closed,
                    other => return Err(Error::Config(format!("split: expected open or closed, got {other:?}"))),
                }
            }
            "repetitions" => self.repetitions = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "backbone" => {
                n.backbone.kind = match value.trim() {
                    "toy" => BackboneKind::Toy,
                    "external" => BackboneKind::External,
                    other => return Err(Error::Config(format!("backbone: expected toy or external, got {other:?}"))),
                }
            }
            "backbone_widths" => n.backbone.widths = parse_list(key, value)?,
            "last_stride" => n.backbone.last_stride = parse(key, value)?,
            "split_point" => n.backbone.split_point = parse(key, value)?,
            "kernel_size" => n.backbone.kernel_size = parse(key, value)?,
            "input_height" => n.input_hw.0 = parse(key, value)?,
            "input_width" => n.input_hw.1 = parse(key, value)?,
            "reduced_dim" => n.reduced_dim = parse(key, value)?,
            "lrelu_slope" => n.lrelu_slope = parse(key, value)?,
            "dropout" => n.dropout = parse(key, value)?,
            "spatial_branch" => n.branches.spatial = parse_bool(key, value)?,
            "channel_branch" => n.branches.channel = parse_bool(key, value)?,
            "use_rpe" => n.use_rpe = parse_bool(key, value)?,
            "rpe_variant" => n.rpe_variant = parse(key, value)?,
            "share_tail" => n.share_tail = parse_bool(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "warmup_start_lr" => t.warmup_start_lr = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "decays" => {
                t.decays = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|item| {
                        let (epoch, lr) = item
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("decays: expected epoch:lr, got {item:?}")))?;
                        Ok((parse(key, epoch)?, parse(key, lr)?))
                    })
                    .collect::<Result<_>>()?
            }
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "smoothing" => t.smoothing = parse(key, value)?,
            "backbone_lr_ratio" => t.backbone_lr_ratio = parse(key, value)?,
            "per_iteration_warmup" => t.per_iteration_warmup = parse_bool(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "freeze_gamma" => t.freeze_gamma = parse_bool(key, value)?,
            "resize" => a.resize = parse(key, value)?,
            "crop" => a.crop = parse(key, value)?,
            "flip_p" => a.flip_p = parse(key, value)?,
            "brightness" => a.brightness = parse(key, value)?,
            "contrast" => a.contrast = parse(key, value)?,
            "saturation" => a.saturation = parse(key, value)?,
            "center_crop" => a.center_crop = parse_bool(key, value)?,
            "mean" => a.mean = parse_triple(key, value)?,
            "std" => a.std = parse_triple(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let n = &self.network;
        let t = &self.train;
        let a = &self.augmentation;
        Some(match key {
            "seed" => self.seed.to_string(),
            "toy" => self.toy.to_string(),
            "dataset_root" => show_path(&self.dataset_root),
            "manifest" => show_path(&self.manifest),
            "distractor_root" => show_path(&self.distractor_root),
            "backbone_weights" => show_path(&self.backbone_weights),
            "split" => match self.split {
                SplitKind::Open => "open".into(),
                SplitKind::Closed => "closed".into(),
            },
            "repetitions" => self.repetitions.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            "backbone" => match n.backbone.kind {
                BackboneKind::Toy => "toy".into(),
                BackboneKind::External => "external".into(),
            },
            "backbone_widths" => join(&n.backbone.widths),
            "last_stride" => n.backbone.last_stride.to_string(),
            "split_point" => n.backbone.split_point.to_string(),
            "kernel_size" => n.backbone.kernel_size.to_string(),
            "input_height" => n.input_hw.0.to_string(),
            "input_width" => n.input_hw.1.to_string(),
            "reduced_dim" => n.reduced_dim.to_string(),
            "lrelu_slope" => n.lrelu_slope.to_string(),
            "dropout" => n.dropout.to_string(),
            "spatial_branch" => n.branches.spatial.to_string(),
            "channel_branch" => n.branches.channel.to_string(),
            "use_rpe" => n.use_rpe.to_string(),
            "rpe_variant" => n.rpe_variant.to_string(),
            "share_tail" => n.share_tail.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "warmup_start_lr" => t.warmup_start_lr.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "decays" => t
                .decays
                .iter()
                .map(|(e, lr)| format!("{e}:{lr}"))
                .collect::<Vec<_>>()
                .join(","),
            "weight_decay" => t.weight_decay.to_string(),
            "label_smoothing" => t.label_smoothing.to_string(),
            "smoothing" => t.smoothing.to_string(),
            "backbone_lr_ratio" => t.backbone_lr_ratio.to_string(),
            "per_iteration_warmup" => t.per_iteration_warmup.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "freeze_gamma" => t.freeze_gamma.to_string(),
            "resize" => a.resize.to_string(),
            "crop" => a.crop.to_string(),
            "flip_p" => a.flip_p.to_string(),
            "brightness" => a.brightness.to_string(),
            "contrast" => a.contrast.to_string(),
            "saturation" => a.saturation.to_string(),
            "center_crop" => a.center_crop.to_string(),
            "mean" => join(&a.mean),
            "std" => join(&a.std),
            _ => return None,
        })
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, (key, value)) in parse_pairs(text)?.into_iter().enumerate() {
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {}: {e}", line + 1)))?;
        }
        Ok(())
    }

    /// Resolve a config text on top of the defaults it selects.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let toy = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "toy")
            .map(|(k, v)| parse_bool(k, v))
            .transpose()?
            .unwrap_or(false);
        let mut cfg = if toy { RunConfig::toy() } else { RunConfig::default() };
        for (key, value) in pairs {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn layout(&self) -> Layout {
        match &self.manifest {
            Some(m) => Layout::Manifest(m.clone()),
            None => Layout::FolderPerIdentity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        if (self.augmentation.crop as usize, self.augmentation.crop as usize) != self.network.input_hw {
            return Err(Error::Config(format!(
                "crop {} does not match input {}x{}",
                self.augmentation.crop, self.network.input_hw.0, self.network.input_hw.1
            )));
        }
        self.train.validate()?;
        self.augmentation.validate()?;
        self.network.validate()
    }
}

/// Split `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
