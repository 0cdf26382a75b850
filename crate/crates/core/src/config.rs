//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PfiqaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Adaptive,
    Concat,
    VitOnly,
    ResnetOnly,
}

impl FusionMode {
    pub fn uses_vit(self) -> bool {
        self != FusionMode::ResnetOnly
    }

    pub fn uses_resnet(self) -> bool {
        self != FusionMode::VitOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneTrainable {
    None,
    Vit,
    Resnet,
    Both,
}

impl BackboneTrainable {
    pub fn vit(self) -> bool {
        matches!(self, BackboneTrainable::Vit | BackboneTrainable::Both)
    }

    pub fn resnet(self) -> bool {
        matches!(self, BackboneTrainable::Resnet | BackboneTrainable::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Qads,
    Wind,
    Realsrq,
    /// Any dataset laid out with a manifest and MOS labels.
    Manifest,
    /// Procedurally generated in memory.
    Synthetic,
}

/// Published size of a benchmark: (LR contents, SR images, SR methods).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchmarkCounts {
    pub contents: usize,
    pub samples: usize,
    pub methods: usize,
    pub scales: &'static [u32],
}

impl DatasetFormat {
    pub fn labels_are_ranks(self) -> bool {
        self == DatasetFormat::Wind
    }

    pub fn expected_counts(self) -> Option<BenchmarkCounts> {
        match self {
            DatasetFormat::Qads => Some(BenchmarkCounts {
                contents: 60,
                samples: 980,
                methods: 21,
                scales: &[2, 3, 4],
            }),
            DatasetFormat::Wind => Some(BenchmarkCounts {
                contents: 13,
                samples: 312,
                methods: 8,
                scales: &[2, 4, 8],
            }),
            DatasetFormat::Realsrq => Some(BenchmarkCounts {
                contents: 180,
                samples: 1620,
                methods: 10,
                scales: &[2, 3, 4],
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_contents: usize,
    pub scales: Vec<f64>,
    /// Degradation strengths in `[0, 1]`; one sample per content, scale and level.
    pub degradations: Vec<f64>,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_contents: 10,
            scales: vec![2.0, 4.0],
            degradations: vec![0.0, 0.5, 1.0],
            image_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    pub root: Option<PathBuf>,
    /// Manifest file name relative to `root`.
    pub manifest: String,
    /// For rank labels: whether rank 1 is the best image.
    pub rank_one_is_best: bool,
    pub synthetic: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DatasetFormat::Synthetic,
            root: None,
            manifest: "manifest.tsv".into(),
            rank_one_is_best: true,
            synthetic: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub enable_perception_branch: bool,
    pub enable_fidelity_branch: bool,
    pub enable_scale_factor: bool,
    pub fusion_mode: FusionMode,
    pub backbone_trainable: BackboneTrainable,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            enable_perception_branch: true,
            enable_fidelity_branch: true,
            enable_scale_factor: true,
            fusion_mode: FusionMode::Adaptive,
            backbone_trainable: BackboneTrainable::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            min_learning_rate: 1e-6,
            weight_decay: 1e-2,
            batch_size: 4,
            max_epochs: 200,
        }
    }
}

/// Widths of the trainable heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels after the reduction convolutions.
    pub feature_channels: usize,
    /// Channels of the scale-conditioned branch features.
    pub branch_channels: usize,
    pub reduction_kernel: usize,
    pub scale_hidden: usize,
    pub score_hidden: usize,
    pub weight_hidden: usize,
    /// One global/local fusion weight pair per channel instead of one shared pair.
    pub per_channel_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_channels: 256,
            branch_channels: 256,
            reduction_kernel: 1,
            scale_hidden: 256,
            score_hidden: 64,
            weight_hidden: 64,
            per_channel_fusion: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// ViT-B/8 and ResNet-50 loaded from safetensors checkpoints.
    Pretrained,
    /// Small randomly initialised stand-ins with the same output shapes.
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub vit_checkpoint: Option<PathBuf>,
    pub resnet_checkpoint: Option<PathBuf>,
    /// Zero-based transformer blocks whose outputs are kept.
    pub vit_stage_blocks: Vec<usize>,
    pub fixture_seed: u64,
    /// Memory for caching frozen backbone outputs per distinct input; 0 disables.
    pub feature_cache_mb: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Fixture,
            vit_checkpoint: None,
            resnet_checkpoint: None,
            vit_stage_blocks: vec![1, 3, 5, 7, 9],
            fixture_seed: 0,
            feature_cache_mb: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub split_seed: u64,
    pub n_repeats: usize,
    pub train_ratio: f64,
    /// Split by content so no LR source is shared between train and test.
    pub grouped_split: bool,
    pub crop_size: usize,
    /// Fit a four-parameter logistic before computing PLCC.
    pub logistic_plcc: bool,
    pub dataset: DatasetConfig,
    pub ablation: AblationConfig,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            split_seed: 0,
            n_repeats: 5,
            train_ratio: 0.8,
            grouped_split: true,
            crop_size: 224,
            logistic_plcc: false,
            dataset: DatasetConfig::default(),
            ablation: AblationConfig::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(PfiqaError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(PfiqaError::Config(format!("{name} must be non-negative, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.ablation;
        if !a.enable_perception_branch && !a.enable_fidelity_branch {
            return Err(PfiqaError::Config("at least one branch must be enabled".into()));
        }
        positive("n_repeats", self.n_repeats as f64)?;
        positive("crop_size", self.crop_size as f64)?;
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(PfiqaError::Config(format!(
                "train_ratio must lie in (0, 1), got {}",
                self.train_ratio
            )));
        }
        let o = &self.optimizer;
        // a zero learning rate is a legitimate dry run
        non_negative("optimizer.learning_rate", o.learning_rate)?;
        non_negative("optimizer.min_learning_rate", o.min_learning_rate)?;
        non_negative("optimizer.weight_decay", o.weight_decay)?;
        positive("optimizer.batch_size", o.batch_size as f64)?;
        positive("optimizer.max_epochs", o.max_epochs as f64)?;
        let m = &self.model;
        for (name, v) in [
            ("model.feature_channels", m.feature_channels),
            ("model.branch_channels", m.branch_channels),
            ("model.scale_hidden", m.scale_hidden),
            ("model.score_hidden", m.score_hidden),
            ("model.weight_hidden", m.weight_hidden),
        ] {
            positive(name, v as f64)?;
        }
        if m.reduction_kernel.is_multiple_of(2) {
            return Err(PfiqaError::Config("model.reduction_kernel must be odd".into()));
        }
        if self.backbone.vit_stage_blocks.len() != 5 {
            return Err(PfiqaError::Config(format!(
                "backbone.vit_stage_blocks must name 5 blocks, got {}",
                self.backbone.vit_stage_blocks.len()
            )));
        }
        if !self.crop_size.is_multiple_of(32) {
            return Err(PfiqaError::Config(format!(
                "crop_size {} does not tile the backbones",
                self.crop_size
            )));
        }
        if self.dataset.format == DatasetFormat::Synthetic {
            let s = &self.dataset.synthetic;
            positive("dataset.synthetic.n_contents", s.n_contents as f64)?;
            if s.scales.is_empty() || s.degradations.is_empty() {
                return Err(PfiqaError::Config("synthetic corpus needs scales and degradations".into()));
            }
            for sc in &s.scales {
                if !(sc.is_finite() && *sc > 1.0) {
                    return Err(PfiqaError::Config(format!("synthetic scale {sc} must exceed 1")));
                }
            }
            for d in &s.degradations {
                if !(0.0..=1.0).contains(d) {
                    return Err(PfiqaError::Config(format!("degradation {d} outside [0, 1]")));
                }
            }
        } else if self.dataset.root.is_none() {
            return Err(PfiqaError::Config("dataset.root is required for on-disk datasets".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| PfiqaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PfiqaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PfiqaError::MissingFile(path.to_path_buf()),
            _ => PfiqaError::Io(e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Short stable digest of the serialized configuration.
    pub fn digest(&self) -> String {
        let text = self.to_toml_string().unwrap_or_default();
        let hash = Sha256::digest(text.as_bytes());
        hex::encode(&hash[..6])
    }
}
