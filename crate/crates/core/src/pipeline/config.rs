//! One TOML file drives generation, training and evaluation.
//!
//! Optimizer and loss hyper-parameters live under `[paper]`; the remaining
//! sections size the model, the synthetic data and the evaluation protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bmn::{BnrMode, EmbeddingKind, MgeConfig, MgeLevels};
use crate::error::{ReidError, Result};
use crate::fmn::{FmnConfig, FmnMode};
use crate::losses::{OimConfig, TripletConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub paper: PaperParams,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperParams {
    pub tau: f64,
    pub momentum: f64,
    pub drop_path: f64,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for PaperParams {
    fn default() -> Self {
        PaperParams {
            tau: 1.0 / 30.0,
            momentum: 0.5,
            drop_path: 0.1,
            margin: 0.25,
            lr: 1e-4,
            epochs: 20,
            warmup_epochs: 1,
            decay_epochs: vec![8, 14],
            decay_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the four stride-2 backbone stages.
    pub backbone_channels: [usize; 4],
    pub level_dim: usize,
    pub cbam_reduction: usize,
    pub extractor_channels: [usize; 2],
    pub heads: usize,
    pub ffn_hidden: usize,
    pub embedding: EmbeddingKind,
    pub mge_levels: MgeLevels,
    pub bnr: BnrMode,
    pub fmn: FmnMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: [64, 128, 256, 512],
            level_dim: 512,
            cbam_reduction: 16,
            extractor_channels: [512, 256],
            heads: 8,
            ffn_hidden: 2048,
            embedding: EmbeddingKind::Mge,
            mge_levels: MgeLevels::Both,
            bnr: BnrMode::On,
            fmn: FmnMode::CrossAttention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bnr: f64,
    pub boim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cq_size: usize,
    pub triplet_p: usize,
    pub triplet_n: usize,
    pub loss_weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cq_size: 500,
            triplet_p: 4,
            triplet_n: 8,
            loss_weights: LossWeights { bnr: 1.0, boim: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub sprite_width: usize,
    pub sprite_height: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub cameras: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub persons_per_scene: [usize; 2],
    /// Probability that a placed person carries no identity.
    pub unlabeled_fraction: f64,
    /// Background boxes per person box during training.
    pub background_ratio: f64,
    pub background_max_iou: f64,
    /// Box padding around each sprite, as a fraction of its width (half that vertically).
    pub box_margin: f64,
    /// Per-channel tint factors are drawn from `[1 - j, 1 + j]`.
    pub tint_jitter: f64,
    pub brightness_range: [f64; 2],
    pub max_shadow: f64,
    /// Palette-colored rectangles painted behind the people of each scene.
    pub clutter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            width: 128,
            height: 256,
            sprite_width: 32,
            sprite_height: 64,
            train_identities: 30,
            test_identities: 20,
            cameras: 6,
            train_scenes: 400,
            test_scenes: 200,
            persons_per_scene: [2, 4],
            unlabeled_fraction: 0.15,
            background_ratio: 1.0,
            background_max_iou: 0.3,
            box_margin: 0.15,
            tint_jitter: 0.3,
            brightness_range: [0.65, 1.25],
            max_shadow: 0.5,
            clutter: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub gallery_size: usize,
    pub gallery_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gallery_size: 100,
            gallery_sizes: vec![10, 25, 50, 100, 200],
            seed: 0,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: CONFIG_VERSION,
            paper: PaperParams::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    /// Reduced widths and data sized for a CPU training run of about twenty
    /// seconds. The structural constants (grids, strips, tokens, loss settings)
    /// are unchanged.
    pub fn desk() -> Self {
        Config {
            paper: PaperParams {
                lr: 2e-3,
                epochs: 8,
                warmup_epochs: 1,
                decay_epochs: vec![6, 7],
                ..PaperParams::default()
            },
            model: ModelConfig {
                backbone_channels: [8, 12, 16, 24],
                level_dim: 16,
                cbam_reduction: 16,
                extractor_channels: [24, 16],
                heads: 4,
                ffn_hidden: 64,
                ..ModelConfig::default()
            },
            data: DataConfig {
                width: 112,
                height: 128,
                sprite_width: 24,
                sprite_height: 48,
                train_identities: 40,
                test_identities: 12,
                cameras: 4,
                train_scenes: 128,
                test_scenes: 96,
                persons_per_scene: [2, 3],
                tint_jitter: 0.6,
                brightness_range: [0.5, 1.35],
                max_shadow: 0.6,
                clutter: 8,
                ..DataConfig::default()
            },
            loss: LossConfig {
                cq_size: 64,
                ..LossConfig::default()
            },
            eval: EvalConfig {
                gallery_size: 40,
                gallery_sizes: vec![5, 10, 20, 40, 80],
                seed: 0,
            },
            ..Config::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| ReidError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn embedding_dim(&self) -> usize {
        self.mge().embedding_dim()
    }

    pub fn mge(&self) -> MgeConfig {
        MgeConfig {
            embedding: self.model.embedding,
            levels: self.model.mge_levels,
            level_dim: self.model.level_dim,
            drop_path: self.paper.drop_path,
            cbam_reduction: self.model.cbam_reduction,
        }
    }

    pub fn fmn(&self) -> FmnConfig {
        FmnConfig {
            mode: self.model.fmn,
            extractor_channels: self.model.extractor_channels,
            heads: self.model.heads,
            ffn_hidden: self.model.ffn_hidden,
        }
    }

    pub fn oim(&self) -> OimConfig {
        OimConfig {
            tau: self.paper.tau,
            momentum: self.paper.momentum,
            cq_size: self.loss.cq_size,
        }
    }

    pub fn triplet(&self) -> TripletConfig {
        TripletConfig {
            margin: self.paper.margin,
            positives: self.loss.triplet_p,
            negatives: self.loss.triplet_n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ReidError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        self.mge().validate()?;
        self.triplet().validate()?;
        let p = &self.paper;
        if !(p.tau > 0.0) || !(0.0..=1.0).contains(&p.momentum) || !(p.lr > 0.0) || p.epochs == 0 {
            return bad(format!("invalid optimizer/loss settings in [paper]: {p:?}"));
        }
        if self.model.heads == 0 || self.embedding_dim() % self.model.heads != 0 {
            return bad(format!(
                "embedding dim {} is not divisible by {} heads",
                self.embedding_dim(),
                self.model.heads
            ));
        }
        let d = &self.data;
        if d.width % 16 != 0 || d.height % 16 != 0 {
            return bad(format!("scene size {}x{} must be a multiple of 16", d.width, d.height));
        }
        if d.width / 16 < 7 || d.height / 16 < 7 {
            return bad("scene must be at least 112x112 so the scene map pools to 7x7".into());
        }
        if d.sprite_width > d.width || d.sprite_height > d.height {
            return bad("sprite does not fit in the scene".into());
        }
        if d.train_identities < 2 || d.test_identities < 2 || d.cameras < 2 {
            return bad("need at least 2 identities per split and 2 cameras".into());
        }
        if d.persons_per_scene[0] == 0 || d.persons_per_scene[0] > d.persons_per_scene[1] {
            return bad(format!("invalid persons_per_scene {:?}", d.persons_per_scene));
        }
        if !(0.0..1.0).contains(&d.unlabeled_fraction) || d.background_ratio < 0.0 {
            return bad("unlabeled_fraction must lie in [0, 1) and background_ratio be nonnegative".into());
        }
        if !(0.0..0.5).contains(&d.box_margin)
            || !(0.0..1.0).contains(&d.tint_jitter)
            || !(0.0 < d.brightness_range[0] && d.brightness_range[0] <= d.brightness_range[1])
            || !(0.0..1.0).contains(&d.max_shadow)
        {
            return bad("invalid scene noise settings in [data]".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.eval.gallery_size == 0 || self.eval.gallery_sizes.is_empty() {
            return bad("gallery sizes must be positive".into());
        }
        Ok(())
    }
}

/// Ablation switches that can override a config from the command line or a grid file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mge_levels: Option<MgeLevels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bnr: Option<BnrMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fmn: Option<FmnMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &Config) -> Result<Config> {
        let mut c = cfg.clone();
        if let Some(v) = self.embedding {
            c.model.embedding = v;
        }
        if let Some(v) = self.mge_levels {
            c.model.mge_levels = v;
        }
        if let Some(v) = self.bnr {
            c.model.bnr = v;
        }
        if let Some(v) = self.fmn {
            c.model.fmn = v;
        }
        if let Some(v) = self.margin {
            c.paper.margin = v;
        }
        c.validate()?;
        Ok(c)
    }
}
