//! Model and training configuration. Defaults are the desk-scale settings;
//! the larger reference settings stay reachable through [`ModelConfig::paper_scale`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared hidden width d for every component.
    pub hidden: usize,
    /// Self-attention layers in the text encoder.
    pub text_layers: usize,
    /// Joint visual-lingual encoder layers.
    pub fusion_layers: usize,
    /// Decoder layers refining the entity queries.
    pub tmp_decoder_layers: usize,
    /// Feedforward width multiplier inside transformer blocks.
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Layer norm before each residual branch (the only supported mode is
    /// pre-norm; the flag is kept so configs can state it explicitly).
    pub pre_norm: bool,
    pub max_text_len: usize,
    /// Most entities a caption may refer to.
    pub n_max_entities: usize,
    /// Largest representable relation count for the count head.
    pub k_max_relations: usize,
    /// Threshold tau on per-token entity probability for candidate spans.
    pub span_threshold: f64,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_bbox: f64,
    pub lambda_relation: f64,
    pub use_tmp: bool,
    pub use_eir: bool,
    pub use_relation_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            text_layers: 1,
            fusion_layers: 2,
            tmp_decoder_layers: 1,
            ffn_mult: 2,
            dropout: 0.1,
            pre_norm: true,
            max_text_len: 80,
            n_max_entities: 4,
            k_max_relations: 6,
            span_threshold: 0.5,
            image_size: 64,
            channels: 3,
            patch_size: 8,
            lambda_iou: 1.0,
            lambda_l1: 1.0,
            lambda_bbox: 1.0,
            lambda_relation: 1.0,
            use_tmp: true,
            use_eir: true,
            use_relation_loss: true,
        }
    }
}

impl ModelConfig {
    /// Reference-scale settings (hidden 256, 6 fusion layers, 2 decoder layers).
    pub fn paper_scale() -> Self {
        ModelConfig {
            hidden: 256,
            text_layers: 2,
            fusion_layers: 6,
            tmp_decoder_layers: 2,
            ffn_mult: 4,
            ..ModelConfig::default()
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.span_threshold > 0.0 && self.span_threshold < 1.0) {
            return Err(Error::Config("span_threshold must be in (0, 1)".into()));
        }
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_l1", self.lambda_l1),
            ("lambda_bbox", self.lambda_bbox),
            ("lambda_relation", self.lambda_relation),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if self.n_max_entities == 0 {
            return Err(Error::Config("n_max_entities must be at least 1".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config("image_size must be divisible by patch_size".into()));
        }
        if self.max_text_len == 0 {
            return Err(Error::Config("max_text_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_head: f64,
    /// Learning rate for the text and image backbones.
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Caption truncation during the token-labeling stage.
    pub stage1_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_head: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 1,
            epochs_stage1: 40,
            epochs_stage2: 60,
            stage1_max_len: 60,
        }
    }
}

impl TrainConfig {
    /// Shortened schedule used by the shipped acceptance configuration.
    pub fn desk_acceptance() -> Self {
        TrainConfig { epochs_stage1: 15, epochs_stage2: 30, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_head < 0.0 || self.lr_backbone < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// On-disk run configuration: the model section plus optimizer fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, Some(e.line()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
