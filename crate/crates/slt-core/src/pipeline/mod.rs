//! Staged training orchestration: visual pretraining under CTC, translation
//! pretraining under cross entropy, joint end-to-end training through the
//! mapper, plus evaluation over the four tasks and checkpointing.

mod checkpoint;
mod evaluate;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use evaluate::{evaluate, EvalOptions};
pub use train::{pretrain_translation, pretrain_visual, train_joint, EpochLog, JointInit, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::ctc::GlossVocab;
use crate::error::{Error, Result};
use crate::mapper::MapperConfig;
use crate::numerics::ParamStore;
use crate::translation::{TextVocab, TranslationConfig};
use crate::visual::VisualEncoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainVisual,
    PretrainTranslation,
    TrainJoint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainVisual => "pretrain_visual",
            Stage::PretrainTranslation => "pretrain_translation",
            Stage::TrainJoint => "train_joint",
        }
    }

    fn default_epochs(self) -> usize {
        match self {
            Stage::PretrainVisual | Stage::PretrainTranslation => 80,
            Stage::TrainJoint => 40,
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for the visual encoder and the mapper.
    pub lr_visual: f64,
    /// Learning rate for the translation network.
    pub lr_translation: f64,
    pub weight_decay: f64,
    pub ctc_weight: f64,
    pub ce_weight: f64,
    /// Joint stage only: keep backbone parameters and statistics fixed.
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Language tag driving the language-id symbols.
    pub lang: String,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            epochs: stage.default_epochs(),
            batch_size: 8,
            lr_visual: 1e-3,
            lr_translation: 1e-5,
            weight_decay: 1e-3,
            ctc_weight: 1.0,
            ce_weight: 1.0,
            freeze_backbone: true,
            seed: 0,
            lang: "de_DE".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if self.ctc_weight < 0.0 || self.ce_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".to_string()));
        }
        if self.stage == Stage::TrainJoint && self.ctc_weight == 0.0 && self.ce_weight == 0.0 {
            return Err(Error::Config(
                "joint training needs a positive ctc_weight or ce_weight".to_string(),
            ));
        }
        if self.lr_visual < 0.0 || self.lr_translation < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("rates must be non-negative".to_string()));
        }
        Ok(())
    }

    /// Learning rate by parameter prefix: translation parameters train at
    /// their own (typically smaller) rate.
    pub fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with("trans.") {
            self.lr_translation
        } else {
            self.lr_visual
        }
    }
}

/// The three sub-networks with everything needed to run them: parameters,
/// configurations, vocabularies, and which stages produced them.
#[derive(Clone, Debug)]
pub struct PipelineModel {
    pub params: ParamStore,
    pub visual_cfg: VisualEncoderConfig,
    pub translation_cfg: TranslationConfig,
    pub mapper_cfg: Option<MapperConfig>,
    pub gloss_vocab: Option<GlossVocab>,
    pub src_vocab: Option<TextVocab>,
    pub tgt_vocab: Option<TextVocab>,
    pub lang: String,
    /// Stage names in the order they ran.
    pub stages: Vec<String>,
}

impl PipelineModel {
    pub fn has_visual(&self) -> bool {
        self.params.contains("visual.classify.w") && self.gloss_vocab.is_some()
    }

    pub fn has_translation(&self) -> bool {
        self.params.contains("trans.src_embed")
            && self.src_vocab.is_some()
            && self.tgt_vocab.is_some()
    }

    pub fn has_mapper(&self) -> bool {
        self.params.contains("mapper.fc1.w") && self.mapper_cfg.is_some()
    }

    pub fn require_visual(&self) -> Result<&GlossVocab> {
        if !self.has_visual() {
            return Err(Error::CheckpointRequired(
                "checkpoint has no trained visual encoder".to_string(),
            ));
        }
        Ok(self.gloss_vocab.as_ref().expect("checked by has_visual"))
    }

    pub fn require_translation(&self) -> Result<(&TextVocab, &TextVocab)> {
        if !self.has_translation() {
            return Err(Error::CheckpointRequired(
                "checkpoint has no trained translation network".to_string(),
            ));
        }
        Ok((
            self.src_vocab.as_ref().expect("checked"),
            self.tgt_vocab.as_ref().expect("checked"),
        ))
    }

    pub fn require_mapper(&self) -> Result<&MapperConfig> {
        if !self.has_mapper() {
            return Err(Error::CheckpointRequired(
                "checkpoint has no trained visual-language mapper".to_string(),
            ));
        }
        Ok(self.mapper_cfg.as_ref().expect("checked"))
    }
}
