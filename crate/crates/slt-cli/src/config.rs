//! Run configuration: one JSON document with optional `data`, `visual`,
//! `translation`, `mapper`, and `train` sections. Absent fields take the
//! documented defaults; unknown fields are rejected with the offending key
//! named.
//!
//! Defaults couple the sections where a mismatch would only ever be a
//! mistake: the encoder's input width follows the generated feature width,
//! its vocabulary size follows the generator (and is re-derived from the
//! corpus at training time regardless), and the mapper's widths follow the
//! chosen tap and the translation model width.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slt_core::data::SyntheticSpec;
use slt_core::mapper::{FeatureKind, MapperConfig};
use slt_core::pipeline::{Stage, TrainConfig};
use slt_core::translation::TranslationConfig;
use slt_core::visual::VisualEncoderConfig;
use slt_core::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub visual: VisualSection,
    pub translation: TranslationSection,
    pub mapper: MapperSection,
    pub train: TrainSection,
}

/// Mirrors [`SyntheticSpec`] plus the split sizes. Defaults: the spec
/// defaults with 500 train / 50 dev / 50 test samples.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub vocab_size: Option<usize>,
    pub frames_per_gloss: Option<usize>,
    pub feature_dim: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_dev: Option<usize>,
    pub n_test: Option<usize>,
}

/// Mirrors [`VisualEncoderConfig`]. `input_dim` defaults to the data
/// section's feature width and `vocab_size` to its gloss inventory.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualSection {
    pub input_dim: Option<usize>,
    pub backbone_dim: Option<usize>,
    pub repr_dim: Option<usize>,
    pub vocab_size: Option<usize>,
    pub backbone_blocks: Option<usize>,
    pub freeze_backbone: Option<bool>,
}

/// Mirrors [`TranslationConfig`].
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationSection {
    pub layers_enc: Option<usize>,
    pub layers_dec: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub max_len: Option<usize>,
}

/// Mirrors [`MapperConfig`]. Defaults: gloss-representation tap, `d_in` from
/// the tap width, `d_hidden` and `d_out` from the translation model width.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperSection {
    pub input_kind: Option<FeatureKind>,
    pub d_in: Option<usize>,
    pub d_hidden: Option<usize>,
    pub d_out: Option<usize>,
    pub init_from_embedding: Option<bool>,
}

/// Mirrors [`TrainConfig`] minus the stage, which the subcommand decides.
/// `epochs` defaults per stage (80 for the pretraining stages, 40 joint).
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_visual: Option<f64>,
    pub lr_translation: Option<f64>,
    pub weight_decay: Option<f64>,
    pub ctc_weight: Option<f64>,
    pub ce_weight: Option<f64>,
    pub freeze_backbone: Option<bool>,
    pub seed: Option<u64>,
    pub lang: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `SLT_SEED`, when set, overrides both the data and the training seed.
    pub fn apply_seed_override(&mut self) -> Result<()> {
        match std::env::var("SLT_SEED") {
            Ok(raw) => {
                let seed: u64 = raw.trim().parse().map_err(|_| {
                    Error::Config(format!("SLT_SEED must be an unsigned integer, got {raw:?}"))
                })?;
                self.data.seed = Some(seed);
                self.train.seed = Some(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(std::env::VarError::NotUnicode(_)) => {
                Err(Error::Config("SLT_SEED is not valid UTF-8".to_string()))
            }
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            vocab_size: self.data.vocab_size.unwrap_or(d.vocab_size),
            frames_per_gloss: self.data.frames_per_gloss.unwrap_or(d.frames_per_gloss),
            feature_dim: self.data.feature_dim.unwrap_or(d.feature_dim),
            noise_sigma: self.data.noise_sigma.unwrap_or(d.noise_sigma),
            seed: self.data.seed.unwrap_or(d.seed),
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.data.n_train.unwrap_or(500),
            self.data.n_dev.unwrap_or(50),
            self.data.n_test.unwrap_or(50),
        )
    }

    pub fn visual_cfg(&self) -> VisualEncoderConfig {
        let spec = self.synthetic_spec();
        let d = VisualEncoderConfig::default();
        VisualEncoderConfig {
            input_dim: self.visual.input_dim.unwrap_or(spec.feature_dim),
            backbone_dim: self.visual.backbone_dim.unwrap_or(d.backbone_dim),
            repr_dim: self.visual.repr_dim.unwrap_or(d.repr_dim),
            vocab_size: self.visual.vocab_size.unwrap_or(spec.vocab_size),
            backbone_blocks: self.visual.backbone_blocks.unwrap_or(d.backbone_blocks),
            freeze_backbone: self.visual.freeze_backbone.unwrap_or(d.freeze_backbone),
        }
    }

    pub fn translation_cfg(&self) -> TranslationConfig {
        let d = TranslationConfig::default();
        TranslationConfig {
            layers_enc: self.translation.layers_enc.unwrap_or(d.layers_enc),
            layers_dec: self.translation.layers_dec.unwrap_or(d.layers_dec),
            d_model: self.translation.d_model.unwrap_or(d.d_model),
            heads: self.translation.heads.unwrap_or(d.heads),
            dropout: self.translation.dropout.unwrap_or(d.dropout),
            label_smoothing: self.translation.label_smoothing.unwrap_or(d.label_smoothing),
            max_len: self.translation.max_len.unwrap_or(d.max_len),
        }
    }

    /// Resolves against the encoder and translation configurations actually
    /// in use, which for the joint stage come from the loaded checkpoints.
    pub fn mapper_cfg(
        &self,
        visual: &VisualEncoderConfig,
        translation: &TranslationConfig,
    ) -> MapperConfig {
        let kind = self.mapper.input_kind.unwrap_or(FeatureKind::GlossRepresentation);
        let d_out = self.mapper.d_out.unwrap_or(translation.d_model);
        MapperConfig {
            input_kind: kind,
            d_in: self.mapper.d_in.unwrap_or_else(|| kind.expected_d_in(visual)),
            d_hidden: self.mapper.d_hidden.unwrap_or(d_out),
            d_out,
            init_from_embedding: self.mapper.init_from_embedding.unwrap_or(false),
        }
    }

    pub fn train_cfg(&self, stage: Stage) -> TrainConfig {
        let d = TrainConfig::for_stage(stage);
        TrainConfig {
            stage,
            epochs: self.train.epochs.unwrap_or(d.epochs),
            batch_size: self.train.batch_size.unwrap_or(d.batch_size),
            lr_visual: self.train.lr_visual.unwrap_or(d.lr_visual),
            lr_translation: self.train.lr_translation.unwrap_or(d.lr_translation),
            weight_decay: self.train.weight_decay.unwrap_or(d.weight_decay),
            ctc_weight: self.train.ctc_weight.unwrap_or(d.ctc_weight),
            ce_weight: self.train.ce_weight.unwrap_or(d.ce_weight),
            freeze_backbone: self.train.freeze_backbone.unwrap_or(d.freeze_backbone),
            seed: self.train.seed.unwrap_or(d.seed),
            lang: self.train.lang.clone().unwrap_or(d.lang),
        }
    }
}

/// The configuration a run actually used, defaults applied, written next to
/// its outputs. Sections a command does not touch are omitted.
#[derive(Debug, Default, Serialize)]
pub struct EffectiveConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<EffectiveData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub visual: Option<VisualEncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation: Option<TranslationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapper: Option<MapperConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Serialize)]
pub struct EffectiveData {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}
