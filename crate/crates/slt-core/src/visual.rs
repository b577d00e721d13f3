//! Sign2Gloss network: a temporally-downsampling backbone over per-frame
//! features, a projection + temporal-convolution head producing gloss
//! representations, and a linear classifier over the gloss vocabulary plus
//! blank.
//!
//! The backbone runs two stride-2 convolution blocks, so the output frame
//! rate is exactly ceil(T/4). Batch norm uses batch statistics across all
//! frames of a batch during training and stored running statistics during
//! evaluation; running statistics live in the parameter store as
//! non-trainable entries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{CtcDecode, GlossPosterior, GlossSequence};
use crate::data::VideoFeatures;
use crate::error::{Error, Result};
use crate::numerics::init::xavier_uniform;
use crate::numerics::scalar::s;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    /// Input feature dimension per frame.
    pub input_dim: usize,
    /// Channel width inside the backbone.
    pub backbone_dim: usize,
    /// Gloss representation dimension.
    pub repr_dim: usize,
    /// Gloss vocabulary size K; the classifier emits K+1 logits.
    pub vocab_size: usize,
    /// Stride-2 blocks; must total a ×4 temporal downsampling.
    pub backbone_blocks: usize,
    /// When set, joint training keeps backbone parameters fixed.
    pub freeze_backbone: bool,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            input_dim: 64,
            backbone_dim: 256,
            repr_dim: 128,
            vocab_size: 20,
            backbone_blocks: 2,
            freeze_backbone: false,
        }
    }
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if 1usize << self.backbone_blocks != 4 {
            return Err(Error::Config(format!(
                "backbone must downsample exactly ×4; {} stride-2 blocks give ×{}",
                self.backbone_blocks,
                1usize << self.backbone_blocks
            )));
        }
        if self.input_dim == 0 || self.backbone_dim == 0 || self.repr_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".to_string()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("gloss vocabulary must be non-empty".to_string()));
        }
        Ok(())
    }
}

/// Fresh batch statistics for one batch-norm site, to be folded into the
/// stored running statistics after an optimizer step.
#[derive(Clone, Debug)]
pub struct BnUpdate<S: Scalar = f64> {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

/// running ← (1−momentum)·running + momentum·batch.
pub fn apply_bn_updates<S: Scalar>(
    store: &mut ParamStore<S>,
    updates: &[BnUpdate<S>],
    momentum: f64,
) -> Result<()> {
    let m = s::<S>(momentum);
    let keep = s::<S>(1.0 - momentum);
    for u in updates {
        for (name, batch) in [(&u.mean_name, &u.mean), (&u.var_name, &u.var)] {
            let running = store.get_mut(name)?;
            let updated = running
                .value
                .zip_map(batch, |r, b| keep * r + m * b)?;
            running.value = updated;
        }
    }
    Ok(())
}

/// Per-sample outputs of one forward pass.
pub struct VisualForward<S: Scalar = f64> {
    /// Backbone features, one `[T'×d_backbone]` value per sample.
    pub backbone: Vec<Var>,
    /// Gloss representations, one `[T'×d_z]` value per sample.
    pub reprs: Vec<Var>,
    /// Classifier logits, one `[T'×(K+1)]` value per sample.
    pub logits: Vec<Var>,
    /// Batch statistics gathered in training mode; empty in eval mode.
    pub bn_updates: Vec<BnUpdate<S>>,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
}

impl VisualEncoder {
    pub fn new(cfg: VisualEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(VisualEncoder { cfg })
    }

    /// Inserts freshly initialized parameters under the `visual.` prefix.
    pub fn init_params<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut impl Rng) {
        let c = &self.cfg;
        let mut block_in = c.input_dim;
        for b in 0..c.backbone_blocks {
            let p = format!("visual.backbone.block{b}");
            store.insert(
                &format!("{p}.conv.w"),
                xavier_uniform(rng, &[3, block_in, c.backbone_dim], 3 * block_in, c.backbone_dim),
                true,
            );
            insert_bn(store, &format!("{p}.bn"), c.backbone_dim);
            block_in = c.backbone_dim;
        }
        store.insert(
            "visual.head.proj.w",
            xavier_uniform(rng, &[c.backbone_dim, c.repr_dim], c.backbone_dim, c.repr_dim),
            true,
        );
        insert_bn(store, "visual.head.proj.bn", c.repr_dim);
        for t in 0..2 {
            store.insert(
                &format!("visual.head.tconv{t}.w"),
                xavier_uniform(rng, &[3, c.repr_dim, c.repr_dim], 3 * c.repr_dim, c.repr_dim),
                true,
            );
            store.insert(&format!("visual.head.tconv{t}.b"), Tensor::zeros(&[c.repr_dim]), true);
        }
        store.insert(
            "visual.head.out.w",
            xavier_uniform(rng, &[c.repr_dim, c.repr_dim], c.repr_dim, c.repr_dim),
            true,
        );
        store.insert("visual.head.out.b", Tensor::zeros(&[c.repr_dim]), true);
        store.insert(
            "visual.classify.w",
            xavier_uniform(rng, &[c.repr_dim, c.vocab_size + 1], c.repr_dim, c.vocab_size + 1),
            true,
        );
        store.insert("visual.classify.b", Tensor::zeros(&[c.vocab_size + 1]), true);
    }

    pub fn params_present<S: Scalar>(&self, store: &ParamStore<S>) -> bool {
        store.contains("visual.classify.w")
    }

    /// Batch norm across every frame of every sample in the batch (training)
    /// or against stored running statistics (eval).
    fn bn_stage<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        prefix: &str,
        xs: Vec<Var>,
        train: bool,
        stats: &mut Vec<BnUpdate<S>>,
    ) -> Result<Vec<Var>> {
        let gamma = store.leaf(g, &format!("{prefix}.gamma"))?;
        let beta = store.leaf(g, &format!("{prefix}.beta"))?;
        let eps = s::<S>(BN_EPS);
        if train {
            let rows: Vec<usize> = xs.iter().map(|&x| g.shape_of(x)[0]).collect();
            let cat = g.concat_rows(&xs)?;
            let (y, mean, var) = g.batch_norm_train(cat, gamma, beta, eps)?;
            stats.push(BnUpdate {
                mean_name: format!("{prefix}.mean"),
                var_name: format!("{prefix}.var"),
                mean,
                var,
            });
            let mut out = Vec::with_capacity(rows.len());
            let mut start = 0;
            for r in rows {
                out.push(g.slice_rows(y, start, r)?);
                start += r;
            }
            Ok(out)
        } else {
            let mean = store.tensor(&format!("{prefix}.mean"))?.clone();
            let var = store.tensor(&format!("{prefix}.var"))?.clone();
            xs.into_iter()
                .map(|x| g.batch_norm_eval(x, gamma, beta, &mean, &var, eps))
                .collect()
        }
    }

    /// Runs backbone, head, and classifier over a batch of `[T_i×D_in]`
    /// inputs. Every sample must carry at least 4 frames.
    pub fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        batch: &[Var],
        train: bool,
    ) -> Result<VisualForward<S>> {
        if batch.is_empty() {
            return Err(Error::EmptySequence { op: "visual_forward" });
        }
        for &x in batch {
            let shape = g.shape_of(x);
            if shape.len() != 2 || shape[1] != self.cfg.input_dim {
                return Err(Error::ShapeMismatch {
                    op: "visual_forward",
                    lhs: shape,
                    rhs: vec![4, self.cfg.input_dim],
                });
            }
            if shape[0] < 4 {
                return Err(Error::InvalidArgument(format!(
                    "video needs at least 4 frames, got {}",
                    shape[0]
                )));
            }
        }
        let mut stats = Vec::new();
        let mut xs = batch.to_vec();
        // A frozen backbone stays in eval mode so its running statistics
        // neither drive normalization updates nor drift during training.
        let bb_train = train && !self.cfg.freeze_backbone;
        for b in 0..self.cfg.backbone_blocks {
            let p = format!("visual.backbone.block{b}");
            let w = store.leaf(g, &format!("{p}.conv.w"))?;
            xs = xs
                .into_iter()
                .map(|x| g.conv1d(x, w, 2, 1))
                .collect::<Result<Vec<_>>>()?;
            xs = self.bn_stage(g, store, &format!("{p}.bn"), xs, bb_train, &mut stats)?;
            xs = xs.into_iter().map(|x| g.relu(x)).collect();
        }
        let backbone = xs.clone();
        let proj_w = store.leaf(g, "visual.head.proj.w")?;
        xs = xs
            .into_iter()
            .map(|x| g.matmul(x, proj_w))
            .collect::<Result<Vec<_>>>()?;
        xs = self.bn_stage(g, store, "visual.head.proj.bn", xs, train, &mut stats)?;
        xs = xs.into_iter().map(|x| g.relu(x)).collect();
        for t in 0..2 {
            let w = store.leaf(g, &format!("visual.head.tconv{t}.w"))?;
            let b = store.leaf(g, &format!("visual.head.tconv{t}.b"))?;
            xs = xs
                .into_iter()
                .map(|x| g.add_row(g.conv1d(x, w, 1, 1)?, b))
                .collect::<Result<Vec<_>>>()?;
        }
        let out_w = store.leaf(g, "visual.head.out.w")?;
        let out_b = store.leaf(g, "visual.head.out.b")?;
        let reprs: Vec<Var> = xs
            .into_iter()
            .map(|x| Ok(g.relu(g.add_row(g.matmul(x, out_w)?, out_b)?)))
            .collect::<Result<Vec<_>>>()?;
        let cls_w = store.leaf(g, "visual.classify.w")?;
        let cls_b = store.leaf(g, "visual.classify.b")?;
        let logits: Vec<Var> = reprs
            .iter()
            .map(|&z| g.add_row(g.matmul(z, cls_w)?, cls_b))
            .collect::<Result<Vec<_>>>()?;
        Ok(VisualForward { backbone, reprs, logits, bn_updates: stats })
    }

    /// Full Sign2Gloss inference: encode, classify, CTC-decode. Evaluation
    /// mode throughout.
    pub fn sign2gloss_predict<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        v: &VideoFeatures,
        decode: CtcDecode,
    ) -> Result<GlossSequence> {
        if !self.params_present(store) {
            return Err(Error::CheckpointRequired(
                "visual encoder parameters are not loaded".to_string(),
            ));
        }
        let cls_cols = store.tensor("visual.classify.w")?.cols();
        if cls_cols != self.cfg.vocab_size + 1 {
            return Err(Error::Config(format!(
                "classifier emits {cls_cols} classes but the vocabulary needs {}",
                self.cfg.vocab_size + 1
            )));
        }
        let g = Graph::<S>::inference();
        let x = g.constant(v.values().cast::<S>());
        let fwd = self.forward(&g, store, &[x], false)?;
        let post = GlossPosterior::from_logits(&g.value(fwd.logits[0]))?;
        decode.run(&post)
    }
}

fn insert_bn<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::ones(&[dim]), true);
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[dim]), true);
    store.insert(&format!("{prefix}.mean"), Tensor::zeros(&[dim]), false);
    store.insert(&format!("{prefix}.var"), Tensor::ones(&[dim]), false);
}
