//! Visual-language mapper: a per-frame MLP with two hidden layers that
//! projects a chosen visual feature stream into the translation encoder's
//! input space, enabling joint end-to-end training.
//!
//! With the gloss-probability tap, the final linear layer can be initialized
//! from a source embedding table so that a one-hot probability vector on
//! gloss k maps exactly to embedding row k; the hidden layers then start as
//! identity passthroughs, which probabilities survive unchanged because they
//! are non-negative.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::visual::{VisualEncoderConfig, VisualForward};

/// Which visual encoder output feeds the mapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    GlossRepresentation,
    GlossLogits,
    S3dFeatures,
    GlossProbabilities,
}

impl FeatureKind {
    /// The input width this tap produces under a given encoder config.
    pub fn expected_d_in(self, cfg: &VisualEncoderConfig) -> usize {
        match self {
            FeatureKind::GlossRepresentation => cfg.repr_dim,
            FeatureKind::GlossLogits | FeatureKind::GlossProbabilities => cfg.vocab_size + 1,
            FeatureKind::S3dFeatures => cfg.backbone_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub input_kind: FeatureKind,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Seed the final linear layer from the source embedding table; only
    /// meaningful with the gloss-probability tap.
    pub init_from_embedding: bool,
}

impl MapperConfig {
    /// Default tap is the gloss representation; hidden width defaults to the
    /// output width.
    pub fn for_encoder(visual: &VisualEncoderConfig, d_out: usize) -> Self {
        let kind = FeatureKind::GlossRepresentation;
        MapperConfig {
            input_kind: kind,
            d_in: kind.expected_d_in(visual),
            d_hidden: d_out,
            d_out,
            init_from_embedding: false,
        }
    }

    pub fn validate(&self, visual: &VisualEncoderConfig) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(Error::Config("mapper dimensions must be positive".to_string()));
        }
        let expected = self.input_kind.expected_d_in(visual);
        if self.d_in != expected {
            return Err(Error::Config(format!(
                "mapper d_in {} does not match the {:?} tap width {expected}",
                self.d_in, self.input_kind
            )));
        }
        if self.init_from_embedding && self.input_kind != FeatureKind::GlossProbabilities {
            return Err(Error::Config(
                "embedding initialization requires the gloss_probabilities tap".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mapper {
    pub cfg: MapperConfig,
}

impl Mapper {
    pub fn new(cfg: MapperConfig) -> Self {
        Mapper { cfg }
    }

    /// Inserts freshly initialized parameters under the `mapper.` prefix.
    pub fn init_params<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut impl Rng) {
        let c = &self.cfg;
        let dims = [(c.d_in, c.d_hidden), (c.d_hidden, c.d_hidden), (c.d_hidden, c.d_out)];
        for (i, (din, dout)) in dims.iter().enumerate() {
            store.insert(
                &format!("mapper.fc{}.w", i + 1),
                xavier_uniform(rng, &[*din, *dout], *din, *dout),
                true,
            );
            store.insert(&format!("mapper.fc{}.b", i + 1), Tensor::zeros(&[*dout]), true);
        }
    }

    /// Overwrites the mapper so a probability vector maps to its expected
    /// embedding: identity hidden layers, final weight = embedding table.
    /// Requires d_in == d_hidden == table rows.
    pub fn init_from_embedding<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        table: &Tensor<S>,
    ) -> Result<()> {
        let c = &self.cfg;
        if c.input_kind != FeatureKind::GlossProbabilities {
            return Err(Error::Config(
                "embedding initialization requires the gloss_probabilities tap".to_string(),
            ));
        }
        if table.rank() != 2 || table.rows() != c.d_in || table.cols() != c.d_out {
            return Err(Error::Config(format!(
                "embedding table {:?} does not fit mapper {}→{}",
                table.shape(),
                c.d_in,
                c.d_out
            )));
        }
        if c.d_hidden != c.d_in {
            return Err(Error::Config(format!(
                "identity passthrough needs d_hidden {} == d_in {}",
                c.d_hidden, c.d_in
            )));
        }
        let mut eye = Tensor::<S>::zeros(&[c.d_in, c.d_in]);
        for i in 0..c.d_in {
            eye.row_mut(i)[i] = S::one();
        }
        store.set_value("mapper.fc1.w", eye.clone())?;
        store.set_value("mapper.fc1.b", Tensor::zeros(&[c.d_hidden]))?;
        store.set_value("mapper.fc2.w", eye)?;
        store.set_value("mapper.fc2.b", Tensor::zeros(&[c.d_hidden]))?;
        store.set_value("mapper.fc3.w", table.clone())?;
        store.set_value("mapper.fc3.b", Tensor::zeros(&[c.d_out]))?;
        Ok(())
    }

    /// linear→relu→linear→relu→linear, applied per frame.
    pub fn map_features<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape_of(x);
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::Config(format!(
                "mapper expects {} input columns, got {:?}",
                self.cfg.d_in, shape
            )));
        }
        let lin = |x: Var, i: usize| -> Result<Var> {
            let w = store.leaf(g, &format!("mapper.fc{i}.w"))?;
            let b = store.leaf(g, &format!("mapper.fc{i}.b"))?;
            g.add_row(g.matmul(x, w)?, b)
        };
        let h1 = g.relu(lin(x, 1)?);
        let h2 = g.relu(lin(h1, 2)?);
        lin(h2, 3)
    }
}

/// Picks the configured tap for one sample of a completed visual forward
/// pass. The probability tap applies a row softmax inside the graph.
pub fn select_visual_feature<S: Scalar>(
    g: &Graph<S>,
    fwd: &VisualForward<S>,
    sample: usize,
    kind: FeatureKind,
) -> Result<Var> {
    let pick = |vars: &[Var]| -> Result<Var> {
        vars.get(sample).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sample {sample} out of range for a batch of {}",
                vars.len()
            ))
        })
    };
    match kind {
        FeatureKind::GlossRepresentation => pick(&fwd.reprs),
        FeatureKind::GlossLogits => pick(&fwd.logits),
        FeatureKind::S3dFeatures => pick(&fwd.backbone),
        FeatureKind::GlossProbabilities => Ok(g.softmax_rows(pick(&fwd.logits)?)),
    }
}
