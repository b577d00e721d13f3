//! Gloss-supervised sign language translation at desk scale.
//!
//! The pipeline turns sequences of frame feature vectors into spoken-language
//! text in three trainable pieces: a visual encoder trained with CTC against
//! gloss sequences, a sequence-to-sequence translation network from glosses
//! to text, and a small mapper that joins the two so the whole stack can be
//! tuned end to end. Everything runs on one CPU core with deterministic
//! seeding.
//!
//! Numerics are generic over the scalar type ([`numerics::Scalar`], f32 or
//! f64); the aliases at this root fix f64, the precision the training
//! pipeline and file formats use.

pub mod ctc;
pub mod data;
pub mod error;
pub mod mapper;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod translation;
pub mod visual;

pub use error::{Error, Result};

/// f64 tensor, the default precision.
pub type Tensor = numerics::Tensor;
/// f64 autodiff graph.
pub type Graph = numerics::Graph;
/// f64 parameter store.
pub type ParamStore = numerics::ParamStore;
/// f64 parameter.
pub type Parameter = numerics::Parameter;
